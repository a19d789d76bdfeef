//! Binary weight container.
//!
//! Layout: magic `SFW1`, version `u32` LE, then one record per parameter:
//! name length (u32 LE), UTF-8 name, dtype tag (u8, 0 = f32), rank (u32 LE),
//! dims (u32 LE each), values as little-endian 32-bit floats. Records run to
//! end of file. Round-trips are bit-exact for f32 stores.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::param::ParamStore;
use super::{numel, Scalar};
use crate::error::{Result, SentraError};

const MAGIC: &[u8; 4] = b"SFW1";
const VERSION: u32 = 1;

/// Serialize a store. Values are written as f32 regardless of the working
/// precision.
pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for e in store.iter() {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[0u8])?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &e.values {
            let f = v.to_f64().unwrap() as f32;
            w.write_all(&f.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a store, casting the stored f32 values into the working precision.
pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt(path, "missing magic"))?;
    if &magic != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = read_u32(&mut r).map_err(|_| corrupt(path, "missing version"))?;
    if version != VERSION {
        return Err(corrupt(path, &format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    loop {
        let name_len = match read_u32(&mut r) {
            Ok(v) => v as usize,
            Err(_) => break, // clean EOF
        };
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| corrupt(path, "truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| corrupt(path, "non-UTF-8 name"))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)
            .map_err(|_| corrupt(path, "truncated dtype"))?;
        if dtype[0] != 0 {
            return Err(corrupt(path, &format!("unknown dtype tag {}", dtype[0])));
        }
        let rank = read_u32(&mut r).map_err(|_| corrupt(path, "truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r).map_err(|_| corrupt(path, "truncated dims"))? as usize);
        }
        let count = numel(&shape);
        let mut values = Vec::with_capacity(count);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| corrupt(path, "truncated values"))?;
            let f = f32::from_le_bytes(buf);
            values.push(T::from_f64(f as f64).unwrap());
        }
        store.add(&name, &shape, values)?;
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn corrupt(path: &Path, why: &str) -> SentraError {
    SentraError::Corrupt(format!("{}: {why}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f32>::new();
        store.add_normal("proj.weight", &[8, 3], 0.02, &mut rng).unwrap();
        store.add_zeros("proj.bias", &[8]).unwrap();
        store.add_normal("head.weight", &[1, 8], 0.02, &mut rng).unwrap();
        save(&store, &path).unwrap();
        let loaded: ParamStore<f32> = load(&path).unwrap();
        assert_eq!(loaded.len(), store.len());
        for (a, b) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let abits: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(abits, bbits);
        }
        // identical bytes when re-saved
        let path2 = dir.path().join("weights2.ckpt");
        save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load::<f32>(&path),
            Err(SentraError::Corrupt(_))
        ));
    }
}
