//! Raw array kernels shared by forward and backward passes.
//!
//! All reductions run in a fixed left-to-right order so that repeated runs
//! with identical inputs are bit-identical.

use super::Scalar;

/// `out += a[m x k] * b[k x n]`. `out` must hold `m*n` elements.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out += a[m x n] * b[k x n]^T`, i.e. row-by-row dot products.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc = acc + av * bv;
            }
            orow[j] = orow[j] + acc;
        }
    }
}

/// `out += a[m x n]^T * b[m x k]`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let brow = &b[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * k..(p + 1) * k];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// In-place row-wise softmax with max subtraction.
pub fn softmax_rows_inplace<T: Scalar>(x: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Stable log-sum-exp of a slice.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for &v in row.iter() {
        sum = sum + (v - mx).exp();
    }
    mx + sum.ln()
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// tanh-approximation GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = super::sc::<T>(0.797_884_560_802_865_4);
    let k = super::sc::<T>(0.044_715);
    let half = super::sc::<T>(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = super::sc::<T>(0.797_884_560_802_865_4);
    let k = super::sc::<T>(0.044_715);
    let half = super::sc::<T>(0.5);
    let three = super::sc::<T>(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}
