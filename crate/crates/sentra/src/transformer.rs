//! Post-norm Transformer blocks shared by the SNTP encoder, the tiny causal
//! LMs and the text encoder. Multi-head attention is realized by column
//! slicing, with an additive mask for causality or padded keys.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SentraError};
use crate::tensor::{sc, Graph, ParamStore, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug)]
pub struct StackConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.ffn_dim == 0 {
            return Err(SentraError::Config("transformer dims must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(SentraError::Config(format!(
                "hidden dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Attention masking policy for one forward pass.
pub enum AttnMask<'a> {
    Bidirectional,
    Causal,
    /// `true` marks padded positions; padded keys are excluded from every
    /// query's softmax normalization.
    PaddedKeys(&'a [bool]),
}

/// Dropout state for training-mode forwards.
pub struct TrainMode<'a> {
    pub dropout: f64,
    pub rng: &'a mut ChaCha8Rng,
}

const BLOCK_FIELDS: [&str; 16] = [
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln1.gain", "ln1.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.gain", "ln2.bias",
];

/// Register all stack parameters under `prefix`, BERT-style init: weights
/// normal(0, 0.02), biases zero, layer-norm gains one.
pub fn init_stack<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &StackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    let f = cfg.ffn_dim;
    for layer in 0..cfg.layers {
        let name = |field: &str| format!("{prefix}.{layer}.{field}");
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            store.add_normal(&name(w), &[d, d], 0.02, rng)?;
        }
        for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
            store.add_zeros(&name(b), &[d])?;
        }
        store.add(&name("ln1.gain"), &[d], vec![T::one(); d])?;
        store.add_zeros(&name("ln1.bias"), &[d])?;
        store.add_normal(&name("ffn.w1"), &[d, f], 0.02, rng)?;
        store.add_zeros(&name("ffn.b1"), &[f])?;
        store.add_normal(&name("ffn.w2"), &[f, d], 0.02, rng)?;
        store.add_zeros(&name("ffn.b2"), &[d])?;
        store.add(&name("ln2.gain"), &[d], vec![T::one(); d])?;
        store.add_zeros(&name("ln2.bias"), &[d])?;
    }
    Ok(())
}

/// Stack parameters bound to one graph, reusable across documents in a batch.
pub struct BoundStack {
    layers: Vec<Vec<Tensor>>,
    pub cfg: StackConfig,
}

pub fn bind_stack<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &StackConfig,
) -> Result<BoundStack> {
    let mut layers = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        let mut bound = Vec::with_capacity(BLOCK_FIELDS.len());
        for field in BLOCK_FIELDS {
            let name = format!("{prefix}.{layer}.{field}");
            let id = store
                .id(&name)
                .ok_or_else(|| SentraError::contract(format!("missing parameter {name}")))?;
            bound.push(g.param(store, id)?);
        }
        layers.push(bound);
    }
    Ok(BoundStack { layers, cfg: *cfg })
}

fn dropout<T: Scalar>(
    g: &Graph<T>,
    x: Tensor,
    train: &mut Option<&mut TrainMode>,
) -> Result<Tensor> {
    let Some(mode) = train.as_deref_mut() else {
        return Ok(x);
    };
    if mode.dropout <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - mode.dropout;
    let shape = g.shape(x);
    let n = crate::tensor::numel(&shape);
    let mask: Vec<T> = (0..n)
        .map(|_| {
            if mode.rng.random::<f64>() < keep {
                sc(1.0 / keep)
            } else {
                T::zero()
            }
        })
        .collect();
    let mask = g.leaf(&shape, mask)?;
    g.mul(x, mask)
}

fn attention_mask<T: Scalar>(g: &Graph<T>, n: usize, mask: &AttnMask) -> Result<Option<Tensor>> {
    let values: Vec<T> = match mask {
        AttnMask::Bidirectional => return Ok(None),
        AttnMask::Causal => {
            let mut v = vec![T::zero(); n * n];
            for q in 0..n {
                for k in (q + 1)..n {
                    v[q * n + k] = sc(MASKED);
                }
            }
            v
        }
        AttnMask::PaddedKeys(padded) => {
            if padded.len() != n {
                return Err(SentraError::shape(format!(
                    "pad mask length {} for {n} positions",
                    padded.len()
                )));
            }
            if !padded.iter().any(|&p| p) {
                return Ok(None);
            }
            let mut v = vec![T::zero(); n * n];
            for q in 0..n {
                for (k, &pad) in padded.iter().enumerate() {
                    if pad {
                        v[q * n + k] = sc(MASKED);
                    }
                }
            }
            v
        }
    };
    Ok(Some(g.leaf(&[n, n], values)?))
}

/// Run the full stack over `h` (`[n x dim]`), returning `[n x dim]`.
pub fn forward<T: Scalar>(
    g: &Graph<T>,
    bound: &BoundStack,
    h: Tensor,
    mask: &AttnMask,
    mut train: Option<&mut TrainMode>,
) -> Result<Tensor> {
    let cfg = &bound.cfg;
    let n = g.shape(h)[0];
    let dh = cfg.dim / cfg.heads;
    let inv_sqrt = sc::<T>(1.0 / (dh as f64).sqrt());
    let eps = sc::<T>(LN_EPS);
    let mask_t = attention_mask(g, n, mask)?;

    let mut h = h;
    for bound_layer in &bound.layers {
        let [wq, bq, wk, bk, wv, bv, wo, bo, ln1g, ln1b, w1, b1, w2, b2, ln2g, ln2b] =
            bound_layer.as_slice()
        else {
            unreachable!("block binding arity");
        };
        let q = g.bias_add(g.matmul(h, *wq)?, *bq)?;
        let k = g.bias_add(g.matmul(h, *wk)?, *bk)?;
        let v = g.bias_add(g.matmul(h, *wv)?, *bv)?;
        let mut head_ctx = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let mut scores = g.scale(g.matmul(qh, g.transpose(kh)?)?, inv_sqrt)?;
            if let Some(m) = mask_t {
                scores = g.add(scores, m)?;
            }
            let probs = g.softmax_rows(scores)?;
            head_ctx.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat_cols(&head_ctx)?;
        let attn = g.bias_add(g.matmul(ctx, *wo)?, *bo)?;
        let attn = dropout(g, attn, &mut train)?;
        h = g.layer_norm(g.add(h, attn)?, *ln1g, *ln1b, eps)?;

        let mid = g.gelu(g.bias_add(g.matmul(h, *w1)?, *b1)?)?;
        let ffn = g.bias_add(g.matmul(mid, *w2)?, *b2)?;
        let ffn = dropout(g, ffn, &mut train)?;
        h = g.layer_norm(g.add(h, ffn)?, *ln2g, *ln2b, eps)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg() -> StackConfig {
        StackConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 16,
        }
    }

    fn forward_values(
        seed: u64,
        mask: AttnMask,
        rows: Vec<Vec<f64>>,
    ) -> Vec<f64> {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        init_stack(&mut store, "blk", &cfg, &mut rng).unwrap();
        let g = Graph::new();
        let bound = bind_stack(&g, &store, "blk", &cfg).unwrap();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let h = g.leaf(&[rows.len(), cfg.dim], flat).unwrap();
        let out = forward(&g, &bound, h, &mask, None).unwrap();
        g.values(out)
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn bidirectional_is_permutation_equivariant() {
        let rows = random_rows(4, 8, 3);
        let base = forward_values(9, AttnMask::Bidirectional, rows.clone());
        let mut swapped = rows.clone();
        swapped.swap(1, 3);
        let perm = forward_values(9, AttnMask::Bidirectional, swapped);
        // row 1 of the permuted output should equal row 3 of the base output
        for j in 0..8 {
            assert!((perm[8 + j] - base[3 * 8 + j]).abs() < 1e-9);
            assert!((perm[3 * 8 + j] - base[8 + j]).abs() < 1e-9);
            assert!((perm[j] - base[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let rows = random_rows(5, 8, 4);
        let base = forward_values(11, AttnMask::Causal, rows.clone());
        let mut perturbed = rows.clone();
        for v in perturbed[4].iter_mut() {
            *v += 0.5;
        }
        let out = forward_values(11, AttnMask::Causal, perturbed);
        // positions 0..3 never attend to position 4
        for j in 0..4 * 8 {
            assert!((out[j] - base[j]).abs() < 1e-12);
        }
        assert!((0..8).any(|j| (out[4 * 8 + j] - base[4 * 8 + j]).abs() > 1e-6));
    }

    #[test]
    fn padded_keys_do_not_affect_real_rows() {
        let mut rows = random_rows(3, 8, 5);
        let base = forward_values(13, AttnMask::PaddedKeys(&[false, false, false]), rows.clone());
        rows.push(vec![7.0; 8]);
        rows.push(vec![-3.0; 8]);
        let padded = forward_values(
            13,
            AttnMask::PaddedKeys(&[false, false, false, true, true]),
            rows,
        );
        for j in 0..3 * 8 {
            assert!((padded[j] - base[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn gradcheck_through_one_block() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::<f64>::new();
        init_stack(&mut store, "blk", &cfg, &mut rng).unwrap();
        use rand::Rng;
        let x: Vec<f64> = (0..3 * cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect();

        let eval = |store: &ParamStore<f64>, x: &[f64]| -> (f64, Graph<f64>, Tensor, Tensor) {
            let g = Graph::new();
            let bound = bind_stack(&g, store, "blk", &cfg).unwrap();
            let h = g.leaf_grad(&[3, cfg.dim], x.to_vec()).unwrap();
            let out = forward(&g, &bound, h, &AttnMask::Bidirectional, None).unwrap();
            let loss = g.mean_all(out).unwrap();
            let v = g.scalar_value(loss).unwrap();
            (v, g, h, loss)
        };

        let (_, g, h, loss) = eval(&store, &x);
        g.backward(loss).unwrap();
        let analytic = vec![g.grad_or_zeros(h)];
        let err = crate::tensor::gradcheck::check(
            |vals: &[Vec<f64>]| eval(&store, &vals[0]).0,
            &[x],
            &analytic,
        );
        assert!(err < 1e-4, "rel err {err}");
    }
}
