//! The SNTP encoder: per-token log-probability vectors are projected into a
//! bidirectional Transformer with a learned CLS row and learned positional
//! embeddings; a linear head on the CLS representation yields one logit.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SentraError};
use crate::tensor::{checkpoint, sc, Graph, ParamStore, Scalar, Tensor};
use crate::transformer::{self, AttnMask, BoundStack, StackConfig, TrainMode};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SentraConfig {
    /// Number of SNTP sources feeding each position.
    pub k: usize,
    /// Hidden dimension.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum document length in tokens (CLS adds one internal position).
    pub t_max: usize,
    pub ffn_dim: usize,
    /// Dropout inside Transformer blocks during training.
    pub dropout: f64,
}

impl SentraConfig {
    /// Desk-scale default used throughout the pipeline.
    pub fn desk() -> Self {
        SentraConfig {
            k: 2,
            dim: 64,
            layers: 2,
            heads: 4,
            t_max: 128,
            ffn_dim: 256,
            dropout: 0.1,
        }
    }

    /// Full-scale configuration (kept for documentation; far beyond what the
    /// in-repo training loop is meant to chew through).
    pub fn full_scale() -> Self {
        SentraConfig {
            k: 2,
            dim: 768,
            layers: 8,
            heads: 8,
            t_max: 512,
            ffn_dim: 3072,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(SentraError::Config("k must be >= 1".into()));
        }
        if self.t_max == 0 {
            return Err(SentraError::Config("t_max must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SentraError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        self.stack().validate()
    }

    pub fn stack(&self) -> StackConfig {
        StackConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            ffn_dim: self.ffn_dim,
        }
    }

    /// Closed-form parameter count for this configuration.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let f = self.ffn_dim;
        let proj = self.k * d + d;
        let pos = (self.t_max + 1) * d;
        let cls = d;
        let per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d);
        let head = d + 1;
        proj + pos + cls + self.layers * per_layer + head
    }
}

/// All trainable weights of the SNTP encoder.
pub struct SentraModel<T: Scalar> {
    pub config: SentraConfig,
    pub store: ParamStore<T>,
}

impl<T: Scalar> SentraModel<T> {
    pub fn init(config: SentraConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::<T>::new();
        store.add_normal("proj.weight", &[config.k, config.dim], 0.02, rng)?;
        store.add_zeros("proj.bias", &[config.dim])?;
        store.add_normal("pos_emb", &[config.t_max + 1, config.dim], 0.02, rng)?;
        store.add_normal("cls", &[config.dim], 0.02, rng)?;
        transformer::init_stack(&mut store, "blk", &config.stack(), rng)?;
        store.add_normal("head.weight", &[config.dim, 1], 0.02, rng)?;
        store.add_zeros("head.bias", &[1])?;
        Ok(SentraModel { config, store })
    }

    pub fn save(&self, ckpt_path: &std::path::Path) -> Result<()> {
        checkpoint::save(&self.store, ckpt_path)?;
        let meta = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(crate::lm::meta_path_for(ckpt_path), meta)?;
        Ok(())
    }

    pub fn load(ckpt_path: &std::path::Path) -> Result<Self> {
        let meta_path = crate::lm::meta_path_for(ckpt_path);
        let config: SentraConfig =
            serde_json::from_str(&std::fs::read_to_string(&meta_path).map_err(|_| {
                SentraError::MissingArtifact {
                    what: format!("encoder metadata {}", meta_path.display()),
                    produce_with: "pretrain or finetune".to_string(),
                }
            })?)?;
        let store = checkpoint::load::<T>(ckpt_path)?;
        let model = SentraModel { config, store };
        model.check_store()?;
        Ok(model)
    }

    fn check_store(&self) -> Result<()> {
        if self.store.param_count() != self.config.param_count() {
            return Err(SentraError::contract(format!(
                "checkpoint holds {} parameters, config implies {}",
                self.store.param_count(),
                self.config.param_count()
            )));
        }
        Ok(())
    }
}

/// Model parameters bound to one graph, shared across a batch of documents.
pub struct BoundSentra {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub pos: Tensor,
    pub cls: Tensor,
    pub stack: BoundStack,
    pub head_w: Tensor,
    pub head_b: Tensor,
    t_max: usize,
}

pub fn bind<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    config: &SentraConfig,
) -> Result<BoundSentra> {
    let named = |name: &str| -> Result<Tensor> {
        let id = store
            .id(name)
            .ok_or_else(|| SentraError::contract(format!("missing parameter {name}")))?;
        g.param(store, id)
    };
    Ok(BoundSentra {
        proj_w: named("proj.weight")?,
        proj_b: named("proj.bias")?,
        pos: named("pos_emb")?,
        cls: named("cls")?,
        stack: transformer::bind_stack(g, store, "blk", &config.stack())?,
        head_w: named("head.weight")?,
        head_b: named("head.bias")?,
        t_max: config.t_max,
    })
}

/// Project per-token SNTP vectors and prepend the CLS row: row 0 becomes
/// `cls + pos[0]`, row t becomes `relu(W x_t + b) + pos[t]`.
pub fn project_embed<T: Scalar>(
    g: &Graph<T>,
    bound: &BoundSentra,
    x: Tensor,
) -> Result<Tensor> {
    let t_len = g.shape(x)[0];
    if t_len > bound.t_max {
        return Err(SentraError::shape(format!(
            "document length {t_len} exceeds maximum {}",
            bound.t_max
        )));
    }
    let projected = g.relu(g.bias_add(g.matmul(x, bound.proj_w)?, bound.proj_b)?)?;
    let cls_row = g.reshape(bound.cls, &[1, g.shape(bound.cls)[0]])?;
    let h = g.concat_rows(&[cls_row, projected])?;
    let pos = g.slice_rows(bound.pos, 0, t_len + 1)?;
    g.add(h, pos)
}

/// Bidirectional encoding; `padded` (when given) marks CLS-inclusive
/// positions to exclude from attention normalization.
pub fn encode<T: Scalar>(
    g: &Graph<T>,
    bound: &BoundSentra,
    h: Tensor,
    padded: Option<&[bool]>,
    train: Option<&mut TrainMode>,
) -> Result<Tensor> {
    let mask = match padded {
        Some(p) => AttnMask::PaddedKeys(p),
        None => AttnMask::Bidirectional,
    };
    transformer::forward(g, &bound.stack, h, &mask, train)
}

/// Linear map on the CLS representation: one logit per document.
pub fn classify<T: Scalar>(g: &Graph<T>, bound: &BoundSentra, encoded: Tensor) -> Result<Tensor> {
    let cls_repr = g.slice_rows(encoded, 0, 1)?;
    g.bias_add(g.matmul(cls_repr, bound.head_w)?, bound.head_b)
}

/// Full per-document forward: returns (CLS representation `[1 x D]`, logit
/// `[1 x 1]`).
pub fn forward_doc<T: Scalar>(
    g: &Graph<T>,
    bound: &BoundSentra,
    ell_rows: usize,
    ell: &[T],
    train: Option<&mut TrainMode>,
) -> Result<(Tensor, Tensor)> {
    let k = ell.len() / ell_rows.max(1);
    let x = g.leaf(&[ell_rows, k], ell.to_vec())?;
    let h = project_embed(g, bound, x)?;
    let encoded = encode(g, bound, h, None, train)?;
    let cls = g.slice_rows(encoded, 0, 1)?;
    let logit = classify(g, bound, encoded)?;
    Ok((cls, logit))
}

/// Detector score for a logit: sigmoid, in (0, 1), larger = more LLM-like.
pub fn score_from_logit(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

/// SNTP matrix cast into the working element type.
pub fn ell_values<T: Scalar>(seq: &crate::sntp::SntpSequence) -> Vec<T> {
    seq.ell.iter().map(|&v| sc(v as f64)).collect()
}
