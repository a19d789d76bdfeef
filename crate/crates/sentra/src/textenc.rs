//! Text-side document encoders.
//!
//! The contrastive stage aligns SNTP representations with a frozen text
//! representation. Two providers are available: a tiny bidirectional
//! Transformer trained in-repo with a masked-token objective (UNK plays the
//! corruption token so the tokenizer's special set stays minimal), and a
//! deterministic hashed bag-of-n-grams encoder that serves as a fast test
//! double. Both pool the first-position (BOS) representation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SentraError};
use crate::tensor::{checkpoint, AdamW, Graph, LrSchedule, ParamStore, Tensor};
use crate::tokenizer::{self, Tokenizer};
use crate::transformer::{self, AttnMask, StackConfig, TrainMode};

/// A frozen text-side encoder: document tokens to one pooled vector.
pub trait TextEncoder: Send + Sync {
    fn tokenizer_id(&self) -> &str;
    fn output_dim(&self) -> usize;
    /// Pooled document representation (first-token rule).
    fn encode_pooled(&self, tokens: &[u32]) -> Result<Vec<f64>>;
    /// Hash over all parameters; stable across queries.
    fn content_hash(&self) -> String;
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub context: usize,
}

impl TextEncoderConfig {
    pub fn stack(&self) -> StackConfig {
        StackConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            ffn_dim: self.ffn_dim,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TextEncMeta {
    kind: String,
    tokenizer_id: String,
    config: TextEncoderConfig,
}

/// Tiny bidirectional text Transformer. Parameters live in a single store:
/// token/position embeddings, the block stack, and a reconstruction head
/// used only during masked-token training.
pub struct TinyTextEncoder {
    pub tokenizer_id: String,
    pub config: TextEncoderConfig,
    pub store: ParamStore<f32>,
}

pub struct BoundText {
    tok_emb: Tensor,
    pos_emb: Tensor,
    stack: transformer::BoundStack,
    /// Present only on stores that still carry the reconstruction head.
    mlm_head: Option<Tensor>,
}

impl TinyTextEncoder {
    pub fn init(
        tokenizer_id: &str,
        config: TextEncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.stack().validate()?;
        let mut store = ParamStore::<f32>::new();
        store.add_normal("tok_emb", &[config.vocab, config.dim], 0.02, rng)?;
        store.add_normal("pos_emb", &[config.context, config.dim], 0.02, rng)?;
        transformer::init_stack(&mut store, "blk", &config.stack(), rng)?;
        store.add_normal("mlm_head", &[config.dim, config.vocab], 0.02, rng)?;
        Ok(TinyTextEncoder {
            tokenizer_id: tokenizer_id.to_string(),
            config,
            store,
        })
    }

    pub fn bind(&self, g: &Graph<f32>) -> Result<BoundText> {
        Self::bind_store(g, &self.store, &self.config)
    }

    pub fn bind_store(
        g: &Graph<f32>,
        store: &ParamStore<f32>,
        config: &TextEncoderConfig,
    ) -> Result<BoundText> {
        let named = |name: &str| -> Result<Tensor> {
            let id = store
                .id(name)
                .ok_or_else(|| SentraError::contract(format!("missing parameter {name}")))?;
            g.param(store, id)
        };
        let mlm_head = match store.id("mlm_head") {
            Some(id) => Some(g.param(store, id)?),
            None => None,
        };
        Ok(BoundText {
            tok_emb: named("tok_emb")?,
            pos_emb: named("pos_emb")?,
            stack: transformer::bind_stack(g, store, "blk", &config.stack())?,
            mlm_head,
        })
    }

    /// Encoded rows for `[BOS] + tokens`; row 0 is the pooled representation.
    pub fn forward_rows(
        g: &Graph<f32>,
        bound: &BoundText,
        config: &TextEncoderConfig,
        tokens: &[u32],
        train: Option<&mut TrainMode>,
    ) -> Result<Tensor> {
        let take = tokens.len().min(config.context - 1);
        let mut ids: Vec<usize> = Vec::with_capacity(take + 1);
        ids.push(tokenizer::BOS as usize);
        ids.extend(tokens[..take].iter().map(|&t| t as usize));
        let tok = g.gather_rows(bound.tok_emb, &ids)?;
        let pos = g.slice_rows(bound.pos_emb, 0, ids.len())?;
        let h = g.add(tok, pos)?;
        transformer::forward(g, &bound.stack, h, &AttnMask::Bidirectional, train)
    }

    pub fn save(&self, ckpt_path: &std::path::Path) -> Result<()> {
        checkpoint::save(&self.store, ckpt_path)?;
        let meta = TextEncMeta {
            kind: "tiny-text-encoder".into(),
            tokenizer_id: self.tokenizer_id.clone(),
            config: self.config.clone(),
        };
        std::fs::write(
            crate::lm::meta_path_for(ckpt_path),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }

    pub fn load(ckpt_path: &std::path::Path) -> Result<Self> {
        let meta_path = crate::lm::meta_path_for(ckpt_path);
        let meta: TextEncMeta =
            serde_json::from_str(&std::fs::read_to_string(&meta_path).map_err(|_| {
                SentraError::MissingArtifact {
                    what: format!("text encoder metadata {}", meta_path.display()),
                    produce_with: "train-lm".to_string(),
                }
            })?)?;
        Ok(TinyTextEncoder {
            tokenizer_id: meta.tokenizer_id,
            config: meta.config,
            store: checkpoint::load::<f32>(ckpt_path)?,
        })
    }
}

impl TextEncoder for TinyTextEncoder {
    fn tokenizer_id(&self) -> &str {
        &self.tokenizer_id
    }
    fn output_dim(&self) -> usize {
        self.config.dim
    }
    fn encode_pooled(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let g = Graph::<f32>::new();
        let bound = self.bind(&g)?;
        let rows = Self::forward_rows(&g, &bound, &self.config, tokens, None)?;
        let pooled = g.values(g.slice_rows(rows, 0, 1)?);
        Ok(pooled.iter().map(|&v| v as f64).collect())
    }
    fn content_hash(&self) -> String {
        self.store.content_hash()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MlmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for MlmTrainConfig {
    fn default() -> Self {
        MlmTrainConfig {
            epochs: 3,
            batch_size: 16,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            mask_prob: 0.15,
            seed: 0,
        }
    }
}

/// Masked-token pre-training: corrupt a random subset of positions with UNK
/// and reconstruct the originals from the bidirectional representation.
pub fn train_mlm(
    tokenizer: &Tokenizer,
    streams: &[Vec<u32>],
    config: TextEncoderConfig,
    train_cfg: &MlmTrainConfig,
) -> Result<(TinyTextEncoder, Vec<f64>)> {
    if streams.is_empty() {
        return Err(SentraError::Data("text encoder corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut enc = TinyTextEncoder::init(tokenizer.tokenizer_id(), config, &mut rng)?;
    let steps_per_epoch = streams.len().div_ceil(train_cfg.batch_size);
    let schedule = LrSchedule::new(train_cfg.peak_lr, train_cfg.epochs * steps_per_epoch);
    let mut opt = AdamW::new(&enc.store, train_cfg.weight_decay, schedule);
    let mut epoch_losses = Vec::new();

    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..streams.len()).collect();
    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train_cfg.batch_size) {
            let g = Graph::<f32>::new();
            let bound = enc.bind(&g)?;
            let mut losses = Vec::new();
            for &idx in chunk {
                let take = streams[idx].len().min(enc.config.context - 1);
                if take == 0 {
                    continue;
                }
                let original = &streams[idx][..take];
                let mut corrupted = original.to_vec();
                let mut masked: Vec<(usize, u32)> = Vec::new();
                for (i, slot) in corrupted.iter_mut().enumerate() {
                    if rng.random::<f64>() < train_cfg.mask_prob {
                        masked.push((i, original[i]));
                        *slot = tokenizer::UNK;
                    }
                }
                if masked.is_empty() {
                    let i = rng.random_range(0..take);
                    masked.push((i, original[i]));
                    corrupted[i] = tokenizer::UNK;
                }
                let rows =
                    TinyTextEncoder::forward_rows(&g, &bound, &enc.config, &corrupted, None)?;
                // +1: row 0 is BOS
                let picked: Vec<Tensor> = masked
                    .iter()
                    .map(|&(i, _)| g.slice_rows(rows, i + 1, 1))
                    .collect::<Result<_>>()?;
                let stacked = g.concat_rows(&picked)?;
                let head = bound.mlm_head.ok_or_else(|| {
                    SentraError::contract("store has no reconstruction head")
                })?;
                let logits = g.matmul(stacked, head)?;
                let targets: Vec<usize> = masked.iter().map(|&(_, t)| t as usize).collect();
                let loss = g.softmax_cross_entropy(logits, &targets)?;
                losses.push(g.reshape(loss, &[1, 1])?);
            }
            if losses.is_empty() {
                continue;
            }
            let batch_loss = g.mean_all(g.concat_rows(&losses)?)?;
            let v = g.scalar_value(batch_loss)? as f64;
            if !v.is_finite() {
                return Err(SentraError::Numeric(format!(
                    "text encoder diverged at epoch {epoch}"
                )));
            }
            total += v;
            batches += 1;
            g.backward(batch_loss)?;
            let grads = g.param_grads(&enc.store);
            let lr = opt.next_lr();
            opt.step(&mut enc.store, &grads, lr)?;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok((enc, epoch_losses))
}

/// Deterministic hashed bag-of-n-grams encoder (unigrams and bigrams, signed
/// feature hashing, L2-normalized). No parameters, no training; useful as a
/// fast frozen stand-in.
pub struct HashedNgramEncoder {
    pub tokenizer_id: String,
    pub dim: usize,
    pub salt: u64,
}

impl HashedNgramEncoder {
    fn bucket(&self, parts: &[u32]) -> (usize, f64) {
        let mut h = Sha256::new();
        h.update(self.salt.to_le_bytes());
        for p in parts {
            h.update(p.to_le_bytes());
        }
        let digest = h.finalize();
        let raw = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let idx = (raw % self.dim as u64) as usize;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        (idx, sign)
    }
}

impl TextEncoder for HashedNgramEncoder {
    fn tokenizer_id(&self) -> &str {
        &self.tokenizer_id
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn encode_pooled(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut out = vec![0.0f64; self.dim];
        for w in tokens.windows(1) {
            let (i, s) = self.bucket(w);
            out[i] += s;
        }
        for w in tokens.windows(2) {
            let (i, s) = self.bucket(w);
            out[i] += s;
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in out.iter_mut() {
            *v /= norm;
        }
        Ok(out)
    }
    fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"hashed-ngram");
        h.update(self.salt.to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenizerMode;

    fn tok() -> Tokenizer {
        let docs = vec![
            "the cat sat on the mat".to_string(),
            "a dog ran in the park".to_string(),
            "the bird flew over the tree".to_string(),
        ];
        Tokenizer::train(&docs, TokenizerMode::Char, 0).unwrap()
    }

    fn cfg(vocab: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            vocab,
            dim: 16,
            heads: 2,
            layers: 1,
            ffn_dim: 32,
            context: 48,
        }
    }

    #[test]
    fn mlm_training_reduces_loss() {
        let tok = tok();
        let streams: Vec<Vec<u32>> = (0..24)
            .map(|i| {
                let s = if i % 2 == 0 {
                    "the cat sat on the mat"
                } else {
                    "a dog ran in the park"
                };
                tok.encode(s)
            })
            .collect();
        let tc = MlmTrainConfig {
            epochs: 8,
            batch_size: 8,
            peak_lr: 3e-3,
            weight_decay: 0.01,
            mask_prob: 0.15,
            seed: 3,
        };
        let (_, losses) = train_mlm(&tok, &streams, cfg(tok.vocab_size()), &tc).unwrap();
        assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    }

    #[test]
    fn frozen_encoder_is_deterministic_and_hash_stable() {
        let tok = tok();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = TinyTextEncoder::init(tok.tokenizer_id(), cfg(tok.vocab_size()), &mut rng).unwrap();
        let ids = tok.encode("the cat sat");
        let h0 = enc.content_hash();
        let a = enc.encode_pooled(&ids).unwrap();
        let b = enc.encode_pooled(&ids).unwrap();
        assert_eq!(a, b);
        assert_eq!(enc.content_hash(), h0);
        assert_eq!(a.len(), enc.output_dim());
    }

    #[test]
    fn text_encoder_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("textenc.ckpt");
        let tok = tok();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TinyTextEncoder::init(tok.tokenizer_id(), cfg(tok.vocab_size()), &mut rng).unwrap();
        enc.save(&path).unwrap();
        let loaded = TinyTextEncoder::load(&path).unwrap();
        assert_eq!(loaded.content_hash(), enc.content_hash());
        assert_eq!(loaded.config, enc.config);
    }

    #[test]
    fn hashed_encoder_is_unit_norm_and_deterministic() {
        let enc = HashedNgramEncoder {
            tokenizer_id: "tok".into(),
            dim: 32,
            salt: 7,
        };
        let a = enc.encode_pooled(&[3, 4, 5, 6, 3, 4]).unwrap();
        let b = enc.encode_pooled(&[3, 4, 5, 6, 3, 4]).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>();
        assert!((norm - 1.0).abs() < 1e-9);
        let c = enc.encode_pooled(&[9, 9, 9, 9]).unwrap();
        assert_ne!(a, c);
    }
}
