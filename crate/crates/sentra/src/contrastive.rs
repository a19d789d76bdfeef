//! Contrastive pre-training of the SNTP encoder against a frozen text
//! encoder.
//!
//! Both encoders pool a document into one vector; linear maps project both
//! into a joint space, rows are L2-normalized, and the scaled similarity
//! matrix is pushed toward the identity pairing with a symmetric
//! cross-entropy (mean of row-wise and column-wise losses against the
//! diagonal). Only the SNTP encoder, the two projections and the temperature
//! train; the text encoder stays frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, SentraConfig, SentraModel};
use crate::error::{Result, SentraError};
use crate::sntp::SntpSequence;
use crate::tensor::{checkpoint, sc, AdamW, Graph, LrSchedule, ParamStore, Scalar, Tensor};
use crate::textenc::TextEncoder;
use crate::transformer::TrainMode;

/// Norm floor applied before L2 normalization.
pub const NORM_FLOOR: f64 = 1e-12;
/// Post-step clamp on the temperature factor e^r.
pub const TEMP_FACTOR_RANGE: (f64, f64) = (1.0, 100.0);

pub const PROJ_SNTP: &str = "contrast.proj_l";
pub const PROJ_TEXT: &str = "contrast.proj_s";
pub const LOG_TEMP: &str = "contrast.log_temp";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    pub epochs: usize,
    pub max_len: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Joint embedding dimension E.
    pub embed_dim: usize,
    /// Initial softmax temperature; e^r starts at its reciprocal and is then
    /// clamped into [1, 100] after every step.
    pub temperature_init: f64,
    pub phase1: PhasePlan,
    pub phase2: PhasePlan,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Dropout inside the SNTP encoder during pre-training.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            embed_dim: 64,
            temperature_init: 0.007,
            phase1: PhasePlan {
                epochs: 20,
                max_len: 32,
                batch_size: 32,
            },
            phase2: PhasePlan {
                epochs: 10,
                max_len: 128,
                batch_size: 32,
            },
            peak_lr: 1e-4,
            weight_decay: 0.01,
            dropout: 0.1,
            seed: 0,
        }
    }
}

/// Register the trainable contrastive parameters on a store that already
/// holds the SNTP encoder weights.
pub fn add_contrastive_params<T: Scalar>(
    store: &mut ParamStore<T>,
    sntp_dim: usize,
    text_dim: usize,
    cfg: &ContrastiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if cfg.temperature_init <= 0.0 {
        return Err(SentraError::Config("temperature must be positive".into()));
    }
    store.add_normal(PROJ_SNTP, &[sntp_dim, cfg.embed_dim], 0.02, rng)?;
    store.add_normal(PROJ_TEXT, &[text_dim, cfg.embed_dim], 0.02, rng)?;
    let r0 = (1.0 / cfg.temperature_init).ln();
    store.add(LOG_TEMP, &[1], vec![sc(r0)])?;
    Ok(())
}

/// Clamp e^r into [1, 100]; call after every optimizer step.
pub fn clamp_temperature<T: Scalar>(store: &mut ParamStore<T>) -> Result<()> {
    let id = store
        .id(LOG_TEMP)
        .ok_or_else(|| SentraError::contract("temperature parameter missing"))?;
    let (lo, hi) = TEMP_FACTOR_RANGE;
    let v = &mut store.entry_mut(id).values[0];
    let lo_t = sc::<T>(lo.ln());
    let hi_t = sc::<T>(hi.ln());
    if *v < lo_t {
        *v = lo_t;
    }
    if *v > hi_t {
        *v = hi_t;
    }
    Ok(())
}

/// Project one pooled row through a linear map and L2-normalize it.
pub fn embed_row<T: Scalar>(g: &Graph<T>, pooled: Tensor, proj: Tensor) -> Result<Tensor> {
    g.normalize_rows(g.matmul(pooled, proj)?, sc(NORM_FLOOR))
}

/// Both halves of a pair, unit-norm in the joint space.
pub fn embed_pair<T: Scalar>(
    g: &Graph<T>,
    sntp_pooled: Tensor,
    text_pooled: Tensor,
    proj_sntp: Tensor,
    proj_text: Tensor,
) -> Result<(Tensor, Tensor)> {
    Ok((
        embed_row(g, sntp_pooled, proj_sntp)?,
        embed_row(g, text_pooled, proj_text)?,
    ))
}

/// `M = (U S^T) e^r` for unit-norm rows.
pub fn similarity_matrix<T: Scalar>(
    g: &Graph<T>,
    u: Tensor,
    s: Tensor,
    log_temp: Tensor,
) -> Result<Tensor> {
    let raw = g.matmul(u, g.transpose(s)?)?;
    g.scale_by(raw, g.exp(log_temp)?)
}

/// Symmetric cross-entropy against the diagonal pairing.
pub fn contrastive_loss<T: Scalar>(g: &Graph<T>, m: Tensor) -> Result<Tensor> {
    let shape = g.shape(m);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(SentraError::shape(format!(
            "similarity matrix must be square, got {shape:?}"
        )));
    }
    let b = shape[0];
    let targets: Vec<usize> = (0..b).collect();
    let rows = g.softmax_cross_entropy(m, &targets)?;
    let cols = g.softmax_cross_entropy(g.transpose(m)?, &targets)?;
    g.scale(g.add(rows, cols)?, sc(0.5))
}

/// One pre-training document: its id, tokens, and cached SNTP matrix.
pub struct PretrainDoc {
    pub doc_id: String,
    pub tokens: Vec<u32>,
    pub ell: SntpSequence,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean loss per epoch, one vector per phase.
    pub phase_losses: Vec<Vec<f64>>,
    pub text_encoder_hash: String,
    /// Retrieval accuracy (argmax over rows hitting the diagonal) on probe
    /// batches after training, and the chance level 1/B.
    pub retrieval_accuracy: f64,
    pub retrieval_chance: f64,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    kind: String,
    sentra: SentraConfig,
    contrastive: ContrastiveConfig,
    text_encoder_hash: String,
}

/// Outcome of pre-training: the combined store plus its configs.
pub struct Pretrained {
    pub store: ParamStore<f32>,
    pub sentra: SentraConfig,
    pub contrastive: ContrastiveConfig,
    pub log: PretrainLog,
}

impl Pretrained {
    pub fn save(&self, ckpt_path: &std::path::Path) -> Result<()> {
        checkpoint::save(&self.store, ckpt_path)?;
        let meta = BundleMeta {
            kind: "pretrained-bundle".into(),
            sentra: self.sentra.clone(),
            contrastive: self.contrastive.clone(),
            text_encoder_hash: self.log.text_encoder_hash.clone(),
        };
        std::fs::write(
            crate::lm::meta_path_for(ckpt_path),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }
}

/// Load only the encoder weights out of a pre-trained bundle.
pub fn load_sentra_from_bundle(ckpt_path: &std::path::Path) -> Result<SentraModel<f32>> {
    let meta_path = crate::lm::meta_path_for(ckpt_path);
    let meta: BundleMeta =
        serde_json::from_str(&std::fs::read_to_string(&meta_path).map_err(|_| {
            SentraError::MissingArtifact {
                what: format!("pre-trained bundle {}", ckpt_path.display()),
                produce_with: "pretrain".to_string(),
            }
        })?)?;
    let full = checkpoint::load::<f32>(ckpt_path)?;
    let mut store = ParamStore::<f32>::new();
    for e in full.iter() {
        if !e.name.starts_with("contrast.") {
            store.add(&e.name, &e.shape, e.values.clone())?;
        }
    }
    let model = SentraModel {
        config: meta.sentra,
        store,
    };
    if model.store.param_count() != model.config.param_count() {
        return Err(SentraError::Corrupt(format!(
            "bundle {} encoder weights do not match its config",
            ckpt_path.display()
        )));
    }
    Ok(model)
}

/// Run the two-phase contrastive schedule over an unlabeled corpus. The
/// returned store holds the pre-trained encoder plus projection/temperature
/// parameters.
pub fn pretrain(
    sentra_cfg: &SentraConfig,
    cfg: &ContrastiveConfig,
    docs: &[PretrainDoc],
    text_encoder: &dyn TextEncoder,
    max_len_cap: usize,
) -> Result<Pretrained> {
    if docs.is_empty() {
        return Err(SentraError::Data("pre-training corpus is empty".into()));
    }
    for d in docs {
        if d.ell.k() != sentra_cfg.k {
            return Err(SentraError::contract(format!(
                "document {} has k={} but encoder expects k={}",
                d.doc_id,
                d.ell.k(),
                sentra_cfg.k
            )));
        }
    }
    let frozen_before = text_encoder.content_hash();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = SentraModel::<f32>::init(sentra_cfg.clone(), &mut rng)?;
    let mut store = model.store;
    add_contrastive_params(
        &mut store,
        sentra_cfg.dim,
        text_encoder.output_dim(),
        cfg,
        &mut rng,
    )?;

    let total_steps: usize = [&cfg.phase1, &cfg.phase2]
        .iter()
        .map(|p| p.epochs * docs.len().div_ceil(p.batch_size))
        .sum();
    let schedule = LrSchedule::new(cfg.peak_lr, total_steps.max(1));
    let mut opt = AdamW::new(&store, cfg.weight_decay, schedule);

    let mut log = PretrainLog {
        text_encoder_hash: frozen_before.clone(),
        ..Default::default()
    };

    for phase in [&cfg.phase1, &cfg.phase2] {
        let max_len = phase.max_len.min(max_len_cap).min(sentra_cfg.t_max);
        // frozen text embeddings for this phase's truncation, computed once
        let mut text_pooled: Vec<Vec<f64>> = Vec::with_capacity(docs.len());
        for d in docs {
            let take = d.tokens.len().min(max_len);
            text_pooled.push(text_encoder.encode_pooled(&d.tokens[..take])?);
        }
        let mut epoch_losses = Vec::with_capacity(phase.epochs);
        for epoch in 0..phase.epochs {
            let mut order: Vec<usize> = (0..docs.len()).collect();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(phase.batch_size) {
                if chunk.len() < 2 {
                    continue; // a single pair has no in-batch negatives
                }
                let loss = pretrain_step(
                    &mut store,
                    sentra_cfg,
                    cfg,
                    docs,
                    &text_pooled,
                    chunk,
                    max_len,
                    &mut opt,
                    &mut rng,
                )?;
                if !loss.is_finite() {
                    return Err(SentraError::Numeric(format!(
                        "contrastive loss became non-finite at epoch {epoch}"
                    )));
                }
                total += loss;
                batches += 1;
            }
            epoch_losses.push(total / batches.max(1) as f64);
        }
        log.phase_losses.push(epoch_losses);
    }

    if text_encoder.content_hash() != frozen_before {
        return Err(SentraError::contract(
            "frozen text encoder changed during pre-training",
        ));
    }

    // retrieval probe on deterministic batches
    let probe_b = cfg.phase2.batch_size.min(docs.len()).max(2);
    let max_len = cfg.phase2.max_len.min(max_len_cap).min(sentra_cfg.t_max);
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut text_pooled: Vec<Vec<f64>> = Vec::with_capacity(docs.len());
    for d in docs {
        let take = d.tokens.len().min(max_len);
        text_pooled.push(text_encoder.encode_pooled(&d.tokens[..take])?);
    }
    for chunk in (0..docs.len()).collect::<Vec<_>>().chunks(probe_b) {
        if chunk.len() < 2 {
            continue;
        }
        let m = similarity_values(&store, sentra_cfg, cfg, docs, &text_pooled, chunk, max_len)?;
        let b = chunk.len();
        for r in 0..b {
            let row = &m[r * b..(r + 1) * b];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax == r {
                hits += 1;
            }
            total += 1;
        }
    }
    log.retrieval_accuracy = hits as f64 / total.max(1) as f64;
    log.retrieval_chance = 1.0 / probe_b as f64;

    Ok(Pretrained {
        store,
        sentra: sentra_cfg.clone(),
        contrastive: cfg.clone(),
        log,
    })
}

#[allow(clippy::too_many_arguments)]
fn pretrain_step(
    store: &mut ParamStore<f32>,
    sentra_cfg: &SentraConfig,
    cfg: &ContrastiveConfig,
    docs: &[PretrainDoc],
    text_pooled: &[Vec<f64>],
    chunk: &[usize],
    max_len: usize,
    opt: &mut AdamW<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let g = Graph::<f32>::new();
    let bound = encoder::bind(&g, store, sentra_cfg)?;
    let proj_l = g.param(store, store.id(PROJ_SNTP).unwrap())?;
    let proj_s = g.param(store, store.id(PROJ_TEXT).unwrap())?;
    let log_temp = g.param(store, store.id(LOG_TEMP).unwrap())?;

    let mut u_rows = Vec::with_capacity(chunk.len());
    let mut s_rows = Vec::with_capacity(chunk.len());
    for &idx in chunk {
        let d = &docs[idx];
        let take = d.tokens.len().min(max_len).min(d.ell.len);
        let ell: Vec<f32> = d.ell.ell[..take * d.ell.k()].to_vec();
        let mut train_mode = TrainMode {
            dropout: cfg.dropout,
            rng,
        };
        let (cls, _) = encoder::forward_doc(&g, &bound, take, &ell, Some(&mut train_mode))?;
        let text_row: Vec<f32> = text_pooled[idx].iter().map(|&v| v as f32).collect();
        let text_leaf = g.leaf(&[1, text_row.len()], text_row)?;
        let (u, s) = embed_pair(&g, cls, text_leaf, proj_l, proj_s)?;
        u_rows.push(u);
        s_rows.push(s);
    }
    let u = g.concat_rows(&u_rows)?;
    let s = g.concat_rows(&s_rows)?;
    let m = similarity_matrix(&g, u, s, log_temp)?;
    let loss = contrastive_loss(&g, m)?;
    let loss_value = g.scalar_value(loss)? as f64;
    g.backward(loss)?;
    let grads = g.param_grads(store);
    let lr = opt.next_lr();
    opt.step(store, &grads, lr)?;
    clamp_temperature(store)?;
    Ok(loss_value)
}

/// Forward-only similarity matrix for probe batches.
fn similarity_values(
    store: &ParamStore<f32>,
    sentra_cfg: &SentraConfig,
    _cfg: &ContrastiveConfig,
    docs: &[PretrainDoc],
    text_pooled: &[Vec<f64>],
    chunk: &[usize],
    max_len: usize,
) -> Result<Vec<f32>> {
    let g = Graph::<f32>::new();
    let bound = encoder::bind(&g, store, sentra_cfg)?;
    let proj_l = g.param(store, store.id(PROJ_SNTP).unwrap())?;
    let proj_s = g.param(store, store.id(PROJ_TEXT).unwrap())?;
    let log_temp = g.param(store, store.id(LOG_TEMP).unwrap())?;
    let mut u_rows = Vec::new();
    let mut s_rows = Vec::new();
    for &idx in chunk {
        let d = &docs[idx];
        let take = d.tokens.len().min(max_len).min(d.ell.len);
        let ell: Vec<f32> = d.ell.ell[..take * d.ell.k()].to_vec();
        let (cls, _) = encoder::forward_doc(&g, &bound, take, &ell, None)?;
        let text_row: Vec<f32> = text_pooled[idx].iter().map(|&v| v as f32).collect();
        let text_leaf = g.leaf(&[1, text_row.len()], text_row)?;
        let (u, s) = embed_pair(&g, cls, text_leaf, proj_l, proj_s)?;
        u_rows.push(u);
        s_rows.push(s);
    }
    let u = g.concat_rows(&u_rows)?;
    let s = g.concat_rows(&s_rows)?;
    let m = similarity_matrix(&g, u, s, log_temp)?;
    Ok(g.values(m))
}
