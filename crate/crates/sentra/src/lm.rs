//! Frozen probability sources over a shared tokenizer.
//!
//! A source maps a token context to a full next-token distribution. The
//! first position conditions on an implicit BOS, so an empty context is
//! valid. Sources are immutable once constructed; `param_hash` lets callers
//! verify they stayed frozen across downstream runs.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SentraError};
use crate::tensor::{checkpoint, AdamW, Graph, LrSchedule, ParamStore, Tensor};
use crate::tokenizer::{self, Tokenizer};
use crate::transformer::{self, AttnMask, StackConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Uniform,
    Ngram,
    TinyCausalTransformer,
    Imported,
}

pub trait ProbabilitySource: Send + Sync {
    fn model_id(&self) -> &str;
    fn tokenizer_id(&self) -> &str;
    fn kind(&self) -> SourceKind;
    fn vocab_size(&self) -> usize;

    /// Full conditional distribution P(. | BOS, context). Sums to 1 within
    /// 1e-6; empty contexts are allowed.
    fn next_token_distribution(&self, context: &[u32]) -> Result<Vec<f64>>;

    /// P(tokens[i] | BOS, tokens[..i]) for every position, in one pass where
    /// the source supports it.
    fn selected_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(tokens.len());
        for i in 0..tokens.len() {
            let dist = self.next_token_distribution(&tokens[..i])?;
            out.push(pick(&dist, tokens[i])?);
        }
        Ok(out)
    }

    /// Full distribution at every position of the document.
    fn all_distributions(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        (0..tokens.len())
            .map(|i| self.next_token_distribution(&tokens[..i]))
            .collect()
    }

    /// Content hash of the frozen parameters.
    fn param_hash(&self) -> String;
}

fn pick(dist: &[f64], token: u32) -> Result<f64> {
    dist.get(token as usize).copied().ok_or_else(|| {
        SentraError::Index(format!(
            "token id {token} out of vocabulary ({} entries)",
            dist.len()
        ))
    })
}

fn check_ids(context: &[u32], vocab: usize) -> Result<()> {
    for &t in context {
        if t as usize >= vocab {
            return Err(SentraError::Index(format!(
                "token id {t} out of vocabulary ({vocab} entries)"
            )));
        }
    }
    Ok(())
}

// ---- uniform ----------------------------------------------------------------

pub struct UniformSource {
    pub model_id: String,
    pub tokenizer_id: String,
    pub vocab: usize,
}

impl ProbabilitySource for UniformSource {
    fn model_id(&self) -> &str {
        &self.model_id
    }
    fn tokenizer_id(&self) -> &str {
        &self.tokenizer_id
    }
    fn kind(&self) -> SourceKind {
        SourceKind::Uniform
    }
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn next_token_distribution(&self, context: &[u32]) -> Result<Vec<f64>> {
        check_ids(context, self.vocab)?;
        Ok(vec![1.0 / self.vocab as f64; self.vocab])
    }
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"uniform");
        h.update((self.vocab as u64).to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

// ---- n-gram -------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct NgramDump {
    model_id: String,
    tokenizer_id: String,
    vocab: usize,
    context_len: usize,
    alpha: f64,
    /// (context, token, count) triples, sorted.
    counts: Vec<(Vec<u32>, u32, u64)>,
}

/// Count-based model with maximum-likelihood estimates (optionally add-alpha
/// smoothed). Unseen contexts fall back to the uniform distribution.
pub struct NgramSource {
    model_id: String,
    tokenizer_id: String,
    vocab: usize,
    context_len: usize,
    alpha: f64,
    counts: BTreeMap<Vec<u32>, (u64, BTreeMap<u32, u64>)>,
}

impl NgramSource {
    pub fn train(
        model_id: &str,
        tokenizer_id: &str,
        vocab: usize,
        streams: &[Vec<u32>],
        context_len: usize,
        alpha: f64,
    ) -> Result<Self> {
        if vocab == 0 {
            return Err(SentraError::contract("ngram: empty vocabulary"));
        }
        let mut counts: BTreeMap<Vec<u32>, (u64, BTreeMap<u32, u64>)> = BTreeMap::new();
        for stream in streams {
            check_ids(stream, vocab)?;
            for i in 0..stream.len() {
                let key = Self::context_key(&stream[..i], context_len);
                let slot = counts.entry(key).or_insert_with(|| (0, BTreeMap::new()));
                slot.0 += 1;
                *slot.1.entry(stream[i]).or_insert(0) += 1;
            }
        }
        Ok(NgramSource {
            model_id: model_id.to_string(),
            tokenizer_id: tokenizer_id.to_string(),
            vocab,
            context_len,
            alpha,
            counts,
        })
    }

    /// BOS-left-padded window of the last `context_len` tokens.
    fn context_key(context: &[u32], context_len: usize) -> Vec<u32> {
        let mut key = Vec::with_capacity(context_len);
        let missing = context_len.saturating_sub(context.len());
        key.extend(std::iter::repeat_n(tokenizer::BOS, missing));
        let start = context.len().saturating_sub(context_len);
        key.extend_from_slice(&context[start..]);
        key
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut triples = Vec::new();
        for (ctx, (_, by_token)) in &self.counts {
            for (&tok, &cnt) in by_token {
                triples.push((ctx.clone(), tok, cnt));
            }
        }
        let dump = NgramDump {
            model_id: self.model_id.clone(),
            tokenizer_id: self.tokenizer_id.clone(),
            vocab: self.vocab,
            context_len: self.context_len,
            alpha: self.alpha,
            counts: triples,
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &dump)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let dump: NgramDump = serde_json::from_reader(std::io::BufReader::new(file))?;
        let mut counts: BTreeMap<Vec<u32>, (u64, BTreeMap<u32, u64>)> = BTreeMap::new();
        for (ctx, tok, cnt) in dump.counts {
            let slot = counts.entry(ctx).or_insert_with(|| (0, BTreeMap::new()));
            slot.0 += cnt;
            *slot.1.entry(tok).or_insert(0) += cnt;
        }
        Ok(NgramSource {
            model_id: dump.model_id,
            tokenizer_id: dump.tokenizer_id,
            vocab: dump.vocab,
            context_len: dump.context_len,
            alpha: dump.alpha,
            counts,
        })
    }
}

impl ProbabilitySource for NgramSource {
    fn model_id(&self) -> &str {
        &self.model_id
    }
    fn tokenizer_id(&self) -> &str {
        &self.tokenizer_id
    }
    fn kind(&self) -> SourceKind {
        SourceKind::Ngram
    }
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn next_token_distribution(&self, context: &[u32]) -> Result<Vec<f64>> {
        check_ids(context, self.vocab)?;
        let key = Self::context_key(context, self.context_len);
        let v = self.vocab as f64;
        match self.counts.get(&key) {
            Some((total, by_token)) => {
                let denom = *total as f64 + self.alpha * v;
                let base = self.alpha / denom;
                let mut dist = vec![base; self.vocab];
                for (&tok, &cnt) in by_token {
                    dist[tok as usize] = (cnt as f64 + self.alpha) / denom;
                }
                Ok(dist)
            }
            None => Ok(vec![1.0 / v; self.vocab]),
        }
    }
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"ngram");
        h.update((self.vocab as u64).to_le_bytes());
        h.update((self.context_len as u64).to_le_bytes());
        h.update(self.alpha.to_bits().to_le_bytes());
        for (ctx, (total, by_token)) in &self.counts {
            for &t in ctx {
                h.update(t.to_le_bytes());
            }
            h.update(total.to_le_bytes());
            for (&tok, &cnt) in by_token {
                h.update(tok.to_le_bytes());
                h.update(cnt.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

// ---- tiny causal transformer ---------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CausalLmConfig {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub context: usize,
}

impl CausalLmConfig {
    fn stack(&self) -> StackConfig {
        StackConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            ffn_dim: self.ffn_dim,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LmMeta {
    kind: String,
    model_id: String,
    tokenizer_id: String,
    config: CausalLmConfig,
}

/// Small decoder-only Transformer with strictly causal attention.
pub struct TinyCausalLm {
    pub model_id: String,
    pub tokenizer_id: String,
    pub config: CausalLmConfig,
    store: ParamStore<f32>,
}

impl TinyCausalLm {
    pub fn init(
        model_id: &str,
        tokenizer_id: &str,
        config: CausalLmConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.stack().validate()?;
        let mut store = ParamStore::<f32>::new();
        store.add_normal("tok_emb", &[config.vocab, config.dim], 0.02, rng)?;
        store.add_normal("pos_emb", &[config.context, config.dim], 0.02, rng)?;
        transformer::init_stack(&mut store, "blk", &config.stack(), rng)?;
        store.add_normal("out_proj", &[config.dim, config.vocab], 0.02, rng)?;
        Ok(TinyCausalLm {
            model_id: model_id.to_string(),
            tokenizer_id: tokenizer_id.to_string(),
            config,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Graph forward over an explicit input sequence, shared by training and
    /// inference so there is a single source of truth for the math.
    fn logits_graph(
        g: &Graph<f32>,
        store: &ParamStore<f32>,
        bound: &transformer::BoundStack,
        input: &[u32],
    ) -> Result<Tensor> {
        let ids: Vec<usize> = input.iter().map(|&t| t as usize).collect();
        let tok_emb = g.param(store, store.id("tok_emb").unwrap())?;
        let pos_emb = g.param(store, store.id("pos_emb").unwrap())?;
        let out_proj = g.param(store, store.id("out_proj").unwrap())?;
        let tok = g.gather_rows(tok_emb, &ids)?;
        let pos = g.slice_rows(pos_emb, 0, ids.len())?;
        let h = g.add(tok, pos)?;
        let h = transformer::forward(g, bound, h, &AttnMask::Causal, None)?;
        g.matmul(h, out_proj)
    }

    /// One forward pass: row `i` is the distribution over the token at
    /// position `i` given BOS and the preceding tokens.
    fn distributions_for(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        check_ids(tokens, self.config.vocab)?;
        if tokens.len() + 1 > self.config.context {
            return Err(SentraError::contract(format!(
                "document length {} exceeds LM context {}",
                tokens.len(),
                self.config.context
            )));
        }
        let mut input = Vec::with_capacity(tokens.len());
        input.push(tokenizer::BOS);
        if tokens.len() > 1 {
            input.extend_from_slice(&tokens[..tokens.len() - 1]);
        }
        let g = Graph::<f32>::new();
        let bound = transformer::bind_stack(&g, &self.store, "blk", &self.config.stack())?;
        let logits = Self::logits_graph(&g, &self.store, &bound, &input)?;
        let values = g.values(logits);
        let v = self.config.vocab;
        let mut out = Vec::with_capacity(tokens.len());
        for r in 0..tokens.len() {
            out.push(softmax_f64(&values[r * v..(r + 1) * v]));
        }
        Ok(out)
    }

    pub fn save(&self, ckpt_path: &Path) -> Result<()> {
        checkpoint::save(&self.store, ckpt_path)?;
        let meta = LmMeta {
            kind: "tiny-causal-transformer".to_string(),
            model_id: self.model_id.clone(),
            tokenizer_id: self.tokenizer_id.clone(),
            config: self.config.clone(),
        };
        let meta_path = meta_path_for(ckpt_path);
        std::fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(ckpt_path: &Path) -> Result<Self> {
        let meta_path = meta_path_for(ckpt_path);
        let meta: LmMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path).map_err(
            |_| SentraError::MissingArtifact {
                what: format!("LM metadata {}", meta_path.display()),
                produce_with: "train-lm".to_string(),
            },
        )?)?;
        let store = checkpoint::load::<f32>(ckpt_path)?;
        Ok(TinyCausalLm {
            model_id: meta.model_id,
            tokenizer_id: meta.tokenizer_id,
            config: meta.config,
            store,
        })
    }
}

pub fn meta_path_for(ckpt_path: &Path) -> std::path::PathBuf {
    let mut os = ckpt_path.as_os_str().to_owned();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| ((z as f64) - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

impl ProbabilitySource for TinyCausalLm {
    fn model_id(&self) -> &str {
        &self.model_id
    }
    fn tokenizer_id(&self) -> &str {
        &self.tokenizer_id
    }
    fn kind(&self) -> SourceKind {
        SourceKind::TinyCausalTransformer
    }
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }
    fn next_token_distribution(&self, context: &[u32]) -> Result<Vec<f64>> {
        check_ids(context, self.config.vocab)?;
        if context.len() + 1 > self.config.context {
            return Err(SentraError::contract(format!(
                "context length {} exceeds LM context {}",
                context.len(),
                self.config.context
            )));
        }
        let mut input = vec![tokenizer::BOS];
        input.extend_from_slice(context);
        let g = Graph::<f32>::new();
        let bound = transformer::bind_stack(&g, &self.store, "blk", &self.config.stack())?;
        let logits = Self::logits_graph(&g, &self.store, &bound, &input)?;
        let values = g.values(logits);
        let v = self.config.vocab;
        Ok(softmax_f64(&values[(input.len() - 1) * v..input.len() * v]))
    }
    fn selected_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let dists = self.distributions_for(tokens)?;
        tokens
            .iter()
            .zip(dists.iter())
            .map(|(&t, d)| pick(d, t))
            .collect()
    }
    fn all_distributions(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        self.distributions_for(tokens)
    }
    fn param_hash(&self) -> String {
        self.store.content_hash()
    }
}

// ---- imported placeholder ------------------------------------------------------

/// Stand-in for probability sequences computed outside this artifact. Carries
/// identity for cache keys but cannot be queried.
pub struct ImportedSource {
    pub model_id: String,
    pub tokenizer_id: String,
    pub vocab: usize,
}

impl ProbabilitySource for ImportedSource {
    fn model_id(&self) -> &str {
        &self.model_id
    }
    fn tokenizer_id(&self) -> &str {
        &self.tokenizer_id
    }
    fn kind(&self) -> SourceKind {
        SourceKind::Imported
    }
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn next_token_distribution(&self, _context: &[u32]) -> Result<Vec<f64>> {
        Err(SentraError::contract(
            "imported source holds no parameters; its sequences come from a cache import",
        ))
    }
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"imported");
        h.update(self.model_id.as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

// ---- query counting (used to prove cache hits skip the sources) -----------------

pub struct CountingSource<S> {
    inner: S,
    queries: AtomicUsize,
}

impl<S> CountingSource<S> {
    pub fn new(inner: S) -> Self {
        CountingSource {
            inner,
            queries: AtomicUsize::new(0),
        }
    }

    pub fn query_count(&self) -> usize {
        self.queries.load(Ordering::SeqCst)
    }
}

impl<S: ProbabilitySource> ProbabilitySource for CountingSource<S> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn tokenizer_id(&self) -> &str {
        self.inner.tokenizer_id()
    }
    fn kind(&self) -> SourceKind {
        self.inner.kind()
    }
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
    fn next_token_distribution(&self, context: &[u32]) -> Result<Vec<f64>> {
        self.queries.fetch_add(1, Ordering::SeqCst);
        self.inner.next_token_distribution(context)
    }
    fn selected_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.queries.fetch_add(1, Ordering::SeqCst);
        self.inner.selected_probs(tokens)
    }
    fn all_distributions(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        self.queries.fetch_add(1, Ordering::SeqCst);
        self.inner.all_distributions(tokens)
    }
    fn param_hash(&self) -> String {
        self.inner.param_hash()
    }
}

// ---- training --------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 3,
            batch_size: 16,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LmTrainLog {
    /// Held-out next-token cross-entropy before training and after each epoch.
    pub heldout_loss: Vec<f64>,
}

/// Train a [`TinyCausalLm`] on tokenized streams. Every tenth stream is held
/// out; its cross-entropy is logged before training and after each epoch.
pub fn train_causal_lm(
    model_id: &str,
    tokenizer: &Tokenizer,
    streams: &[Vec<u32>],
    config: CausalLmConfig,
    train_cfg: &LmTrainConfig,
) -> Result<(TinyCausalLm, LmTrainLog)> {
    if streams.is_empty() {
        return Err(SentraError::Data("LM training corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut lm = TinyCausalLm::init(model_id, tokenizer.tokenizer_id(), config, &mut rng)?;

    let mut train_idx = Vec::new();
    let mut held_idx = Vec::new();
    for i in 0..streams.len() {
        if i % 10 == 9 {
            held_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if held_idx.is_empty() {
        held_idx.push(train_idx.pop().ok_or_else(|| {
            SentraError::Data("LM training corpus needs at least two streams".into())
        })?);
    }

    let clip = |tokens: &[u32]| -> Vec<u32> {
        let limit = lm.config.context - 1;
        tokens[..tokens.len().min(limit)].to_vec()
    };

    let steps_per_epoch = train_idx.len().div_ceil(train_cfg.batch_size);
    let schedule = LrSchedule::new(train_cfg.peak_lr, train_cfg.epochs * steps_per_epoch);
    let mut opt = AdamW::new(&lm.store, train_cfg.weight_decay, schedule);
    let mut log = LmTrainLog::default();
    log.heldout_loss
        .push(heldout_loss(&lm, streams, &held_idx, &clip)?);

    use rand::seq::SliceRandom;
    for epoch in 0..train_cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(train_cfg.batch_size) {
            let g = Graph::<f32>::new();
            let bound = transformer::bind_stack(&g, &lm.store, "blk", &lm.config.stack())?;
            let mut losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let tokens = clip(&streams[idx]);
                if tokens.is_empty() {
                    continue;
                }
                let mut input = vec![tokenizer::BOS];
                input.extend_from_slice(&tokens[..tokens.len() - 1]);
                let logits = TinyCausalLm::logits_graph(&g, &lm.store, &bound, &input)?;
                let targets: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
                let loss = g.softmax_cross_entropy(logits, &targets)?;
                losses.push(g.reshape(loss, &[1, 1])?);
            }
            if losses.is_empty() {
                continue;
            }
            let batch_loss = g.mean_all(g.concat_rows(&losses)?)?;
            let loss_value = g.scalar_value(batch_loss)?;
            if !loss_value.is_finite() {
                return Err(SentraError::Numeric(format!(
                    "LM {model_id} diverged at epoch {epoch}: loss {loss_value}"
                )));
            }
            g.backward(batch_loss)?;
            let grads = g.param_grads(&lm.store);
            let lr = opt.next_lr();
            opt.step(&mut lm.store, &grads, lr)?;
        }
        log.heldout_loss
            .push(heldout_loss(&lm, streams, &held_idx, &clip)?);
    }
    Ok((lm, log))
}

fn heldout_loss(
    lm: &TinyCausalLm,
    streams: &[Vec<u32>],
    held_idx: &[usize],
    clip: &impl Fn(&[u32]) -> Vec<u32>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for &idx in held_idx {
        let tokens = clip(&streams[idx]);
        if tokens.is_empty() {
            continue;
        }
        for (i, p) in lm.selected_probs(&tokens)?.iter().enumerate() {
            let _ = i;
            total += -(p.max(1e-300)).ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(SentraError::Data("held-out LM slice is empty".into()));
    }
    Ok(total / count as f64)
}

// ---- sampling ---------------------------------------------------------------------

/// Draw an index from a probability vector.
pub fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Sharpen or flatten a distribution: p_i^(1/temperature), renormalized.
pub fn apply_temperature(probs: &[f64], temperature: f64) -> Vec<f64> {
    if (temperature - 1.0).abs() < 1e-12 {
        return probs.to_vec();
    }
    let inv_t = 1.0 / temperature.max(1e-6);
    let powered: Vec<f64> = probs.iter().map(|&p| p.max(1e-300).powf(inv_t)).collect();
    let sum: f64 = powered.iter().sum();
    powered.iter().map(|p| p / sum).collect()
}

/// Autoregressive sampling from a source, excluding special tokens.
pub fn sample_tokens(
    source: &dyn ProbabilitySource,
    rng: &mut ChaCha8Rng,
    len: usize,
    temperature: f64,
) -> Result<Vec<u32>> {
    let mut out: Vec<u32> = Vec::with_capacity(len);
    for _ in 0..len {
        let mut dist = source.next_token_distribution(&out)?;
        for special in 0..tokenizer::NUM_SPECIALS as usize {
            if special < dist.len() {
                dist[special] = 0.0;
            }
        }
        let mass: f64 = dist.iter().sum();
        if mass <= 0.0 {
            let n = dist.len() - tokenizer::NUM_SPECIALS as usize;
            for p in dist.iter_mut().skip(tokenizer::NUM_SPECIALS as usize) {
                *p = 1.0 / n as f64;
            }
        } else {
            for p in dist.iter_mut() {
                *p /= mass;
            }
        }
        let dist = apply_temperature(&dist, temperature);
        out.push(sample_categorical(rng, &dist) as u32);
    }
    Ok(out)
}

/// Total variation distance between two distributions.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs())
        .sum::<f64>()
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenizerMode;

    fn char_tok(corpus: &[&str]) -> Tokenizer {
        let docs: Vec<String> = corpus.iter().map(|s| s.to_string()).collect();
        Tokenizer::train(&docs, TokenizerMode::Char, 0).unwrap()
    }

    #[test]
    fn uniform_source_distribution() {
        let src = UniformSource {
            model_id: "u".into(),
            tokenizer_id: "t".into(),
            vocab: 4,
        };
        assert_eq!(
            src.next_token_distribution(&[]).unwrap(),
            vec![0.25, 0.25, 0.25, 0.25]
        );
    }

    #[test]
    fn bigram_counts_give_certain_transition() {
        let tok = char_tok(&["abab"]);
        let a = tok.encode("a")[0];
        let b = tok.encode("b")[0];
        let src = NgramSource::train("bg", tok.tokenizer_id(), tok.vocab_size(), &[vec![a, b, a, b]], 1, 0.0)
            .unwrap();
        let dist = src.next_token_distribution(&[a]).unwrap();
        assert!((dist[b as usize] - 1.0).abs() < 1e-12);
        let sum: f64 = dist.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ngram_unseen_context_falls_back_to_uniform() {
        let tok = char_tok(&["ab"]);
        let a = tok.encode("a")[0];
        let b = tok.encode("b")[0];
        let src =
            NgramSource::train("bg", tok.tokenizer_id(), tok.vocab_size(), &[vec![a, a]], 1, 0.0).unwrap();
        let dist = src.next_token_distribution(&[b]).unwrap();
        let expect = 1.0 / tok.vocab_size() as f64;
        for p in dist {
            assert!((p - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ngram_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ngram.json");
        let tok = char_tok(&["abcabc"]);
        let ids = tok.encode("abcabc");
        let src = NgramSource::train("m", tok.tokenizer_id(), tok.vocab_size(), &[ids], 2, 0.5).unwrap();
        src.save(&path).unwrap();
        let loaded = NgramSource::load(&path).unwrap();
        assert_eq!(loaded.param_hash(), src.param_hash());
        let ctx = tok.encode("ab");
        assert_eq!(
            loaded.next_token_distribution(&ctx).unwrap(),
            src.next_token_distribution(&ctx).unwrap()
        );
    }

    fn small_lm_config(vocab: usize) -> CausalLmConfig {
        CausalLmConfig {
            vocab,
            dim: 16,
            heads: 2,
            layers: 1,
            ffn_dim: 32,
            context: 32,
        }
    }

    #[test]
    fn untrained_lm_loss_is_near_log_vocab() {
        let tok = char_tok(&["abcde abcde"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lm = TinyCausalLm::init("m", tok.tokenizer_id(), small_lm_config(tok.vocab_size()), &mut rng)
            .unwrap();
        let tokens = tok.encode("abcde");
        let probs = lm.selected_probs(&tokens).unwrap();
        let loss: f64 = probs.iter().map(|p| -p.ln()).sum::<f64>() / probs.len() as f64;
        let lnv = (tok.vocab_size() as f64).ln();
        assert!((loss - lnv).abs() < 0.05 * lnv, "loss {loss} vs ln|V| {lnv}");
    }

    #[test]
    fn zeroed_output_projection_gives_uniform() {
        let tok = char_tok(&["ab"]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lm =
            TinyCausalLm::init("m", tok.tokenizer_id(), small_lm_config(tok.vocab_size()), &mut rng)
                .unwrap();
        let pid = lm.store.id("out_proj").unwrap();
        for v in lm.store.entry_mut(pid).values.iter_mut() {
            *v = 0.0;
        }
        let dist = lm.next_token_distribution(&tok.encode("a")).unwrap();
        let expect = 1.0 / tok.vocab_size() as f64;
        for p in &dist {
            assert!((p - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn selected_probs_matches_per_position_queries() {
        let tok = char_tok(&["abcab"]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lm = TinyCausalLm::init("m", tok.tokenizer_id(), small_lm_config(tok.vocab_size()), &mut rng)
            .unwrap();
        let tokens = tok.encode("abcab");
        let fast = lm.selected_probs(&tokens).unwrap();
        for i in 0..tokens.len() {
            let dist = lm.next_token_distribution(&tokens[..i]).unwrap();
            assert!((fast[i] - dist[tokens[i] as usize]).abs() < 1e-9);
        }
    }

    #[test]
    fn training_memorizes_a_periodic_corpus() {
        let tok = char_tok(&["abababab"]);
        let streams: Vec<Vec<u32>> = (0..30).map(|_| tok.encode("abababab")).collect();
        let cfg = small_lm_config(tok.vocab_size());
        let train_cfg = LmTrainConfig {
            epochs: 40,
            batch_size: 8,
            peak_lr: 3e-3,
            weight_decay: 0.01,
            seed: 5,
        };
        let (_, log) = train_causal_lm("m", &tok, &streams, cfg, &train_cfg).unwrap();
        let first = log.heldout_loss[0];
        let last = *log.heldout_loss.last().unwrap();
        assert!(last < first, "held-out loss should fall: {first} -> {last}");
        assert!(last < 0.1, "memorizable pattern should reach < 0.1 nats, got {last}");
    }

    #[test]
    fn disjoint_style_corpora_give_different_models() {
        let tok = char_tok(&["aabb ccdd"]);
        let style_a: Vec<Vec<u32>> = (0..20).map(|_| tok.encode("aabb aabb")).collect();
        let style_b: Vec<Vec<u32>> = (0..20).map(|_| tok.encode("ccdd ccdd")).collect();
        let cfg = small_lm_config(tok.vocab_size());
        let tc = LmTrainConfig {
            epochs: 15,
            batch_size: 8,
            peak_lr: 3e-3,
            weight_decay: 0.01,
            seed: 7,
        };
        let (lm_a, _) = train_causal_lm("a", &tok, &style_a, cfg.clone(), &tc).unwrap();
        let (lm_b, _) = train_causal_lm("b", &tok, &style_b, cfg, &tc).unwrap();
        let probes = ["aab", "ccd", "ab c", "cd a", "aa", "cc"];
        let mut distant = 0;
        for probe in probes {
            let ctx = tok.encode(probe);
            let da = lm_a.next_token_distribution(&ctx).unwrap();
            let db = lm_b.next_token_distribution(&ctx).unwrap();
            if total_variation(&da, &db) > 0.05 {
                distant += 1;
            }
        }
        assert!(distant * 2 >= probes.len(), "only {distant} distant probes");
    }

    #[test]
    fn frozen_sources_hash_stable_across_queries() {
        let tok = char_tok(&["abab"]);
        let ids = tok.encode("abab");
        let src = NgramSource::train("bg", tok.tokenizer_id(), tok.vocab_size(), &[ids.clone()], 1, 0.0)
            .unwrap();
        let before = src.param_hash();
        let _ = src.next_token_distribution(&ids[..1]).unwrap();
        let _ = src.selected_probs(&ids).unwrap();
        assert_eq!(src.param_hash(), before);
    }

    #[test]
    fn counting_wrapper_counts() {
        let src = CountingSource::new(UniformSource {
            model_id: "u".into(),
            tokenizer_id: "t".into(),
            vocab: 4,
        });
        assert_eq!(src.query_count(), 0);
        let _ = src.next_token_distribution(&[]).unwrap();
        let _ = src.selected_probs(&[1, 2]).unwrap();
        assert_eq!(src.query_count(), 2);
    }

    #[test]
    fn sampling_respects_temperature_and_seed() {
        let src = UniformSource {
            model_id: "u".into(),
            tokenizer_id: "t".into(),
            vocab: 10,
        };
        let mut rng1 = ChaCha8Rng::seed_from_u64(11);
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let a = sample_tokens(&src, &mut rng1, 20, 1.0).unwrap();
        let b = sample_tokens(&src, &mut rng2, 20, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&t| t >= tokenizer::NUM_SPECIALS));
    }
}
