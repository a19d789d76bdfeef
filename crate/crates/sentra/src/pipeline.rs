//! Stage orchestration: each subcommand consumes declared upstream artifacts
//! and writes its outputs (plus the resolved config) under the experiment
//! directory. Stages are idempotent: identical config and seed produce
//! bit-identical artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{EvalProtocol, ExperimentConfig, TextEncoderKind};
use crate::contrastive::{self, PretrainDoc};
use crate::corpus;
use crate::detectors::{
    self, finetune_sentra, finetune_text_classifier, score_perplexity, score_xppl_ratio,
    DetectorScore, FinetuneLog, InitKind, SentraDetector, TextClassifier,
};
use crate::encoder::SentraModel;
use crate::error::{Result, SentraError};
use crate::eval::metrics::{aggregate_report, auroc, weighted_f1, CellMetrics, EvalReport};
use crate::eval::splits::{make_indomain_split, make_ood_splits, SplitPlan};
use crate::eval::{load_dataset, save_dataset, truncate_tokens, Document};
use crate::lm::{train_causal_lm, CausalLmConfig, LmTrainConfig, ProbabilitySource, TinyCausalLm};
use crate::sntp::{self, extract_sntp, select_models, SntpCache, SntpSequence};
use crate::textenc::{
    train_mlm, HashedNgramEncoder, MlmTrainConfig, TextEncoder, TextEncoderConfig,
    TinyTextEncoder,
};
use crate::tokenizer::Tokenizer;

pub const BASE_MODEL_ID: &str = "base";
pub const INSTRUCT_MODEL_ID: &str = "instruct";

pub struct Pipeline {
    pub cfg: ExperimentConfig,
}

fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update([0u8]);
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Deterministic parallel map: slot-indexed results, worker order irrelevant.
fn parallel_map<I, O, F>(items: Vec<I>, workers: usize, f: F) -> Result<Vec<O>>
where
    I: Send,
    O: Send,
    F: Fn(I) -> Result<O> + Sync,
{
    let n = items.len();
    let slots: Vec<Mutex<Option<Result<O>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let queue: Vec<Mutex<Option<I>>> = items.into_iter().map(|i| Mutex::new(Some(i))).collect();
    let next = AtomicUsize::new(0);
    let workers = workers.max(1).min(n.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let item = queue[i].lock().unwrap().take().unwrap();
                let out = f(item);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().unwrap())
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SkipLog {
    skipped_doc_ids: Vec<String>,
}

#[derive(Clone)]
struct SentraArm {
    /// Directory name and detector id.
    name: String,
    init: InitKind,
    use_models: Vec<String>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Self {
        Pipeline { cfg }
    }

    fn out(&self) -> &Path {
        &self.cfg.experiment.out_dir
    }

    fn stage_dir(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.out().join(stage);
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn write_resolved_config(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("resolved-config.toml"), self.cfg.to_toml()?)?;
        Ok(())
    }

    fn missing(what: &str, produce_with: &str) -> SentraError {
        SentraError::MissingArtifact {
            what: what.to_string(),
            produce_with: produce_with.to_string(),
        }
    }

    fn load_docs(&self, name: &str) -> Result<Vec<Document>> {
        let path = self.out().join("corpus").join(name);
        if !path.exists() {
            return Err(Self::missing(
                &format!("corpus file {}", path.display()),
                "synth-corpus",
            ));
        }
        load_dataset(&path)
    }

    fn load_tokenizer(&self) -> Result<Tokenizer> {
        let path = self.out().join("tokenizer/tokenizer.txt");
        if !path.exists() {
            return Err(Self::missing(
                &format!("tokenizer {}", path.display()),
                "train-tokenizer",
            ));
        }
        Tokenizer::load(&path)
    }

    fn load_lm(&self, which: &str) -> Result<TinyCausalLm> {
        let path = self.out().join(format!("lm/{which}.ckpt"));
        if !path.exists() {
            return Err(Self::missing(
                &format!("language model {}", path.display()),
                "train-lm",
            ));
        }
        TinyCausalLm::load(&path)
    }

    fn load_cache(&self) -> Result<SntpCache> {
        let path = self.out().join("sntp/cache.bin");
        if !path.exists() {
            return Err(Self::missing(
                &format!("SNTP cache {}", path.display()),
                "extract-sntp",
            ));
        }
        SntpCache::load(&path)
    }

    fn load_skips(&self) -> Result<Vec<String>> {
        let path = self.out().join("sntp/skipped.json");
        if !path.exists() {
            return Err(Self::missing(
                &format!("skip log {}", path.display()),
                "extract-sntp",
            ));
        }
        let log: SkipLog = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(log.skipped_doc_ids)
    }

    fn load_plans(&self) -> Result<Vec<SplitPlan>> {
        let path = self.out().join("finetune/plans.json");
        if !path.exists() {
            return Err(Self::missing(
                &format!("split plans {}", path.display()),
                "finetune",
            ));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn text_encoder(&self) -> Result<Box<dyn TextEncoder>> {
        match self.cfg.pretrain.text_encoder {
            TextEncoderKind::Mlm => {
                let path = self.out().join("lm/textenc.ckpt");
                if !path.exists() {
                    return Err(Self::missing(
                        &format!("text encoder {}", path.display()),
                        "train-lm",
                    ));
                }
                Ok(Box::new(TinyTextEncoder::load(&path)?))
            }
            TextEncoderKind::Hashed => {
                let tok = self.load_tokenizer()?;
                Ok(Box::new(HashedNgramEncoder {
                    tokenizer_id: tok.tokenizer_id().to_string(),
                    dim: self.cfg.sentra.dim,
                    salt: 17,
                }))
            }
        }
    }

    // ---- stages ------------------------------------------------------------

    pub fn synth_corpus(&self) -> Result<()> {
        let dir = self.stage_dir("corpus")?;
        let c = corpus::synthesize(&self.cfg.corpus)?;
        save_dataset(&c.seed_docs, &dir.join("seed.jsonl"))?;
        save_dataset(&c.instruct_docs, &dir.join("instruct.jsonl"))?;
        save_dataset(&c.pretrain_docs, &dir.join("pretrain.jsonl"))?;
        save_dataset(&c.labeled_docs, &dir.join("labeled.jsonl"))?;
        self.write_resolved_config(&dir)?;
        eprintln!(
            "synth-corpus: {} seed, {} instruct, {} pretrain, {} labeled",
            c.seed_docs.len(),
            c.instruct_docs.len(),
            c.pretrain_docs.len(),
            c.labeled_docs.len()
        );
        Ok(())
    }

    pub fn train_tokenizer(&self) -> Result<()> {
        let dir = self.stage_dir("tokenizer")?;
        let seed = self.load_docs("seed.jsonl")?;
        let instruct = self.load_docs("instruct.jsonl")?;
        let texts: Vec<String> = seed
            .iter()
            .chain(instruct.iter())
            .map(|d| d.text.clone())
            .collect();
        let tok = Tokenizer::train(
            &texts,
            self.cfg.tokenizer.mode.mode(),
            self.cfg.tokenizer.vocab_size,
        )?;
        tok.save(&dir.join("tokenizer.txt"))?;
        self.write_resolved_config(&dir)?;
        eprintln!(
            "train-tokenizer: vocab {} id {}",
            tok.vocab_size(),
            tok.tokenizer_id()
        );
        Ok(())
    }

    fn lm_config(&self, tok: &Tokenizer) -> CausalLmConfig {
        CausalLmConfig {
            vocab: tok.vocab_size(),
            dim: self.cfg.lm.dim,
            heads: self.cfg.lm.heads,
            layers: self.cfg.lm.layers,
            ffn_dim: self.cfg.lm.ffn_dim,
            context: self.cfg.lm.context,
        }
    }

    pub fn train_lm(&self) -> Result<()> {
        let dir = self.stage_dir("lm")?;
        let tok = self.load_tokenizer()?;
        let mut logs = BTreeMap::new();

        for (model_id, corpus_file) in
            [(BASE_MODEL_ID, "seed.jsonl"), (INSTRUCT_MODEL_ID, "instruct.jsonl")]
        {
            let docs = self.load_docs(corpus_file)?;
            let streams: Vec<Vec<u32>> = docs.iter().map(|d| tok.encode(&d.text)).collect();
            let train_cfg = LmTrainConfig {
                epochs: self.cfg.lm.epochs,
                batch_size: self.cfg.lm.batch_size,
                peak_lr: self.cfg.lm.peak_lr,
                weight_decay: self.cfg.lm.weight_decay,
                seed: derive_seed(self.cfg.lm.seed, &["lm", model_id]),
            };
            let (lm, log) =
                train_causal_lm(model_id, &tok, &streams, self.lm_config(&tok), &train_cfg)?;
            lm.save(&dir.join(format!("{model_id}.ckpt")))?;
            eprintln!(
                "train-lm: {model_id} held-out loss {:.4} -> {:.4}",
                log.heldout_loss.first().unwrap(),
                log.heldout_loss.last().unwrap()
            );
            logs.insert(model_id.to_string(), log.heldout_loss.clone());
        }

        // text encoder trains on the unlabeled pre-training corpus
        let docs = self.load_docs("pretrain.jsonl")?;
        let streams: Vec<Vec<u32>> = docs.iter().map(|d| tok.encode(&d.text)).collect();
        let te_cfg = TextEncoderConfig {
            vocab: tok.vocab_size(),
            dim: self.cfg.textenc.dim,
            heads: self.cfg.textenc.heads,
            layers: self.cfg.textenc.layers,
            ffn_dim: self.cfg.textenc.ffn_dim,
            context: self.cfg.textenc.context,
        };
        let mlm_cfg = MlmTrainConfig {
            epochs: self.cfg.textenc.epochs,
            batch_size: self.cfg.textenc.batch_size,
            peak_lr: self.cfg.textenc.peak_lr,
            weight_decay: self.cfg.textenc.weight_decay,
            mask_prob: self.cfg.textenc.mask_prob,
            seed: derive_seed(self.cfg.textenc.seed, &["textenc"]),
        };
        let (enc, losses) = train_mlm(&tok, &streams, te_cfg, &mlm_cfg)?;
        enc.save(&dir.join("textenc.ckpt"))?;
        eprintln!(
            "train-lm: textenc loss {:.4} -> {:.4}",
            losses.first().unwrap_or(&f64::NAN),
            losses.last().unwrap_or(&f64::NAN)
        );
        logs.insert("textenc".to_string(), losses);
        std::fs::write(
            dir.join("train-log.json"),
            serde_json::to_string_pretty(&logs)?,
        )?;
        self.write_resolved_config(&dir)?;
        Ok(())
    }

    pub fn extract_sntp(&self) -> Result<()> {
        let dir = self.stage_dir("sntp")?;
        let tok = self.load_tokenizer()?;
        let base = self.load_lm(BASE_MODEL_ID)?;
        let instruct = self.load_lm(INSTRUCT_MODEL_ID)?;
        let sources: [&dyn ProbabilitySource; 2] = [&base, &instruct];

        let mut cache = SntpCache::new();
        if let Some(import) = &self.cfg.sntp.import {
            for seq in sntp::import_jsonl(import)? {
                cache.write(seq)?;
            }
            eprintln!("extract-sntp: imported {} records", cache.len());
        }

        let mut docs = self.load_docs("labeled.jsonl")?;
        docs.extend(self.load_docs("pretrain.jsonl")?);
        let mut skipped = Vec::new();
        let model_ids = [BASE_MODEL_ID.to_string(), INSTRUCT_MODEL_ID.to_string()];

        let mut todo: Vec<(String, Vec<u32>)> = Vec::new();
        for d in &docs {
            match truncate_tokens(&d.text, &tok, self.cfg.sntp.max_len)? {
                None => skipped.push(d.id.clone()),
                Some(tokens) => {
                    if cache.read(&d.id, &model_ids).is_none() {
                        todo.push((d.id.clone(), tokens));
                    }
                }
            }
        }
        eprintln!(
            "extract-sntp: {} docs to extract, {} cached/imported, {} skipped",
            todo.len(),
            cache.len(),
            skipped.len()
        );
        let extracted: Vec<SntpSequence> = parallel_map(
            todo,
            self.cfg.experiment.workers,
            |(doc_id, tokens): (String, Vec<u32>)| {
                extract_sntp(&doc_id, tok.tokenizer_id(), &tokens, &sources)
            },
        )?;
        for seq in extracted {
            cache.write(seq)?;
        }
        cache.save(&dir.join("cache.bin"))?;
        skipped.sort();
        std::fs::write(
            dir.join("skipped.json"),
            serde_json::to_string_pretty(&SkipLog {
                skipped_doc_ids: skipped,
            })?,
        )?;
        self.write_resolved_config(&dir)?;
        Ok(())
    }

    pub fn pretrain(&self) -> Result<()> {
        let dir = self.stage_dir("pretrain")?;
        if !self.cfg.pretrain.enabled {
            eprintln!("pretrain: disabled in config, nothing to do");
            return Ok(());
        }
        let tok = self.load_tokenizer()?;
        let cache = self.load_cache()?;
        let skips = self.load_skips()?;
        let text_encoder = self.text_encoder()?;
        let docs = self.load_docs("pretrain.jsonl")?;
        let model_ids = [BASE_MODEL_ID.to_string(), INSTRUCT_MODEL_ID.to_string()];

        let mut pretrain_docs = Vec::new();
        for d in &docs {
            if skips.contains(&d.id) {
                continue;
            }
            let tokens = truncate_tokens(&d.text, &tok, self.cfg.sntp.max_len)?
                .ok_or_else(|| SentraError::Data(format!("doc {} lost its tokens", d.id)))?;
            let seq = cache.read(&d.id, &model_ids).ok_or_else(|| {
                Self::missing(&format!("SNTP for doc {}", d.id), "extract-sntp")
            })?;
            pretrain_docs.push(PretrainDoc {
                doc_id: d.id.clone(),
                tokens,
                ell: seq.clone(),
            });
        }

        let outcome = contrastive::pretrain(
            &self.cfg.sentra,
            &self.cfg.pretrain.contrastive,
            &pretrain_docs,
            text_encoder.as_ref(),
            self.cfg.sntp.max_len,
        )?;
        outcome.save(&dir.join("pretrained.ckpt"))?;
        std::fs::write(
            dir.join("log.json"),
            serde_json::to_string_pretty(&outcome.log)?,
        )?;
        let first = outcome.log.phase_losses[0].first().copied().unwrap_or(f64::NAN);
        let last = outcome
            .log
            .phase_losses
            .last()
            .and_then(|p| p.last())
            .copied()
            .unwrap_or(f64::NAN);
        eprintln!(
            "pretrain: loss {first:.4} -> {last:.4}, retrieval {:.3} (chance {:.3})",
            outcome.log.retrieval_accuracy, outcome.log.retrieval_chance
        );
        self.write_resolved_config(&dir)?;
        Ok(())
    }

    fn plans(&self, labeled: &[Document]) -> Result<Vec<SplitPlan>> {
        let split_seed = derive_seed(
            *self.cfg.experiment.seeds.first().unwrap(),
            &["split-base"],
        );
        match self.cfg.eval.protocol {
            EvalProtocol::Ood => make_ood_splits(
                labeled,
                self.cfg.experiment.split_key.field(),
                split_seed,
                self.cfg.eval.train_ratio,
            ),
            EvalProtocol::Indomain => Ok(vec![make_indomain_split(
                labeled,
                split_seed,
                self.cfg.eval.train_ratio,
                self.cfg.eval.val_ratio,
            )?]),
        }
    }

    /// Labeled docs minus the ones skipped at extraction.
    fn usable_labeled(&self) -> Result<Vec<Document>> {
        let skips = self.load_skips()?;
        let docs = self.load_docs("labeled.jsonl")?;
        Ok(docs
            .into_iter()
            .filter(|d| !skips.contains(&d.id))
            .collect())
    }

    fn default_arms(&self) -> Vec<SentraArm> {
        let mut arms = Vec::new();
        if self.cfg.detectors.iter().any(|d| d == "sentra") {
            arms.push(SentraArm {
                name: "sentra".into(),
                init: self.cfg.finetune.init.kind(),
                use_models: vec![BASE_MODEL_ID.into(), INSTRUCT_MODEL_ID.into()],
            });
        }
        arms
    }

    fn sentra_init_model(&self, arm: &SentraArm, cell_seed: u64) -> Result<SentraModel<f32>> {
        let mut config = self.cfg.sentra.clone();
        config.k = arm.use_models.len();
        match arm.init {
            InitKind::Pretrained => {
                if config.k != self.cfg.sentra.k {
                    return Err(SentraError::Config(
                        "pretrained init requires the full source set".into(),
                    ));
                }
                let path = self.out().join("pretrain/pretrained.ckpt");
                if !path.exists() {
                    return Err(Self::missing(
                        &format!("pre-trained bundle {}", path.display()),
                        "pretrain",
                    ));
                }
                contrastive::load_sentra_from_bundle(&path)
            }
            InitKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
                SentraModel::init(config, &mut rng)
            }
        }
    }

    fn gather_sntp(
        &self,
        cache: &SntpCache,
        ids: &[String],
        labels: &BTreeMap<String, u8>,
        use_models: &[String],
    ) -> Result<Vec<(SntpSequence, u8)>> {
        let model_ids = [BASE_MODEL_ID.to_string(), INSTRUCT_MODEL_ID.to_string()];
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let seq = cache
                .read(id, &model_ids)
                .ok_or_else(|| Self::missing(&format!("SNTP for doc {id}"), "extract-sntp"))?;
            let seq = if use_models == model_ids {
                seq.clone()
            } else {
                select_models(seq, use_models)?
            };
            out.push((seq, labels[id]));
        }
        Ok(out)
    }

    pub fn finetune(&self) -> Result<()> {
        let dir = self.stage_dir("finetune")?;
        let tok = self.load_tokenizer()?;
        let cache = self.load_cache()?;
        let labeled = self.usable_labeled()?;
        let labels: BTreeMap<String, u8> = labeled
            .iter()
            .map(|d| (d.id.clone(), d.label.unwrap()))
            .collect();
        let plans = self.plans(&labeled)?;
        std::fs::write(dir.join("plans.json"), serde_json::to_string_pretty(&plans)?)?;

        struct Job {
            arm: Option<SentraArm>, // None = text classifier
            plan_key: String,
            seed: u64,
        }
        let mut jobs = Vec::new();
        for plan in plans.iter().filter(|p| p.usable) {
            for &seed in &self.cfg.experiment.seeds {
                for arm in self.default_arms() {
                    jobs.push(Job {
                        arm: Some(arm),
                        plan_key: plan.held_out.clone(),
                        seed,
                    });
                }
                if self.cfg.detectors.iter().any(|d| d == "textclf") {
                    jobs.push(Job {
                        arm: None,
                        plan_key: plan.held_out.clone(),
                        seed,
                    });
                }
            }
        }
        let plan_by_key: BTreeMap<String, &SplitPlan> =
            plans.iter().map(|p| (p.held_out.clone(), p)).collect();
        let textenc_path = self.out().join("lm/textenc.ckpt");

        let run_job = |job: Job| -> Result<()> {
            let plan = plan_by_key[&job.plan_key];
            match job.arm {
                Some(arm) => {
                    let cell_seed =
                        derive_seed(job.seed, &["finetune", &arm.name, &job.plan_key]);
                    let init = self.sentra_init_model(&arm, cell_seed)?;
                    let train = self.gather_sntp(&cache, &plan.train_ids, &labels, &arm.use_models)?;
                    let val = self.gather_sntp(&cache, &plan.val_ids, &labels, &arm.use_models)?;
                    let cfg = self.cfg.finetune.to_config(cell_seed, arm.init);
                    let (det, log) = finetune_sentra(
                        &arm.name,
                        tok.tokenizer_id(),
                        &train,
                        &val,
                        init,
                        &cfg,
                    )?;
                    let cell = dir.join(&arm.name).join(&job.plan_key).join(format!("s{}", job.seed));
                    std::fs::create_dir_all(&cell)?;
                    det.model.save(&cell.join("model.ckpt"))?;
                    write_finetune_log(&cell, &log)?;
                    eprintln!(
                        "finetune: {} key={} seed={} best epoch {} val {:.4}",
                        arm.name, job.plan_key, job.seed, log.best_epoch,
                        log.val_losses.get(log.best_epoch.saturating_sub(1)).unwrap_or(&f64::NAN)
                    );
                }
                None => {
                    if !textenc_path.exists() {
                        return Err(Self::missing(
                            &format!("text encoder {}", textenc_path.display()),
                            "train-lm",
                        ));
                    }
                    let init = TinyTextEncoder::load(&textenc_path)?;
                    let gather = |ids: &[String]| -> Result<Vec<(String, Vec<u32>, u8)>> {
                        let by_id: BTreeMap<&str, &Document> =
                            labeled.iter().map(|d| (d.id.as_str(), d)).collect();
                        ids.iter()
                            .map(|id| {
                                let d = by_id[id.as_str()];
                                let tokens = truncate_tokens(&d.text, &tok, self.cfg.sntp.max_len)?
                                    .ok_or_else(|| {
                                        SentraError::Data(format!("doc {id} lost its tokens"))
                                    })?;
                                Ok((id.clone(), tokens, d.label.unwrap()))
                            })
                            .collect()
                    };
                    let train = gather(&plan.train_ids)?;
                    let val = gather(&plan.val_ids)?;
                    let cell_seed = derive_seed(job.seed, &["finetune", "textclf", &job.plan_key]);
                    let cfg = self.cfg.finetune.to_config(cell_seed, InitKind::Random);
                    let (clf, log) =
                        finetune_text_classifier("textclf", &init, &train, &val, &cfg)?;
                    let cell = dir.join("textclf").join(&job.plan_key).join(format!("s{}", job.seed));
                    std::fs::create_dir_all(&cell)?;
                    clf.save(&cell.join("model.ckpt"))?;
                    write_finetune_log(&cell, &log)?;
                    eprintln!(
                        "finetune: textclf key={} seed={} best epoch {}",
                        job.plan_key, job.seed, log.best_epoch
                    );
                }
            }
            Ok(())
        };
        parallel_map(jobs, self.cfg.experiment.workers, run_job)?;
        self.write_resolved_config(&dir)?;
        Ok(())
    }

    pub fn score(&self) -> Result<()> {
        let dir = self.stage_dir("scores")?;
        let tok = self.load_tokenizer()?;
        let cache = self.load_cache()?;
        let labeled = self.usable_labeled()?;
        let plans = self.load_plans()?;
        let by_id: BTreeMap<&str, &Document> =
            labeled.iter().map(|d| (d.id.as_str(), d)).collect();
        let model_ids = [BASE_MODEL_ID.to_string(), INSTRUCT_MODEL_ID.to_string()];

        // zero-shot detectors need the sources themselves
        let need_xppl = self.cfg.detectors.iter().any(|d| d == "xppl");
        let base = if need_xppl { Some(self.load_lm(BASE_MODEL_ID)?) } else { None };
        let instr = if need_xppl { Some(self.load_lm(INSTRUCT_MODEL_ID)?) } else { None };

        struct Job {
            detector: String,
            plan_key: String,
            seed: u64,
        }
        let mut jobs = Vec::new();
        for plan in plans.iter().filter(|p| p.usable) {
            for detector in &self.cfg.detectors {
                // zero-shot detectors are seed-independent but are scored per
                // seed cell so reports stay uniform
                for &seed in &self.cfg.experiment.seeds {
                    jobs.push(Job {
                        detector: detector.clone(),
                        plan_key: plan.held_out.clone(),
                        seed,
                    });
                }
            }
        }
        let plan_by_key: BTreeMap<String, &SplitPlan> =
            plans.iter().map(|p| (p.held_out.clone(), p)).collect();

        let run_job = |job: Job| -> Result<()> {
            let plan = plan_by_key[&job.plan_key];
            let test_ids: Vec<&String> = plan
                .test_ids
                .iter()
                .filter(|id| by_id.contains_key(id.as_str()))
                .collect();
            let mut scores: Vec<DetectorScore> = Vec::with_capacity(test_ids.len());
            match job.detector.as_str() {
                "sentra" => {
                    let cell = self
                        .out()
                        .join("finetune/sentra")
                        .join(&job.plan_key)
                        .join(format!("s{}", job.seed));
                    let path = cell.join("model.ckpt");
                    if !path.exists() {
                        return Err(Self::missing(
                            &format!("fine-tuned model {}", path.display()),
                            "finetune",
                        ));
                    }
                    let det = SentraDetector {
                        detector_id: "sentra".into(),
                        tokenizer_id: tok.tokenizer_id().to_string(),
                        model: SentraModel::load(&path)?,
                    };
                    let seqs: Vec<SntpSequence> = test_ids
                        .iter()
                        .map(|id| {
                            cache
                                .read(id, &model_ids)
                                .cloned()
                                .ok_or_else(|| {
                                    Self::missing(&format!("SNTP for doc {id}"), "extract-sntp")
                                })
                        })
                        .collect::<Result<_>>()?;
                    let refs: Vec<&SntpSequence> = seqs.iter().collect();
                    scores = det.score_batch(&refs)?;
                }
                "ppl" => {
                    for id in &test_ids {
                        let seq = cache.read(id, &model_ids).ok_or_else(|| {
                            Self::missing(&format!("SNTP for doc {id}"), "extract-sntp")
                        })?;
                        scores.push(score_perplexity("ppl", seq, 0)?);
                    }
                }
                "xppl" => {
                    let (obs, perf) = (base.as_ref().unwrap(), instr.as_ref().unwrap());
                    for id in &test_ids {
                        let d = by_id[id.as_str()];
                        let tokens = truncate_tokens(&d.text, &tok, self.cfg.sntp.max_len)?
                            .ok_or_else(|| SentraError::Data(format!("doc {id} lost tokens")))?;
                        scores.push(score_xppl_ratio("xppl", id, &tokens, obs, perf)?);
                    }
                }
                "textclf" => {
                    let cell = self
                        .out()
                        .join("finetune/textclf")
                        .join(&job.plan_key)
                        .join(format!("s{}", job.seed));
                    let path = cell.join("model.ckpt");
                    if !path.exists() {
                        return Err(Self::missing(
                            &format!("fine-tuned text classifier {}", path.display()),
                            "finetune",
                        ));
                    }
                    let store = crate::tensor::checkpoint::load::<f32>(&path)?;
                    let meta: serde_json::Value = serde_json::from_str(
                        &std::fs::read_to_string(crate::lm::meta_path_for(&path))?,
                    )?;
                    let config: TextEncoderConfig =
                        serde_json::from_value(meta["config"].clone())?;
                    let clf = TextClassifier {
                        detector_id: "textclf".into(),
                        tokenizer_id: tok.tokenizer_id().to_string(),
                        config,
                        store,
                    };
                    for id in &test_ids {
                        let d = by_id[id.as_str()];
                        let tokens = truncate_tokens(&d.text, &tok, self.cfg.sntp.max_len)?
                            .ok_or_else(|| SentraError::Data(format!("doc {id} lost tokens")))?;
                        scores.push(clf.score(id, &tokens)?);
                    }
                }
                other => {
                    return Err(SentraError::Config(format!("unknown detector {other}")));
                }
            }
            let out_dir = dir.join(&job.detector).join(&job.plan_key);
            std::fs::create_dir_all(&out_dir)?;
            detectors::save_scores(&scores, &out_dir.join(format!("s{}.jsonl", job.seed)))?;
            Ok(())
        };
        parallel_map(jobs, self.cfg.experiment.workers, run_job)?;
        self.write_resolved_config(&dir)?;
        eprintln!("score: wrote score files under {}", dir.display());
        Ok(())
    }

    pub fn evaluate(&self) -> Result<()> {
        let dir = self.stage_dir("report")?;
        let labeled = self.usable_labeled()?;
        let plans = self.load_plans()?;
        let by_id: BTreeMap<&str, &Document> =
            labeled.iter().map(|d| (d.id.as_str(), d)).collect();

        let keys: Vec<String> = plans
            .iter()
            .filter(|p| p.usable)
            .map(|p| p.held_out.clone())
            .collect();
        let seeds = self.cfg.experiment.seeds.clone();
        let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
        for detector in &self.cfg.detectors {
            let mut cells: BTreeMap<(String, u64), CellMetrics> = BTreeMap::new();
            for key in &keys {
                for &seed in &seeds {
                    let path = self
                        .out()
                        .join("scores")
                        .join(detector)
                        .join(key)
                        .join(format!("s{seed}.jsonl"));
                    let scores = detectors::load_scores(&path)?;
                    let mut s = Vec::with_capacity(scores.len());
                    let mut l = Vec::with_capacity(scores.len());
                    for sc in &scores {
                        let d = by_id.get(sc.doc_id.as_str()).ok_or_else(|| {
                            SentraError::Data(format!("scored unknown doc {}", sc.doc_id))
                        })?;
                        s.push(sc.score);
                        l.push(d.label.unwrap());
                    }
                    cells.insert(
                        (key.clone(), seed),
                        CellMetrics {
                            auroc: auroc(&s, &l)?,
                            weighted_f1: weighted_f1(&s, &l, self.cfg.eval.threshold)?,
                        },
                    );
                }
            }
            let report = aggregate_report(
                detector,
                self.cfg.experiment.split_key.field().as_str(),
                &keys,
                &seeds,
                &cells,
            )?;
            reports.insert(detector.clone(), report);
        }
        let unusable: Vec<&SplitPlan> = plans.iter().filter(|p| !p.usable).collect();
        let doc = serde_json::json!({
            "experiment": self.cfg.experiment.name,
            "protocol": match self.cfg.eval.protocol {
                EvalProtocol::Ood => "ood",
                EvalProtocol::Indomain => "indomain",
            },
            "reports": reports,
            "unusable_plans": unusable.iter().map(|p| {
                serde_json::json!({ "held_out": p.held_out, "note": p.note })
            }).collect::<Vec<_>>(),
        });
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&doc)?)?;
        self.write_resolved_config(&dir)?;
        eprintln!("evaluate: wrote {}", dir.join("report.json").display());
        Ok(())
    }

    pub fn report(&self) -> Result<String> {
        let path = self.out().join("report/report.json");
        if !path.exists() {
            return Err(Self::missing(
                &format!("evaluation report {}", path.display()),
                "evaluate",
            ));
        }
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        let reports: BTreeMap<String, EvalReport> =
            serde_json::from_value(doc["reports"].clone())?;
        let table = render_report_table(&reports);
        std::fs::write(self.out().join("report/report.txt"), &table)?;
        Ok(table)
    }

    // ---- ablation ----------------------------------------------------------

    /// Run a matched set of arms differing only on one axis and emit a
    /// side-by-side Avg/W table.
    pub fn ablate(&self, axis: &str) -> Result<String> {
        match axis {
            "pretraining" => {
                let arms = vec![
                    (
                        "r-SENTRA".to_string(),
                        SentraArm {
                            name: "r-sentra".into(),
                            init: InitKind::Random,
                            use_models: vec![BASE_MODEL_ID.into(), INSTRUCT_MODEL_ID.into()],
                        },
                    ),
                    (
                        "SENTRA".to_string(),
                        SentraArm {
                            name: "sentra-pre".into(),
                            init: InitKind::Pretrained,
                            use_models: vec![BASE_MODEL_ID.into(), INSTRUCT_MODEL_ID.into()],
                        },
                    ),
                ];
                self.run_ablation(axis, arms)
            }
            "k" => {
                let arms = vec![
                    (
                        "k=2".to_string(),
                        SentraArm {
                            name: "k2".into(),
                            init: InitKind::Random,
                            use_models: vec![BASE_MODEL_ID.into(), INSTRUCT_MODEL_ID.into()],
                        },
                    ),
                    (
                        "- instruct (base only)".to_string(),
                        SentraArm {
                            name: "k1-base".into(),
                            init: InitKind::Random,
                            use_models: vec![BASE_MODEL_ID.into()],
                        },
                    ),
                    (
                        "- base (instruct only)".to_string(),
                        SentraArm {
                            name: "k1-instruct".into(),
                            init: InitKind::Random,
                            use_models: vec![INSTRUCT_MODEL_ID.into()],
                        },
                    ),
                ];
                self.run_ablation(axis, arms)
            }
            "lm-pair" => self.ablate_lm_pair(),
            other => Err(SentraError::Config(format!(
                "unknown ablation axis {other}; known: pretraining, k, lm-pair"
            ))),
        }
    }

    /// Fine-tune, score and evaluate each arm on identical plans and seeds.
    fn run_ablation(&self, axis: &str, arms: Vec<(String, SentraArm)>) -> Result<String> {
        let dir = self.stage_dir(&format!("ablate/{axis}"))?;
        let tok = self.load_tokenizer()?;
        let cache = self.load_cache()?;
        let labeled = self.usable_labeled()?;
        let labels: BTreeMap<String, u8> = labeled
            .iter()
            .map(|d| (d.id.clone(), d.label.unwrap()))
            .collect();
        let by_id: BTreeMap<&str, &Document> =
            labeled.iter().map(|d| (d.id.as_str(), d)).collect();
        let plans = self.plans(&labeled)?;
        let usable: Vec<&SplitPlan> = plans.iter().filter(|p| p.usable).collect();
        let keys: Vec<String> = usable.iter().map(|p| p.held_out.clone()).collect();
        let seeds = self.cfg.experiment.seeds.clone();

        let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
        for (label, arm) in &arms {
            struct Cell<'p> {
                plan: &'p SplitPlan,
                seed: u64,
            }
            let jobs: Vec<Cell> = usable
                .iter()
                .flat_map(|p| seeds.iter().map(move |&seed| Cell { plan: p, seed }))
                .collect();
            let results = parallel_map(jobs, self.cfg.experiment.workers, |cell: Cell| {
                let cell_seed =
                    derive_seed(cell.seed, &["finetune", &arm.name, &cell.plan.held_out]);
                let init = self.sentra_init_model(arm, cell_seed)?;
                let train =
                    self.gather_sntp(&cache, &cell.plan.train_ids, &labels, &arm.use_models)?;
                let val = self.gather_sntp(&cache, &cell.plan.val_ids, &labels, &arm.use_models)?;
                let cfg = self.cfg.finetune.to_config(cell_seed, arm.init);
                let (det, _log) =
                    finetune_sentra(&arm.name, tok.tokenizer_id(), &train, &val, init, &cfg)?;
                let model_ids = [BASE_MODEL_ID.to_string(), INSTRUCT_MODEL_ID.to_string()];
                let mut scores = Vec::new();
                let mut labels_v = Vec::new();
                for id in &cell.plan.test_ids {
                    let Some(d) = by_id.get(id.as_str()) else { continue };
                    let seq = cache.read(id, &model_ids).ok_or_else(|| {
                        Self::missing(&format!("SNTP for doc {id}"), "extract-sntp")
                    })?;
                    let seq = if arm.use_models.as_slice() == model_ids {
                        seq.clone()
                    } else {
                        select_models(seq, &arm.use_models)?
                    };
                    scores.push(det.score(&seq)?.score);
                    labels_v.push(d.label.unwrap());
                }
                Ok((
                    cell.plan.held_out.clone(),
                    cell.seed,
                    CellMetrics {
                        auroc: auroc(&scores, &labels_v)?,
                        weighted_f1: weighted_f1(&scores, &labels_v, self.cfg.eval.threshold)?,
                    },
                ))
            })?;
            let mut cells = BTreeMap::new();
            for (key, seed, m) in results {
                cells.insert((key, seed), m);
            }
            let report = aggregate_report(
                label,
                self.cfg.experiment.split_key.field().as_str(),
                &keys,
                &seeds,
                &cells,
            )?;
            eprintln!(
                "ablate/{axis}: {label} Avg {:.4} W {:.4}",
                report.avg_auroc, report.worst_auroc
            );
            reports.insert(label.clone(), report);
        }
        let ordered: BTreeMap<String, EvalReport> = reports;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&ordered)?,
        )?;
        let table = render_report_table(&ordered);
        std::fs::write(dir.join("report.txt"), &table)?;
        self.write_resolved_config(&dir)?;
        Ok(table)
    }

    /// Swap the transformer pair for n-gram sources trained on the same
    /// corpora, re-extract, and compare.
    fn ablate_lm_pair(&self) -> Result<String> {
        let dir = self.stage_dir("ablate/lm-pair")?;
        let tok = self.load_tokenizer()?;
        let labeled = self.usable_labeled()?;
        let labels: BTreeMap<String, u8> = labeled
            .iter()
            .map(|d| (d.id.clone(), d.label.unwrap()))
            .collect();
        let plans = self.plans(&labeled)?;
        let usable: Vec<&SplitPlan> = plans.iter().filter(|p| p.usable).collect();
        let keys: Vec<String> = usable.iter().map(|p| p.held_out.clone()).collect();
        let seeds = self.cfg.experiment.seeds.clone();

        // alternative pair: n-gram models on the same two corpora
        let seed_docs = self.load_docs("seed.jsonl")?;
        let instruct_docs = self.load_docs("instruct.jsonl")?;
        let streams = |docs: &[Document]| -> Vec<Vec<u32>> {
            docs.iter().map(|d| tok.encode(&d.text)).collect()
        };
        let alt_base = crate::lm::NgramSource::train(
            "alt-base",
            tok.tokenizer_id(),
            tok.vocab_size(),
            &streams(&seed_docs),
            self.cfg.ablate.alt_ngram_context,
            self.cfg.ablate.alt_ngram_alpha,
        )?;
        let alt_instruct = crate::lm::NgramSource::train(
            "alt-instruct",
            tok.tokenizer_id(),
            tok.vocab_size(),
            &streams(&instruct_docs),
            self.cfg.ablate.alt_ngram_context,
            self.cfg.ablate.alt_ngram_alpha,
        )?;

        // extract an alternative cache for the labeled corpus
        let alt_cache_path = dir.join("alt-cache.bin");
        let mut alt_cache = if alt_cache_path.exists() {
            SntpCache::load(&alt_cache_path)?
        } else {
            SntpCache::new()
        };
        let alt_ids = ["alt-base".to_string(), "alt-instruct".to_string()];
        let sources: [&dyn ProbabilitySource; 2] = [&alt_base, &alt_instruct];
        let mut todo = Vec::new();
        for d in &labeled {
            if alt_cache.read(&d.id, &alt_ids).is_none() {
                if let Some(tokens) = truncate_tokens(&d.text, &tok, self.cfg.sntp.max_len)? {
                    todo.push((d.id.clone(), tokens));
                }
            }
        }
        let extracted = parallel_map(
            todo,
            self.cfg.experiment.workers,
            |(doc_id, tokens): (String, Vec<u32>)| {
                extract_sntp(&doc_id, tok.tokenizer_id(), &tokens, &sources)
            },
        )?;
        for seq in extracted {
            alt_cache.write(seq)?;
        }
        alt_cache.save(&alt_cache_path)?;

        let primary_cache = self.load_cache()?;
        let primary_ids = [BASE_MODEL_ID.to_string(), INSTRUCT_MODEL_ID.to_string()];
        let arms: Vec<(String, &SntpCache, Vec<String>)> = vec![
            ("transformer pair".to_string(), &primary_cache, primary_ids.to_vec()),
            ("ngram pair".to_string(), &alt_cache, alt_ids.to_vec()),
        ];

        let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
        for (label, cache, model_ids) in &arms {
            let mut cells = BTreeMap::new();
            for plan in &usable {
                for &seed in &seeds {
                    let cell_seed = derive_seed(seed, &["finetune", label, &plan.held_out]);
                    let mut config = self.cfg.sentra.clone();
                    config.k = 2;
                    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
                    let init = SentraModel::init(config, &mut rng)?;
                    let gather = |ids: &[String]| -> Result<Vec<(SntpSequence, u8)>> {
                        ids.iter()
                            .map(|id| {
                                let seq = cache.read(id, model_ids).ok_or_else(|| {
                                    Self::missing(
                                        &format!("SNTP for doc {id}"),
                                        "extract-sntp / ablate",
                                    )
                                })?;
                                Ok((seq.clone(), labels[id]))
                            })
                            .collect()
                    };
                    let train = gather(&plan.train_ids)?;
                    let val = gather(&plan.val_ids)?;
                    let cfg = self.cfg.finetune.to_config(cell_seed, InitKind::Random);
                    let (det, _) = finetune_sentra(
                        "sentra",
                        tok.tokenizer_id(),
                        &train,
                        &val,
                        init,
                        &cfg,
                    )?;
                    let mut scores = Vec::new();
                    let mut labels_v = Vec::new();
                    for id in &plan.test_ids {
                        let Some(seq) = cache.read(id, model_ids) else { continue };
                        scores.push(det.score(seq)?.score);
                        labels_v.push(labels[id]);
                    }
                    cells.insert(
                        (plan.held_out.clone(), seed),
                        CellMetrics {
                            auroc: auroc(&scores, &labels_v)?,
                            weighted_f1: weighted_f1(&scores, &labels_v, self.cfg.eval.threshold)?,
                        },
                    );
                }
            }
            let report = aggregate_report(
                label,
                self.cfg.experiment.split_key.field().as_str(),
                &keys,
                &seeds,
                &cells,
            )?;
            eprintln!(
                "ablate/lm-pair: {label} Avg {:.4} W {:.4}",
                report.avg_auroc, report.worst_auroc
            );
            reports.insert(label.clone(), report);
        }
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&reports)?)?;
        let table = render_report_table(&reports);
        std::fs::write(dir.join("report.txt"), &table)?;
        self.write_resolved_config(&dir)?;
        Ok(table)
    }
}

fn write_finetune_log(cell: &Path, log: &FinetuneLog) -> Result<()> {
    std::fs::write(cell.join("log.json"), serde_json::to_string_pretty(log)?)?;
    Ok(())
}

/// Plain-text table with one row per detector: per-key means then Avg / W.
pub fn render_report_table(reports: &BTreeMap<String, EvalReport>) -> String {
    let mut keys: Vec<String> = Vec::new();
    for r in reports.values() {
        for k in r.per_key.keys() {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
    }
    keys.sort();
    let name_w = reports.keys().map(|k| k.len()).max().unwrap_or(8).max(8);
    let mut out = String::new();
    out.push_str(&format!("{:<name_w$}", "detector"));
    for k in &keys {
        out.push_str(&format!("  {k:>10}"));
    }
    out.push_str(&format!("  {:>8}  {:>8}\n", "Avg", "W"));
    for (name, r) in reports {
        out.push_str(&format!("{name:<name_w$}"));
        for k in &keys {
            match r.per_key.get(k) {
                Some(kr) => out.push_str(&format!("  {:>10.4}", kr.mean_auroc)),
                None => out.push_str(&format!("  {:>10}", "-")),
            }
        }
        out.push_str(&format!("  {:>8.4}  {:>8.4}\n", r.avg_auroc, r.worst_auroc));
    }
    out
}
