//! Experiment configuration: one TOML document drives every stage. Unknown
//! keys are rejected, dotted-path CLI overrides are merged before
//! validation, and each stage writes the resolved document next to its
//! outputs so any artifact can be regenerated from disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastiveConfig;
use crate::corpus::CorpusConfig;
use crate::detectors::{FinetuneConfig, InitKind};
use crate::encoder::SentraConfig;
use crate::error::{Result, SentraError};
use crate::eval::splits::KeyField;
use crate::tokenizer::TokenizerMode;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub split_key: SplitKey,
    /// Worker threads for independent (key, seed) runs.
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKey {
    Domain,
    Generator,
}

impl SplitKey {
    pub fn field(&self) -> KeyField {
        match self {
            SplitKey::Domain => KeyField::Domain,
            SplitKey::Generator => KeyField::Generator,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerModeCfg {
    Char,
    Bpe,
}

impl TokenizerModeCfg {
    pub fn mode(&self) -> TokenizerMode {
        match self {
            TokenizerModeCfg::Char => TokenizerMode::Char,
            TokenizerModeCfg::Bpe => TokenizerMode::Bpe,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub mode: TokenizerModeCfg,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LmSection {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub context: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TextEncSection {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub context: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SntpSection {
    /// Token truncation limit applied identically for every detector.
    pub max_len: usize,
    /// Optional JSONL of externally computed sequences to merge into the
    /// cache at extraction time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub import: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum TextEncoderKind {
    /// Tiny Transformer trained with the masked-token objective.
    Mlm,
    /// Deterministic hashed bag-of-n-grams double.
    Hashed,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub enabled: bool,
    pub text_encoder: TextEncoderKind,
    #[serde(flatten)]
    pub contrastive: ContrastiveConfig,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum EvalProtocol {
    Ood,
    Indomain,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub protocol: EvalProtocol,
    pub train_ratio: f64,
    /// Val share of the whole set under the in-domain protocol.
    pub val_ratio: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub init: InitChoice,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum InitChoice {
    Pretrained,
    Random,
}

impl InitChoice {
    pub fn kind(&self) -> InitKind {
        match self {
            InitChoice::Pretrained => InitKind::Pretrained,
            InitChoice::Random => InitKind::Random,
        }
    }
}

impl FinetuneSection {
    pub fn to_config(&self, seed: u64, init: InitKind) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            patience: self.patience,
            max_epochs: self.max_epochs,
            seed,
            init,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Context length of the alternative n-gram source pair used by the
    /// lm-pair axis.
    pub alt_ngram_context: usize,
    pub alt_ngram_alpha: f64,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            alt_ngram_context: 2,
            alt_ngram_alpha: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub corpus: CorpusConfig,
    pub tokenizer: TokenizerSection,
    pub lm: LmSection,
    pub textenc: TextEncSection,
    pub sntp: SntpSection,
    pub sentra: SentraConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    /// Detector ids to run: sentra, ppl, xppl, textclf.
    pub detectors: Vec<String>,
    #[serde(default)]
    pub ablate: AblateSection,
}

pub const KNOWN_DETECTORS: [&str; 4] = ["sentra", "ppl", "xppl", "textclf"];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.sentra.validate()?;
        if self.experiment.seeds.is_empty() {
            return Err(SentraError::Config("experiment.seeds is empty".into()));
        }
        if self.experiment.workers == 0 {
            return Err(SentraError::Config("experiment.workers must be >= 1".into()));
        }
        if self.sntp.max_len == 0 {
            return Err(SentraError::Config("sntp.max_len must be >= 1".into()));
        }
        if self.sntp.max_len + 1 > self.lm.context {
            return Err(SentraError::Config(format!(
                "sntp.max_len {} needs lm.context >= {} (BOS adds one position)",
                self.sntp.max_len,
                self.sntp.max_len + 1
            )));
        }
        if self.sntp.max_len > self.sentra.t_max {
            return Err(SentraError::Config(format!(
                "sntp.max_len {} exceeds sentra.t_max {}",
                self.sntp.max_len, self.sentra.t_max
            )));
        }
        for d in &self.detectors {
            if !KNOWN_DETECTORS.contains(&d.as_str()) {
                return Err(SentraError::Config(format!(
                    "unknown detector {d}; known: {}",
                    KNOWN_DETECTORS.join(", ")
                )));
            }
        }
        if self.detectors.is_empty() {
            return Err(SentraError::Config("no detectors enabled".into()));
        }
        if self.finetune.patience == 0 || self.finetune.max_epochs == 0 {
            return Err(SentraError::Config(
                "finetune.patience and finetune.max_epochs must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.eval.train_ratio) || self.eval.train_ratio == 0.0 {
            return Err(SentraError::Config("eval.train_ratio outside (0,1)".into()));
        }
        if self.eval.protocol == EvalProtocol::Indomain
            && self.eval.train_ratio + self.eval.val_ratio >= 1.0
        {
            return Err(SentraError::Config(
                "indomain protocol needs train_ratio + val_ratio < 1".into(),
            ));
        }
        Ok(())
    }

    /// Desk-scale default document; the shipped config file mirrors this.
    pub fn desk_default(out_dir: &Path) -> Self {
        ExperimentConfig {
            experiment: ExperimentSection {
                name: "desk".into(),
                out_dir: out_dir.to_path_buf(),
                seeds: vec![42, 43, 44],
                split_key: SplitKey::Domain,
                workers: std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1),
            },
            corpus: CorpusConfig::default(),
            tokenizer: TokenizerSection {
                mode: TokenizerModeCfg::Bpe,
                vocab_size: 384,
            },
            lm: LmSection {
                dim: 32,
                heads: 2,
                layers: 2,
                ffn_dim: 64,
                context: 160,
                epochs: 3,
                batch_size: 16,
                peak_lr: 1e-3,
                weight_decay: 0.01,
                seed: 11,
            },
            textenc: TextEncSection {
                dim: 64,
                heads: 4,
                layers: 2,
                ffn_dim: 128,
                context: 160,
                epochs: 3,
                batch_size: 16,
                peak_lr: 1e-3,
                weight_decay: 0.01,
                mask_prob: 0.15,
                seed: 12,
            },
            sntp: SntpSection {
                max_len: 128,
                import: None,
            },
            sentra: SentraConfig::desk(),
            pretrain: PretrainSection {
                enabled: true,
                text_encoder: TextEncoderKind::Mlm,
                contrastive: ContrastiveConfig::default(),
            },
            finetune: FinetuneSection {
                lr: 1e-4,
                weight_decay: 0.01,
                batch_size: 32,
                patience: 2,
                max_epochs: 12,
                init: InitChoice::Pretrained,
            },
            eval: EvalSection {
                protocol: EvalProtocol::Ood,
                train_ratio: 0.9,
                val_ratio: 0.1,
                threshold: 0.5,
            },
            detectors: KNOWN_DETECTORS.iter().map(|s| s.to_string()).collect(),
            ablate: AblateSection::default(),
        }
    }

    /// Parse a TOML document, apply dotted-path overrides, validate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            SentraError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&raw, overrides)
            .map_err(|e| SentraError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml_str(raw: &str, overrides: &[String]) -> Result<Self> {
        let table: toml::Table = raw
            .parse()
            .map_err(|e| SentraError::Config(format!("TOML parse error: {e}")))?;
        let mut value = toml::Value::Table(table);
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let de = value.clone();
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| SentraError::Config(format!("at key {}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| SentraError::Config(format!("config serialization: {e}")))
    }
}

/// `a.b.c=value` with TOML-typed right-hand sides (falling back to string).
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw_value) = spec.split_once('=').ok_or_else(|| {
        SentraError::Config(format!("override {spec:?} must look like key.path=value"))
    })?;
    let parsed: toml::Value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.is_empty() {
        return Err(SentraError::Config(format!("empty override path in {spec:?}")));
    }
    let mut cur = root;
    for key in &keys[..keys.len() - 1] {
        cur = cur
            .as_table_mut()
            .ok_or_else(|| SentraError::Config(format!("{key} is not a table")))?
            .entry(key.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    cur.as_table_mut()
        .ok_or_else(|| SentraError::Config(format!("{path} is not a table")))?
        .insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> ExperimentConfig {
        ExperimentConfig::desk_default(Path::new("runs/desk"))
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = desk();
        let toml = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml_str(&toml, &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let mut toml = desk().to_toml().unwrap();
        toml.push_str("\n[sntp]\nbogus_key = 3\n");
        // duplicate table: fix by appending key under existing table instead
        let toml = toml.replace("[sntp]\nbogus_key = 3\n", "");
        let bad = toml.replace("max_len = 128", "max_len = 128\nbogus_key = 3");
        let err = ExperimentConfig::from_toml_str(&bad, &[]).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn overrides_take_effect_and_are_typed() {
        let toml = desk().to_toml().unwrap();
        let cfg = ExperimentConfig::from_toml_str(
            &toml,
            &[
                "sentra.dim=32".to_string(),
                "finetune.init=\"random\"".to_string(),
                "experiment.seeds=[1,2]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.sentra.dim, 32);
        assert_eq!(cfg.finetune.init, InitChoice::Random);
        assert_eq!(cfg.experiment.seeds, vec![1, 2]);
    }

    #[test]
    fn invalid_config_is_a_validation_error() {
        let toml = desk().to_toml().unwrap();
        let err = ExperimentConfig::from_toml_str(&toml, &["sntp.max_len=0".to_string()])
            .unwrap_err();
        assert!(matches!(err, SentraError::Config(_)));
        let err2 = ExperimentConfig::from_toml_str(
            &toml,
            &["detectors=[\"nope\"]".to_string()],
        )
        .unwrap_err();
        assert!(err2.to_string().contains("unknown detector"), "{err2}");
    }

    #[test]
    fn serialized_config_is_deterministic() {
        let a = desk().to_toml().unwrap();
        let b = desk().to_toml().unwrap();
        assert_eq!(a, b);
    }
}
