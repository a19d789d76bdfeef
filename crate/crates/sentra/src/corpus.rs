//! Synthetic corpus generation.
//!
//! "Human" documents come from per-domain stochastic grammars: shared
//! function words around domain-specific content lexicons sampled with
//! Zipf-like weights, plus occasional novel rare words. "LLM" documents are
//! sampled from word-level Markov generators fitted to each domain's seed
//! text, at varying temperatures, so their statistics sit close to the seed
//! distribution while human drafts keep injecting novelty. A templated
//! question-answer restyling of the seed text gives the second probability
//! source its stylistic shift.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

use crate::error::{Result, SentraError};
use crate::eval::Document;

const FUNCTION_WORDS: [&str; 36] = [
    "the", "of", "and", "a", "to", "in", "is", "it", "on", "as", "at", "by", "or", "be", "we",
    "he", "so", "do", "if", "an", "my", "up", "no", "go", "for", "was", "are", "with", "that",
    "this", "from", "but", "not", "they", "her", "his",
];

const DOMAIN_NAMES: [&str; 6] = ["newswire", "recipes", "verse", "howto", "reviews", "chat"];

// per-domain syllable inventories so content lexicons look distinct
const DOMAIN_SYLLABLES: [(&[&str], &[&str]); 6] = [
    (
        &["por", "kel", "dar", "vin", "mon", "ser", "tal", "gov"],
        &["ta", "ne", "ri", "lo", "mu"],
    ),
    (
        &["mas", "lir", "tov", "bak", "sim", "gar", "pon", "cul"],
        &["a", "i", "o", "u", "e"],
    ),
    (
        &["lum", "sha", "vel", "mor", "sil", "aur", "nev", "dre"],
        &["ia", "ea", "ou", "ei", "ae"],
    ),
    (
        &["fix", "bol", "wren", "tap", "gri", "slot", "clam", "dov"],
        &["er", "le", "or", "an", "en"],
    ),
    (
        &["bra", "quo", "zel", "fan", "rud", "pec", "nov", "hul"],
        &["o", "ay", "ee", "oo", "y"],
    ),
    (
        &["yap", "mir", "dun", "kit", "foz", "lep", "sab", "wum"],
        &["ah", "eh", "ix", "um", "oy"],
    ),
];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Number of synthetic domains (2..=6).
    pub domains: usize,
    pub content_words_per_domain: usize,
    pub seed_docs_per_domain: usize,
    pub labeled_docs_per_domain: usize,
    pub pretrain_docs: usize,
    /// Fraction of labeled docs that are LLM-generated (before balancing).
    pub llm_share: f64,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability of a novel rare word in human sentences.
    pub rare_word_rate: f64,
    /// Sampling temperatures cycled over LLM documents.
    pub temperatures: Vec<f64>,
    /// Markov orders of the generator family (each order is one generator tag).
    pub generator_orders: Vec<usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            domains: 4,
            content_words_per_domain: 110,
            seed_docs_per_domain: 150,
            labeled_docs_per_domain: 500,
            pretrain_docs: 800,
            llm_share: 0.55,
            min_words: 30,
            max_words: 90,
            rare_word_rate: 0.04,
            temperatures: vec![0.85, 1.0, 1.2],
            generator_orders: vec![2, 3],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains < 2 || self.domains > DOMAIN_NAMES.len() {
            return Err(SentraError::Config(format!(
                "domains must be in 2..={}, got {}",
                DOMAIN_NAMES.len(),
                self.domains
            )));
        }
        if !(0.0..1.0).contains(&self.llm_share) || self.llm_share == 0.0 {
            return Err(SentraError::Config("llm_share must be in (0,1)".into()));
        }
        if self.min_words < 5 || self.max_words <= self.min_words {
            return Err(SentraError::Config("bad word-count range".into()));
        }
        if self.temperatures.is_empty() || self.generator_orders.is_empty() {
            return Err(SentraError::Config(
                "need at least one temperature and one generator order".into(),
            ));
        }
        Ok(())
    }
}

/// Everything the downstream stages consume.
pub struct SynthCorpus {
    /// Human-grammar seed text (unlabeled), used for tokenizer and LM training.
    pub seed_docs: Vec<Document>,
    /// Question-answer restyled seed text for the second source.
    pub instruct_docs: Vec<Document>,
    /// Unlabeled mixed corpus for contrastive pre-training.
    pub pretrain_docs: Vec<Document>,
    /// Labeled human/LLM corpus with domain and generator tags.
    pub labeled_docs: Vec<Document>,
}

fn rng_for(seed: u64, scope: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(scope.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(s)
}

/// Zipf-ish weights over a lexicon index.
fn zipf_pick<'a>(words: &'a [String], rng: &mut ChaCha8Rng) -> &'a str {
    let n = words.len();
    let u: f64 = rng.random();
    // inverse-CDF approximation for p(i) ~ 1/(i+1)
    let hn: f64 = (0..n).map(|i| 1.0 / (i + 1) as f64).sum();
    let mut acc = 0.0;
    for (i, w) in words.iter().enumerate() {
        acc += 1.0 / ((i + 1) as f64 * hn);
        if u < acc {
            return w;
        }
    }
    &words[n - 1]
}

struct DomainLexicon {
    name: String,
    content: Vec<String>,
    syllables: usize,
}

fn build_lexicons(cfg: &CorpusConfig) -> Vec<DomainLexicon> {
    let mut out = Vec::with_capacity(cfg.domains);
    for d in 0..cfg.domains {
        let (onsets, nuclei) = DOMAIN_SYLLABLES[d];
        let mut rng = rng_for(cfg.seed, &format!("lexicon-{d}"));
        let mut words = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        while words.len() < cfg.content_words_per_domain {
            let syls = rng.random_range(2..4);
            let mut w = String::new();
            for _ in 0..syls {
                w.push_str(onsets.choose(&mut rng).unwrap());
                w.push_str(nuclei.choose(&mut rng).unwrap());
            }
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        out.push(DomainLexicon {
            name: DOMAIN_NAMES[d].to_string(),
            content: words,
            syllables: d,
        });
    }
    out
}

fn rare_word(lex: &DomainLexicon, rng: &mut ChaCha8Rng) -> String {
    let (onsets, nuclei) = DOMAIN_SYLLABLES[lex.syllables];
    let mut w = String::from("x");
    for _ in 0..rng.random_range(2..4) {
        w.push_str(onsets.choose(rng).unwrap());
        w.push_str(nuclei.choose(rng).unwrap());
    }
    w
}

/// One human document: sentences of mixed function/content words with
/// occasional novel rare words.
fn human_doc(lex: &DomainLexicon, cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> String {
    let target = rng.random_range(cfg.min_words..=cfg.max_words);
    let mut words: Vec<String> = Vec::with_capacity(target + 8);
    while words.len() < target {
        let len = rng.random_range(6..14);
        for i in 0..len {
            let function_slot = i % 2 == 0 && rng.random::<f64>() < 0.8;
            if function_slot {
                words.push(FUNCTION_WORDS.choose(rng).unwrap().to_string());
            } else if rng.random::<f64>() < cfg.rare_word_rate {
                words.push(rare_word(lex, rng));
            } else {
                words.push(zipf_pick(&lex.content, rng).to_string());
            }
        }
        words.push(".".to_string());
    }
    words.join(" ")
}

/// Question-answer restyling used to train the second probability source.
fn instruct_doc(lex: &DomainLexicon, cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<String> = Vec::new();
    let target = rng.random_range(cfg.min_words..=cfg.max_words);
    while words.len() < target {
        words.push("ask".to_string());
        for _ in 0..rng.random_range(3..7) {
            words.push(zipf_pick(&lex.content, rng).to_string());
        }
        words.push("?".to_string());
        words.push("tell".to_string());
        for i in 0..rng.random_range(5..11) {
            if i % 3 == 2 {
                words.push(FUNCTION_WORDS.choose(rng).unwrap().to_string());
            } else {
                words.push(zipf_pick(&lex.content, rng).to_string());
            }
        }
        words.push(".".to_string());
    }
    words.join(" ")
}

/// Word-level Markov generator fitted to seed documents.
struct WordMarkov {
    order: usize,
    counts: BTreeMap<Vec<String>, BTreeMap<String, u32>>,
}

const START: &str = "<s>";

impl WordMarkov {
    fn train(docs: &[&str], order: usize) -> Self {
        let mut counts: BTreeMap<Vec<String>, BTreeMap<String, u32>> = BTreeMap::new();
        for doc in docs {
            let words: Vec<&str> = doc.split_whitespace().collect();
            let mut ctx: Vec<String> = vec![START.to_string(); order];
            for &w in &words {
                *counts
                    .entry(ctx.clone())
                    .or_default()
                    .entry(w.to_string())
                    .or_insert(0) += 1;
                ctx.remove(0);
                ctx.push(w.to_string());
            }
        }
        WordMarkov { order, counts }
    }

    fn sample(&self, len: usize, temperature: f64, rng: &mut ChaCha8Rng) -> String {
        let mut ctx: Vec<String> = vec![START.to_string(); self.order];
        let mut out: Vec<String> = Vec::with_capacity(len);
        for _ in 0..len {
            let next = match self.counts.get(&ctx) {
                Some(dist) => {
                    let words: Vec<&String> = dist.keys().collect();
                    let probs: Vec<f64> = {
                        let raw: Vec<f64> = dist.values().map(|&c| c as f64).collect();
                        let total: f64 = raw.iter().sum();
                        let powered: Vec<f64> = raw
                            .iter()
                            .map(|c| (c / total).powf(1.0 / temperature))
                            .collect();
                        let z: f64 = powered.iter().sum();
                        powered.iter().map(|p| p / z).collect()
                    };
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = words.len() - 1;
                    for (i, &p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    words[pick].clone()
                }
                // dead end: restart at a sentence boundary
                None => {
                    ctx = vec![START.to_string(); self.order];
                    continue;
                }
            };
            out.push(next.clone());
            ctx.remove(0);
            ctx.push(next);
        }
        out.join(" ")
    }
}

/// Generate the full corpus family deterministically from the config.
pub fn synthesize(cfg: &CorpusConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let lexicons = build_lexicons(cfg);

    let mut seed_docs = Vec::new();
    for lex in &lexicons {
        let mut rng = rng_for(cfg.seed, &format!("seed-{}", lex.name));
        for i in 0..cfg.seed_docs_per_domain {
            seed_docs.push(Document {
                id: format!("seed-{}-{i:04}", lex.name),
                text: human_doc(lex, cfg, &mut rng),
                label: None,
                domain: lex.name.clone(),
                generator: None,
            });
        }
    }

    let mut instruct_docs = Vec::new();
    for lex in &lexicons {
        let mut rng = rng_for(cfg.seed, &format!("instruct-{}", lex.name));
        for i in 0..cfg.seed_docs_per_domain {
            instruct_docs.push(Document {
                id: format!("inst-{}-{i:04}", lex.name),
                text: instruct_doc(lex, cfg, &mut rng),
                label: None,
                domain: lex.name.clone(),
                generator: None,
            });
        }
    }

    // per-domain generators fitted on that domain's seed text
    let mut generators: BTreeMap<(String, usize), WordMarkov> = BTreeMap::new();
    for lex in &lexicons {
        let domain_seed: Vec<&str> = seed_docs
            .iter()
            .filter(|d| d.domain == lex.name)
            .map(|d| d.text.as_str())
            .collect();
        for &order in &cfg.generator_orders {
            generators.insert(
                (lex.name.clone(), order),
                WordMarkov::train(&domain_seed, order),
            );
        }
    }

    let mut labeled_docs = Vec::new();
    for lex in &lexicons {
        let mut rng = rng_for(cfg.seed, &format!("labeled-{}", lex.name));
        let n = cfg.labeled_docs_per_domain;
        let n_llm = ((n as f64) * cfg.llm_share).round() as usize;
        for i in 0..n {
            let llm = i < n_llm;
            let len = rng.random_range(cfg.min_words..=cfg.max_words);
            if llm {
                let order = cfg.generator_orders[i % cfg.generator_orders.len()];
                let temp = cfg.temperatures[rng.random_range(0..cfg.temperatures.len())];
                let text = generators[&(lex.name.clone(), order)].sample(len, temp, &mut rng);
                labeled_docs.push(Document {
                    id: format!("{}-m-{i:04}", lex.name),
                    text,
                    label: Some(1),
                    domain: lex.name.clone(),
                    generator: Some(format!("markov{order}")),
                });
            } else {
                labeled_docs.push(Document {
                    id: format!("{}-h-{i:04}", lex.name),
                    text: human_doc(lex, cfg, &mut rng),
                    label: Some(0),
                    domain: lex.name.clone(),
                    generator: None,
                });
            }
        }
    }

    let mut pretrain_docs = Vec::new();
    {
        let mut rng = rng_for(cfg.seed, "pretrain");
        for i in 0..cfg.pretrain_docs {
            let lex = &lexicons[i % lexicons.len()];
            let len = rng.random_range(cfg.min_words..=cfg.max_words);
            let llm = rng.random::<f64>() < 0.4;
            let text = if llm {
                let order = cfg.generator_orders[i % cfg.generator_orders.len()];
                let temp = cfg.temperatures[rng.random_range(0..cfg.temperatures.len())];
                generators[&(lex.name.clone(), order)].sample(len, temp, &mut rng)
            } else {
                human_doc(lex, cfg, &mut rng)
            };
            pretrain_docs.push(Document {
                id: format!("pre-{}-{i:04}", lex.name),
                text,
                label: None,
                domain: lex.name.clone(),
                generator: None,
            });
        }
    }

    Ok(SynthCorpus {
        seed_docs,
        instruct_docs,
        pretrain_docs,
        labeled_docs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            seed: 3,
            domains: 3,
            content_words_per_domain: 40,
            seed_docs_per_domain: 20,
            labeled_docs_per_domain: 30,
            pretrain_docs: 25,
            llm_share: 0.6,
            min_words: 20,
            max_words: 40,
            ..Default::default()
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let cfg = small_cfg();
        let a = synthesize(&cfg).unwrap();
        let b = synthesize(&cfg).unwrap();
        assert_eq!(a.labeled_docs, b.labeled_docs);
        assert_eq!(a.seed_docs, b.seed_docs);
        assert_eq!(a.pretrain_docs, b.pretrain_docs);
    }

    #[test]
    fn labeled_corpus_has_expected_shape() {
        let cfg = small_cfg();
        let c = synthesize(&cfg).unwrap();
        assert_eq!(c.labeled_docs.len(), 90);
        let domains: std::collections::BTreeSet<&str> =
            c.labeled_docs.iter().map(|d| d.domain.as_str()).collect();
        assert_eq!(domains.len(), 3);
        let llm = c.labeled_docs.iter().filter(|d| d.label == Some(1)).count();
        assert_eq!(llm, 18 * 3); // 60% of 30 per domain
        for d in &c.labeled_docs {
            match d.label {
                Some(1) => assert!(d.generator.as_deref().unwrap().starts_with("markov")),
                Some(0) => assert!(d.generator.is_none()),
                _ => panic!("unlabeled doc in labeled corpus"),
            }
            let words = d.text.split_whitespace().count();
            assert!(words >= cfg.min_words.min(15));
        }
    }

    #[test]
    fn domains_have_mostly_distinct_content() {
        let cfg = small_cfg();
        let c = synthesize(&cfg).unwrap();
        let vocab = |dom: &str| -> std::collections::BTreeSet<String> {
            c.seed_docs
                .iter()
                .filter(|d| d.domain == dom)
                .flat_map(|d| d.text.split_whitespace().map(|w| w.to_string()))
                .filter(|w| !FUNCTION_WORDS.contains(&w.as_str()) && w != ".")
                .collect()
        };
        let a = vocab("newswire");
        let b = vocab("recipes");
        let overlap = a.intersection(&b).count();
        assert!(
            (overlap as f64) < 0.05 * a.len().min(b.len()) as f64,
            "domains share too much content: {overlap}"
        );
    }

    #[test]
    fn generator_tags_cover_configured_orders() {
        let c = synthesize(&small_cfg()).unwrap();
        let tags: std::collections::BTreeSet<&str> = c
            .labeled_docs
            .iter()
            .filter_map(|d| d.generator.as_deref())
            .collect();
        assert_eq!(tags, ["markov2", "markov3"].iter().copied().collect());
    }

    #[test]
    fn markov_reuses_seed_phrases() {
        // generated text should overlap the seed text's bigrams heavily
        let cfg = small_cfg();
        let c = synthesize(&cfg).unwrap();
        let seed_bigrams: std::collections::BTreeSet<(String, String)> = c
            .seed_docs
            .iter()
            .filter(|d| d.domain == "newswire")
            .flat_map(|d| {
                let ws: Vec<&str> = d.text.split_whitespace().collect();
                ws.windows(2)
                    .map(|w| (w[0].to_string(), w[1].to_string()))
                    .collect::<Vec<_>>()
            })
            .collect();
        let llm_doc = c
            .labeled_docs
            .iter()
            .find(|d| d.domain == "newswire" && d.label == Some(1) && d.generator.as_deref() == Some("markov3"))
            .unwrap();
        let ws: Vec<&str> = llm_doc.text.split_whitespace().collect();
        let mut hits = 0;
        let mut total = 0;
        for w in ws.windows(2) {
            total += 1;
            if seed_bigrams.contains(&(w[0].to_string(), w[1].to_string())) {
                hits += 1;
            }
        }
        assert!(
            hits as f64 > 0.8 * total as f64,
            "markov3 output should echo seed bigrams ({hits}/{total})"
        );
    }
}
