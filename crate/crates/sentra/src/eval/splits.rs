//! Leave-one-key-out split planning with class balancing.
//!
//! Domain keying holds every document of one domain out as the test set.
//! Generator keying (the out-of-LLM protocol) holds one generator's LLM
//! documents out; human documents have no generator, so a disjoint held-out
//! slice of them joins the test set to keep both classes present. Train and
//! val pools are balance-sampled to equal class counts.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Document;
use crate::error::{Result, SentraError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyField {
    Domain,
    Generator,
}

impl KeyField {
    pub fn as_str(&self) -> &'static str {
        match self {
            KeyField::Domain => "domain",
            KeyField::Generator => "generator",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct ClassCounts {
    pub human: usize,
    pub llm: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct BalanceRecord {
    pub train_before: ClassCounts,
    pub train_after: ClassCounts,
    pub val_before: ClassCounts,
    pub val_after: ClassCounts,
}

/// A full train/val/test assignment for one held-out key.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitPlan {
    pub key_field: String,
    pub held_out: String,
    pub seed: u64,
    pub train_ratio: f64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub balancing: BalanceRecord,
    pub usable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl SplitPlan {
    /// Disjointness, leakage-freedom and exact balance; used by tests and
    /// asserted for every generated plan.
    pub fn check_invariants(&self, docs: &[Document]) -> Result<()> {
        use std::collections::BTreeSet;
        let train: BTreeSet<_> = self.train_ids.iter().collect();
        let val: BTreeSet<_> = self.val_ids.iter().collect();
        let test: BTreeSet<_> = self.test_ids.iter().collect();
        if train.intersection(&val).next().is_some()
            || train.intersection(&test).next().is_some()
            || val.intersection(&test).next().is_some()
        {
            return Err(SentraError::contract(format!(
                "split {} has overlapping id sets",
                self.held_out
            )));
        }
        let by_id: std::collections::BTreeMap<&str, &Document> =
            docs.iter().map(|d| (d.id.as_str(), d)).collect();
        let count = |ids: &[String]| -> Result<ClassCounts> {
            let mut c = ClassCounts::default();
            for id in ids {
                let d = by_id
                    .get(id.as_str())
                    .ok_or_else(|| SentraError::contract(format!("unknown id {id} in plan")))?;
                match d.label {
                    Some(0) => c.human += 1,
                    Some(1) => c.llm += 1,
                    _ => return Err(SentraError::contract(format!("doc {id} unlabeled"))),
                }
            }
            Ok(c)
        };
        let tr = count(&self.train_ids)?;
        let va = count(&self.val_ids)?;
        if self.usable && (tr.human != tr.llm || va.human != va.llm) {
            return Err(SentraError::contract(format!(
                "split {} is not class balanced (train {tr:?}, val {va:?})",
                self.held_out
            )));
        }
        // leakage-freedom under the key field
        if self.usable {
            for id in self.train_ids.iter().chain(self.val_ids.iter()) {
                let d = by_id[id.as_str()];
                let in_held = match self.key_field.as_str() {
                    "domain" => d.domain == self.held_out,
                    _ => d.generator.as_deref() == Some(self.held_out.as_str()),
                };
                if in_held {
                    return Err(SentraError::contract(format!(
                        "doc {id} from held-out key {} leaked into train/val",
                        self.held_out
                    )));
                }
            }
        }
        Ok(())
    }
}

fn rng_for(scope: &str, seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(scope.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(s)
}

/// Down-sample the majority class to the minority size; the minority class
/// is kept intact. The result is sorted by id.
pub fn balance_sample<'a>(docs: &[&'a Document], seed: u64) -> Result<Vec<&'a Document>> {
    let mut human: Vec<&Document> = docs.iter().copied().filter(|d| d.label == Some(0)).collect();
    let mut llm: Vec<&Document> = docs.iter().copied().filter(|d| d.label == Some(1)).collect();
    if human.is_empty() || llm.is_empty() {
        return Err(SentraError::Data(format!(
            "balance_sample needs both classes, got {} human / {} llm",
            human.len(),
            llm.len()
        )));
    }
    human.sort_by(|a, b| a.id.cmp(&b.id));
    llm.sort_by(|a, b| a.id.cmp(&b.id));
    let n = human.len().min(llm.len());
    let mut rng = rng_for("balance", seed, "");
    let (majority, minority) = if human.len() > llm.len() {
        (&mut human, &mut llm)
    } else {
        (&mut llm, &mut human)
    };
    majority.shuffle(&mut rng);
    majority.truncate(n);
    let mut out: Vec<&Document> = Vec::with_capacity(2 * n);
    out.extend_from_slice(minority);
    out.extend_from_slice(majority);
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

fn counts(docs: &[&Document]) -> ClassCounts {
    let llm = docs.iter().filter(|d| d.label == Some(1)).count();
    ClassCounts {
        human: docs.len() - llm,
        llm,
    }
}

/// Split a pool into train/val and balance both sides. Returns `None`
/// (with a note) when a side ends up single-class.
fn plan_from_pool(
    key_field: KeyField,
    held_out: &str,
    seed: u64,
    train_ratio: f64,
    pool: Vec<&Document>,
    test_ids: Vec<String>,
) -> Result<SplitPlan> {
    let mut pool = pool;
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = rng_for("pool", seed, held_out);
    pool.shuffle(&mut rng);
    let n_train = ((pool.len() as f64) * train_ratio).floor() as usize;
    let (train_pool, val_pool) = pool.split_at(n_train.min(pool.len()));
    let mut balancing = BalanceRecord {
        train_before: counts(train_pool),
        val_before: counts(val_pool),
        ..Default::default()
    };
    let unusable = |note: String, balancing: BalanceRecord| SplitPlan {
        key_field: key_field.as_str().to_string(),
        held_out: held_out.to_string(),
        seed,
        train_ratio,
        train_ids: Vec::new(),
        val_ids: Vec::new(),
        test_ids: test_ids.clone(),
        balancing,
        usable: false,
        note: Some(note),
    };
    let train = match balance_sample(train_pool, seed) {
        Ok(t) => t,
        Err(e) => return Ok(unusable(format!("train pool: {e}"), balancing.clone())),
    };
    let val = match balance_sample(val_pool, seed.wrapping_add(1)) {
        Ok(v) => v,
        Err(e) => return Ok(unusable(format!("val pool: {e}"), balancing.clone())),
    };
    balancing.train_after = counts(&train);
    balancing.val_after = counts(&val);
    Ok(SplitPlan {
        key_field: key_field.as_str().to_string(),
        held_out: held_out.to_string(),
        seed,
        train_ratio,
        train_ids: train.iter().map(|d| d.id.clone()).collect(),
        val_ids: val.iter().map(|d| d.id.clone()).collect(),
        test_ids,
        balancing,
        usable: true,
        note: None,
    })
}

/// One plan per distinct key value, deterministic in (dataset, seed).
pub fn make_ood_splits(
    docs: &[Document],
    key_field: KeyField,
    seed: u64,
    train_ratio: f64,
) -> Result<Vec<SplitPlan>> {
    super::assert_labeled(docs)?;
    if !(0.0..1.0).contains(&train_ratio) || train_ratio == 0.0 {
        return Err(SentraError::Config(format!(
            "train ratio {train_ratio} outside (0, 1)"
        )));
    }
    let mut keys: Vec<String> = match key_field {
        KeyField::Domain => docs.iter().map(|d| d.domain.clone()).collect(),
        KeyField::Generator => docs
            .iter()
            .filter_map(|d| d.generator.clone())
            .collect(),
    };
    keys.sort();
    keys.dedup();
    if keys.len() < 2 {
        return Err(SentraError::Data(format!(
            "need at least 2 distinct {} values, got {}",
            key_field.as_str(),
            keys.len()
        )));
    }
    let mut plans = Vec::with_capacity(keys.len());
    for key in &keys {
        let plan = match key_field {
            KeyField::Domain => {
                let test_ids: Vec<String> = docs
                    .iter()
                    .filter(|d| &d.domain == key)
                    .map(|d| d.id.clone())
                    .collect();
                let pool: Vec<&Document> = docs.iter().filter(|d| &d.domain != key).collect();
                plan_from_pool(key_field, key, seed, train_ratio, pool, test_ids)?
            }
            KeyField::Generator => {
                // held-out generator docs plus a held-out human slice form
                // the test set, so both classes are present
                let held: Vec<&Document> = docs
                    .iter()
                    .filter(|d| d.generator.as_deref() == Some(key.as_str()))
                    .collect();
                let mut humans: Vec<&Document> =
                    docs.iter().filter(|d| d.label == Some(0)).collect();
                humans.sort_by(|a, b| a.id.cmp(&b.id));
                let mut rng = rng_for("oollm-human", seed, key);
                humans.shuffle(&mut rng);
                let n_test_h = (humans.len() / 5).max(1).min(humans.len());
                let (test_h, rest_h) = humans.split_at(n_test_h);
                let mut test_ids: Vec<String> = held.iter().map(|d| d.id.clone()).collect();
                test_ids.extend(test_h.iter().map(|d| d.id.clone()));
                test_ids.sort();
                let pool: Vec<&Document> = docs
                    .iter()
                    .filter(|d| {
                        d.label == Some(1) && d.generator.as_deref() != Some(key.as_str())
                    })
                    .chain(rest_h.iter().copied())
                    .collect();
                plan_from_pool(key_field, key, seed, train_ratio, pool, test_ids)?
            }
        };
        plan.check_invariants(docs)?;
        plans.push(plan);
    }
    Ok(plans)
}

/// Single random split over the whole dataset (no held-out key); test keeps
/// its natural class mix, train/val are balanced.
pub fn make_indomain_split(
    docs: &[Document],
    seed: u64,
    train_ratio: f64,
    val_ratio: f64,
) -> Result<SplitPlan> {
    super::assert_labeled(docs)?;
    if train_ratio + val_ratio >= 1.0 {
        return Err(SentraError::Config(
            "train + val ratios must leave room for a test share".into(),
        ));
    }
    let mut pool: Vec<&Document> = docs.iter().collect();
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = rng_for("indomain", seed, "");
    pool.shuffle(&mut rng);
    let n = pool.len();
    let n_train = (n as f64 * train_ratio).floor() as usize;
    let n_val = (n as f64 * val_ratio).floor() as usize;
    let test_ids: Vec<String> = pool[n_train + n_val..]
        .iter()
        .map(|d| d.id.clone())
        .collect();
    let mut plan = plan_from_pool(
        KeyField::Domain,
        "all",
        seed,
        train_ratio / (train_ratio + val_ratio),
        pool[..n_train + n_val].to_vec(),
        test_ids,
    )?;
    plan.held_out = "all".to_string();
    plan.check_invariants(docs)?;
    Ok(plan)
}
