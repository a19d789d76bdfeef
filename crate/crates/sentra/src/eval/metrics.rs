//! AUROC (rank/Mann-Whitney form with tie handling), support-weighted F1,
//! and aggregation across held-out keys and seeds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SentraError};

fn check_two_classes(labels: &[u8], what: &str) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(SentraError::Data(format!(
            "{what} undefined: only one class present ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Probability that a random positive outranks a random negative, ties
/// counted half. Computed from average ranks, which is exactly the pairwise
/// count.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SentraError::shape(format!(
            "auroc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (pos, neg) = check_two_classes(labels, "auroc")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("scores must be comparable")
            .then(a.cmp(&b))
    });
    // average ranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos as f64) * (pos as f64 + 1.0) / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Per-class F1 weighted by class support. Predictions are
/// `score >= threshold`; a class with no predicted and no true positives
/// contributes F1 = 0.
pub fn weighted_f1(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SentraError::shape(format!(
            "weighted_f1: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_two_classes(labels, "weighted_f1")?;
    let preds: Vec<u8> = scores
        .iter()
        .map(|&s| if s >= threshold { 1 } else { 0 })
        .collect();
    let mut weighted = 0.0;
    let n = labels.len() as f64;
    for class in [0u8, 1u8] {
        let tp = labels
            .iter()
            .zip(&preds)
            .filter(|&(&l, &p)| l == class && p == class)
            .count() as f64;
        let fp = labels
            .iter()
            .zip(&preds)
            .filter(|&(&l, &p)| l != class && p == class)
            .count() as f64;
        let fn_ = labels
            .iter()
            .zip(&preds)
            .filter(|&(&l, &p)| l == class && p != class)
            .count() as f64;
        let support = labels.iter().filter(|&&l| l == class).count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        weighted += f1 * support / n;
    }
    Ok(weighted)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct CellMetrics {
    pub auroc: f64,
    pub weighted_f1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeyReport {
    pub per_seed: BTreeMap<u64, CellMetrics>,
    pub mean_auroc: f64,
    /// Sample (n-1) standard deviation; 0 for a single seed.
    pub sd_auroc: f64,
    pub mean_f1: f64,
    pub sd_f1: f64,
}

/// Per-key-and-seed metrics rolled up into Avg (mean over keys of per-key
/// seed means) and W (minimum over keys).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector_id: String,
    pub key_field: String,
    pub seeds: Vec<u64>,
    pub per_key: BTreeMap<String, KeyReport>,
    pub avg_auroc: f64,
    pub worst_auroc: f64,
    pub avg_f1: f64,
    pub worst_f1: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_report(
    detector_id: &str,
    key_field: &str,
    keys: &[String],
    seeds: &[u64],
    cells: &BTreeMap<(String, u64), CellMetrics>,
) -> Result<EvalReport> {
    let mut missing = Vec::new();
    for key in keys {
        for &seed in seeds {
            if !cells.contains_key(&(key.clone(), seed)) {
                missing.push(format!("({key}, seed {seed})"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(SentraError::Data(format!(
            "incomplete report for {detector_id}: missing cells {}",
            missing.join(", ")
        )));
    }
    let mut per_key = BTreeMap::new();
    for key in keys {
        let mut per_seed = BTreeMap::new();
        for &seed in seeds {
            per_seed.insert(seed, cells[&(key.clone(), seed)]);
        }
        let aurocs: Vec<f64> = per_seed.values().map(|c| c.auroc).collect();
        let f1s: Vec<f64> = per_seed.values().map(|c| c.weighted_f1).collect();
        let (mean_auroc, sd_auroc) = mean_sd(&aurocs);
        let (mean_f1, sd_f1) = mean_sd(&f1s);
        per_key.insert(
            key.clone(),
            KeyReport {
                per_seed,
                mean_auroc,
                sd_auroc,
                mean_f1,
                sd_f1,
            },
        );
    }
    let key_means: Vec<f64> = per_key.values().map(|k| k.mean_auroc).collect();
    let f1_means: Vec<f64> = per_key.values().map(|k| k.mean_f1).collect();
    let avg_auroc = key_means.iter().sum::<f64>() / key_means.len() as f64;
    let worst_auroc = key_means.iter().cloned().fold(f64::INFINITY, f64::min);
    let avg_f1 = f1_means.iter().sum::<f64>() / f1_means.len() as f64;
    let worst_f1 = f1_means.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(EvalReport {
        detector_id: detector_id.to_string(),
        key_field: key_field.to_string(),
        seeds: seeds.to_vec(),
        per_key,
        avg_auroc,
        worst_auroc,
        avg_f1,
        worst_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive pairwise oracle with half-credit ties.
    fn auroc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut won = 0.0;
        let mut total = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                total += 1.0;
                if scores[i] > scores[j] {
                    won += 1.0;
                } else if scores[i] == scores[j] {
                    won += 0.5;
                }
            }
        }
        won / total
    }

    #[test]
    fn perfect_separation_is_one() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3], &[1, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn spec_example_three_quarters() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 0, 1, 1];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.75);
    }

    #[test]
    fn all_ties_is_half() {
        assert_eq!(auroc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(weighted_f1(&[0.1, 0.2], &[0, 0], 0.5).is_err());
    }

    #[test]
    fn matches_pairwise_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.random_range(5..200);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..20) as f64) / 20.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let got = auroc(&scores, &labels).unwrap();
            let want = auroc_oracle(&scores, &labels);
            assert_eq!(got, want, "n={n}");
        }
    }

    #[test]
    fn f1_all_predicted_one() {
        // labels [1,1,0,0], everything predicted 1:
        // class 1: P=0.5 R=1 F1=2/3; class 0: F1=0; weighted = 1/3
        let got = weighted_f1(&[0.9, 0.8, 0.7, 0.6], &[1, 1, 0, 0], 0.5).unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_perfect_predictions() {
        let got = weighted_f1(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn f1_matches_confusion_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(4..100);
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let got = weighted_f1(&scores, &labels, 0.5).unwrap();

            // independent oracle via explicit confusion matrix
            let mut cm = [[0.0f64; 2]; 2]; // cm[label][pred]
            for (s, &l) in scores.iter().zip(labels.iter()) {
                let p = usize::from(*s >= 0.5);
                cm[l as usize][p] += 1.0;
            }
            let mut want = 0.0;
            for c in 0..2 {
                let tp = cm[c][c];
                let fp = cm[1 - c][c];
                let fn_ = cm[c][1 - c];
                let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
                let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
                want += f1 * (cm[c][0] + cm[c][1]) / n as f64;
            }
            assert!((got - want).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_increasing_transforms(
            raw in proptest::collection::vec((0u8..2, -50i32..50), 4..60)
        ) {
            let mut labels: Vec<u8> = raw.iter().map(|&(l, _)| l).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = raw.iter().map(|&(_, s)| s as f64 / 10.0).collect();
            let base = auroc(&scores, &labels).unwrap();
            let exp_scores: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|&s| 3.0 * s + 11.0).collect();
            prop_assert!((auroc(&exp_scores, &labels).unwrap() - base).abs() < 1e-12);
            prop_assert!((auroc(&affine, &labels).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn auroc_complement_for_tie_free_scores(
            raw in proptest::collection::vec(0u8..2, 4..60)
        ) {
            let mut labels = raw.clone();
            labels[0] = 0;
            labels[1] = 1;
            // distinct scores by construction
            let scores: Vec<f64> = (0..labels.len()).map(|i| i as f64 * 1.7 + 0.1).collect();
            let a = auroc(&scores, &labels).unwrap();
            let neg: Vec<f64> = scores.iter().map(|&s| -s).collect();
            let b = auroc(&neg, &labels).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_single_cell() {
        let mut cells = BTreeMap::new();
        cells.insert(("news".to_string(), 42u64), CellMetrics { auroc: 0.9, weighted_f1: 0.8 });
        let r = aggregate_report("det", "domain", &["news".into()], &[42], &cells).unwrap();
        assert_eq!(r.avg_auroc, 0.9);
        assert_eq!(r.worst_auroc, 0.9);
    }

    #[test]
    fn aggregate_avg_and_worst() {
        let mut cells = BTreeMap::new();
        for (k, v) in [("a", 0.9), ("b", 0.8)] {
            cells.insert((k.to_string(), 1u64), CellMetrics { auroc: v, weighted_f1: v });
        }
        let r = aggregate_report("det", "domain", &["a".into(), "b".into()], &[1], &cells).unwrap();
        assert!((r.avg_auroc - 0.85).abs() < 1e-12);
        assert!((r.worst_auroc - 0.8).abs() < 1e-12);
        assert!(r.avg_auroc >= r.worst_auroc);
    }

    #[test]
    fn aggregate_seed_sd_uses_sample_convention() {
        let mut cells = BTreeMap::new();
        for (seed, v) in [(1u64, 0.8), (2, 0.9), (3, 1.0)] {
            cells.insert(("k".to_string(), seed), CellMetrics { auroc: v, weighted_f1: v });
        }
        let r = aggregate_report("det", "domain", &["k".into()], &[1, 2, 3], &cells).unwrap();
        let kr = &r.per_key["k"];
        assert!((kr.mean_auroc - 0.9).abs() < 1e-12);
        // sample sd = 0.1; population sd would be ~0.0816
        assert!((kr.sd_auroc - 0.1).abs() < 1e-12);
    }

    #[test]
    fn aggregate_missing_cell_lists_it() {
        let mut cells = BTreeMap::new();
        cells.insert(("a".to_string(), 1u64), CellMetrics { auroc: 0.9, weighted_f1: 0.9 });
        let err =
            aggregate_report("det", "domain", &["a".into(), "b".into()], &[1], &cells).unwrap_err();
        assert!(err.to_string().contains("(b, seed 1)"), "{err}");
    }
}
