//! Ranking metrics and attention statistics.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::matrix::Matrix;

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(contract("scores contain NaN"));
    }
    let mut pos = 0;
    for &l in labels {
        match l {
            0 => {}
            1 => pos += 1,
            other => return Err(contract(format!("label {other} is not binary"))),
        }
    }
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(contract("no positive labels"));
    }
    if neg == 0 {
        return Err(contract("no negative labels"));
    }
    Ok((pos, neg))
}

/// Indices ordered by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the step-wise precision-recall curve, `Σ (Rₖ − Rₖ₋₁)·Pₖ` over
/// distinct score thresholds. Tied scores enter the curve together.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let idx = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        let tp_prev = tp;
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        area += step_area(tp_prev, tp, fp, pos);
    }
    Ok(area)
}

fn step_area(tp_prev: usize, tp: usize, fp: usize, pos: usize) -> f64 {
    if tp == tp_prev {
        return 0.0;
    }
    let recall_gain = (tp - tp_prev) as f64 / pos as f64;
    let precision = tp as f64 / (tp + fp) as f64;
    recall_gain * precision
}

/// Mann–Whitney `U / (n⁺·n⁻)`; ties count one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let idx = descending(scores);
    // twice U, counted in integers
    let mut twice_u: u128 = 0;
    let mut neg_above: u128 = 0;
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        let (mut p, mut n) = (0u128, 0u128);
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            k += 1;
        }
        let neg_below = neg as u128 - neg_above - n;
        twice_u += p * (2 * neg_below + n);
        neg_above += n;
    }
    Ok(twice_u as f64 / (2 * pos as u128 * neg as u128) as f64)
}

const STOCHASTIC_TOL: f64 = 1e-9;

/// Mean over rows of the attention mass within `|i − j| ≤ w`.
pub fn diag_band_mass(a: &Matrix, w: usize) -> Result<f64> {
    let (t, c) = a.shape();
    if t != c || t == 0 {
        return Err(contract(format!("attention must be square and non-empty, got {t}×{c}")));
    }
    let mut total = 0.0;
    for i in 0..t {
        let row = a.row(i);
        let s: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(contract(format!("attention row {i} is not stochastic (sums to {s})")));
        }
        let lo = i.saturating_sub(w);
        let hi = (i + w).min(t - 1);
        total += row[lo..=hi].iter().sum::<f64>();
    }
    Ok(total / t as f64)
}

fn frobenius_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(crate::error::Error::Shape {
            op: "head_diversity",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let ss: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(libm::sqrt(ss))
}

/// Mean pairwise Frobenius distance between heads, averaged over windows.
/// `snapshots[window][head]`.
pub fn head_diversity(snapshots: &[Vec<Matrix>]) -> Result<f64> {
    if snapshots.is_empty() {
        return Err(contract("no attention snapshots"));
    }
    let mut total = 0.0;
    for heads in snapshots {
        if heads.len() < 2 {
            return Err(contract("head diversity needs at least two heads"));
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..heads.len() {
            for j in i + 1..heads.len() {
                sum += frobenius_distance(&heads[i], &heads[j])?;
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / snapshots.len() as f64)
}

/// Mean and sample standard deviation (`None` for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(libm::sqrt(var)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::Lcg;
    use alloc::vec;
    use proptest::prelude::*;

    /// Precision/recall enumerated threshold by threshold.
    fn auprc_brute(scores: &[f64], labels: &[u8]) -> f64 {
        let pos = labels.iter().filter(|&&l| l == 1).count();
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut area = 0.0;
        let mut tp_prev = 0;
        for th in thresholds {
            let tp = (0..scores.len()).filter(|&i| scores[i] >= th && labels[i] == 1).count();
            let fp = (0..scores.len()).filter(|&i| scores[i] >= th && labels[i] == 0).count();
            area += step_area(tp_prev, tp, fp, pos);
            tp_prev = tp;
        }
        area
    }

    fn auroc_brute(scores: &[f64], labels: &[u8]) -> f64 {
        let mut twice = 0u64;
        let mut pairs = 0u64;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        twice += 2;
                    } else if scores[i] == scores[j] {
                        twice += 1;
                    }
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.5);
        // all tied: one step at full recall with precision = prevalence
        assert_eq!(auprc(&[0.3; 4], &[1, 0, 0, 0]).unwrap(), 0.25);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_names_the_missing_class() {
        assert_eq!(auprc(&[0.1, 0.2], &[0, 0]), Err(contract("no positive labels")));
        assert_eq!(auroc(&[0.1, 0.2], &[1, 1]), Err(contract("no negative labels")));
        assert!(auroc(&[0.1], &[1, 0]).is_err());
        assert!(auroc(&[0.1, 0.3], &[2, 0]).is_err());
    }

    #[test]
    fn exhaustive_small_cases_match_brute_force() {
        let mut rng = Lcg::new(11);
        for n in 2..=10usize {
            for pattern in 0u32..(1 << n) {
                let labels: Vec<u8> = (0..n).map(|i| ((pattern >> i) & 1) as u8).collect();
                if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
                    continue;
                }
                // coarse scores force ties
                let scores: Vec<f64> = (0..n).map(|_| libm::floor(rng.uniform() * 4.0) / 4.0).collect();
                assert_eq!(auprc(&scores, &labels).unwrap(), auprc_brute(&scores, &labels));
                assert_eq!(auroc(&scores, &labels).unwrap(), auroc_brute(&scores, &labels));
            }
        }
    }

    proptest! {
        #[test]
        fn auroc_is_rank_invariant(
            raw in proptest::collection::vec((-5.0f64..5.0, 0u8..2), 2..40),
        ) {
            let (scores, mut labels): (Vec<f64>, Vec<u8>) = raw.into_iter().unzip();
            labels[0] = 1;
            labels[1] = 0;
            let mapped: Vec<f64> = scores.iter().map(|s| libm::exp(*s) * 3.0 + 1.0).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&mapped, &labels).unwrap());
            let a = auprc(&scores, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn band_mass_is_monotone_in_width(seed in 0u64..1000, t in 1usize..12) {
            let mut rng = Lcg::new(seed);
            let a = crate::matrix::softmax_rows(&rng.matrix(t, t, 2.0));
            let mut prev = 0.0;
            for w in 0..t {
                let m = diag_band_mass(&a, w).unwrap();
                prop_assert!(m >= prev);
                prev = m;
            }
            prop_assert!((prev - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn band_mass_examples() {
        let uniform = Matrix::filled(10, 10, 0.1);
        // in-band cells: 10 on the diagonal, 9 on each neighbouring diagonal
        let cells = (0..10i32)
            .flat_map(|i| (0..10i32).map(move |j| (i - j).abs()))
            .filter(|d| *d <= 1)
            .count();
        assert_eq!(cells, 28);
        let want = cells as f64 * 0.1 / 10.0;
        assert!((diag_band_mass(&uniform, 1).unwrap() - want).abs() < 1e-12);
        let id = Matrix::identity(5);
        for w in 0..5 {
            assert_eq!(diag_band_mass(&id, w).unwrap(), 1.0);
        }
        assert!(diag_band_mass(&Matrix::ones(3, 3), 1).is_err());
        assert!(diag_band_mass(&Matrix::zeros(2, 3), 1).is_err());
    }

    #[test]
    fn head_diversity_examples() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let b = Matrix::from_rows(&[[0.5, 0.5], [0.25, 0.75]]);
        assert_eq!(head_diversity(&[vec![a.clone(), a.clone()]]).unwrap(), 0.0);
        // (0.5² + 0.5² + 0.25² + 0.25²)^½
        let want = libm::sqrt(0.625);
        assert!((head_diversity(&[vec![a.clone(), b.clone()]]).unwrap() - want).abs() < 1e-15);
        assert_eq!(
            head_diversity(&[vec![a.clone(), b.clone()]]).unwrap(),
            head_diversity(&[vec![b.clone(), a.clone()]]).unwrap()
        );
        assert!(head_diversity(&[vec![a]]).is_err());
        assert!(head_diversity(&[]).is_err());
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, Some(1.0));
        assert_eq!(mean_std(&[4.0]).1, None);
    }
}
