//! Evaluation metrics and the small amount of statistics the experiment
//! reports need (across-trial mean/std, Spearman correlation, sign test).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counted one half.
///
/// Sort-and-rank with midranks, O(n log n).
pub fn auc(y: &[f64], scores: &[f64]) -> Result<f64> {
    if y.len() != scores.len() {
        return Err(Error::input(format!(
            "auc: {} labels vs {} scores",
            y.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::input("auc: NaN score"));
    }
    let n_pos = y.iter().filter(|&&v| v == 1.0).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(y)
        .filter(|(_, &t)| t == 1.0)
        .map(|(r, _)| r)
        .sum();
    let (p, q) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * q))
}

/// 1-based ranks with ties assigned their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j share ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

pub fn log_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    Ok(losses::bce_loss(y, y_hat)?.value)
}

pub fn mse(target: &[f64], predicted: &[f64]) -> Result<f64> {
    Ok(losses::bias_mse_loss(target, predicted)?.value)
}

/// Relative AUC gain in percent: `100·(model − reference)/reference`.
pub fn relative_auc_gain(auc_model: f64, auc_ref: f64) -> Result<f64> {
    if auc_ref <= 0.0 || !auc_ref.is_finite() {
        return Err(Error::input(format!("reference AUC must be positive, got {auc_ref}")));
    }
    Ok(100.0 * (auc_model - auc_ref) / auc_ref)
}

/// Absolute difference in percentage points: `100·(model − reference)`.
pub fn absolute_pp_diff(auc_model: f64, auc_ref: f64) -> f64 {
    100.0 * (auc_model - auc_ref)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioTag {
    Fl,
    Rus,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tag: ScenarioTag,
    pub n: usize,
    pub auc: f64,
    pub log_loss: f64,
    pub bias_probe_mse: f64,
}

impl MetricsReport {
    pub fn new(tag: ScenarioTag, y: &[f64], y_hat: &[f64], bias_probe_mse: f64) -> Result<Self> {
        let report = MetricsReport {
            tag,
            n: y.len(),
            auc: auc(y, y_hat)?,
            log_loss: log_loss(y, y_hat)?,
            bias_probe_mse,
        };
        if !(report.log_loss.is_finite() && report.bias_probe_mse.is_finite()) {
            return Err(Error::UndefinedMetric("non-finite metric".into()));
        }
        Ok(report)
    }
}

/// Mean and sample standard deviation (n − 1); std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Spearman rank correlation (Pearson on midranks). `None` when either side
/// is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&midranks(a), &midranks(b))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// One-sided sign-test p-value: P(X ≥ successes) for X ~ Binomial(trials, ½).
pub fn sign_test_p(successes: usize, trials: usize) -> f64 {
    if successes > trials {
        return 0.0;
    }
    let mut tail = 0.0;
    let mut coeff = 1.0f64; // C(trials, 0)
    for k in 0..=trials {
        if k >= successes {
            tail += coeff;
        }
        coeff = coeff * (trials - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(trials as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_auc(y: &[f64], s: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..y.len() {
            for j in 0..y.len() {
                if y[i] == 1.0 && y[j] == 0.0 {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_perfect_and_ties() {
        assert_eq!(auc(&[0.0, 0.0, 1.0, 1.0], &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 0.0, 1.0, 0.0], &[0.7; 4]).unwrap(), 0.5);
        assert_eq!(auc(&[1.0, 1.0, 0.0], &[0.1, 0.2, 0.9]).unwrap(), 0.0);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(matches!(auc(&[1.0, 1.0], &[0.1, 0.2]), Err(Error::UndefinedMetric(_))));
        assert!(auc(&[1.0, 0.0], &[0.1]).is_err());
    }

    #[test]
    fn auc_matches_brute_force_n100() {
        let mut rng = crate::seed::rng(77);
        let y: Vec<f64> = (0..100).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let s: Vec<f64> = (0..100).map(|_| rng.gen_range(0..20) as f64).collect();
        assert_eq!(auc(&y, &s).unwrap(), brute_auc(&y, &s));
    }

    #[test]
    fn log_loss_examples() {
        assert!(log_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-11);
        let v = log_loss(&[1.0, 0.0, 0.0], &[0.5; 3]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_loss_minimized_at_base_rate() {
        let y = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let base = 0.25;
        let at_base = log_loss(&y, &[base; 8]).unwrap();
        for c in [0.1, 0.2, 0.24, 0.26, 0.3, 0.5] {
            assert!(log_loss(&y, &[c; 8]).unwrap() > at_base);
        }
    }

    #[test]
    fn relative_gain() {
        assert_eq!(relative_auc_gain(0.7, 0.7).unwrap(), 0.0);
        assert!((relative_auc_gain(0.563, 0.5).unwrap() - 12.6).abs() < 1e-9);
        let (a, b) = (0.7001, 0.7);
        let g1 = relative_auc_gain(a, b).unwrap();
        let g2 = relative_auc_gain(b, a).unwrap();
        assert!((g1 + g2).abs() < 1e-3 * g1.abs());
        assert!(relative_auc_gain(0.5, 0.0).is_err());
        assert!((absolute_pp_diff(0.72, 0.70) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stats_helpers() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 2.0]), None);
        assert!((sign_test_p(9, 10) - 11.0 / 1024.0).abs() < 1e-15);
        assert!((sign_test_p(8, 10) - 56.0 / 1024.0).abs() < 1e-15);
        assert_eq!(sign_test_p(0, 10), 1.0);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(s in prop::collection::vec(-5.0f64..5.0, 4..60)) {
            let y: Vec<f64> = (0..s.len()).map(|i| (i % 2) as f64).collect();
            let t: Vec<f64> = s.iter().map(|v| (2.0 * v).exp() + 3.0).collect();
            prop_assert_eq!(auc(&y, &s).unwrap(), auc(&y, &t).unwrap());
        }

        #[test]
        fn auc_complement_for_negated_scores(s in prop::collection::hash_set(-10_000i64..10_000, 4..60)) {
            let s: Vec<f64> = s.into_iter().map(|v| v as f64).collect();
            let y: Vec<f64> = (0..s.len()).map(|i| (i % 3 == 0) as u8 as f64).collect();
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let total = auc(&y, &s).unwrap() + auc(&y, &neg).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
