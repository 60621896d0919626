//! L2-regularized logistic regression used as the ranking model inside the
//! feedback loop, and as the held-out reference classifier.
//!
//! Objective (per-example normalized):
//! `(1/n)·[Σ logloss(yᵢ, σ(w·xᵢ + c)) + (l2/2)·‖w‖²]`, intercept unpenalized.
//! Minimized by full-batch gradient descent with step `1/L`, where `L`
//! bounds the Hessian's largest eigenvalue.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedbacksim::Dataset;
use crate::nncore::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerConfig {
    pub l2: f64,
    pub max_iterations: usize,
    /// Stop once the max-norm of the normalized gradient falls below this.
    pub tolerance: f64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            l2: 1.0,
            max_iterations: 1000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRanker {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticRanker {
    /// Linear score `w·x`; ranking ignores the intercept.
    pub fn score(&self, row: &[f64]) -> f64 {
        self.weights.iter().zip(row).map(|(w, x)| w * x).sum()
    }

    pub fn predict_proba(&self, data: &Dataset) -> Vec<f64> {
        (0..data.len())
            .map(|i| sigmoid(self.score(data.x().row(i)) + self.intercept))
            .collect()
    }

    pub fn scores(&self, data: &Dataset) -> Vec<f64> {
        (0..data.len()).map(|i| self.score(data.x().row(i))).collect()
    }
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn top_eigenvalue(m: &[f64], dim: usize) -> f64 {
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut w = vec![0.0; dim];
        for i in 0..dim {
            for j in 0..dim {
                w[i] += m[i * dim + j] * v[j];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w.into_iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= 1e-12 * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

pub fn train_ranker(data: &Dataset, cfg: &RankerConfig) -> Result<LogisticRanker> {
    if !(cfg.l2 >= 0.0 && cfg.l2.is_finite()) {
        return Err(Error::config("ranker l2 strength must be finite and non-negative"));
    }
    let positives = data.y().iter().filter(|&&v| v == 1.0).count();
    if positives == 0 || positives == data.len() {
        return Err(Error::training("ranker needs both clicked and unclicked rows"));
    }
    let n = data.len();
    let d = data.n_features();
    let nf = n as f64;
    let x = data.x();

    // Gram matrix of [x, 1] / n.
    let dim = d + 1;
    let mut gram = vec![0.0; dim * dim];
    for i in 0..n {
        let row = x.row(i);
        for a in 0..dim {
            let xa = if a < d { row[a] } else { 1.0 };
            for b in a..dim {
                let xb = if b < d { row[b] } else { 1.0 };
                gram[a * dim + b] += xa * xb;
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            gram[a * dim + b] /= nf;
            gram[b * dim + a] = gram[a * dim + b];
        }
    }
    let lipschitz = 0.25 * top_eigenvalue(&gram, dim) + cfg.l2 / nf;
    let step = 1.0 / lipschitz;

    let mut w = vec![0.0; d];
    let mut c = 0.0;
    let mut grad_w = vec![0.0; d];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_c = 0.0;
        for i in 0..n {
            let row = x.row(i);
            let z: f64 = c + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            let r = sigmoid(z) - data.y()[i];
            grad_c += r;
            for (g, xv) in grad_w.iter_mut().zip(row) {
                *g += r * xv;
            }
        }
        grad_c /= nf;
        for (g, wv) in grad_w.iter_mut().zip(&w) {
            *g = (*g + cfg.l2 * wv) / nf;
        }
        let max_norm = grad_w.iter().fold(grad_c.abs(), |m, g| m.max(g.abs()));
        if !max_norm.is_finite() {
            return Err(Error::training("ranker gradient diverged"));
        }
        if max_norm < cfg.tolerance {
            converged = true;
            break;
        }
        for (wv, g) in w.iter_mut().zip(&grad_w) {
            *wv -= step * g;
        }
        c -= step * grad_c;
        iterations += 1;
    }
    Ok(LogisticRanker {
        weights: w,
        intercept: c,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auc;
    use crate::nncore::Matrix;

    fn two_points() -> Dataset {
        let x = Matrix::from_rows(&[vec![2.0, 1.0], vec![-1.0, -0.5]]).unwrap();
        Dataset::new(x, vec![1.0, 0.0], None, None).unwrap()
    }

    #[test]
    fn separable_pair_is_ordered() {
        let d = two_points();
        let r = train_ranker(&d, &RankerConfig::default()).unwrap();
        let s = r.scores(&d);
        assert!(s[0] > s[1]);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let d = Dataset::new(x, vec![1.0, 1.0], None, None).unwrap();
        assert!(matches!(
            train_ranker(&d, &RankerConfig::default()),
            Err(Error::Training { .. })
        ));
    }

    #[test]
    fn strong_l2_shrinks_weights() {
        let cfg = crate::feedbacksim::FeedbackSimConfig {
            reservoir_size: 2000,
            ..Default::default()
        };
        let mut rng = crate::seed::rng(5);
        let data = crate::feedbacksim::sample_distribution(&cfg, 2000, &mut rng).unwrap();
        let weak = train_ranker(&data, &RankerConfig::default()).unwrap();
        let strong = train_ranker(
            &data,
            &RankerConfig {
                l2: 1e9,
                ..Default::default()
            },
        )
        .unwrap();
        let norm = |r: &LogisticRanker| r.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(norm(&strong) < 1e-4 * norm(&weak));
        // Predicted probabilities collapse to the base rate: AUC of the
        // probabilities is carried only by vanishing weights.
        let p = strong.predict_proba(&data);
        let spread = p.iter().cloned().fold(f64::MIN, f64::max) - p.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-3);
        assert!(auc(data.y(), &weak.scores(&data)).unwrap() > 0.7);
    }

    #[test]
    fn converges_on_small_problem() {
        let cfg = crate::feedbacksim::FeedbackSimConfig::default();
        let mut rng = crate::seed::rng(6);
        let data = crate::feedbacksim::sample_distribution(&cfg, 1000, &mut rng).unwrap();
        let r = train_ranker(&data, &RankerConfig::default()).unwrap();
        assert!(r.converged, "iterations {}", r.iterations);
    }
}
