//! Linear SVM solver used for filter-direction estimation and artifact
//! probes.
//!
//! The objective is L2-regularized squared hinge loss with per-class weights
//! inversely proportional to class frequencies (weight `n / (2 * n_y)` for a
//! sample of class `y`), minimized by deterministic full-batch gradient
//! descent with a fixed step derived from the objective's Lipschitz constant.
//! No randomness is involved, so a fit is a pure function of its inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{MathError, Vector};

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("need at least one sample of each class")]
    MissingClass,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Math(#[from] MathError),
}

pub type SvmResult<T> = Result<T, SvmError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    /// Inverse regularization strength; larger fits the data harder.
    pub c: f64,
    /// Gradient-descent iteration budget.
    pub max_iters: usize,
    /// Convergence threshold on the gradient norm relative to `sqrt(dim)`.
    pub tol: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { c: 1.0, max_iters: 5000, tol: 1e-8 }
    }
}

/// A fitted separating hyperplane `<w, x> + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmFit {
    pub weight: Vector,
    pub bias: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_objective: f64,
}

/// Fits the class-weighted squared-hinge linear SVM on samples labeled
/// `true` (positive, target `+1`) or `false` (negative, target `-1`).
///
/// Objective: `0.5 * (||w||^2 + b^2) + C * sum_i wt_i * max(0, 1 - y_i * (<w, x_i> + b))^2`
/// with `wt_i = n / (2 * n_{y_i})`. Descends with the constant step
/// `eta = 1 / (1 + 2 C sum_i wt_i (||x_i||^2 + 1))`, an upper bound on the
/// objective's curvature, so the iteration is stable without line search.
pub fn fit_svm(samples: &[Vector], positive: &[bool], config: &SvmConfig) -> SvmResult<SvmFit> {
    if !(config.c > 0.0) || !config.c.is_finite() {
        return Err(SvmError::InvalidConfig(format!("C must be positive, got {}", config.c)));
    }
    if config.max_iters == 0 {
        return Err(SvmError::InvalidConfig("iteration budget must be positive".into()));
    }
    if !(config.tol >= 0.0) {
        return Err(SvmError::InvalidConfig("tolerance must be non-negative".into()));
    }
    if samples.len() != positive.len() {
        return Err(SvmError::InvalidConfig(format!(
            "{} samples but {} labels",
            samples.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SvmError::MissingClass);
    }
    let dim = samples[0].dim();
    for s in samples {
        if s.dim() != dim {
            return Err(SvmError::Math(MathError::DimensionMismatch {
                expected: dim,
                got: s.dim(),
            }));
        }
    }

    let n = samples.len() as f64;
    let weight_pos = n / (2.0 * n_pos as f64);
    let weight_neg = n / (2.0 * n_neg as f64);
    let sample_weight =
        |i: usize| -> f64 { if positive[i] { weight_pos } else { weight_neg } };

    let curvature: f64 = 1.0
        + 2.0
            * config.c
            * samples
                .iter()
                .enumerate()
                .map(|(i, x)| sample_weight(i) * (x.norm().powi(2) + 1.0))
                .sum::<f64>();
    let step = 1.0 / curvature;

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    let grad_tol = config.tol * (dim as f64 + 1.0).sqrt();

    for iter in 0..config.max_iters {
        iterations = iter + 1;
        let mut grad_w = w.clone();
        let mut grad_b = b;
        for (i, x) in samples.iter().enumerate() {
            let y = if positive[i] { 1.0 } else { -1.0 };
            let margin = 1.0 - y * (dot(&w, x.as_slice()) + b);
            if margin > 0.0 {
                let coeff = -2.0 * config.c * sample_weight(i) * y * margin;
                for (g, xv) in grad_w.iter_mut().zip(x.as_slice()) {
                    *g += coeff * xv;
                }
                grad_b += coeff;
            }
        }
        let grad_norm =
            (grad_w.iter().map(|g| g * g).sum::<f64>() + grad_b * grad_b).sqrt();
        if grad_norm <= grad_tol {
            converged = true;
            break;
        }
        for (wv, g) in w.iter_mut().zip(&grad_w) {
            *wv -= step * g;
        }
        b -= step * grad_b;
    }

    let objective = {
        let mut obj = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b);
        for (i, x) in samples.iter().enumerate() {
            let y = if positive[i] { 1.0 } else { -1.0 };
            let margin = 1.0 - y * (dot(&w, x.as_slice()) + b);
            if margin > 0.0 {
                obj += config.c * sample_weight(i) * margin * margin;
            }
        }
        obj
    };

    Ok(SvmFit {
        weight: Vector::new(w)?,
        bias: b,
        converged,
        iterations,
        final_objective: objective,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn fit_1d(pos: &[f64], neg: &[f64], config: &SvmConfig) -> SvmFit {
        let samples: Vec<Vector> = pos
            .iter()
            .chain(neg)
            .map(|&v| Vector::from_slice(&[v]).unwrap())
            .collect();
        let labels: Vec<bool> =
            pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
        fit_svm(&samples, &labels, config).unwrap()
    }

    #[test]
    fn separates_one_dimensional_clusters() {
        let fit = fit_1d(&[1.0, 1.1, 0.9], &[-1.0, -1.1, -0.9], &SvmConfig::default());
        assert!(fit.weight.get(0) > 0.0, "weight should point toward positives");
        assert!(fit.bias.abs() < 0.2);
        // Perfect classification of the training points.
        assert!(fit.weight.get(0) * 1.0 + fit.bias > 0.0);
        assert!(fit.weight.get(0) * -1.0 + fit.bias < 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn class_weights_balance_skewed_data() {
        // 50 positives at +1, 5 negatives at -1. Without class weights the
        // boundary drifts toward the negatives; with them it stays near 0.
        let pos: Vec<f64> = (0..50).map(|i| 1.0 + 0.001 * i as f64).collect();
        let neg: Vec<f64> = (0..5).map(|i| -1.0 - 0.001 * i as f64).collect();
        let fit = fit_1d(&pos, &neg, &SvmConfig { c: 10.0, ..SvmConfig::default() });
        let boundary = -fit.bias / fit.weight.get(0);
        assert!(boundary.abs() < 0.25, "boundary {boundary} should sit near the midpoint");
    }

    #[test]
    fn gaussian_blobs_yield_accurate_separator() {
        let mut rng = SplitMix64::new(61);
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..200 {
            let pos = rng.next_f64() < 0.5;
            let center = if pos { 2.0 } else { -2.0 };
            samples.push(
                Vector::new((0..6).map(|_| center + rng.next_normal()).collect()).unwrap(),
            );
            labels.push(pos);
        }
        let fit = fit_svm(&samples, &labels, &SvmConfig::default()).unwrap();
        let correct = samples
            .iter()
            .zip(&labels)
            .filter(|(x, &y)| {
                (fit.weight.dot(x).unwrap() + fit.bias > 0.0) == y
            })
            .count();
        assert!(correct >= 195, "only {correct}/200 training points classified correctly");
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = SplitMix64::new(8);
        let samples: Vec<Vector> = (0..40)
            .map(|_| Vector::new((0..3).map(|_| rng.next_normal()).collect()).unwrap())
            .collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let a = fit_svm(&samples, &labels, &SvmConfig::default()).unwrap();
        let b = fit_svm(&samples, &labels, &SvmConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_single_class_input() {
        let samples = vec![Vector::from_slice(&[1.0]).unwrap(); 4];
        let labels = vec![true; 4];
        assert!(matches!(
            fit_svm(&samples, &labels, &SvmConfig::default()),
            Err(SvmError::MissingClass)
        ));
    }
}
