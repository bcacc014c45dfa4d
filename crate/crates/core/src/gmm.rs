//! Two-component one-dimensional Gaussian mixture fitted by EM.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prep::DEGENERATE_STD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GmmError {
    #[error("need at least 4 points to fit a mixture, got {0}")]
    InsufficientData(usize),
    #[error("data has zero variance")]
    DegenerateData,
    #[error("data contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gmm1d {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
}

impl Gmm1d {
    /// Log of `weight_k * N(x; mean_k, var_k)` for both components.
    fn log_weighted(&self, x: f64) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (k, o) in out.iter_mut().enumerate() {
            let var = self.variances[k];
            *o = self.weights[k].ln() - 0.5 * (2.0 * PI * var).ln() - (x - self.means[k]).powi(2) / (2.0 * var);
        }
        out
    }

    /// Posterior probability of each component for `x`.
    pub fn posteriors(&self, x: f64) -> [f64; 2] {
        let [a, b] = self.log_weighted(x);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let s = ea + eb;
        [ea / s, eb / s]
    }

    pub fn log_likelihood(&self, data: &[f64]) -> f64 {
        data.iter()
            .map(|&x| {
                let [a, b] = self.log_weighted(x);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            })
            .sum()
    }

    /// Index of the component with the lower mean (component 0 on a tie).
    pub fn lower_mean_component(&self) -> usize {
        if self.means[1] < self.means[0] {
            1
        } else {
            0
        }
    }

    /// The same mixture with component indices swapped.
    pub fn swapped(&self) -> Gmm1d {
        Gmm1d {
            weights: [self.weights[1], self.weights[0]],
            means: [self.means[1], self.means[0]],
            variances: [self.variances[1], self.variances[0]],
        }
    }
}

/// Most probable component for `x` and its posterior. Equal posteriors go to
/// component 0.
pub fn gmm_predict(g: &Gmm1d, x: f64) -> (usize, f64) {
    let p = g.posteriors(x);
    if p[1] > p[0] {
        (1, p[1])
    } else {
        (0, p[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub variance_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { tol: 1e-6, max_iter: 200, variance_floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub model: Gmm1d,
    pub iterations: usize,
    /// False when `max_iter` ran out before the tolerance was met.
    pub converged: bool,
    /// Log-likelihood after initialization and after each M-step.
    pub log_likelihood_trace: Vec<f64>,
}

impl EmFit {
    pub fn log_likelihood(&self) -> f64 {
        *self.log_likelihood_trace.last().expect("trace is never empty")
    }
}

/// Linearly interpolated percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fits a two-component mixture. Initialization is deterministic: means at
/// the 25th and 75th percentiles, equal weights, both variances equal to the
/// data variance.
pub fn em_fit(data: &[f64], cfg: &EmConfig) -> Result<EmFit, GmmError> {
    if data.len() < 4 {
        return Err(GmmError::InsufficientData(data.len()));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(GmmError::NonFinite);
    }
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if var.sqrt() < DEGENERATE_STD {
        return Err(GmmError::DegenerateData);
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);

    let v0 = var.max(cfg.variance_floor);
    let mut model = Gmm1d {
        weights: [0.5, 0.5],
        means: [percentile(&sorted, 0.25), percentile(&sorted, 0.75)],
        variances: [v0, v0],
    };
    let mut trace = vec![model.log_likelihood(data)];
    let mut resp = vec![[0.0f64; 2]; data.len()];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        iterations += 1;
        for (r, &x) in resp.iter_mut().zip(data) {
            *r = model.posteriors(x);
        }
        let mut next = model;
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk <= f64::MIN_POSITIVE {
                // An emptied component keeps its parameters with zero weight
                // pinned away from zero so the log stays finite.
                next.weights[k] = f64::MIN_POSITIVE;
                continue;
            }
            let mu = resp.iter().zip(data).map(|(r, x)| r[k] * x).sum::<f64>() / nk;
            let v = resp.iter().zip(data).map(|(r, x)| r[k] * (x - mu).powi(2)).sum::<f64>() / nk;
            next.weights[k] = nk / n;
            next.means[k] = mu;
            next.variances[k] = v.max(cfg.variance_floor);
        }
        let wsum = next.weights[0] + next.weights[1];
        next.weights = [next.weights[0] / wsum, next.weights[1] / wsum];

        let ll = next.log_likelihood(data);
        let prev = *trace.last().unwrap();
        debug_assert!(ll >= prev - 1e-9 * prev.abs().max(1.0), "EM log-likelihood decreased: {prev} -> {ll}");
        model = next;
        trace.push(ll);
        if (ll - prev).abs() < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(EmFit { model, iterations, converged, log_likelihood_trace: trace })
}
