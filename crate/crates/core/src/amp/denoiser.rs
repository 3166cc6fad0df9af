//! Row denoisers for AMP and their Wirtinger Jacobians.
//!
//! Both denoisers act on a length-`M` row `v` and are radial: the output is
//! a real multiple of `v`. Their holomorphic Jacobian `d eta_i / d v_j`
//! therefore always has the form `diag * I + outer * v v^H`, which is what
//! [`RowJacobian`] stores.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Bernoulli-Gaussian prior `x ~ eps CN(0, beta I) + (1 - eps) delta_0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BgPrior {
    pub eps: f64,
    pub beta: f64,
}

/// Jacobian `diag * I + outer * v v^H` of a radial row denoiser at input `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowJacobian {
    pub diag: f64,
    pub outer: f64,
}

impl RowJacobian {
    pub const ZERO: RowJacobian = RowJacobian { diag: 0.0, outer: 0.0 };

    pub fn matrix(&self, v: &[Complex64]) -> Array2<Complex64> {
        let m = v.len();
        Array2::from_shape_fn((m, m), |(i, j)| {
            let d = if i == j { self.diag } else { 0.0 };
            Complex64::new(d, 0.0) + v[i] * v[j].conj() * self.outer
        })
    }

    /// `tr(J) / M`.
    pub fn trace_mean(&self, v: &[Complex64]) -> f64 {
        self.diag + self.outer * norm_sqr(v) / v.len() as f64
    }
}

pub fn norm_sqr(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// `(v - theta v / ||v||) 1{||v|| > theta}`.
pub fn soft_threshold(v: &[Complex64], theta: f64) -> Vec<Complex64> {
    let mut out = vec![ZERO; v.len()];
    soft_threshold_into(v, theta, &mut out);
    out
}

pub(crate) fn soft_threshold_into(v: &[Complex64], theta: f64, out: &mut [Complex64]) -> RowJacobian {
    let norm = norm_sqr(v).sqrt();
    if norm > theta {
        let scale = 1.0 - theta / norm;
        for (o, x) in out.iter_mut().zip(v) {
            *o = x * scale;
        }
        RowJacobian {
            diag: scale,
            outer: theta / (2.0 * norm * norm * norm),
        }
    } else {
        out.fill(ZERO);
        // At the kink the inactive-side (zero) derivative is used.
        RowJacobian::ZERO
    }
}

pub fn soft_threshold_jacobian(v: &[Complex64], theta: f64) -> RowJacobian {
    let mut scratch = vec![ZERO; v.len()];
    soft_threshold_into(v, theta, &mut scratch)
}

/// `ln [ CN(v; 0, (beta + tau2) I) / CN(v; 0, tau2 I) ]` for a row with
/// squared norm `norm2` and `m` entries.
pub fn log_likelihood_ratio(norm2: f64, m: usize, tau2: f64, beta: f64) -> f64 {
    if beta <= 0.0 {
        return 0.0;
    }
    let total = beta + tau2;
    // m ln(tau2 / total) written with ln_1p for small beta / tau2.
    -(m as f64) * (beta / tau2).ln_1p() + norm2 * beta / (tau2 * total)
}

/// Posterior probability that the row is active, given `||v||^2 = norm2`.
pub fn posterior_activity(norm2: f64, m: usize, tau2: f64, prior: BgPrior) -> f64 {
    if prior.eps <= 0.0 || prior.beta <= 0.0 {
        return 0.0;
    }
    if prior.eps >= 1.0 {
        return 1.0;
    }
    let log_odds = (prior.eps / (1.0 - prior.eps)).ln() + log_likelihood_ratio(norm2, m, tau2, prior.beta);
    logistic(log_odds)
}

pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `E[X | X + tau V = v]` under a Bernoulli-Gaussian prior and `V ~ CN(0, I)`.
pub fn mmse_denoise(v: &[Complex64], tau2: f64, prior: BgPrior) -> Vec<Complex64> {
    let mut out = vec![ZERO; v.len()];
    mmse_denoise_into(v, tau2, prior, &mut out);
    out
}

pub(crate) fn mmse_denoise_into(v: &[Complex64], tau2: f64, prior: BgPrior, out: &mut [Complex64]) -> RowJacobian {
    let norm2 = norm_sqr(v);
    let phi = posterior_activity(norm2, v.len(), tau2, prior);
    if phi == 0.0 {
        out.fill(ZERO);
        return RowJacobian::ZERO;
    }
    let wiener = prior.beta / (prior.beta + tau2);
    let gain = phi * wiener;
    for (o, x) in out.iter_mut().zip(v) {
        *o = x * gain;
    }
    let slope = prior.beta / (tau2 * (prior.beta + tau2));
    RowJacobian {
        diag: gain,
        outer: wiener * slope * phi * (1.0 - phi),
    }
}

pub fn mmse_jacobian(v: &[Complex64], tau2: f64, prior: BgPrior) -> RowJacobian {
    let mut scratch = vec![ZERO; v.len()];
    mmse_denoise_into(v, tau2, prior, &mut scratch)
}

/// How the soft-threshold level is chosen at each iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `theta = kappa * sqrt(M tau^2)`, i.e. `kappa` times the RMS norm of the effective noise row.
    Scaled { kappa: f64 },
    /// Fixed per-row thresholds.
    PerDevice(Vec<f64>),
}

impl ThresholdRule {
    pub fn theta(&self, row: usize, tau2: f64, antennas: usize) -> f64 {
        match self {
            ThresholdRule::Scaled { kappa } => kappa * (antennas as f64 * tau2).sqrt(),
            ThresholdRule::PerDevice(t) => t[row],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserSpec {
    SoftThreshold(ThresholdRule),
    /// Per-row Bernoulli-Gaussian priors.
    MmseBg(Vec<BgPrior>),
}

impl DenoiserSpec {
    /// Denoise row `row` with effective noise variance `tau2`, writing the
    /// result to `out` and returning the Jacobian at `v`.
    pub fn apply_row(&self, row: usize, v: &[Complex64], tau2: f64, out: &mut [Complex64]) -> RowJacobian {
        match self {
            DenoiserSpec::SoftThreshold(rule) => soft_threshold_into(v, rule.theta(row, tau2, v.len()), out),
            DenoiserSpec::MmseBg(prior) => mmse_denoise_into(v, tau2, prior[row], out),
        }
    }

    pub fn denoise(&self, row: usize, v: &[Complex64], tau2: f64) -> Vec<Complex64> {
        let mut out = vec![ZERO; v.len()];
        self.apply_row(row, v, tau2, &mut out);
        out
    }

    /// Full `M x M` Jacobian at `v` and its trace average.
    pub fn jacobian(&self, row: usize, v: &[Complex64], tau2: f64) -> (Array2<Complex64>, f64) {
        let mut scratch = vec![ZERO; v.len()];
        let j = self.apply_row(row, v, tau2, &mut scratch);
        (j.matrix(v), j.trace_mean(v))
    }

    pub fn rows(&self) -> Option<usize> {
        match self {
            DenoiserSpec::SoftThreshold(ThresholdRule::PerDevice(t)) => Some(t.len()),
            DenoiserSpec::SoftThreshold(_) => None,
            DenoiserSpec::MmseBg(p) => Some(p.len()),
        }
    }
}
