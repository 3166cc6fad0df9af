//! Effective-noise descriptions for the AMP denoising step.
//!
//! By default only the scalar `tau^2 = ||R||_F^2 / (L M)` is tracked. With a
//! strongly heterogeneous population and several antennas the effective
//! noise of a single realization is far from isotropic, so AMP can instead
//! track the full antenna covariance `Sigma = (R^H R)^T / L` and hand the
//! MMSE denoiser its eigendecomposition.
//!
//! Row `n` of `A^H R + X` carries its own signal inside `Sigma`, so each row
//! sees `Sigma` with the rank-one contribution `g g^H / (L ||a_n||^2)` of
//! `g = (A^H R)_n` removed and rescaled by `L / (L - 1)`. The downdated
//! matrix is then shrunk toward its mean eigenvalue, which tames the
//! sampling error of an `M x M` covariance estimated from only `L` rows.
//! Both corrections are applied in the eigenbasis of `Sigma` via
//! Sherman-Morrison, costing `O(M^2)` per row.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::denoiser::{logistic, BgPrior};
use super::TAU2_FLOOR;
use crate::linalg::Planes;

/// Eigenvalues below this fraction of the largest one are raised to it.
const RELATIVE_EIGEN_FLOOR: f64 = 1e-12;

/// Which effective-noise statistic AMP tracks between iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTracking {
    /// `tau^2 I` with `tau^2 = ||R||_F^2 / (L M)`.
    #[default]
    Scalar,
    /// Full `M x M` covariance estimated from the residual.
    Covariance,
}

/// Hermitian positive-definite covariance stored by its eigendecomposition
/// `Sigma = E diag(values) E^H`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariance {
    values: Vec<f64>,
    /// Eigenvectors as columns.
    vectors: Array2<Complex64>,
}

impl NoiseCovariance {
    /// Decomposes a Hermitian matrix; eigenvalues are floored so the result
    /// is strictly positive definite.
    pub fn from_hermitian(sigma: &Array2<Complex64>) -> Self {
        let m = sigma.nrows();
        let mat = DMatrix::from_fn(m, m, |i, j| 0.5 * (sigma[[i, j]] + sigma[[j, i]].conj()));
        let eig = SymmetricEigen::new(mat);
        let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let floor = (top * RELATIVE_EIGEN_FLOOR).max(TAU2_FLOOR);
        let values = eig.eigenvalues.iter().map(|&d| d.max(floor)).collect();
        let vectors = Array2::from_shape_fn((m, m), |(i, j)| eig.eigenvectors[(i, j)]);
        Self { values, vectors }
    }

    /// `Sigma = (R^H R)^T / L` from a residual block.
    pub fn from_residual(r: &Planes) -> Self {
        let (l, m) = (r.rows, r.cols);
        let mut sigma = Array2::zeros((m, m));
        for i in 0..m {
            let (ar, ai) = (&r.re[i * l..(i + 1) * l], &r.im[i * l..(i + 1) * l]);
            for j in i..m {
                let (br, bi) = (&r.re[j * l..(j + 1) * l], &r.im[j * l..(j + 1) * l]);
                let mut re = 0.0;
                let mut im = 0.0;
                for k in 0..l {
                    re += ar[k] * br[k] + ai[k] * bi[k];
                    im += ai[k] * br[k] - ar[k] * bi[k];
                }
                let z = Complex64::new(re, im) / l as f64;
                sigma[[i, j]] = z;
                sigma[[j, i]] = z.conj();
            }
        }
        Self::from_hermitian(&sigma)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.values
    }

    /// `tr(Sigma) / M`.
    pub fn mean_variance(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.dim() as f64
    }

    pub fn matrix(&self) -> Array2<Complex64> {
        let m = self.dim();
        Array2::from_shape_fn((m, m), |(i, j)| {
            (0..m)
                .map(|k| self.vectors[[i, k]] * self.vectors[[j, k]].conj() * self.values[k])
                .sum()
        })
    }

    /// `E^H v`.
    pub fn to_eigenbasis(&self, v: &[Complex64], out: &mut [Complex64]) {
        let m = self.dim();
        for (k, o) in out.iter_mut().enumerate() {
            *o = (0..m).map(|i| self.vectors[[i, k]].conj() * v[i]).sum();
        }
    }

    /// `E w`.
    pub fn from_eigenbasis(&self, w: &[Complex64], out: &mut [Complex64]) {
        let m = self.dim();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..m).map(|k| self.vectors[[i, k]] * w[k]).sum();
        }
    }

    /// `E B E^H` for a matrix `B` expressed in the eigenbasis.
    pub fn rotate_back(&self, b: &Array2<Complex64>) -> Array2<Complex64> {
        let e = &self.vectors;
        let eh = e.t().mapv(|z| z.conj());
        e.dot(b).dot(&eh)
    }

    /// `v^H Sigma^{-1} v`.
    pub fn whitened_norm_sqr(&self, v: &[Complex64]) -> f64 {
        let mut w = vec![Complex64::new(0.0, 0.0); self.dim()];
        self.to_eigenbasis(v, &mut w);
        w.iter().zip(&self.values).map(|(z, d)| z.norm_sqr() / d).sum()
    }
}

/// Covariance context for the denoising step.
///
/// Each row sees `Sigma_n = s (Sigma - g_n g_n^H w_n)`, where `g_n` is its own
/// projection `(A^H R)_n`, `w_n = 1 / (L ||a_n||^2)` and `s = L / (L - 1)`.
/// Removing the row's own share matters when a single strong row dominates
/// the residual: without it that row's signal is mistaken for noise.
#[derive(Debug, Clone, Copy)]
pub struct CovarianceContext<'a> {
    pub cov: &'a NoiseCovariance,
    /// `A^H R`, one row per pilot column.
    pub projections: &'a Planes,
    /// `1 / (L ||a_n||^2)` per pilot column.
    pub weights: &'a [f64],
    pub scale: f64,
    /// Weight `rho` of the isotropic target in `(1 - rho) Sigma_n + rho tr(Sigma_n)/M I`.
    pub shrinkage: f64,
}

/// Effective noise handed to a block denoiser.
#[derive(Debug, Clone, Copy)]
pub struct EffectiveNoise<'a> {
    /// Mean per-antenna variance.
    pub tau2: f64,
    pub covariance: Option<CovarianceContext<'a>>,
}

impl EffectiveNoise<'_> {
    pub fn scalar(tau2: f64) -> Self {
        Self { tau2, covariance: None }
    }
}

/// Floor on `1 - h^H P^{-1} h` for the leave-one-out downdate.
const DOWNDATE_FLOOR: f64 = 1e-12;

/// Per-row scratch space for the leave-one-out MMSE denoiser, working in
/// the eigenbasis of `Sigma` where `Sigma_n = P - h h^H` with `P` diagonal.
#[derive(Debug, Clone)]
pub(crate) struct RowNoise {
    /// Input row in the eigenbasis.
    pub v: Vec<Complex64>,
    /// Output row in the eigenbasis.
    pub out: Vec<Complex64>,
    p: Vec<f64>,
    h: Vec<Complex64>,
    gamma_p: f64,
    ph: Vec<Complex64>,
    bh: Vec<Complex64>,
    wv: Vec<Complex64>,
    qv: Vec<Complex64>,
}

impl RowNoise {
    pub fn new(m: usize) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        Self {
            v: vec![zero; m],
            out: vec![zero; m],
            p: vec![0.0; m],
            h: vec![zero; m],
            gamma_p: 1.0,
            ph: vec![zero; m],
            bh: vec![zero; m],
            wv: vec![zero; m],
            qv: vec![zero; m],
        }
    }

    /// Loads row `n`: `u` is the denoiser input in the standard basis.
    pub fn load(&mut self, ctx: &CovarianceContext<'_>, n: usize, u: &[Complex64], scratch: &mut [Complex64]) {
        let cov = ctx.cov;
        cov.to_eigenbasis(u, &mut self.v);
        ctx.projections.row_into(n, scratch);
        cov.to_eigenbasis(scratch, &mut self.h);
        let m = self.p.len();
        let keep = 1.0 - ctx.shrinkage;
        let own: f64 = self.h.iter().map(|z| z.norm_sqr()).sum::<f64>() * ctx.weights[n];
        let target = ((cov.values.iter().sum::<f64>() - own) / m as f64).max(0.0) * ctx.shrinkage;
        let root = (ctx.scale * ctx.weights[n] * keep).sqrt();
        let mut rho = 0.0;
        for k in 0..m {
            self.p[k] = ctx.scale * (keep * cov.values[k] + target);
            self.h[k] *= root;
            self.ph[k] = self.h[k] / self.p[k];
            rho += self.h[k].norm_sqr() / self.p[k];
        }
        self.gamma_p = (1.0 - rho).max(DOWNDATE_FLOOR);
    }

    /// `ln CN(v; 0, beta I + Sigma_n) - ln CN(v; 0, Sigma_n)`; also fills
    /// `B^{-1} h` and returns `1 - h^H B^{-1} h` with `B = P + beta I`.
    fn log_likelihood_ratio(&mut self, beta: f64) -> (f64, f64) {
        let mut llr = 0.0;
        let mut rho_b = 0.0;
        let mut hpv = Complex64::new(0.0, 0.0);
        let mut hbv = Complex64::new(0.0, 0.0);
        for k in 0..self.p.len() {
            let (p, b) = (self.p[k], self.p[k] + beta);
            self.bh[k] = self.h[k] / b;
            rho_b += self.h[k].norm_sqr() / b;
            llr += -(beta / p).ln_1p() + self.v[k].norm_sqr() * beta / (p * b);
            hpv += self.ph[k].conj() * self.v[k];
            hbv += self.bh[k].conj() * self.v[k];
        }
        let gamma_b = (1.0 - rho_b).max(self.gamma_p);
        llr += self.gamma_p.ln() - gamma_b.ln() + hpv.norm_sqr() / self.gamma_p - hbv.norm_sqr() / gamma_b;
        (llr, gamma_b)
    }

    /// Posterior log-odds of activity for the loaded row.
    pub fn log_odds(&mut self, prior: BgPrior) -> f64 {
        if prior.eps <= 0.0 || prior.beta <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if prior.eps >= 1.0 {
            return f64::INFINITY;
        }
        (prior.eps / (1.0 - prior.eps)).ln() + self.log_likelihood_ratio(prior.beta).0
    }

    /// MMSE estimate of the loaded row into `self.out`, adding its
    /// eigenbasis Jacobian `phi W + phi (1 - phi) (W v)(Q v)^H` to `acc`.
    pub fn denoise(&mut self, prior: BgPrior, acc: &mut Array2<Complex64>) {
        let zero = Complex64::new(0.0, 0.0);
        if prior.eps <= 0.0 || prior.beta <= 0.0 {
            self.out.fill(zero);
            return;
        }
        let beta = prior.beta;
        let (llr, gamma_b) = self.log_likelihood_ratio(beta);
        let phi = if prior.eps >= 1.0 {
            1.0
        } else {
            logistic((prior.eps / (1.0 - prior.eps)).ln() + llr)
        };
        if phi == 0.0 {
            self.out.fill(zero);
            return;
        }
        let m = self.p.len();
        let mut hpv = zero;
        let mut hbv = zero;
        for k in 0..m {
            hpv += self.ph[k].conj() * self.v[k];
            hbv += self.bh[k].conj() * self.v[k];
        }
        for k in 0..m {
            let (p, b) = (self.p[k], self.p[k] + beta);
            self.wv[k] = self.v[k] * (beta / b) + self.bh[k] * (hbv * (beta / gamma_b));
            self.qv[k] = self.v[k] * (beta / (p * b)) + self.ph[k] * (hpv / self.gamma_p) - self.bh[k] * (hbv / gamma_b);
            self.out[k] = self.wv[k] * phi;
            acc[[k, k]] += phi * beta / b;
        }
        let low_rank = phi * beta / gamma_b;
        let spread = phi * (1.0 - phi);
        for i in 0..m {
            let a = self.bh[i] * low_rank;
            let c = self.wv[i] * spread;
            for j in 0..m {
                acc[[i, j]] += a * self.bh[j].conj() + c * self.qv[j].conj();
            }
        }
    }
}
