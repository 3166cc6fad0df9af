//! Approximate message passing for single- and multiple-measurement-vector
//! activity detection.
//!
//! Working in units of the effective channel (`Y / sqrt(xi)`), each
//! iteration computes
//!
//! ```text
//! U      = A^H R + X
//! X'     = eta(U)                      (row by row)
//! R'     = Y - A X' + (1/L) R sum_n J_n^T
//! ```
//!
//! where `J_n` is the holomorphic Jacobian `d eta_i / d u_j` of row `n`.
//! The SMV recursion is the `M = 1` case of the same code path. The
//! effective noise level handed to the denoiser is `tau^2 = ||R||_F^2 / (L M)`.

mod denoiser;
mod noise;

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use denoiser::{
    log_likelihood_ratio, mmse_denoise, mmse_jacobian, norm_sqr, posterior_activity, soft_threshold,
    soft_threshold_jacobian, BgPrior, DenoiserSpec, RowJacobian, ThresholdRule,
};
pub(crate) use denoiser::{logistic, soft_threshold_into};
pub use noise::{CovarianceContext, EffectiveNoise, NoiseCovariance, NoiseTracking};
use noise::RowNoise;

use crate::error::{Error, Result};
use crate::linalg::{Planes, SplitMatrix};
use crate::model::ReceivedSignal;
use crate::pilots::PilotMatrix;

/// Lower bound on the effective noise variance handed to denoisers.
pub const TAU2_FLOOR: f64 = 1e-300;

/// A denoiser applied to the whole `rows x M` input block.
pub trait BlockDenoiser: Sync {
    /// Writes `eta(U)` into `out` and returns `sum_n J_n^T` (`M x M`).
    fn denoise_block(&self, u: &Planes, noise: &EffectiveNoise, out: &mut Planes) -> Array2<Complex64>;
}

/// Adds `J^T = diag I + outer conj(v) v^T` to `acc`.
pub(crate) fn accumulate_transposed(acc: &mut Array2<Complex64>, jac: RowJacobian, v: &[Complex64]) {
    let m = v.len();
    if jac.outer != 0.0 {
        for i in 0..m {
            let vi = v[i].conj() * jac.outer;
            for j in 0..m {
                acc[[i, j]] += vi * v[j];
            }
        }
    }
    if jac.diag != 0.0 {
        for i in 0..m {
            acc[[i, i]] += jac.diag;
        }
    }
}

impl BlockDenoiser for DenoiserSpec {
    /// The MMSE denoiser uses the full covariance when one is supplied; the
    /// soft threshold always works with the mean variance `tau^2`.
    fn denoise_block(&self, u: &Planes, noise: &EffectiveNoise, out: &mut Planes) -> Array2<Complex64> {
        if let (DenoiserSpec::MmseBg(prior), Some(ctx)) = (self, &noise.covariance) {
            return covariance_block(prior, u, ctx, out);
        }
        let tau2 = noise.tau2;
        let m = u.cols;
        let mut acc = Array2::zeros((m, m));
        let mut row_in = vec![Complex64::new(0.0, 0.0); m];
        let mut row_out = vec![Complex64::new(0.0, 0.0); m];
        for n in 0..u.rows {
            u.row_into(n, &mut row_in);
            let jac = self.apply_row(n, &row_in, tau2, &mut row_out);
            out.set_row(n, &row_out);
            accumulate_transposed(&mut acc, jac, &row_in);
        }
        acc
    }
}

fn covariance_block(
    prior: &[BgPrior],
    u: &Planes,
    ctx: &CovarianceContext<'_>,
    out: &mut Planes,
) -> Array2<Complex64> {
    let m = u.cols;
    let zero = Complex64::new(0.0, 0.0);
    let mut acc = Array2::zeros((m, m));
    let mut work = RowNoise::new(m);
    let mut row = vec![zero; m];
    let mut scratch = vec![zero; m];
    for n in 0..u.rows {
        u.row_into(n, &mut row);
        work.load(ctx, n, &row, &mut scratch);
        work.denoise(prior[n], &mut acc);
        ctx.cov.from_eigenbasis(&work.out, &mut row);
        out.set_row(n, &row);
    }
    ctx.cov.rotate_back(&acc).t().to_owned()
}

/// `1 / (L ||a_n||^2)` for every pilot column.
pub(crate) fn leave_one_out_weights(pilots: &Array2<Complex64>) -> Vec<f64> {
    let l = pilots.nrows() as f64;
    pilots
        .axis_iter(Axis(1))
        .map(|col| {
            let n2: f64 = col.iter().map(|z| z.norm_sqr()).sum();
            if n2 > 0.0 {
                1.0 / (l * n2)
            } else {
                0.0
            }
        })
        .collect()
}

pub(crate) fn leave_one_out_scale(l: usize) -> f64 {
    if l > 1 {
        l as f64 / (l - 1) as f64
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmpOptions {
    pub max_iters: usize,
    /// Stop when `||X^{t+1} - X^t||_F / ||X^t||_F` falls below this.
    pub stop_tol: f64,
    /// Report divergence when `tau^2` exceeds its initial value by this factor.
    pub divergence_factor: f64,
    pub noise: NoiseTracking,
    pub shrinkage: f64,
}

impl Default for AmpOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            stop_tol: 1e-6,
            divergence_factor: 1e3,
            noise: NoiseTracking::Scalar,
            shrinkage: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmpStatus {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct AmpState {
    /// `rows x M` estimate of the effective channels.
    pub iterate: Array2<Complex64>,
    /// `L x M` residual, in units of `Y / sqrt(xi)`.
    pub residual: Array2<Complex64>,
    /// Completed iterations.
    pub t: usize,
    /// `||R||_F^2 / (L M)` at the current residual.
    pub tau2: f64,
    /// Antenna covariance of the effective noise, when tracked.
    pub covariance: Option<NoiseCovariance>,
    /// Shrinkage applied to `covariance` by the denoiser.
    pub shrinkage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Per-entry `||X^t - X||_F^2 / (rows M)` when ground truth is supplied.
    pub mse: Option<f64>,
    pub tau2: f64,
}

#[derive(Debug, Clone)]
pub struct AmpRun {
    pub state: AmpState,
    pub history: Vec<IterationRecord>,
    pub status: AmpStatus,
}

pub(crate) fn conj_transpose(a: &Array2<Complex64>) -> Array2<Complex64> {
    a.t().mapv(|z| z.conj())
}

/// Runs AMP from `X^0 = 0`, `R^0 = Y / sqrt(xi)`.
///
/// `truth`, when given, is the `rows x M` effective-channel matrix used to
/// fill the MSE column of the history.
pub fn amp_run(
    signal: &ReceivedSignal,
    pilots: &PilotMatrix,
    denoiser: &dyn BlockDenoiser,
    options: &AmpOptions,
    truth: Option<&Array2<Complex64>>,
) -> Result<AmpRun> {
    let l = pilots.rows();
    let rows = pilots.cols();
    let m = signal.y.ncols();
    if signal.y.nrows() != l {
        return Err(Error::Dimension {
            what: "received signal rows vs pilot length",
            expected: l.to_string(),
            got: signal.y.nrows().to_string(),
        });
    }
    if let Some(x) = truth {
        if x.dim() != (rows, m) {
            return Err(Error::Dimension {
                what: "ground-truth effective channels",
                expected: format!("{rows}x{m}"),
                got: format!("{}x{}", x.nrows(), x.ncols()),
            });
        }
    }
    if !(signal.xi > 0.0) {
        return Err(Error::config("pilot energy xi must be positive"));
    }
    let op = SplitMatrix::from_array(pilots.entries());
    let scale = 1.0 / signal.xi.sqrt();
    let y = Planes::from_array(&signal.y.mapv(|z| z * scale));
    let lm = (l * m) as f64;
    let truth = truth.map(Planes::from_array);

    let mut x = Planes::zeros(rows, m);
    let mut x_next = Planes::zeros(rows, m);
    let mut u = Planes::zeros(rows, m);
    let mut proj = Planes::zeros(rows, m);
    let weights = match options.noise {
        NoiseTracking::Scalar => Vec::new(),
        NoiseTracking::Covariance => leave_one_out_weights(pilots.entries()),
    };
    let loo_scale = leave_one_out_scale(l);
    let mut ax = Planes::zeros(l, m);
    let mut r = y.clone();
    let mut r_next = y.clone();
    let tau2_init = (r.norm_sqr() / lm).max(TAU2_FLOOR);
    let mut tau2 = tau2_init;
    let mut history = Vec::with_capacity(options.max_iters);
    let mut status = AmpStatus::MaxIterations;
    let mut t = 0;
    let inv_l = 1.0 / l as f64;

    while t < options.max_iters {
        op.adjoint_apply(&r, &mut proj);
        u.re.iter_mut().zip(proj.re.iter().zip(&x.re)).for_each(|(p, (a, b))| *p = a + b);
        u.im.iter_mut().zip(proj.im.iter().zip(&x.im)).for_each(|(p, (a, b))| *p = a + b);
        let cov = match options.noise {
            NoiseTracking::Scalar => None,
            NoiseTracking::Covariance => Some(NoiseCovariance::from_residual(&r)),
        };
        let noise = EffectiveNoise {
            tau2,
            covariance: cov.as_ref().map(|cov| CovarianceContext {
                cov,
                projections: &proj,
                weights: &weights,
                scale: loo_scale,
                shrinkage: options.shrinkage,
            }),
        };
        let jac_sum_t = denoiser.denoise_block(&u, &noise, &mut x_next);
        op.apply(&x_next, &mut ax);
        for j in 0..m {
            for k in 0..l {
                let mut v = y.get(k, j) - ax.get(k, j);
                let mut ons = Complex64::new(0.0, 0.0);
                for i in 0..m {
                    ons += r.get(k, i) * jac_sum_t[[i, j]];
                }
                v += ons * inv_l;
                r_next.set(k, j, v);
            }
        }

        let prev_norm2 = x.norm_sqr();
        let delta2 = x_next.dist_sqr(&x);
        std::mem::swap(&mut x, &mut x_next);
        std::mem::swap(&mut r, &mut r_next);
        t += 1;
        tau2 = (r.norm_sqr() / lm).max(TAU2_FLOOR);
        let mse = truth.as_ref().map(|tr| x.dist_sqr(tr) / (rows * m) as f64);
        history.push(IterationRecord { iteration: t, mse, tau2 });

        if !tau2.is_finite() || tau2 > options.divergence_factor * tau2_init {
            status = AmpStatus::Diverged;
            break;
        }
        if delta2 == 0.0 || (prev_norm2 > 0.0 && (delta2 / prev_norm2).sqrt() < options.stop_tol) {
            status = AmpStatus::Converged;
            break;
        }
    }

    let covariance = match options.noise {
        NoiseTracking::Scalar => None,
        NoiseTracking::Covariance => Some(NoiseCovariance::from_residual(&r)),
    };
    let (x, r) = (x.to_array(), r.to_array());
    Ok(AmpRun {
        state: AmpState {
            iterate: x,
            residual: r,
            t,
            tau2,
            covariance,
            shrinkage: options.shrinkage,
        },
        history,
        status,
    })
}

/// Per-row detection statistic `||(A^H R + X)_n||_2`.
pub fn detection_statistics(state: &AmpState, pilots: &PilotMatrix) -> Vec<f64> {
    let mut u = conj_transpose(pilots.entries()).dot(&state.residual);
    u += &state.iterate;
    u.axis_iter(Axis(0)).map(|row| row.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()).collect()
}

/// Posterior log-odds that each row is active under its Bernoulli-Gaussian
/// prior, given `(A^H R + X)_n`.
///
/// For a fixed prior this is an increasing function of the row norm when
/// only `tau^2` is tracked, so thresholding it at a common level amounts to
/// per-device thresholds on the norm. When the state carries a covariance,
/// the same leave-one-out noise model used inside AMP is applied.
pub fn activity_log_odds(state: &AmpState, pilots: &PilotMatrix, priors: &[BgPrior]) -> Result<Vec<f64>> {
    let rows = state.iterate.nrows();
    if priors.len() != rows {
        return Err(Error::Dimension {
            what: "prior entries vs pilot columns",
            expected: rows.to_string(),
            got: priors.len().to_string(),
        });
    }
    let m = state.iterate.ncols();
    let g = conj_transpose(pilots.entries()).dot(&state.residual);
    let u = &g + &state.iterate;
    let Some(cov) = &state.covariance else {
        return Ok(u
            .axis_iter(Axis(0))
            .zip(priors)
            .map(|(row, prior)| {
                let norm2 = row.iter().map(|z| z.norm_sqr()).sum::<f64>();
                scalar_log_odds(norm2, m, state.tau2, *prior)
            })
            .collect());
    };
    let projections = Planes::from_array(&g);
    let weights = leave_one_out_weights(pilots.entries());
    let ctx = CovarianceContext {
        cov,
        projections: &projections,
        weights: &weights,
        scale: leave_one_out_scale(pilots.rows()),
        shrinkage: state.shrinkage,
    };
    let mut work = RowNoise::new(m);
    let mut scratch = vec![Complex64::new(0.0, 0.0); m];
    Ok(u.axis_iter(Axis(0))
        .enumerate()
        .map(|(n, row)| {
            work.load(&ctx, n, &row.to_vec(), &mut scratch);
            work.log_odds(priors[n])
        })
        .collect())
}

fn scalar_log_odds(norm2: f64, m: usize, tau2: f64, prior: BgPrior) -> f64 {
    if prior.eps <= 0.0 || prior.beta <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if prior.eps >= 1.0 {
        return f64::INFINITY;
    }
    (prior.eps / (1.0 - prior.eps)).ln() + log_likelihood_ratio(norm2, m, tau2, prior.beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub decisions: Vec<bool>,
    pub statistics: Vec<f64>,
    pub md_count: Option<usize>,
    pub fa_count: Option<usize>,
}

impl DetectionReport {
    /// Declares row `n` active iff `statistic_n > theta_n` (ties are inactive).
    pub fn from_statistics(statistics: Vec<f64>, thresholds: &dyn Fn(usize) -> f64, truth: Option<&[bool]>) -> Self {
        let decisions: Vec<bool> = statistics.iter().enumerate().map(|(n, &s)| s > thresholds(n)).collect();
        let (md_count, fa_count) = match truth {
            Some(t) => {
                let md = t.iter().zip(&decisions).filter(|(&a, &d)| a && !d).count();
                let fa = t.iter().zip(&decisions).filter(|(&a, &d)| !a && d).count();
                (Some(md), Some(fa))
            }
            None => (None, None),
        };
        Self {
            decisions,
            statistics,
            md_count,
            fa_count,
        }
    }
}

pub fn detect(state: &AmpState, pilots: &PilotMatrix, thresholds: &[f64], truth: Option<&[bool]>) -> DetectionReport {
    let stats = detection_statistics(state, pilots);
    assert_eq!(thresholds.len(), stats.len(), "one threshold per row is required");
    DetectionReport::from_statistics(stats, &|n| thresholds[n], truth)
}

/// Writes `iteration,mse,tau2` rows; the MSE field is empty without ground truth.
pub fn write_history_csv(history: &[IterationRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("iteration,mse,tau2\n");
    for rec in history {
        let mse = rec.mse.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{}\n", rec.iteration, mse, rec.tau2));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilots::generate_gaussian_pilots;
    use crate::rng::RandomStream;

    #[test]
    fn zero_signal_is_a_fixed_point() {
        let mut s = RandomStream::new(1);
        let a = generate_gaussian_pilots(20, 50, 0, &mut s);
        for m in [1, 3] {
            let sig = ReceivedSignal {
                y: Array2::zeros((20, m)),
                xi: 1.0,
                sigma2: 0.0,
            };
            let soft = DenoiserSpec::SoftThreshold(ThresholdRule::Scaled { kappa: 1.5 });
            let mmse = DenoiserSpec::MmseBg(vec![BgPrior { eps: 0.1, beta: 1.0 }; 50]);
            for d in [&soft, &mmse] {
                let run = amp_run(&sig, &a, d, &AmpOptions::default(), None).unwrap();
                assert!(run.state.iterate.iter().all(|z| z.norm() == 0.0));
                assert_eq!(run.status, AmpStatus::Converged);
                assert!(run.state.tau2 > 0.0);
            }
        }
    }

    #[test]
    fn detection_tie_rule_and_extremes() {
        let r = DetectionReport::from_statistics(vec![0.5, 1.0, 2.0], &|_| 1.0, Some(&[true, true, false]));
        assert_eq!(r.decisions, vec![false, false, true]);
        assert_eq!(r.md_count, Some(2));
        assert_eq!(r.fa_count, Some(1));
        let all = DetectionReport::from_statistics(vec![1e-9, 3.0], &|_| f64::MIN_POSITIVE, None);
        assert!(all.decisions.iter().all(|&d| d));
        let none = DetectionReport::from_statistics(vec![1e9, 3.0], &|_| f64::INFINITY, None);
        assert!(none.decisions.iter().all(|&d| !d));
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut s = RandomStream::new(1);
        let a = generate_gaussian_pilots(20, 50, 0, &mut s);
        let sig = ReceivedSignal {
            y: Array2::zeros((19, 1)),
            xi: 1.0,
            sigma2: 0.0,
        };
        let d = DenoiserSpec::SoftThreshold(ThresholdRule::Scaled { kappa: 1.0 });
        assert!(amp_run(&sig, &a, &d, &AmpOptions::default(), None).is_err());
    }
}
