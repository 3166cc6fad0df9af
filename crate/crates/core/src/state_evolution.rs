//! State evolution: the scalar MSE map that tracks the effective noise
//! variance of AMP, closed-form missed-detection and false-alarm
//! predictions, and threshold calibration.
//!
//! Expectations are Monte Carlo averages over draws fixed at construction
//! time, so [`MseMap::step`] is a deterministic function of `tau2`.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::amp::{BgPrior, DenoiserSpec, ThresholdRule};
use crate::error::{Error, Result};
use crate::model::{link_budget, SystemConfig};
use crate::rng::{Purpose, RandomStream};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

pub const DEFAULT_MC_SAMPLES: usize = 100_000;
pub const MIN_MC_SAMPLES: usize = 10_000;
pub const DEFAULT_SE_SEED: u64 = 0x5E;

/// Signal population seen by state evolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SePrior {
    /// One `(eps_n, beta_n)` pair per device, or a single representative entry.
    pub population: Vec<BgPrior>,
    /// `N / L`.
    pub omega: f64,
    /// `sigma^2 / xi`.
    pub noise_ratio: f64,
}

impl SePrior {
    pub fn new(population: Vec<BgPrior>, omega: f64, noise_ratio: f64) -> Result<Self> {
        if population.is_empty() {
            return Err(Error::config("state evolution needs a non-empty population"));
        }
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::config(format!("omega must be positive, got {omega}")));
        }
        if !(noise_ratio >= 0.0 && noise_ratio.is_finite()) {
            return Err(Error::config(format!("noise ratio must be non-negative, got {noise_ratio}")));
        }
        for p in &population {
            if !(0.0..=1.0).contains(&p.eps) || !(p.beta >= 0.0 && p.beta.is_finite()) {
                return Err(Error::config(format!("invalid prior entry eps={} beta={}", p.eps, p.beta)));
            }
        }
        Ok(Self {
            population,
            omega,
            noise_ratio,
        })
    }

    pub fn uniform(eps: f64, beta: f64, omega: f64, noise_ratio: f64) -> Result<Self> {
        Self::new(vec![BgPrior { eps, beta }], omega, noise_ratio)
    }

    /// The population of a scenario with given large-scale gains.
    pub fn from_config(config: &SystemConfig, large_scale: &[f64]) -> Result<Self> {
        if large_scale.len() != config.devices {
            return Err(Error::Dimension {
                what: "large-scale gains",
                expected: config.devices.to_string(),
                got: large_scale.len().to_string(),
            });
        }
        let population = large_scale
            .iter()
            .enumerate()
            .map(|(n, &beta)| BgPrior {
                eps: config.eps.get(n),
                beta,
            })
            .collect();
        let omega = config.devices as f64 / config.pilot_length as f64;
        Self::new(population, omega, link_budget(config).noise_ratio())
    }

    pub fn eps_bar(&self) -> f64 {
        self.population.iter().map(|p| p.eps).sum::<f64>() / self.population.len() as f64
    }

    /// `E||X_n||^2 / M` averaged over the population.
    pub fn signal_energy(&self) -> f64 {
        self.population.iter().map(|p| p.eps * p.beta).sum::<f64>() / self.population.len() as f64
    }

    /// Effective noise variance of the first iteration, where `x^0 = 0`.
    pub fn initial_tau2(&self) -> f64 {
        self.noise_ratio + self.omega * self.signal_energy()
    }
}

/// A row denoiser as seen by state evolution. `x` is the true row, which
/// only oracle denoisers look at.
pub trait SeDenoiser: Sync {
    fn estimate(&self, row: usize, v: &[Complex64], x: &[Complex64], tau2: f64, out: &mut [Complex64]);

    /// Number of population rows the denoiser is parameterized for, if fixed.
    fn rows(&self) -> Option<usize> {
        None
    }
}

impl SeDenoiser for DenoiserSpec {
    fn estimate(&self, row: usize, v: &[Complex64], _x: &[Complex64], tau2: f64, out: &mut [Complex64]) {
        self.apply_row(row, v, tau2, out);
    }

    fn rows(&self) -> Option<usize> {
        DenoiserSpec::rows(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeTrace {
    /// `tau_t^2` for `t = 0, 1, ...`, starting from the initial value.
    pub tau2: Vec<f64>,
    pub converged: bool,
    pub fixed_point: f64,
}

impl SeTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["iteration", "tau2"]).map_err(csv_err)?;
        for (t, v) in self.tau2.iter().enumerate() {
            w.write_record([t.to_string(), format!("{v:e}")]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// The MSE map `tau^2 -> sigma^2/xi + omega E||eta(X + tau V) - X||^2 / M`
/// with its expectation frozen onto a fixed set of draws.
///
/// Sample `s` is assigned to population entry `s mod len`, and the
/// activity indicator is integrated out exactly, so each sample contributes
/// `eps ||eta(X + tau V) - X||^2 + (1 - eps) ||eta(tau V)||^2`.
#[derive(Debug, Clone)]
pub struct MseMap {
    prior: SePrior,
    antennas: usize,
    samples: usize,
    signal: Vec<Complex64>,
    noise: Vec<Complex64>,
}

impl MseMap {
    pub fn new(prior: SePrior, antennas: usize, samples: usize, seed: u64) -> Result<Self> {
        if antennas == 0 {
            return Err(Error::config("M must be at least 1"));
        }
        if samples < MIN_MC_SAMPLES {
            return Err(Error::config(format!(
                "state evolution needs at least {MIN_MC_SAMPLES} Monte Carlo samples, got {samples}"
            )));
        }
        let mut stream = RandomStream::substream(seed, 0, Purpose::StateEvolution);
        let len = samples * antennas;
        let signal = (0..len).map(|_| stream.complex_normal(1.0)).collect();
        let noise = (0..len).map(|_| stream.complex_normal(1.0)).collect();
        Ok(Self {
            prior,
            antennas,
            samples,
            signal,
            noise,
        })
    }

    pub fn with_defaults(prior: SePrior, antennas: usize) -> Result<Self> {
        Self::new(prior, antennas, DEFAULT_MC_SAMPLES, DEFAULT_SE_SEED)
    }

    pub fn prior(&self) -> &SePrior {
        &self.prior
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    fn check(&self, denoiser: &dyn SeDenoiser) -> Result<()> {
        match denoiser.rows() {
            Some(r) if r != self.prior.population.len() => Err(Error::Dimension {
                what: "denoiser rows vs state-evolution population",
                expected: self.prior.population.len().to_string(),
                got: r.to_string(),
            }),
            _ => Ok(()),
        }
    }

    /// Runs every sample through the denoiser, with `color` mapping a
    /// standard noise draw to the effective noise, and hands each weighted
    /// error vector to `sink`.
    fn sweep(
        &self,
        denoiser: &dyn SeDenoiser,
        tau2: f64,
        color: impl Fn(&[Complex64], &mut [Complex64]),
        mut sink: impl FnMut(f64, &[Complex64]),
    ) {
        let m = self.antennas;
        let pop = &self.prior.population;
        let mut x = vec![ZERO; m];
        let mut w = vec![ZERO; m];
        let mut v = vec![ZERO; m];
        let mut est = vec![ZERO; m];
        let zeros = vec![ZERO; m];
        for s in 0..self.samples {
            let row = s % pop.len();
            let p = pop[row];
            color(&self.noise[s * m..(s + 1) * m], &mut w);
            if p.eps > 0.0 {
                let sb = p.beta.sqrt();
                for k in 0..m {
                    x[k] = self.signal[s * m + k] * sb;
                    v[k] = x[k] + w[k];
                }
                denoiser.estimate(row, &v, &x, tau2, &mut est);
                for k in 0..m {
                    est[k] -= x[k];
                }
                sink(p.eps, &est);
            }
            if p.eps < 1.0 {
                denoiser.estimate(row, &w, &zeros, tau2, &mut est);
                sink(1.0 - p.eps, &est);
            }
        }
    }

    /// One application of the scalar MSE map.
    pub fn step(&self, tau2: f64, denoiser: &dyn SeDenoiser) -> f64 {
        let tau = tau2.sqrt();
        let mut acc = 0.0;
        self.sweep(
            denoiser,
            tau2,
            |z, w| {
                for (o, g) in w.iter_mut().zip(z) {
                    *o = g * tau;
                }
            },
            |weight, e| acc += weight * e.iter().map(|z| z.norm_sqr()).sum::<f64>(),
        );
        self.prior.noise_ratio + self.prior.omega * acc / (self.samples * self.antennas) as f64
    }

    /// The full `M x M` recursion `Sigma -> sigma^2/xi I + omega E[e e^H]`
    /// with effective noise `CN(0, Sigma)`. The denoiser is handed the
    /// average variance `tr(Sigma) / M`.
    pub fn step_matrix(&self, sigma: &Array2<Complex64>, denoiser: &dyn SeDenoiser) -> Result<Array2<Complex64>> {
        let m = self.antennas;
        if sigma.dim() != (m, m) {
            return Err(Error::Dimension {
                what: "noise covariance",
                expected: format!("{m}x{m}"),
                got: format!("{:?}", sigma.dim()),
            });
        }
        let factor = DMatrix::from_fn(m, m, |i, j| sigma[[i, j]])
            .cholesky()
            .ok_or_else(|| Error::Numerical("noise covariance is not positive definite".into()))?
            .unpack();
        let tau2 = (0..m).map(|i| sigma[[i, i]].re).sum::<f64>() / m as f64;
        let mut acc = Array2::<Complex64>::zeros((m, m));
        self.sweep(
            denoiser,
            tau2,
            |z, w| {
                for (i, o) in w.iter_mut().enumerate() {
                    *o = (0..=i).map(|j| factor[(i, j)] * z[j]).sum();
                }
            },
            |weight, e| {
                for i in 0..m {
                    for j in 0..m {
                        acc[[i, j]] += e[i] * e[j].conj() * weight;
                    }
                }
            },
        );
        let scale = self.prior.omega / self.samples as f64;
        Ok(Array2::from_shape_fn((m, m), |(i, j)| {
            let diag = if i == j { self.prior.noise_ratio } else { 0.0 };
            acc[[i, j]] * scale + diag
        }))
    }

    /// Iterates the MSE map from the `x^0 = 0` initialization until the
    /// relative change drops below `tol` or `t_max` steps have been taken.
    pub fn iterate(&self, denoiser: &dyn SeDenoiser, t_max: usize, tol: f64) -> Result<SeTrace> {
        if t_max == 0 {
            return Err(Error::config("t_max must be at least 1"));
        }
        self.check(denoiser)?;
        let mut cur = self.prior.initial_tau2();
        let mut tau2 = vec![cur];
        let mut converged = false;
        for _ in 0..t_max {
            let next = self.step(cur, denoiser);
            if !next.is_finite() {
                return Err(Error::Numerical(format!("state evolution produced tau2 = {next}")));
            }
            tau2.push(next);
            let done = (next - cur).abs() < tol * cur;
            cur = next;
            if done {
                converged = true;
                break;
            }
        }
        Ok(SeTrace {
            tau2,
            converged,
            fixed_point: cur,
        })
    }
}

/// One MSE-map step with default sample count and seed.
pub fn se_step(tau2: f64, prior: &SePrior, antennas: usize, denoiser: &dyn SeDenoiser, mc_samples: usize) -> Result<f64> {
    if !(tau2 > 0.0) {
        return Err(Error::config(format!("tau2 must be positive, got {tau2}")));
    }
    let map = MseMap::new(prior.clone(), antennas, mc_samples, DEFAULT_SE_SEED)?;
    map.check(denoiser)?;
    Ok(map.step(tau2, denoiser))
}

pub fn se_iterate(
    prior: &SePrior,
    antennas: usize,
    denoiser: &dyn SeDenoiser,
    t_max: usize,
    tol: f64,
) -> Result<SeTrace> {
    MseMap::with_defaults(prior.clone(), antennas)?.iterate(denoiser, t_max, tol)
}

/// Off-diagonal Frobenius mass relative to the trace.
pub fn isotropy_defect(sigma: &Array2<Complex64>) -> f64 {
    let (m, _) = sigma.dim();
    let trace: f64 = (0..m).map(|i| sigma[[i, i]].re).sum();
    let off: f64 = sigma
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, z)| z.norm_sqr())
        .sum();
    off.sqrt() / trace.abs()
}

/// Regularized upper incomplete gamma `Q(a, x)` with the boundary cases
/// filled in.
fn upper_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else {
        gamma_ur(a, x)
    }
}

fn lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        gamma_lr(a, x)
    }
}

/// `(P_MD, P_FA)` of the test `||v|| > theta` on the decoupled channel
/// `v = x + tau V` with `x ~ CN(0, beta I_M)` when active.
pub fn predict_md_fa(tau2: f64, theta: f64, prior: BgPrior, antennas: usize) -> (f64, f64) {
    let m = antennas as f64;
    let t2 = theta * theta;
    let p_fa = upper_gamma(m, t2 / tau2);
    let p_md = lower_gamma(m, t2 / (prior.beta + tau2));
    (p_md, p_fa)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    Equalize,
    TargetFa(f64),
}

pub const CALIBRATION_TOL: f64 = 1e-8;

/// Threshold on `||v||` meeting `mode` for a single device class.
pub fn calibrate_threshold(tau2: f64, prior: BgPrior, antennas: usize, mode: CalibrationMode) -> Result<f64> {
    if !(tau2 > 0.0) || antennas == 0 {
        return Err(Error::config("calibration needs tau2 > 0 and M >= 1"));
    }
    let hi = 10.0 * (prior.beta + tau2).sqrt() * (antennas as f64).sqrt();
    // `gap` is increasing in theta with its root at the answer.
    let gap = |theta: f64| {
        let (md, fa) = predict_md_fa(tau2, theta, prior, antennas);
        match mode {
            CalibrationMode::Equalize => md - fa,
            CalibrationMode::TargetFa(target) => target - fa,
        }
    };
    if let CalibrationMode::TargetFa(target) = mode {
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::config(format!("target false-alarm rate must lie in (0, 1), got {target}")));
        }
    }
    if gap(hi) < 0.0 {
        return Err(Error::Numerical(format!(
            "no threshold crossing in [0, {hi:e}] for beta={} tau2={tau2:e}",
            prior.beta
        )));
    }
    let (mut lo, mut up) = (0.0, hi);
    while up - lo > 1e-15 * hi {
        let mid = 0.5 * (lo + up);
        if mid <= lo || mid >= up {
            break;
        }
        if gap(mid) < 0.0 {
            lo = mid;
        } else {
            up = mid;
        }
    }
    let theta = if gap(lo).abs() <= gap(up).abs() { lo } else { up };
    if gap(theta).abs() >= CALIBRATION_TOL {
        return Err(Error::Numerical(format!(
            "threshold bisection stalled at |gap| = {:e}",
            gap(theta).abs()
        )));
    }
    Ok(theta)
}

/// Per-device thresholds, calibrating each distinct `beta` once.
pub fn calibrate_population(tau2: f64, population: &[BgPrior], antennas: usize, mode: CalibrationMode) -> Result<Vec<f64>> {
    let mut cache: HashMap<(u64, u64), f64> = HashMap::new();
    population
        .iter()
        .map(|p| {
            let key = (p.beta.to_bits(), p.eps.to_bits());
            if let Some(&t) = cache.get(&key) {
                return Ok(t);
            }
            let t = calibrate_threshold(tau2, *p, antennas, mode)?;
            cache.insert(key, t);
            Ok(t)
        })
        .collect()
}

/// System-level operating point predicted by state evolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemPrediction {
    pub tau2: f64,
    pub thresholds: Vec<f64>,
    /// Missed-detection rate averaged over active devices.
    pub p_md: f64,
    /// False-alarm rate averaged over inactive devices.
    pub p_fa: f64,
}

/// Averages the per-device predictions at the given thresholds.
pub fn predict_system(tau2: f64, population: &[BgPrior], thresholds: &[f64], antennas: usize) -> (f64, f64) {
    let (mut md, mut fa, mut wa, mut wi) = (0.0, 0.0, 0.0, 0.0);
    for (p, &t) in population.iter().zip(thresholds) {
        let (pm, pf) = predict_md_fa(tau2, t, *p, antennas);
        md += p.eps * pm;
        fa += (1.0 - p.eps) * pf;
        wa += p.eps;
        wi += 1.0 - p.eps;
    }
    (
        if wa > 0.0 { md / wa } else { 0.0 },
        if wi > 0.0 { fa / wi } else { 0.0 },
    )
}

pub fn predict_operating_point(tau2: f64, population: &[BgPrior], antennas: usize, mode: CalibrationMode) -> Result<SystemPrediction> {
    let thresholds = calibrate_population(tau2, population, antennas, mode)?;
    let (p_md, p_fa) = predict_system(tau2, population, &thresholds, antennas);
    Ok(SystemPrediction {
        tau2,
        thresholds,
        p_md,
        p_fa,
    })
}

/// Picks the soft-threshold multiplier `kappa` from `grid` with the
/// smallest state-evolution fixed point.
pub fn tune_soft_threshold(map: &MseMap, grid: &[f64], t_max: usize, tol: f64) -> Result<(f64, SeTrace)> {
    let mut best: Option<(f64, SeTrace)> = None;
    for &kappa in grid {
        let d = DenoiserSpec::SoftThreshold(ThresholdRule::Scaled { kappa });
        let trace = map.iterate(&d, t_max, tol)?;
        if best.as_ref().is_none_or(|(_, b)| trace.fixed_point < b.fixed_point) {
            best = Some((kappa, trace));
        }
    }
    best.ok_or_else(|| Error::config("empty kappa grid"))
}
