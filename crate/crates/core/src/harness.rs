//! Monte Carlo experiment engine.
//!
//! An [`ExperimentSpec`] names a scenario, one swept parameter and a trial
//! count. [`run_experiment`] runs every trial on its own substreams of the
//! master seed, pools the per-device detection statistics of all trials at
//! a sweep value and equalizes missed detection and false alarm on the
//! pooled sample. Trials at different sweep values share their trial
//! indices, so the same device drops and activity patterns are reused
//! across the sweep.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aloha::{
    density_evolution, density_evolution_threshold, simulate_csa, simulate_grant_based, CaptureMode,
    DegreeDistribution,
};
use crate::amp::{
    activity_log_odds, amp_run, detection_statistics, log_likelihood_ratio, AmpOptions, AmpStatus, BgPrior,
    DenoiserSpec, NoiseTracking, ThresholdRule,
};
use crate::embedded::{detect_embedded, draw_embedded, EmbeddedDenoiser};
use crate::error::{Error, Result};
use crate::model::{
    draw_activity, draw_channels, draw_large_scale, link_budget, synthesize_received, ActivityProbabilities,
    PathLossModel, SystemConfig,
};
use crate::pilots::{generate_gaussian_pilots, PilotMatrix};
use crate::rng::{Purpose, RandomStream};
use crate::state_evolution::{
    predict_operating_point, tune_soft_threshold, CalibrationMode, MseMap, SePrior, SeTrace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Example1,
    Example2Smv,
    Example3Mmv,
    Embedded,
    Csa,
    DensityEvolution,
    Custom,
}

impl Scenario {
    pub fn is_detection(self) -> bool {
        matches!(self, Scenario::Example2Smv | Scenario::Example3Mmv | Scenario::Embedded | Scenario::Custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    /// Pilot length, or the preamble count in the grant-based scenario.
    #[serde(rename = "L")]
    PilotLength,
    #[serde(rename = "M")]
    Antennas,
    #[serde(rename = "N")]
    Devices,
    #[serde(rename = "J")]
    Bits,
    #[serde(rename = "eps")]
    Eps,
    #[serde(rename = "tx_power_dbm")]
    TxPower,
    /// Per-symbol SNR at unit large-scale gain; sets the transmit power.
    #[serde(rename = "snr_db")]
    Snr,
    /// Active devices in the grant-based scenario.
    #[serde(rename = "K")]
    ActiveDevices,
    /// Users per slot in coded slotted ALOHA.
    #[serde(rename = "G")]
    Load,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::PilotLength => "L",
            SweepParam::Antennas => "M",
            SweepParam::Devices => "N",
            SweepParam::Bits => "J",
            SweepParam::Eps => "eps",
            SweepParam::TxPower => "tx_power_dbm",
            SweepParam::Snr => "snr_db",
            SweepParam::ActiveDevices => "K",
            SweepParam::Load => "G",
        }
    }

    fn integral(self) -> bool {
        matches!(
            self,
            SweepParam::PilotLength | SweepParam::Antennas | SweepParam::Devices | SweepParam::Bits | SweepParam::ActiveDevices
        )
    }

    fn allowed(self, scenario: Scenario) -> bool {
        use SweepParam::*;
        match scenario {
            Scenario::Example1 => matches!(self, PilotLength | ActiveDevices),
            Scenario::Csa | Scenario::DensityEvolution => self == Load,
            Scenario::Embedded => !matches!(self, ActiveDevices | Load),
            _ => !matches!(self, ActiveDevices | Load | Bits),
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use SweepParam::*;
        [PilotLength, Antennas, Devices, Bits, Eps, TxPower, Snr, ActiveDevices, Load]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown sweep parameter {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl Sweep {
    pub fn new(param: SweepParam, values: Vec<f64>) -> Self {
        Self { param, values }
    }
}

/// Parses `name=v1,v2,...`.
impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, list) = s
            .split_once('=')
            .ok_or_else(|| Error::config(format!("sweep {s:?} is not of the form name=v1,v2,...")))?;
        let param: SweepParam = name.trim().parse()?;
        let values = list
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("sweep value {v:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { param, values })
    }
}

/// Denoiser family; the per-trial [`DenoiserSpec`] is built from the
/// realized large-scale gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserChoice {
    /// Soft thresholding at `kappa sqrt(M tau^2)`; `None` tunes `kappa` by
    /// state evolution at every sweep value.
    Soft { kappa: Option<f64> },
    Mmse,
}

impl FromStr for DenoiserChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(DenoiserChoice::Soft { kappa: None }),
            "mmse" => Ok(DenoiserChoice::Mmse),
            _ => Err(Error::config(format!("unknown denoiser {s:?}, expected soft or mmse"))),
        }
    }
}

/// What is thresholded to declare a device active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionStatistic {
    /// `||(A^H R + X)_n||`.
    Norm,
    /// Posterior activity log-odds under the device's prior.
    LogOdds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSettings {
    /// `K` in the grant-based scenario.
    pub active_devices: usize,
    pub frame_slots: usize,
    pub degrees: DegreeDistribution,
    pub max_sic_rounds: usize,
    pub de_iters: usize,
    /// Erasure level below which density evolution counts as decoded.
    pub de_tol: f64,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        Self {
            active_devices: 100,
            frame_slots: 200,
            degrees: DegreeDistribution::regular(2),
            max_sic_rounds: 10_000,
            de_iters: 100_000,
            de_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub sweep: Sweep,
    pub trials: usize,
    pub base_config: SystemConfig,
    pub denoiser: DenoiserChoice,
    pub statistic: DetectionStatistic,
    pub amp: AmpOptions,
    #[serde(default)]
    pub protocol: ProtocolSettings,
    /// Also report the state-evolution operating point at each sweep value.
    #[serde(default)]
    pub se_prediction: bool,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
}

pub const PRESETS: &[&str] = &[
    "example1",
    "example2_smv",
    "example2_smv_desk",
    "example3_mmv",
    "example3_mmv_desk",
    "embedded",
    "csa",
    "density_evolution",
];

fn grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step).round() as usize;
    (0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect()
}

fn mmv_options() -> AmpOptions {
    AmpOptions {
        noise: NoiseTracking::Covariance,
        shrinkage: 0.9,
        ..AmpOptions::default()
    }
}

impl ExperimentSpec {
    fn base(scenario: Scenario, sweep: Sweep, trials: usize, config: SystemConfig) -> Self {
        Self {
            scenario,
            sweep,
            trials,
            base_config: config,
            denoiser: DenoiserChoice::Mmse,
            statistic: DetectionStatistic::LogOdds,
            amp: AmpOptions::default(),
            protocol: ProtocolSettings::default(),
            se_prediction: false,
            output_path: None,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "example1" => Ok(Self::example1()),
            "example2_smv" => Ok(Self::example2_smv()),
            "example2_smv_desk" => Ok(Self::example2_smv_desk()),
            "example3_mmv" => Ok(Self::example3_mmv()),
            "example3_mmv_desk" => Ok(Self::example3_mmv_desk()),
            "embedded" => Ok(Self::embedded()),
            "csa" => Ok(Self::csa()),
            "density_evolution" => Ok(Self::density_evolution()),
            _ => Err(Error::config(format!("unknown preset {name:?}; known: {}", PRESETS.join(", ")))),
        }
    }

    /// Grant-based access of `K = 100` devices over `L` preambles.
    pub fn example1() -> Self {
        let values = vec![
            100.0, 200.0, 300.0, 400.0, 470.0, 500.0, 600.0, 700.0, 800.0, 900.0, 930.0, 1000.0,
        ];
        Self::base(
            Scenario::Example1,
            Sweep::new(SweepParam::PilotLength, values),
            100_000,
            SystemConfig::reference(100, 1),
        )
    }

    /// Single-antenna AMP at `N = 2000`, 5% activity, `L` from 100 to 400.
    pub fn example2_smv() -> Self {
        Self::base(
            Scenario::Example2Smv,
            Sweep::new(SweepParam::PilotLength, grid(100.0, 400.0, 50.0)),
            1000,
            SystemConfig::reference(100, 1),
        )
    }

    pub fn example2_smv_desk() -> Self {
        let mut spec = Self::example2_smv();
        spec.base_config.devices = 500;
        spec.sweep = Sweep::new(SweepParam::PilotLength, grid(25.0, 100.0, 12.5).into_iter().map(f64::round).collect());
        spec.trials = 200;
        spec
    }

    /// Massive-MIMO AMP at `L = 120` over `M`.
    pub fn example3_mmv() -> Self {
        let mut spec = Self::base(
            Scenario::Example3Mmv,
            Sweep::new(SweepParam::Antennas, vec![1.0, 2.0, 8.0, 16.0]),
            1000,
            SystemConfig::reference(120, 1),
        );
        spec.amp = mmv_options();
        spec
    }

    pub fn example3_mmv_desk() -> Self {
        let mut spec = Self::example3_mmv();
        spec.base_config.devices = 500;
        spec.base_config.pilot_length = 30;
        spec.trials = 100;
        spec
    }

    /// One embedded bit, 64 antennas, unit gains at 20 dB per-symbol SNR.
    pub fn embedded() -> Self {
        let mut config = SystemConfig::reference(100, 64);
        config.devices = 200;
        config.eps = ActivityProbabilities::Uniform(0.1);
        config.embedded_bits = 1;
        config.pathloss_model = PathLossModel::Unit;
        config.tx_power_dbm = noise_dbm(&config) + 20.0;
        let mut spec = Self::base(Scenario::Embedded, Sweep::new(SweepParam::PilotLength, vec![100.0]), 1000, config);
        spec.denoiser = DenoiserChoice::Soft { kappa: Some(1.5) };
        spec.statistic = DetectionStatistic::Norm;
        spec
    }

    /// Coded slotted ALOHA with two replicas per user in 200-slot frames.
    pub fn csa() -> Self {
        Self::base(
            Scenario::Csa,
            Sweep::new(SweepParam::Load, grid(0.025, 1.0, 0.025)),
            2000,
            SystemConfig::reference(200, 1),
        )
    }

    pub fn density_evolution() -> Self {
        Self::base(
            Scenario::DensityEvolution,
            Sweep::new(SweepParam::Load, grid(0.01, 1.0, 0.01)),
            1,
            SystemConfig::reference(200, 1),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if !self.sweep.param.allowed(self.scenario) {
            return Err(Error::config(format!(
                "parameter {} cannot be swept in scenario {:?}",
                self.sweep.param.name(),
                self.scenario
            )));
        }
        for &v in &self.sweep.values {
            self.config_at(v)?;
        }
        if self.scenario == Scenario::Embedded {
            if self.denoiser == DenoiserChoice::Mmse {
                return Err(Error::config("the embedded scenario uses the soft-threshold based embedded denoiser"));
            }
            if self.statistic != DetectionStatistic::Norm {
                return Err(Error::config("the embedded scenario detects on candidate norms"));
            }
            if self.amp.noise != NoiseTracking::Scalar {
                return Err(Error::config("the embedded denoiser supports scalar noise tracking only"));
            }
        }
        if self.scenario == Scenario::Csa && self.protocol.degrees.max_degree() > self.protocol.frame_slots {
            return Err(Error::config("replica degree exceeds the frame length"));
        }
        if let DenoiserChoice::Soft { kappa: Some(k) } = self.denoiser {
            if !(k > 0.0) {
                return Err(Error::config("kappa must be positive"));
            }
        }
        Ok(())
    }

    /// Scenario configuration at sweep value `v`.
    pub fn config_at(&self, v: f64) -> Result<SystemConfig> {
        let param = self.sweep.param;
        if !v.is_finite() || (param.integral() && (v.fract() != 0.0 || v < 0.0)) {
            return Err(Error::config(format!("{v} is not a valid value of {}", param.name())));
        }
        let mut c = self.base_config.clone();
        match param {
            SweepParam::PilotLength => c.pilot_length = v as usize,
            SweepParam::Antennas => c.antennas = v as usize,
            SweepParam::Devices => {
                c.devices = v as usize;
                if let ActivityProbabilities::PerDevice(_) = c.eps {
                    return Err(Error::config("cannot sweep N with per-device activity probabilities"));
                }
            }
            SweepParam::Bits => c.embedded_bits = v as u32,
            SweepParam::Eps => c.eps = ActivityProbabilities::Uniform(v),
            SweepParam::TxPower => c.tx_power_dbm = v,
            SweepParam::Snr => c.tx_power_dbm = noise_dbm(&c) + v,
            SweepParam::ActiveDevices | SweepParam::Load => {
                if v < 0.0 {
                    return Err(Error::config(format!("{} must be non-negative", param.name())));
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}

fn noise_dbm(config: &SystemConfig) -> f64 {
    config.noise_psd_dbm_hz + 10.0 * config.bandwidth_hz.log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equalized {
    pub theta: f64,
    pub p_md: f64,
    pub p_fa: f64,
}

/// Threshold minimizing `|MD(theta) - FA(theta)|` over the pooled sample,
/// where a device is declared active iff its statistic exceeds `theta`.
///
/// Candidates are `-inf` and every distinct pooled value; ties go to the
/// lowest candidate.
pub fn equalize_empirical_threshold(pool: &[(f64, bool)]) -> Result<Equalized> {
    let n_a = pool.iter().filter(|s| s.1).count();
    let n_i = pool.len() - n_a;
    if n_a == 0 || n_i == 0 {
        return Err(Error::config(format!(
            "equalization needs active and inactive samples, got {n_a} and {n_i}"
        )));
    }
    if pool.iter().any(|s| s.0.is_nan()) {
        return Err(Error::Numerical("NaN detection statistic".into()));
    }
    let mut sorted = pool.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (na, ni) = (n_a as f64, n_i as f64);
    let mut best = Equalized {
        theta: f64::NEG_INFINITY,
        p_md: 0.0,
        p_fa: 1.0,
    };
    let (mut md, mut fa) = (0usize, n_i);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                md += 1;
            } else {
                fa -= 1;
            }
            i += 1;
        }
        let (p_md, p_fa) = (md as f64 / na, fa as f64 / ni);
        if (p_md - p_fa).abs() < (best.p_md - best.p_fa).abs() {
            best = Equalized { theta: v, p_md, p_fa };
        }
    }
    Ok(best)
}

/// Binomial standard error of a rate estimated from `n` samples.
pub fn binomial_stderr(p: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub sweep: f64,
    /// Absent when no device was active in any trial.
    pub p_md: Option<f64>,
    pub p_fa: Option<f64>,
    pub se_md: Option<f64>,
    pub se_fa: Option<f64>,
    /// Equalized threshold; absent when one class is empty.
    pub theta: Option<f64>,
    pub iters: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: [&str; 8] = ["sweep", "p_md", "p_fa", "se_md", "se_fa", "theta", "iters", "wall_ms"];

/// Plain decimal for moderate magnitudes, scientific notation otherwise.
fn num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_table<D: Display>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<D>>) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl MetricsTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_table(
            path,
            &METRICS_HEADER,
            self.rows.iter().map(|r| {
                vec![
                    num(r.sweep),
                    opt(r.p_md),
                    opt(r.p_fa),
                    opt(r.se_md),
                    opt(r.se_fa),
                    opt(r.theta),
                    num(r.iters),
                    r.wall_ms.to_string(),
                ]
            }),
        )
    }
}

/// Per-sweep-value bookkeeping kept out of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDiagnostics {
    pub sweep: f64,
    pub active_samples: usize,
    pub inactive_samples: usize,
    pub non_converged: usize,
    pub diverged: usize,
    /// Soft-threshold multiplier in use.
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sweep: f64,
    pub tau2: f64,
    pub p_md: f64,
    pub p_fa: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitRow {
    pub sweep: f64,
    pub ber: f64,
    pub bits_compared: usize,
    pub bit_errors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrantRow {
    pub preambles: usize,
    pub active: usize,
    pub mean_granted: f64,
    pub stderr: f64,
    pub mode: CaptureMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsaRow {
    pub load: f64,
    pub resolved_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeRow {
    pub load: f64,
    pub x_infinity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub metrics: MetricsTable,
    pub diagnostics: Vec<SweepDiagnostics>,
    pub predictions: Vec<PredictionRow>,
    pub bits: Vec<BitRow>,
    pub grant: Vec<GrantRow>,
    pub csa: Vec<CsaRow>,
    pub density_evolution: Vec<DeRow>,
    pub de_threshold: Option<f64>,
}

impl ExperimentReport {
    fn empty(spec: &ExperimentSpec) -> Self {
        Self {
            spec: spec.clone(),
            metrics: MetricsTable::default(),
            diagnostics: Vec::new(),
            predictions: Vec::new(),
            bits: Vec::new(),
            grant: Vec::new(),
            csa: Vec::new(),
            density_evolution: Vec::new(),
            de_threshold: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Report `wall_ms = 0` so that outputs depend on the spec only.
    pub deterministic: bool,
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    run_experiment_with(spec, &RunOptions::default())
}

pub fn run_experiment_with(spec: &ExperimentSpec, options: &RunOptions) -> Result<ExperimentReport> {
    spec.validate()?;
    match options.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::config(format!("cannot start {n} worker threads: {e}")))?;
            pool.install(|| run_inner(spec, options))
        }
        None => run_inner(spec, options),
    }
}

fn run_inner(spec: &ExperimentSpec, options: &RunOptions) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::empty(spec);
    match spec.scenario {
        Scenario::Example1 => report.grant = run_grant_based(spec)?,
        Scenario::Csa => report.csa = run_csa(spec)?,
        Scenario::DensityEvolution => {
            let p = &spec.protocol;
            report.density_evolution = spec
                .sweep
                .values
                .iter()
                .map(|&g| DeRow {
                    load: g,
                    x_infinity: density_evolution(&p.degrees, g, p.de_iters).limit,
                })
                .collect();
            report.de_threshold = Some(density_evolution_threshold(&p.degrees, p.de_iters, p.de_tol, 10.0));
        }
        _ => {
            debug_assert!(spec.scenario.is_detection());
            for &v in &spec.sweep.values {
                let start = Instant::now();
                let point = run_detection_point(spec, v)?;
                let wall_ms = if options.deterministic {
                    0
                } else {
                    start.elapsed().as_millis() as u64
                };
                report.metrics.rows.push(MetricsRow { wall_ms, ..point.row });
                report.diagnostics.push(point.diagnostics);
                report.predictions.extend(point.prediction);
                report.bits.extend(point.bits);
            }
        }
    }
    Ok(report)
}

fn run_grant_based(spec: &ExperimentSpec) -> Result<Vec<GrantRow>> {
    let seed = spec.base_config.seed;
    let mut rows = Vec::new();
    for &v in &spec.sweep.values {
        let (l, k) = match spec.sweep.param {
            SweepParam::PilotLength => (v as usize, spec.protocol.active_devices),
            _ => (spec.base_config.pilot_length, v as usize),
        };
        for mode in [CaptureMode::None, CaptureMode::CaptureOne] {
            let granted: Vec<usize> = (0..spec.trials as u64)
                .into_par_iter()
                .map(|t| {
                    let mut s = RandomStream::substream(seed, t, Purpose::Protocol);
                    simulate_grant_based(k, l, mode, &mut s).granted
                })
                .collect();
            let n = granted.len() as f64;
            let mean = granted.iter().sum::<usize>() as f64 / n;
            let var = granted.iter().map(|&g| (g as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            rows.push(GrantRow {
                preambles: l,
                active: k,
                mean_granted: mean,
                stderr: (var / n).sqrt(),
                mode,
            });
        }
    }
    Ok(rows)
}

fn run_csa(spec: &ExperimentSpec) -> Result<Vec<CsaRow>> {
    let p = &spec.protocol;
    let seed = spec.base_config.seed;
    spec.sweep
        .values
        .iter()
        .map(|&g| {
            let users = (g * p.frame_slots as f64).round() as usize;
            let outcomes = (0..spec.trials as u64)
                .into_par_iter()
                .map(|t| {
                    let mut s = RandomStream::substream(seed, t, Purpose::Protocol);
                    simulate_csa(p.frame_slots, users, &p.degrees, p.max_sic_rounds, &mut s)
                })
                .collect::<Result<Vec<_>>>()?;
            let active: usize = outcomes.iter().map(|o| o.active).sum();
            let resolved: usize = outcomes.iter().map(|o| o.resolved).sum();
            let resolved_fraction = if active == 0 {
                1.0
            } else {
                resolved as f64 / active as f64
            };
            Ok(CsaRow { load: g, resolved_fraction })
        })
        .collect()
}

struct TrialOutcome {
    /// `(statistic, active)` per device.
    pool: Vec<(f64, bool)>,
    /// Decisions of the MAP rule, used when one class is empty.
    map_detected: Vec<bool>,
    /// Bit errors of each active device if it is detected.
    bit_errors: Option<Vec<usize>>,
    iters: usize,
    status: AmpStatus,
}

struct PointResult {
    row: MetricsRow,
    diagnostics: SweepDiagnostics,
    prediction: Option<PredictionRow>,
    bits: Option<BitRow>,
}

pub const KAPPA_GRID: (f64, f64, f64) = (0.5, 3.0, 0.1);
const SE_MAX_ITERS: usize = 200;
const SE_TOL: f64 = 1e-7;

/// Large-scale gains of trial `t`, or of trial 0 under a fixed topology.
pub fn trial_large_scale(config: &SystemConfig, t: u64) -> Vec<f64> {
    let t = if config.fixed_topology { 0 } else { t };
    draw_large_scale(config, &mut RandomStream::substream(config.seed, t, Purpose::Topology))
}

fn priors(config: &SystemConfig, beta: &[f64]) -> Vec<BgPrior> {
    beta.iter()
        .enumerate()
        .map(|(n, &b)| BgPrior {
            eps: config.eps.get(n),
            beta: b,
        })
        .collect()
}

fn stream(config: &SystemConfig, t: u64, purpose: Purpose) -> RandomStream {
    RandomStream::substream(config.seed, t, purpose)
}

fn pilots_for(config: &SystemConfig, t: u64) -> PilotMatrix {
    let mut a = generate_gaussian_pilots(
        config.pilot_length,
        config.devices,
        config.embedded_bits,
        &mut stream(config, t, Purpose::Pilots),
    );
    if config.normalize_columns {
        a.normalize_columns();
    }
    a
}

fn map_decisions(norms: &[f64], priors: &[BgPrior], m: usize, tau2: f64) -> Vec<bool> {
    norms
        .iter()
        .zip(priors)
        .map(|(&r, p)| {
            p.eps > 0.0
                && (p.eps >= 1.0
                    || (p.eps / (1.0 - p.eps)).ln() + log_likelihood_ratio(r * r, m, tau2, p.beta) > 0.0)
        })
        .collect()
}

fn detection_trial(spec: &ExperimentSpec, config: &SystemConfig, kappa: Option<f64>, t: u64) -> Result<TrialOutcome> {
    let beta = trial_large_scale(config, t);
    let priors = priors(config, &beta);
    let budget = link_budget(config);
    let a = pilots_for(config, t);
    let m = config.antennas;
    if spec.scenario == Scenario::Embedded {
        let model = draw_embedded(config, &beta, &mut stream(config, t, Purpose::Activity))?;
        let signal = synthesize_received(&a, &model.x_bar, budget.xi, budget.sigma2, &mut stream(config, t, Purpose::Noise))?;
        let denoiser = EmbeddedDenoiser {
            bits: config.embedded_bits,
            threshold: ThresholdRule::Scaled {
                kappa: kappa.expect("embedded runs use soft thresholding"),
            },
            large_scale: beta,
            sharpness: config.sigmoid_sharpness,
        };
        let run = amp_run(&signal, &a, &denoiser, &spec.amp, None)?;
        let stats = detection_statistics(&run.state, &a);
        let all = vec![f64::NEG_INFINITY; config.devices];
        let report = detect_embedded(&stats, config.embedded_bits, &all, Some(&model))?;
        let k = 1usize << config.embedded_bits;
        let norms: Vec<f64> = stats.chunks(k).map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        return Ok(TrialOutcome {
            map_detected: map_decisions(&norms, &priors, m, run.state.tau2),
            pool: norms.into_iter().zip(model.active.iter().copied()).collect(),
            bit_errors: Some(report.devices.iter().map(|d| d.bit_errors).collect()),
            iters: run.state.t,
            status: run.status,
        });
    }
    let pattern = draw_activity(config, &mut stream(config, t, Purpose::Activity));
    let channel = draw_channels(config, &pattern, &beta, &mut stream(config, t, Purpose::Fading))?;
    let signal = synthesize_received(&a, &channel.x, budget.xi, budget.sigma2, &mut stream(config, t, Purpose::Noise))?;
    let denoiser = match kappa {
        Some(kappa) => DenoiserSpec::SoftThreshold(ThresholdRule::Scaled { kappa }),
        None => DenoiserSpec::MmseBg(priors.clone()),
    };
    let run = amp_run(&signal, &a, &denoiser, &spec.amp, None)?;
    let (stats, map_detected) = match spec.statistic {
        DetectionStatistic::LogOdds => {
            let odds = activity_log_odds(&run.state, &a, &priors)?;
            let map = odds.iter().map(|&o| o > 0.0).collect();
            (odds, map)
        }
        DetectionStatistic::Norm => {
            let norms = detection_statistics(&run.state, &a);
            let map = map_decisions(&norms, &priors, m, run.state.tau2);
            (norms, map)
        }
    };
    Ok(TrialOutcome {
        pool: stats.into_iter().zip(pattern.alpha).collect(),
        map_detected,
        bit_errors: None,
        iters: run.state.t,
        status: run.status,
    })
}

/// Soft-threshold multiplier minimizing the state-evolution fixed point
/// for the population of trial 0.
pub fn tune_kappa(config: &SystemConfig) -> Result<f64> {
    let prior = SePrior::from_config(config, &trial_large_scale(config, 0))?;
    let map = MseMap::with_defaults(prior, config.antennas)?;
    let (lo, hi, step) = KAPPA_GRID;
    Ok(tune_soft_threshold(&map, &grid(lo, hi, step), SE_MAX_ITERS, SE_TOL)?.0)
}

fn se_denoiser(config: &SystemConfig, beta: &[f64], kappa: Option<f64>) -> DenoiserSpec {
    match kappa {
        Some(kappa) => DenoiserSpec::SoftThreshold(ThresholdRule::Scaled { kappa }),
        None => DenoiserSpec::MmseBg(priors(config, beta)),
    }
}

/// State-evolution trace for the population of trial 0.
pub fn se_trace(config: &SystemConfig, kappa: Option<f64>) -> Result<SeTrace> {
    let beta = trial_large_scale(config, 0);
    let map = MseMap::with_defaults(SePrior::from_config(config, &beta)?, config.antennas)?;
    map.iterate(&se_denoiser(config, &beta, kappa), SE_MAX_ITERS, SE_TOL)
}

/// Equalized operating point predicted by state evolution for the
/// population of trial 0.
pub fn se_predict(config: &SystemConfig, kappa: Option<f64>) -> Result<(SeTrace, f64, f64)> {
    let trace = se_trace(config, kappa)?;
    let population = priors(config, &trial_large_scale(config, 0));
    let p = predict_operating_point(trace.fixed_point, &population, config.antennas, CalibrationMode::Equalize)?;
    Ok((trace, p.p_md, p.p_fa))
}

fn run_detection_point(spec: &ExperimentSpec, v: f64) -> Result<PointResult> {
    let config = spec.config_at(v)?;
    let kappa = match spec.denoiser {
        DenoiserChoice::Mmse => None,
        DenoiserChoice::Soft { kappa: Some(k) } => Some(k),
        DenoiserChoice::Soft { kappa: None } => Some(tune_kappa(&config)?),
    };
    let trials = (0..spec.trials as u64)
        .into_par_iter()
        .map(|t| detection_trial(spec, &config, kappa, t))
        .collect::<Result<Vec<_>>>()?;

    let pool: Vec<(f64, bool)> = trials.iter().flat_map(|t| t.pool.iter().copied()).collect();
    let n_a = pool.iter().filter(|s| s.1).count();
    let n_i = pool.len() - n_a;
    let eq = (n_a > 0 && n_i > 0).then(|| equalize_empirical_threshold(&pool)).transpose()?;
    let detected: Vec<bool> = match eq {
        Some(e) => pool.iter().map(|s| s.0 > e.theta).collect(),
        None => trials.iter().flat_map(|t| t.map_detected.iter().copied()).collect(),
    };
    let misses = pool.iter().zip(&detected).filter(|(s, &d)| s.1 && !d).count();
    let false_alarms = pool.iter().zip(&detected).filter(|(s, &d)| !s.1 && d).count();
    let rate = |k: usize, n: usize| (n > 0).then(|| k as f64 / n as f64);
    let (p_md, p_fa) = (rate(misses, n_a), rate(false_alarms, n_i));
    let row = MetricsRow {
        sweep: v,
        p_md,
        p_fa,
        se_md: p_md.map(|p| binomial_stderr(p, n_a)),
        se_fa: p_fa.map(|p| binomial_stderr(p, n_i)),
        theta: eq.map(|e| e.theta),
        iters: trials.iter().map(|t| t.iters).sum::<usize>() as f64 / trials.len() as f64,
        wall_ms: 0,
    };

    let bits = (spec.scenario == Scenario::Embedded).then(|| {
        let errors = trials.iter().flat_map(|t| t.bit_errors.as_deref().unwrap_or(&[]).iter().copied());
        let (mut bit_errors, mut compared) = (0, 0);
        for ((s, &d), e) in pool.iter().zip(&detected).zip(errors) {
            if s.1 && d {
                bit_errors += e;
                compared += config.embedded_bits as usize;
            }
        }
        BitRow {
            sweep: v,
            ber: if compared == 0 {
                0.0
            } else {
                bit_errors as f64 / compared as f64
            },
            bits_compared: compared,
            bit_errors,
        }
    });

    let prediction = if spec.se_prediction && spec.scenario != Scenario::Embedded {
        let (trace, p_md, p_fa) = se_predict(&config, kappa)?;
        Some(PredictionRow {
            sweep: v,
            tau2: trace.fixed_point,
            p_md,
            p_fa,
            converged: trace.converged,
        })
    } else {
        None
    };

    Ok(PointResult {
        row,
        diagnostics: SweepDiagnostics {
            sweep: v,
            active_samples: n_a,
            inactive_samples: n_i,
            non_converged: trials.iter().filter(|t| t.status != AmpStatus::Converged).count(),
            diverged: trials.iter().filter(|t| t.status == AmpStatus::Diverged).count(),
            kappa,
        },
        prediction,
        bits,
    })
}

/// Contents of `metrics.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub spec: ExperimentSpec,
    pub seed: u64,
    pub git_describe: String,
    pub diagnostics: Vec<SweepDiagnostics>,
    #[serde(default)]
    pub de_threshold: Option<f64>,
}

impl RunMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// `git describe` of the source tree this binary was run from, or the
/// package version outside a checkout.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// Writes `metrics.csv`, `metrics.meta.json` and the scenario tables that
/// are non-empty into `dir`, returning the files written.
pub fn emit_outputs(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let path = dir.join("metrics.csv");
    report.metrics.write_csv(&path)?;
    written.push(path);

    let path = dir.join("metrics.meta.json");
    let meta = RunMeta {
        spec: report.spec.clone(),
        seed: report.spec.base_config.seed,
        git_describe: git_describe(),
        diagnostics: report.diagnostics.clone(),
        de_threshold: report.de_threshold,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let mut table = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let path = dir.join(name);
        write_table(&path, header, rows)?;
        written.push(path);
        Ok(())
    };
    table(
        "se_prediction.csv",
        &["sweep", "tau2", "p_md", "p_fa", "converged"],
        report
            .predictions
            .iter()
            .map(|r| vec![num(r.sweep), num(r.tau2), num(r.p_md), num(r.p_fa), (r.converged as u8).to_string()])
            .collect(),
    )?;
    table(
        "bits.csv",
        &["sweep", "ber", "bits_compared", "bit_errors"],
        report
            .bits
            .iter()
            .map(|r| vec![num(r.sweep), num(r.ber), r.bits_compared.to_string(), r.bit_errors.to_string()])
            .collect(),
    )?;
    table(
        "grant_based.csv",
        &["L", "mean_granted", "stderr", "mode"],
        report
            .grant
            .iter()
            .map(|r| vec![r.preambles.to_string(), num(r.mean_granted), num(r.stderr), r.mode.name().to_string()])
            .collect(),
    )?;
    table(
        "csa.csv",
        &["G", "resolved_fraction"],
        report.csa.iter().map(|r| vec![num(r.load), num(r.resolved_fraction)]).collect(),
    )?;
    table(
        "density_evolution.csv",
        &["G", "x_infinity"],
        report.density_evolution.iter().map(|r| vec![num(r.load), num(r.x_infinity)]).collect(),
    )?;
    Ok(written)
}
