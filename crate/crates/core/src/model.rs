//! Scenario configuration and signal synthesis.
//!
//! The received pilot signal is `Y = sqrt(xi) * A * X + Z`, with `X` the
//! row-sparse matrix of effective channels `x_n = alpha_n * h_n`. All
//! quantities here are linear; the JSON form of [`SystemConfig`] carries
//! dBm, dBm/Hz and meters.

use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pilots::PilotMatrix;
use crate::rng::RandomStream;

/// Per-device activity probabilities, either one value for the whole
/// population or one per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActivityProbabilities {
    Uniform(f64),
    PerDevice(Vec<f64>),
}

impl ActivityProbabilities {
    pub fn get(&self, n: usize) -> f64 {
        match self {
            ActivityProbabilities::Uniform(p) => *p,
            ActivityProbabilities::PerDevice(v) => v[n],
        }
    }

    /// Population average.
    pub fn mean(&self, devices: usize) -> f64 {
        match self {
            ActivityProbabilities::Uniform(p) => *p,
            ActivityProbabilities::PerDevice(v) => v.iter().sum::<f64>() / devices.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathLossModel {
    /// `PL(dB) = 128.1 + 37.6 log10(d_km)`.
    UrbanMacro,
    /// Every device has unit large-scale gain.
    Unit,
}

impl PathLossModel {
    pub fn loss_db(self, distance_m: f64) -> f64 {
        match self {
            PathLossModel::UrbanMacro => 128.1 + 37.6 * (distance_m / 1000.0).log10(),
            PathLossModel::Unit => 0.0,
        }
    }
}

fn default_min_distance() -> f64 {
    1.0
}

fn default_sharpness() -> f64 {
    20.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    #[serde(rename = "N")]
    pub devices: usize,
    pub eps: ActivityProbabilities,
    #[serde(rename = "L")]
    pub pilot_length: usize,
    #[serde(rename = "M")]
    pub antennas: usize,
    #[serde(rename = "J")]
    pub embedded_bits: u32,
    pub tx_power_dbm: f64,
    pub noise_psd_dbm_hz: f64,
    pub bandwidth_hz: f64,
    pub cell_radius_m: f64,
    pub pathloss_model: PathLossModel,
    pub seed: u64,
    #[serde(default)]
    pub shadowing_std_db: f64,
    /// Devices are placed uniformly over the annulus `[min_distance_m, cell_radius_m]`.
    #[serde(default = "default_min_distance")]
    pub min_distance_m: f64,
    /// Keep device positions fixed across Monte Carlo trials.
    #[serde(default)]
    pub fixed_topology: bool,
    #[serde(default)]
    pub normalize_columns: bool,
    /// Sharpness `c` of the sigmoid used by the embedded-bit denoiser.
    #[serde(default = "default_sharpness")]
    pub sigmoid_sharpness: f64,
}

impl SystemConfig {
    /// The population and radio setup shared by the grant-free examples:
    /// 2000 devices, 5% activity, 1 km cell, 23 dBm pilots, -169 dBm/Hz
    /// noise over 1 MHz.
    pub fn reference(pilot_length: usize, antennas: usize) -> Self {
        Self {
            devices: 2000,
            eps: ActivityProbabilities::Uniform(0.05),
            pilot_length,
            antennas,
            embedded_bits: 0,
            tx_power_dbm: 23.0,
            noise_psd_dbm_hz: -169.0,
            bandwidth_hz: 1.0e6,
            cell_radius_m: 1000.0,
            pathloss_model: PathLossModel::UrbanMacro,
            seed: 1,
            shadowing_std_db: 0.0,
            min_distance_m: default_min_distance(),
            fixed_topology: false,
            normalize_columns: false,
            sigmoid_sharpness: default_sharpness(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices < 1 {
            return Err(Error::config("N must be at least 1"));
        }
        match &self.eps {
            ActivityProbabilities::Uniform(p) => check_probability(*p)?,
            ActivityProbabilities::PerDevice(v) => {
                if v.len() != self.devices {
                    return Err(Error::config(format!(
                        "eps has {} entries but N = {}",
                        v.len(),
                        self.devices
                    )));
                }
                v.iter().try_for_each(|p| check_probability(*p))?;
            }
        }
        if self.pilot_length < 1 {
            return Err(Error::config("L must be at least 1"));
        }
        if self.antennas < 1 {
            return Err(Error::config("M must be at least 1"));
        }
        if self.embedded_bits > 16 {
            return Err(Error::config("J above 16 is not supported"));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::config("bandwidth_hz must be positive"));
        }
        if !(self.cell_radius_m > 0.0) {
            return Err(Error::config("cell_radius_m must be positive"));
        }
        if !(self.min_distance_m > 0.0 && self.min_distance_m <= self.cell_radius_m) {
            return Err(Error::config("min_distance_m must lie in (0, cell_radius_m]"));
        }
        if !(self.shadowing_std_db >= 0.0) {
            return Err(Error::config("shadowing_std_db must be non-negative"));
        }
        if !(self.sigmoid_sharpness > 0.0) {
            return Err(Error::config("sigmoid_sharpness must be positive"));
        }
        for (name, v) in [
            ("tx_power_dbm", self.tx_power_dbm),
            ("noise_psd_dbm_hz", self.noise_psd_dbm_hz),
        ] {
            if !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of pilot columns, `N * 2^J`.
    pub fn columns(&self) -> usize {
        self.devices << self.embedded_bits
    }
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::config(format!("activity probability {p} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityPattern {
    pub alpha: Vec<bool>,
    pub active_set: Vec<usize>,
}

impl ActivityPattern {
    pub fn from_alpha(alpha: Vec<bool>) -> Self {
        let active_set = alpha
            .iter()
            .enumerate()
            .filter_map(|(n, &a)| a.then_some(n))
            .collect();
        Self { alpha, active_set }
    }

    pub fn active_count(&self) -> usize {
        self.active_set.len()
    }
}

pub fn draw_activity(config: &SystemConfig, stream: &mut RandomStream) -> ActivityPattern {
    let alpha = (0..config.devices)
        .map(|n| stream.bernoulli(config.eps.get(n)))
        .collect();
    ActivityPattern::from_alpha(alpha)
}

/// Linear large-scale gains `beta_n` for devices dropped uniformly over the cell.
pub fn draw_large_scale(config: &SystemConfig, stream: &mut RandomStream) -> Vec<f64> {
    let r_max2 = config.cell_radius_m * config.cell_radius_m;
    let r_min2 = config.min_distance_m * config.min_distance_m;
    (0..config.devices)
        .map(|_| {
            let d = (r_min2 + stream.uniform() * (r_max2 - r_min2)).sqrt();
            let mut loss_db = config.pathloss_model.loss_db(d);
            if config.shadowing_std_db > 0.0 {
                loss_db += config.shadowing_std_db * stream.standard_normal();
            }
            db_to_linear(-loss_db)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EffectiveChannel {
    pub large_scale: Vec<f64>,
    /// `N x M` small-scale channels.
    pub h: Array2<Complex64>,
    /// `N x M`, row `n` equal to `alpha_n * h_n`.
    pub x: Array2<Complex64>,
}

/// Rayleigh block fading `h_n ~ CN(0, beta_n I_M)` masked by activity.
pub fn draw_channels(
    config: &SystemConfig,
    pattern: &ActivityPattern,
    large_scale: &[f64],
    stream: &mut RandomStream,
) -> Result<EffectiveChannel> {
    let n = config.devices;
    let m = config.antennas;
    if pattern.alpha.len() != n || large_scale.len() != n {
        return Err(Error::Dimension {
            what: "activity pattern / large-scale gains",
            expected: format!("{n} devices"),
            got: format!("{} / {}", pattern.alpha.len(), large_scale.len()),
        });
    }
    let mut h = Array2::zeros((n, m));
    for (row, &beta) in large_scale.iter().enumerate() {
        for col in 0..m {
            h[[row, col]] = stream.complex_normal(beta);
        }
    }
    let mut x = h.clone();
    for (row, &active) in pattern.alpha.iter().enumerate() {
        if !active {
            x.row_mut(row).fill(Complex64::new(0.0, 0.0));
        }
    }
    Ok(EffectiveChannel {
        large_scale: large_scale.to_vec(),
        h,
        x,
    })
}

#[derive(Debug, Clone)]
pub struct ReceivedSignal {
    /// `L x M`.
    pub y: Array2<Complex64>,
    pub xi: f64,
    pub sigma2: f64,
}

impl ReceivedSignal {
    /// Effective noise-to-energy ratio `sigma^2 / xi` seen by the detectors.
    pub fn noise_ratio(&self) -> f64 {
        self.sigma2 / self.xi
    }
}

/// `Y = sqrt(xi) A X + Z` with `Z` i.i.d. `CN(0, sigma2)`.
pub fn synthesize_received(
    a: &PilotMatrix,
    x: &Array2<Complex64>,
    xi: f64,
    sigma2: f64,
    stream: &mut RandomStream,
) -> Result<ReceivedSignal> {
    if a.cols() != x.nrows() {
        return Err(Error::Dimension {
            what: "pilot columns vs effective-channel rows",
            expected: a.cols().to_string(),
            got: x.nrows().to_string(),
        });
    }
    if !(xi > 0.0) || !(sigma2 >= 0.0) {
        return Err(Error::config("xi must be positive and sigma2 non-negative"));
    }
    let mut y = a.entries().dot(x);
    let amp = xi.sqrt();
    y.mapv_inplace(|v| v * amp);
    if sigma2 > 0.0 {
        y.iter_mut().for_each(|v| *v += stream.complex_normal(sigma2));
    }
    Ok(ReceivedSignal { y, xi, sigma2 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    /// Total pilot energy (mW x symbols).
    pub xi: f64,
    /// Per-symbol noise power (mW).
    pub sigma2: f64,
}

impl LinkBudget {
    pub fn noise_ratio(&self) -> f64 {
        self.sigma2 / self.xi
    }
}

/// `sigma^2 = PSD * bandwidth`, `xi = P_tx * L`.
pub fn link_budget(config: &SystemConfig) -> LinkBudget {
    let noise_dbm = config.noise_psd_dbm_hz + 10.0 * config.bandwidth_hz.log10();
    LinkBudget {
        xi: db_to_linear(config.tx_power_dbm) * config.pilot_length as f64,
        sigma2: db_to_linear(noise_dbm),
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilots::generate_gaussian_pilots;
    use crate::rng::Purpose;

    fn cfg(n: usize, eps: f64) -> SystemConfig {
        let mut c = SystemConfig::reference(64, 1);
        c.devices = n;
        c.eps = ActivityProbabilities::Uniform(eps);
        c
    }

    #[test]
    fn degenerate_activity() {
        let mut s = RandomStream::new(3);
        assert_eq!(draw_activity(&cfg(50, 0.0), &mut s).active_count(), 0);
        let p = draw_activity(&cfg(50, 1.0), &mut s);
        assert_eq!(p.active_count(), 50);
        assert!(p.alpha.iter().all(|&a| a));
    }

    #[test]
    fn active_count_is_binomial() {
        let c = cfg(2000, 0.05);
        let trials = 10_000;
        let counts: Vec<f64> = (0..trials)
            .map(|t| {
                let mut s = RandomStream::substream(11, t, Purpose::Activity);
                draw_activity(&c, &mut s).active_count() as f64
            })
            .collect();
        let mean = counts.iter().sum::<f64>() / trials as f64;
        let var = counts.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        assert!((mean - 100.0).abs() < 0.3, "mean {mean}");
        assert!((var.sqrt() - 9.747).abs() < 0.3, "std {}", var.sqrt());
    }

    #[test]
    fn rayleigh_power_and_masking() {
        let mut c = cfg(100_000, 0.5);
        c.antennas = 1;
        let mut s = RandomStream::new(9);
        let pattern = draw_activity(&c, &mut s);
        let beta = vec![1.0; c.devices];
        let ch = draw_channels(&c, &pattern, &beta, &mut s).unwrap();
        let p = ch.h.iter().map(|v| v.norm_sqr()).sum::<f64>() / c.devices as f64;
        assert!((p - 1.0).abs() < 0.02, "power {p}");
        for (n, &a) in pattern.alpha.iter().enumerate() {
            let zero = ch.x.row(n).iter().all(|v| *v == Complex64::new(0.0, 0.0));
            assert_eq!(zero, !a);
        }
    }

    #[test]
    fn urban_macro_at_one_km() {
        let loss = PathLossModel::UrbanMacro.loss_db(1000.0);
        assert!((loss - 128.1).abs() < 1e-12);
        let beta = db_to_linear(-loss);
        assert!((beta / 10f64.powf(-12.81) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn link_budget_reference_values() {
        let c = SystemConfig::reference(100, 1);
        let lb = link_budget(&c);
        assert!((linear_to_db(lb.sigma2) - (-109.0)).abs() < 1e-9);
        // Cell-edge per-symbol SNR: 23 - 128.1 - (-109) = 3.9 dB.
        let beta = db_to_linear(-128.1);
        let per_symbol = lb.xi / c.pilot_length as f64 * beta / lb.sigma2;
        assert!((linear_to_db(per_symbol) - 3.9).abs() < 1e-9);
        let mut wide = c.clone();
        wide.bandwidth_hz *= 2.0;
        assert!((link_budget(&wide).sigma2 / lb.sigma2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_synthesis() {
        let mut s = RandomStream::new(4);
        let a = generate_gaussian_pilots(16, 8, 0, &mut s);
        let zero = Array2::zeros((8, 2));
        let y = synthesize_received(&a, &zero, 3.0, 0.0, &mut s).unwrap();
        assert!(y.y.iter().all(|v| v.norm() == 0.0));

        let mut x = Array2::zeros((8, 1));
        let h = Complex64::new(0.3, -1.2);
        x[[5, 0]] = h;
        let y = synthesize_received(&a, &x, 4.0, 0.0, &mut s).unwrap();
        for l in 0..16 {
            let expect = a.entries()[[l, 5]] * h * 2.0;
            assert!((y.y[[l, 0]] - expect).norm() < 1e-14);
        }
    }

    #[test]
    fn synthesis_rejects_mismatch() {
        let mut s = RandomStream::new(4);
        let a = generate_gaussian_pilots(16, 8, 0, &mut s);
        let x = Array2::zeros((7, 1));
        assert!(matches!(
            synthesize_received(&a, &x, 1.0, 0.0, &mut s),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn config_json_field_names() {
        let c = SystemConfig::reference(120, 16);
        let v: serde_json::Value = serde_json::to_value(&c).unwrap();
        for key in [
            "N",
            "eps",
            "L",
            "M",
            "J",
            "tx_power_dbm",
            "noise_psd_dbm_hz",
            "bandwidth_hz",
            "cell_radius_m",
            "pathloss_model",
            "seed",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["pathloss_model"], "urban_macro");
        let back: SystemConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_validation() {
        let mut c = SystemConfig::reference(10, 1);
        assert!(c.validate().is_ok());
        c.eps = ActivityProbabilities::PerDevice(vec![0.1; 3]);
        assert!(c.validate().is_err());
        c.eps = ActivityProbabilities::Uniform(1.5);
        assert!(c.validate().is_err());
        c.eps = ActivityProbabilities::Uniform(0.1);
        c.bandwidth_hz = 0.0;
        assert!(c.validate().is_err());
    }
}
