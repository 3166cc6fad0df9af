//! Non-coherent detection of a few bits embedded in the pilot choice.
//!
//! Device `n` owns `K = 2^J` pilots and transmits pilot `1 + sum_i 2^(i-1) b_i`.
//! AMP runs over all `N K` columns with a denoiser that knows at most one
//! of a device's candidates is active: each candidate is soft-thresholded
//! and then scaled by `gamma(lambda_i / sum_j lambda_j)`, where `lambda_i`
//! is the likelihood ratio of candidate `i` being active and `gamma` a
//! sigmoid centred at one half.

use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::amp::{
    accumulate_transposed, amp_run, detection_statistics, log_likelihood_ratio, logistic, norm_sqr,
    soft_threshold_into, AmpOptions, AmpRun, BlockDenoiser, EffectiveNoise, RowJacobian, ThresholdRule,
};
use crate::error::{Error, Result};
use crate::linalg::Planes;
use crate::model::{draw_activity, draw_channels, ReceivedSignal, SystemConfig};
use crate::pilots::{decode_bits, pilot_index, PilotMatrix};
use crate::rng::RandomStream;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// `ln lambda` for a candidate `v` against `CN(0, sigma2 I)` noise.
pub fn log_likelihood(v: &[Complex64], beta: f64, sigma2: f64) -> f64 {
    log_likelihood_ratio(norm_sqr(v), v.len(), sigma2, beta)
}

/// `lambda = (sigma2 / (beta + sigma2))^M exp(||v||^2 beta / (sigma2 (beta + sigma2)))`.
/// Overflows to infinity for very strong candidates; use [`log_likelihood`]
/// where that matters.
pub fn likelihood_ratio(v: &[Complex64], beta: f64, sigma2: f64) -> f64 {
    log_likelihood(v, beta, sigma2).exp()
}

/// `gamma(x) = 1 / (exp(-c (x - 1/2)) + 1)`.
pub fn sigmoid_weight(x: f64, c: f64) -> f64 {
    logistic(c * (x - 0.5))
}

/// `lambda_i / sum_j lambda_j` from log-likelihoods.
pub fn likelihood_shares(log_lambda: &[f64]) -> Vec<f64> {
    let top = log_lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return vec![1.0 / log_lambda.len() as f64; log_lambda.len()];
    }
    let e: Vec<f64> = log_lambda.iter().map(|&l| (l - top).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Modified soft-threshold denoiser for the candidates of one device.
pub fn embedded_denoise(candidates: &[Vec<Complex64>], theta: f64, sigma2: f64, beta: f64, c: f64) -> Vec<Vec<Complex64>> {
    let mut out: Vec<Vec<Complex64>> = candidates.iter().map(|v| vec![ZERO; v.len()]).collect();
    let refs: Vec<&[Complex64]> = candidates.iter().map(|v| v.as_slice()).collect();
    denoise_device(&refs, theta, sigma2, beta, c, &mut out);
    out
}

/// Denoises the candidates of one device into `out`, returning each
/// candidate's Jacobian with respect to its own input.
fn denoise_device(
    candidates: &[&[Complex64]],
    theta: f64,
    sigma2: f64,
    beta: f64,
    c: f64,
    out: &mut [Vec<Complex64>],
) -> Vec<RowJacobian> {
    if candidates.len() == 1 {
        return vec![soft_threshold_into(candidates[0], theta, &mut out[0])];
    }
    let log_lambda: Vec<f64> = candidates.iter().map(|v| log_likelihood(v, beta, sigma2)).collect();
    let shares = likelihood_shares(&log_lambda);
    let slope = if beta > 0.0 { beta / (sigma2 * (beta + sigma2)) } else { 0.0 };
    candidates
        .iter()
        .zip(out.iter_mut())
        .zip(&shares)
        .map(|((v, o), &x)| {
            let soft = soft_threshold_into(v, theta, o);
            let w = sigmoid_weight(x, c);
            for z in o.iter_mut() {
                *z *= w;
            }
            if soft == RowJacobian::ZERO {
                return RowJacobian::ZERO;
            }
            // d w / d v = c w (1 - w) x (1 - x) slope conj(v), and the soft
            // output is parallel to v, so the extra term is rank one along v.
            let norm = norm_sqr(v).sqrt();
            let dw = c * w * (1.0 - w) * x * (1.0 - x) * slope;
            RowJacobian {
                diag: w * soft.diag,
                outer: w * soft.outer + dw * (1.0 - theta / norm),
            }
        })
        .collect()
}

/// Block denoiser over the `N 2^J` rows of the enlarged model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedDenoiser {
    pub bits: u32,
    /// Soft-threshold level per device.
    pub threshold: ThresholdRule,
    /// `beta_n` per device, used in the likelihood ratios.
    pub large_scale: Vec<f64>,
    /// Sigmoid sharpness `c`.
    pub sharpness: f64,
}

impl BlockDenoiser for EmbeddedDenoiser {
    fn denoise_block(&self, u: &Planes, noise: &EffectiveNoise, out: &mut Planes) -> Array2<Complex64> {
        let k = 1usize << self.bits;
        let m = u.cols;
        let tau2 = noise.tau2;
        let mut acc = Array2::zeros((m, m));
        let mut rows: Vec<Vec<Complex64>> = vec![vec![ZERO; m]; k];
        let mut den: Vec<Vec<Complex64>> = vec![vec![ZERO; m]; k];
        for n in 0..u.rows / k {
            for (i, r) in rows.iter_mut().enumerate() {
                u.row_into(n * k + i, r);
            }
            let refs: Vec<&[Complex64]> = rows.iter().map(|r| r.as_slice()).collect();
            let theta = self.threshold.theta(n, tau2, m);
            let jacs = denoise_device(&refs, theta, tau2, self.large_scale[n], self.sharpness, &mut den);
            for i in 0..k {
                out.set_row(n * k + i, &den[i]);
                accumulate_transposed(&mut acc, jacs[i], &rows[i]);
            }
        }
        acc
    }
}

/// Ground truth of the enlarged model.
#[derive(Debug, Clone)]
pub struct EmbeddedModel {
    pub bits: u32,
    /// `N 2^J x M`, row `n 2^J + i` equal to `alpha_{n,i} h_n`.
    pub x_bar: Array2<Complex64>,
    pub large_scale: Vec<f64>,
    pub active: Vec<bool>,
    /// One-based pilot number of each active device.
    pub messages: Vec<Option<usize>>,
}

/// Draws activity, channels and payload bits for every device.
pub fn draw_embedded(config: &SystemConfig, large_scale: &[f64], stream: &mut RandomStream) -> Result<EmbeddedModel> {
    let bits = config.embedded_bits;
    let k = 1usize << bits;
    let pattern = draw_activity(config, stream);
    let ch = draw_channels(config, &pattern, large_scale, stream)?;
    let m = config.antennas;
    let mut x_bar = Array2::zeros((config.devices * k, m));
    let mut messages = vec![None; config.devices];
    for n in 0..config.devices {
        if !pattern.alpha[n] {
            continue;
        }
        let payload: Vec<bool> = (0..bits).map(|_| stream.bernoulli(0.5)).collect();
        let index = pilot_index(&payload);
        x_bar.row_mut(n * k + index - 1).assign(&ch.x.row(n));
        messages[n] = Some(index);
    }
    Ok(EmbeddedModel {
        bits,
        x_bar,
        large_scale: large_scale.to_vec(),
        active: pattern.alpha,
        messages,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceBits {
    pub truth_active: Option<bool>,
    pub detected: bool,
    pub true_index: Option<usize>,
    pub detected_index: Option<usize>,
    pub bit_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitReport {
    pub bits: u32,
    pub devices: Vec<DeviceBits>,
    pub missed: usize,
    pub false_alarms: usize,
    /// Bit errors among devices that are active and detected.
    pub bit_errors: usize,
    pub bits_compared: usize,
}

impl BitReport {
    pub fn activity_errors(&self) -> usize {
        self.missed + self.false_alarms
    }

    pub fn bit_error_rate(&self) -> f64 {
        if self.bits_compared == 0 {
            0.0
        } else {
            self.bit_errors as f64 / self.bits_compared as f64
        }
    }

    /// Columns `device,truth_active,detected,true_index,detected_index,bit_errors`;
    /// absent indices and unknown truth are written as empty fields.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["device", "truth_active", "detected", "true_index", "detected_index", "bit_errors"])
            .map_err(csv_err)?;
        let opt = |v: Option<usize>| v.map(|i| i.to_string()).unwrap_or_default();
        for (n, d) in self.devices.iter().enumerate() {
            w.write_record([
                n.to_string(),
                d.truth_active.map(|b| (b as u8).to_string()).unwrap_or_default(),
                (d.detected as u8).to_string(),
                opt(d.true_index),
                opt(d.detected_index),
                d.bit_errors.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Declares device `n` active when its strongest candidate statistic
/// exceeds `thresholds[n]`; the strongest candidate (lowest index on ties)
/// is the decoded message.
pub fn detect_embedded(statistics: &[f64], bits: u32, thresholds: &[f64], truth: Option<&EmbeddedModel>) -> Result<BitReport> {
    let k = 1usize << bits;
    if statistics.len() != thresholds.len() * k {
        return Err(Error::Dimension {
            what: "candidate statistics vs devices",
            expected: (thresholds.len() * k).to_string(),
            got: statistics.len().to_string(),
        });
    }
    let mut report = BitReport {
        bits,
        devices: Vec::with_capacity(thresholds.len()),
        missed: 0,
        false_alarms: 0,
        bit_errors: 0,
        bits_compared: 0,
    };
    for (n, &theta) in thresholds.iter().enumerate() {
        let cand = &statistics[n * k..(n + 1) * k];
        let mut best = 0;
        for (i, &s) in cand.iter().enumerate() {
            if s > cand[best] {
                best = i;
            }
        }
        let detected = cand[best] > theta;
        let detected_index = detected.then_some(best + 1);
        let (truth_active, true_index) = match truth {
            Some(t) => (Some(t.active[n]), t.messages[n]),
            None => (None, None),
        };
        let mut bit_errors = 0;
        match (truth_active, detected) {
            (Some(true), false) => report.missed += 1,
            (Some(false), true) => report.false_alarms += 1,
            (Some(true), true) => {
                let sent = decode_bits(true_index.expect("active device carries a message"), bits);
                let got = decode_bits(best + 1, bits);
                bit_errors = sent.iter().zip(&got).filter(|(a, b)| a != b).count();
                report.bit_errors += bit_errors;
                report.bits_compared += bits as usize;
            }
            _ => {}
        }
        report.devices.push(DeviceBits {
            truth_active,
            detected,
            true_index,
            detected_index,
            bit_errors,
        });
    }
    Ok(report)
}

/// Runs AMP with the embedded denoiser and decodes activity and bits.
pub fn embedded_amp_run(
    signal: &ReceivedSignal,
    pilots: &PilotMatrix,
    denoiser: &EmbeddedDenoiser,
    options: &AmpOptions,
    detection_thresholds: &dyn Fn(f64) -> Vec<f64>,
    truth: Option<&EmbeddedModel>,
) -> Result<(AmpRun, BitReport)> {
    if pilots.bits() != denoiser.bits {
        return Err(Error::config(format!(
            "pilot book embeds {} bits but the denoiser expects {}",
            pilots.bits(),
            denoiser.bits
        )));
    }
    if denoiser.large_scale.len() != pilots.devices() {
        return Err(Error::Dimension {
            what: "large-scale gains vs devices",
            expected: pilots.devices().to_string(),
            got: denoiser.large_scale.len().to_string(),
        });
    }
    let run = amp_run(signal, pilots, denoiser, options, truth.map(|t| &t.x_bar))?;
    let stats = detection_statistics(&run.state, pilots);
    let thresholds = detection_thresholds(run.state.tau2);
    let report = detect_embedded(&stats, denoiser.bits, &thresholds, truth)?;
    Ok((run, report))
}
