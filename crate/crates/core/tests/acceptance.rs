//! End-to-end acceptance checks. Each test prints one `criterion N` line
//! with its verdict before asserting it.

use std::time::{Duration, Instant};

use massive_access::aloha::{
    density_evolution_threshold, expected_granted, peel, waterfall_load, CaptureMode, DegreeDistribution,
    PeelingInstance,
};
use massive_access::amp::{amp_run, mmse_denoise, AmpOptions, BgPrior, DenoiserSpec};
use massive_access::embedded::{likelihood_ratio, sigmoid_weight};
use massive_access::harness::{
    emit_outputs, run_experiment, run_experiment_with, se_predict, ExperimentSpec, MetricsRow, RunOptions, PRESETS,
};
use massive_access::model::{
    draw_activity, draw_channels, link_budget, synthesize_received, PathLossModel, SystemConfig,
};
use massive_access::pilots::{generate_gaussian_pilots, SparseGraphSpec};
use massive_access::rng::{Purpose, RandomStream};
use massive_access::state_evolution::{predict_md_fa, MseMap, SePrior};
use num_complex::Complex64;

fn verdict(n: u32, ok: bool, detail: String) {
    println!("criterion {n}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn equalized(row: &MetricsRow) -> f64 {
    0.5 * (row.p_md.unwrap() + row.p_fa.unwrap())
}

fn stderr(row: &MetricsRow) -> f64 {
    0.5 * (row.se_md.unwrap().powi(2) + row.se_fa.unwrap().powi(2)).sqrt()
}

#[test]
fn criterion_01_grant_based_example() {
    let start = Instant::now();
    let mut spec = ExperimentSpec::example1();
    spec.sweep.values = vec![470.0, 930.0];
    spec.trials = 100_000;
    let report = run_experiment(&spec).unwrap();
    let elapsed = start.elapsed();
    let find = |l: usize, mode: CaptureMode| {
        *report.grant.iter().find(|r| r.preambles == l && r.mode == mode).unwrap()
    };
    let plain = find(930, CaptureMode::None);
    let capture = find(470, CaptureMode::CaptureOne);
    let closed_plain = 100.0 * (1.0 - 1.0 / 930.0f64).powi(99);
    let closed_capture = 470.0 * (1.0 - (1.0 - 1.0 / 470.0f64).powi(100));
    let ok = (plain.mean_granted - 89.9).abs() <= 0.3
        && (capture.mean_granted - 90.0).abs() <= 0.3
        && (plain.mean_granted - closed_plain).abs() <= 3.0 * plain.stderr
        && (capture.mean_granted - closed_capture).abs() <= 3.0 * capture.stderr
        && (expected_granted(100, 930, CaptureMode::None) - closed_plain).abs() < 1e-9
        && (expected_granted(100, 470, CaptureMode::CaptureOne) - closed_capture).abs() < 1e-9
        && elapsed < Duration::from_secs(10);
    verdict(
        1,
        ok,
        format!(
            "L=930 none {:.3} (closed {closed_plain:.3}), L=470 capture {:.3} (closed {closed_capture:.3}), {elapsed:.2?}",
            plain.mean_granted, capture.mean_granted
        ),
    );
}

/// `E[X | X + tau V = v]` by tensor trapezoid quadrature of the active
/// branch around `v`, mixed with the point mass at zero.
fn quadrature_posterior_mean(v: Complex64, tau2: f64, eps: f64, beta: f64) -> Complex64 {
    let half = 8.0 * tau2.sqrt();
    let h = half / 400.0;
    let (mut z1, mut n1) = (0.0, Complex64::new(0.0, 0.0));
    for i in -400..=400 {
        for j in -400..=400 {
            let x = v + Complex64::new(i as f64 * h, j as f64 * h);
            let w = (-(v - x).norm_sqr() / tau2 - x.norm_sqr() / beta).exp();
            z1 += w;
            n1 += x * w;
        }
    }
    let area = h * h / (std::f64::consts::PI.powi(2) * tau2 * beta);
    let (z1, n1) = (z1 * area, n1 * area);
    let z0 = (-v.norm_sqr() / tau2).exp() / (std::f64::consts::PI * tau2);
    n1 * eps / (eps * z1 + (1.0 - eps) * z0)
}

#[test]
fn criterion_02_mmse_oracle() {
    let start = Instant::now();
    let (eps, beta, tau2) = (0.05, 1.0, 0.1);
    let prior = BgPrior { eps, beta };
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let v = Complex64::from_polar(3.0 * k as f64 / 99.0, 0.7 * k as f64);
        let got = mmse_denoise(&[v], tau2, prior)[0];
        worst = worst.max((got - quadrature_posterior_mean(v, tau2, eps, beta)).norm());
    }
    let mut wiener_gap: f64 = 0.0;
    for k in 0..50 {
        let v: Vec<Complex64> = (0..4).map(|i| Complex64::new(k as f64 * 0.3 - 7.0, i as f64 - 1.5)).collect();
        let got = mmse_denoise(&v, tau2, BgPrior { eps: 1.0, beta });
        for (g, x) in got.iter().zip(&v) {
            wiener_gap = wiener_gap.max((g - x * (beta / (beta + tau2))).norm());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        worst <= 1e-6 && wiener_gap == 0.0,
        format!("max |closed form - quadrature| = {worst:.2e}, Wiener gap = {wiener_gap:e}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_03_state_evolution_fidelity() {
    let start = Instant::now();
    let (n, l, trials) = (2000, 400, 100u64);
    let mut config = SystemConfig::reference(l, 1);
    config.pathloss_model = PathLossModel::Unit;
    let noise_dbm = config.noise_psd_dbm_hz + 10.0 * config.bandwidth_hz.log10();
    config.tx_power_dbm = noise_dbm - 10.0 * (0.01 * l as f64).log10();
    let budget = link_budget(&config);
    assert!((budget.noise_ratio() - 0.01).abs() < 1e-12);

    let prior = SePrior::uniform(0.05, 1.0, n as f64 / l as f64, budget.noise_ratio()).unwrap();
    let map = MseMap::with_defaults(prior.clone(), 1).unwrap();
    let se = map.iterate(&DenoiserSpec::MmseBg(prior.population.clone()), 500, 1e-10).unwrap();

    let denoiser = DenoiserSpec::MmseBg(vec![BgPrior { eps: 0.05, beta: 1.0 }; n]);
    let beta = vec![1.0; n];
    let mut residual: Vec<f64> = (0..trials)
        .map(|t| {
            let s = |p| RandomStream::substream(config.seed, t, p);
            let pattern = draw_activity(&config, &mut s(Purpose::Activity));
            let ch = draw_channels(&config, &pattern, &beta, &mut s(Purpose::Fading)).unwrap();
            let a = generate_gaussian_pilots(l, n, 0, &mut s(Purpose::Pilots));
            let y = synthesize_received(&a, &ch.x, budget.xi, budget.sigma2, &mut s(Purpose::Noise)).unwrap();
            amp_run(&y, &a, &denoiser, &AmpOptions::default(), None).unwrap().state.tau2
        })
        .collect();
    residual.sort_by(f64::total_cmp);
    let median = 0.5 * (residual[49] + residual[50]);
    let rel = (median - se.fixed_point).abs() / se.fixed_point;
    let elapsed = start.elapsed();
    verdict(
        3,
        se.converged && rel <= 0.05 && elapsed < Duration::from_secs(300),
        format!(
            "SE tau2* = {:.6e}, median empirical ||R||^2/L = {median:.6e}, relative gap {rel:.4}, {elapsed:.2?}",
            se.fixed_point
        ),
    );
}

#[test]
fn criterion_04_smv_detection_versus_pilot_length() {
    let start = Instant::now();
    let mmse = run_experiment(&ExperimentSpec::example2_smv()).unwrap();
    let mut spec = ExperimentSpec::example2_smv();
    spec.denoiser = massive_access::harness::DenoiserChoice::Soft { kappa: None };
    let soft = run_experiment(&spec).unwrap();
    let elapsed = start.elapsed();

    let m: Vec<f64> = mmse.metrics.rows.iter().map(equalized).collect();
    let s: Vec<f64> = soft.metrics.rows.iter().map(equalized).collect();
    let monotone = |e: &[f64]| e.windows(2).all(|w| w[1] <= w[0]);
    let dominates = mmse
        .metrics
        .rows
        .iter()
        .zip(&soft.metrics.rows)
        .all(|(a, b)| equalized(a) <= equalized(b) + 3.0 * (stderr(a).powi(2) + stderr(b).powi(2)).sqrt());
    let ninety = mmse.metrics.rows.iter().find(|r| equalized(r) <= 0.1).map(|r| r.sweep);
    let ok = monotone(&m)
        && monotone(&s)
        && dominates
        && ninety.is_some_and(|l| l <= 300.0)
        && elapsed < Duration::from_secs(1800);
    let fmt = |e: &[f64]| e.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    verdict(
        4,
        ok,
        format!(
            "L=100..400 mmse [{}] soft [{}], first L with error <= 0.1: {ninety:?}, {elapsed:.0?}",
            fmt(&m),
            fmt(&s)
        ),
    );
}

#[test]
fn criterion_05_massive_mimo_gain() {
    let start = Instant::now();
    let report = run_experiment(&ExperimentSpec::example3_mmv()).unwrap();
    let elapsed = start.elapsed();
    let rows = &report.metrics.rows;
    let e: Vec<f64> = rows.iter().map(equalized).collect();
    let (first, last) = (e[0], *e.last().unwrap());
    let decreasing = rows
        .windows(2)
        .all(|w| equalized(&w[1]) + 3.0 * (stderr(&w[0]).powi(2) + stderr(&w[1]).powi(2)).sqrt() < equalized(&w[0]));
    let ok = last <= 2e-3 && last * 100.0 <= first && decreasing && elapsed < Duration::from_secs(7200);
    let detail = rows
        .iter()
        .map(|r| format!("M={} {:.2e}", r.sweep, equalized(r)))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(5, ok, format!("L=120: {detail}, {elapsed:.0?}"));
}

#[test]
fn criterion_06_asymptotic_antenna_trend() {
    let antennas = [2usize, 4, 8, 16, 32];
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in [1u64, 2, 3] {
        let logs: Vec<f64> = antennas
            .iter()
            .map(|&m| {
                let mut config = SystemConfig::reference(120, m);
                config.seed = seed;
                let (_, md, fa) = se_predict(&config, None).unwrap();
                (0.5 * (md + fa)).ln()
            })
            .collect();
        let slopes: Vec<f64> = logs
            .windows(2)
            .zip(antennas.windows(2))
            .map(|(l, m)| (l[1] - l[0]) / (m[1] - m[0]) as f64)
            .collect();
        let decreasing = slopes.iter().all(|&s| s < 0.0);
        let convex = slopes.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs());
        ok &= decreasing && convex && logs.iter().all(|l| l.is_finite());
        lines.push(format!(
            "seed {seed}: ln e = [{}]",
            logs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
        ));
    }
    verdict(6, ok, format!("predicted equalized error, M=2..32 at L=120; {}", lines.join("; ")));
}

/// `Q(M, x) = exp(-x) sum_{k<M} x^k / k!` for integer `M`.
fn erlang_tail(m: usize, x: f64) -> f64 {
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..m {
        term *= x / k as f64;
        sum += term;
    }
    (-x).exp() * sum
}

#[test]
fn criterion_07_closed_form_false_alarm() {
    let samples = 1_000_000;
    let tau2: f64 = 0.3;
    let mut lines = Vec::new();
    let mut ok = true;
    for (m, ratio) in [(1usize, 3.0f64), (4, 8.0), (16, 22.0)] {
        let theta = (ratio * tau2).sqrt();
        let mut s = RandomStream::new(70 + m as u64);
        let hits = (0..samples)
            .filter(|_| (0..m).map(|_| s.complex_normal(tau2).norm_sqr()).sum::<f64>() > theta * theta)
            .count();
        let empirical = hits as f64 / samples as f64;
        let (_, closed) = predict_md_fa(tau2, theta, BgPrior { eps: 0.1, beta: 1.0 }, m);
        let se = (closed * (1.0 - closed) / samples as f64).sqrt();
        ok &= (closed - erlang_tail(m, ratio)).abs() < 1e-12 && (empirical - closed).abs() <= 3.0 * se;
        if m == 1 {
            ok &= (closed - (-ratio).exp()).abs() < 1e-15;
        }
        lines.push(format!("M={m} empirical {empirical:.5} closed {closed:.5} (3se {:.5})", 3.0 * se));
    }
    verdict(7, ok, lines.join(", "));
}

#[test]
fn criterion_08_peeling() {
    let truth = |n: usize, support: &[usize], s: &mut RandomStream| -> Vec<Complex64> {
        let mut x = vec![Complex64::new(0.0, 0.0); n];
        for &c in support {
            x[c] = Complex64::new(1.0 + s.uniform(), s.uniform());
        }
        x
    };
    let mut s = RandomStream::new(8);
    let demo = PeelingInstance::noiseless(SparseGraphSpec::walkthrough(), truth(7, &[0, 2, 5], &mut s)).unwrap();
    let out = peel(&demo, 10, None);
    let demo_ok = out.steps == vec![(0, 0), (2, 1), (5, 2)] && out.complete() && out.peels() == 3;

    let mut mismatches = 0;
    for i in 0..1000u64 {
        let mut g = RandomStream::substream(8, i, Purpose::Protocol);
        let graph = SparseGraphSpec::column_regular(60, 100, 2, &mut g);
        let support = g.distinct_indices(100, 10);
        let inst = PeelingInstance::noiseless(graph, truth(100, &support, &mut g)).unwrap();
        let reference = peel(&inst, 1000, None).recovered_set();
        let mut order = RandomStream::substream(8, i, Purpose::Shuffle);
        for _ in 0..3 {
            if peel(&inst, 1000, Some(&mut order)).recovered_set() != reference {
                mismatches += 1;
            }
        }
    }
    verdict(
        8,
        demo_ok && mismatches == 0,
        format!("walkthrough steps {:?}, order-dependent outcomes in 3000 re-runs: {mismatches}", out.steps),
    );
}

/// Largest load at which two replicas per user still decode: the nonzero
/// root of `x = 1 - exp(-2 G x)` appears at `2 G = 1`.
const REGULAR_TWO_THRESHOLD: f64 = 0.5;
const WATERFALL_LEVEL: f64 = 0.95;

#[test]
fn criterion_09_csa_versus_density_evolution() {
    let de = density_evolution_threshold(&DegreeDistribution::regular(2), 100_000, 1e-6, 10.0);
    let report = run_experiment(&ExperimentSpec::csa()).unwrap();
    let curve: Vec<(f64, f64)> = report.csa.iter().map(|r| (r.load, r.resolved_fraction)).collect();
    let waterfall = waterfall_load(&curve, WATERFALL_LEVEL);
    let mut light = ExperimentSpec::csa();
    light.sweep.values = vec![0.005];
    let light = run_experiment(&light).unwrap().csa[0].resolved_fraction;
    let ok = (de - REGULAR_TWO_THRESHOLD).abs() < 1e-4
        && waterfall.is_some_and(|w| (w - de).abs() <= 0.05)
        && curve[0].1 >= 0.999
        && light == 1.0;
    verdict(
        9,
        ok,
        format!(
            "DE threshold {de:.5}, 200-slot waterfall at {WATERFALL_LEVEL} resolved: {waterfall:?}, resolved at G={}: {:.5}, at G=0.005: {light}",
            curve[0].0, curve[0].1
        ),
    );
}

#[test]
fn criterion_10_embedded_bits() {
    let start = Instant::now();
    let report = run_experiment(&ExperimentSpec::embedded()).unwrap();
    let bits = report.bits[0];
    let (beta, s2, m): (f64, f64, usize) = (1.3, 0.7, 8);
    let zero = vec![Complex64::new(0.0, 0.0); m];
    let closed = (s2 / (beta + s2)).powi(m as i32);
    let lambda_gap = (likelihood_ratio(&zero, beta, s2) / closed - 1.0).abs();
    let gamma_gap = (sigmoid_weight(0.5, 20.0) - 0.5).abs();
    let ok = bits.ber <= 1e-2 && bits.bits_compared > 0 && lambda_gap <= 1e-12 && gamma_gap <= 1e-12;
    verdict(
        10,
        ok,
        format!(
            "J=1 M=64: BER {:.2e} over {} bits, equalized activity error {:.2e}, identities gaps {lambda_gap:.1e}/{gamma_gap:.1e}, {:.0?}",
            bits.ber,
            bits.bits_compared,
            equalized(&report.metrics.rows[0]),
            start.elapsed()
        ),
    );
}

/// Shortened run of a preset exercising the same code path.
fn shortened(name: &str) -> ExperimentSpec {
    let mut spec = ExperimentSpec::preset(name).unwrap();
    let keep = spec.sweep.values.len().min(2);
    spec.sweep.values.truncate(keep);
    spec.trials = match name {
        "example1" | "csa" => 500,
        "example2_smv" | "example3_mmv" | "embedded" => 2,
        _ => 4,
    };
    spec.se_prediction = spec.scenario.is_detection() && name != "embedded";
    spec
}

#[test]
fn criterion_11_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    for name in PRESETS {
        let spec = shortened(name);
        let mut outputs = Vec::new();
        for (i, threads) in [1usize, 3, 3].into_iter().enumerate() {
            let report = run_experiment_with(&spec, &RunOptions { threads: Some(threads), deterministic: true }).unwrap();
            let out = dir.path().join(format!("{name}-{i}"));
            let files = emit_outputs(&report, &out).unwrap();
            let csv: Vec<(String, Vec<u8>)> = files
                .iter()
                .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
                .collect();
            outputs.push(csv);
        }
        if outputs.windows(2).any(|w| w[0] != w[1]) {
            differing.push(*name);
        }
    }
    verdict(
        11,
        differing.is_empty(),
        format!("{} presets re-run on 1 and 3 threads, differing: {differing:?}", PRESETS.len()),
    );
}
