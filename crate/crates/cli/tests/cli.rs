use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_massive-access"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn smv_desk(out: &Path, threads: &str) -> Output {
    run(&[
        "amp-smv",
        "--preset",
        "example2_smv_desk",
        "--sweep",
        "L=30,40",
        "--trials",
        "3",
        "--seed",
        "11",
        "--threads",
        threads,
        "--deterministic",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn grant_based_writes_example1_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = run(&["grant-based", "--sweep", "L=930", "--trials", "5000", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out.join("grant_based.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("L,mean_granted,stderr,mode"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "930");
    assert!((row[1].parse::<f64>().unwrap() - 89.9).abs() < 0.3);
    assert_eq!(row[3], "none");
    assert_eq!(read(&out.join("metrics.csv")), "sweep,p_md,p_fa,se_md,se_fa,theta,iters,wall_ms\n");
}

#[test]
fn detection_outputs_are_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(smv_desk(&a, "1").status.success());
    assert!(smv_desk(&b, "4").status.success());
    let csv = read(&a.join("metrics.csv"));
    assert_eq!(csv, read(&b.join("metrics.csv")));
    assert!(csv.starts_with("sweep,p_md,p_fa,se_md,se_fa,theta,iters,wall_ms\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn meta_json_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(smv_desk(&a, "2").status.success());
    let meta = a.join("metrics.meta.json");
    let json: serde_json::Value = serde_json::from_str(&read(&meta)).unwrap();
    assert_eq!(json["seed"], 11);
    assert!(json["git_describe"].as_str().is_some_and(|s| !s.is_empty()));
    let o = run(&["amp-smv", "--config", meta.to_str().unwrap(), "--deterministic", "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&a.join("metrics.csv")), read(&b.join("metrics.csv")));
}

#[test]
fn system_config_file_replaces_the_base_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"N": 40, "eps": 0.1, "L": 20, "M": 2, "J": 0, "tx_power_dbm": -89.0,
            "noise_psd_dbm_hz": -169.0, "bandwidth_hz": 1e6, "cell_radius_m": 1000.0,
            "pathloss_model": "unit", "seed": 5}"#,
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "amp-mmv",
        "--config",
        cfg.to_str().unwrap(),
        "--sweep",
        "M=1,2",
        "--trials",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let meta: serde_json::Value = serde_json::from_str(&read(&out.join("metrics.meta.json"))).unwrap();
    assert_eq!(meta["spec"]["base_config"]["N"], 40);
    assert_eq!(read(&out.join("metrics.csv")).lines().count(), 3);
}

#[test]
fn protocol_subcommands_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = run(&["csa", "--sweep", "G=0.1,0.9", "--trials", "50", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = read(&out.join("csa.csv"));
    assert!(csv.starts_with("G,resolved_fraction\n"));
    let out = dir.path().join("d");
    let o = run(&["density-evolution", "--sweep", "G=0.3,0.7", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = read(&out.join("density_evolution.csv"));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "G,x_infinity");
    assert!(rows[1].starts_with("0.3,") && rows[2].starts_with("0.7,"));
    let meta: serde_json::Value = serde_json::from_str(&read(&out.join("metrics.meta.json"))).unwrap();
    assert!((meta["de_threshold"].as_f64().unwrap() - 0.5).abs() < 1e-3);
}

#[test]
fn se_trace_writes_one_trace_per_sweep_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = run(&["se-trace", "--preset", "example2_smv_desk", "--sweep", "L=50,100", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out.join("se_trace.csv"));
    assert!(csv.starts_with("sweep,iteration,tau2\n"));
    assert!(csv.lines().any(|l| l.starts_with("50,0,")) && csv.lines().any(|l| l.starts_with("100,0,")));
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    for args in [
        vec!["amp-smv", "--sweep", "Q=1", "--out", out],
        vec!["amp-smv", "--trials", "0", "--out", out],
        vec!["amp-smv", "--sweep", "L=10.5", "--out", out],
        vec!["grant-based", "--preset", "csa", "--out", out],
        vec!["embedded", "--denoiser", "mmse", "--out", out],
        vec!["amp-smv", "--denoiser", "lasso", "--out", out],
    ] {
        assert_eq!(run(&args).status.code(), Some(2), "{args:?}");
    }
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"N\":").unwrap();
    let o = run(&["amp-smv", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"N": 10, "eps": 0.1, "L": 5, "M": 1, "J": 0, "tx_power_dbm": 1e308,
            "noise_psd_dbm_hz": -169.0, "bandwidth_hz": 1e6, "cell_radius_m": 1000.0,
            "pathloss_model": "urban_macro", "seed": 1}"#,
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "amp-smv",
        "--config",
        cfg.to_str().unwrap(),
        "--sweep",
        "L=5",
        "--trials",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}
