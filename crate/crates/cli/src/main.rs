use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use massive_access::harness::{
    emit_outputs, run_experiment_with, se_trace, tune_kappa, DenoiserChoice, ExperimentSpec, RunMeta, RunOptions,
    Scenario, Sweep,
};
use massive_access::model::SystemConfig;
use massive_access::{Error, Result};

#[derive(Parser)]
#[command(name = "massive-access", version, about = "Grant-free massive random access simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grant-based random access with and without capture.
    GrantBased(Common),
    /// Single-antenna AMP activity detection.
    AmpSmv(Common),
    /// Multi-antenna AMP activity detection.
    AmpMmv(Common),
    /// AMP detection with embedded bits.
    Embedded(Common),
    /// Coded slotted ALOHA with successive interference cancellation.
    Csa(Common),
    /// Density evolution of the SIC decoder.
    DensityEvolution(Common),
    /// State-evolution trace of the MSE map.
    SeTrace(Common),
}

#[derive(Args)]
struct Common {
    /// JSON file holding a system configuration, an experiment spec, or a
    /// `metrics.meta.json` from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset to start from instead of the subcommand default.
    #[arg(long)]
    preset: Option<String>,
    /// Swept parameter and values, e.g. `L=100,150,200`.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_parser = ["soft", "mmse"])]
    denoiser: Option<String>,
    /// Report zero wall times so outputs depend on the inputs only.
    #[arg(long)]
    deterministic: bool,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::GrantBased(c) => ("example1", c),
            Command::AmpSmv(c) => ("example2_smv", c),
            Command::AmpMmv(c) => ("example3_mmv", c),
            Command::Embedded(c) => ("embedded", c),
            Command::Csa(c) => ("csa", c),
            Command::DensityEvolution(c) => ("density_evolution", c),
            Command::SeTrace(c) => ("example2_smv", c),
        }
    }
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn from_value<T: serde::de::DeserializeOwned>(path: &Path, v: serde_json::Value) -> Result<T> {
    serde_json::from_value(v).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn resolve(default_preset: &str, c: &Common, se_only: bool) -> Result<ExperimentSpec> {
    let expected = ExperimentSpec::preset(default_preset)?.scenario;
    let mut spec = ExperimentSpec::preset(c.preset.as_deref().unwrap_or(default_preset))?;
    if let Some(path) = &c.config {
        let value = read_json(path)?;
        if value.get("spec").is_some() {
            spec = from_value::<RunMeta>(path, value)?.spec;
        } else if value.get("scenario").is_some() {
            spec = from_value(path, value)?;
        } else {
            spec.base_config = from_value::<SystemConfig>(path, value)?;
        }
    }
    let compatible = spec.scenario == expected
        || (spec.scenario == Scenario::Custom && matches!(expected, Scenario::Example2Smv | Scenario::Example3Mmv))
        || (se_only && spec.scenario.is_detection());
    if !compatible {
        return Err(Error::Config(format!(
            "spec describes scenario {:?}, which this subcommand does not run",
            spec.scenario
        )));
    }
    if let Some(s) = &c.sweep {
        spec.sweep = s.parse::<Sweep>()?;
    }
    if let Some(t) = c.trials {
        spec.trials = t;
    }
    if let Some(seed) = c.seed {
        spec.base_config.seed = seed;
    }
    if let Some(d) = &c.denoiser {
        spec.denoiser = d.parse::<DenoiserChoice>()?;
    }
    spec.output_path = Some(c.out.clone());
    spec.validate()?;
    Ok(spec)
}

fn write_se_traces(spec: &ExperimentSpec, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join("se_trace.csv");
    let mut out = String::from("sweep,iteration,tau2\n");
    for &v in &spec.sweep.values {
        let config = spec.config_at(v)?;
        let kappa = match spec.denoiser {
            DenoiserChoice::Mmse => None,
            DenoiserChoice::Soft { kappa: Some(k) } => Some(k),
            DenoiserChoice::Soft { kappa: None } => Some(tune_kappa(&config)?),
        };
        let trace = se_trace(&config, kappa)?;
        for (t, tau2) in trace.tau2.iter().enumerate() {
            out.push_str(&format!("{v},{t},{tau2:e}\n"));
        }
        eprintln!(
            "{}={v}: tau2* = {:e}{}",
            spec.sweep.param.name(),
            trace.fixed_point,
            if trace.converged { "" } else { " (not converged)" }
        );
    }
    std::fs::write(&path, out).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let (preset, common) = cli.command.parts();
    let se_only = matches!(cli.command, Command::SeTrace(_));
    let spec = resolve(preset, common, se_only)?;
    if se_only {
        return Ok(vec![write_se_traces(&spec, &common.out)?]);
    }
    let options = RunOptions {
        threads: common.threads,
        deterministic: common.deterministic,
    };
    let report = run_experiment_with(&spec, &options)?;
    emit_outputs(&report, &common.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
