use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use homoscale::pipeline::{
    calibrate_supercell, homogenize_coefficient, run_experiment, write_report, ExperimentConfig, EXPERIMENTS,
};
use homoscale::{AnalyticCoefficient, Calibration, ScaleVector};

const EXIT_PASS: u8 = 0;
const EXIT_THRESHOLD: u8 = 2;
const EXIT_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "homoscale", version, about = "Multiscale periodic homogenization on the lifted torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named experiment and write its JSON report and CSV tables.
    Run {
        /// Experiment name (see `homoscale list`).
        experiment: String,
        /// Experiment configuration (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Homogenize an analytic coefficient for a given scale vector.
    Homogenize {
        /// Coefficient as a JSON Fourier sum.
        #[arg(long)]
        coef: PathBuf,
        /// Comma-separated scales, outermost first.
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
        /// Calibration constants (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Compare with a fine reference solve (d = 1 only).
        #[arg(long)]
        reference: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Sweep the calibration constants against an oracle.
    Calibrate {
        #[arg(long, value_enum, default_value_t = Oracle::Supercell)]
        oracle: Oracle,
        /// Base calibration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// List the available experiments.
    List,
}

#[derive(Clone, Copy, ValueEnum)]
enum Oracle {
    Supercell,
}

type CliResult = Result<u8, String>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn read_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, String> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn write_json<T: serde::Serialize>(value: &T, dir: &Path, name: &str) -> Result<PathBuf, String> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    fs::write(&path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(path)
}

fn run(experiment: &str, config: Option<&Path>, out: &Path) -> CliResult {
    let cfg: ExperimentConfig = read_or_default(config)?;
    let report = run_experiment(experiment, &cfg).map_err(|e| e.to_string())?;
    let files = write_report(&report, out).map_err(|e| e.to_string())?;
    for c in &report.checks {
        let status = if c.informational {
            "info"
        } else if c.pass {
            "PASS"
        } else {
            "FAIL"
        };
        println!("{:<32} {:>14.6e}  {:<24} {status}", c.name, c.value, c.threshold);
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(if report.partial {
        eprintln!("time budget exhausted: partial results");
        EXIT_ERROR
    } else if report.passed {
        EXIT_PASS
    } else {
        EXIT_THRESHOLD
    })
}

fn homogenize(coef: &Path, eps: Vec<f64>, config: Option<&Path>, reference: bool, out: &Path) -> CliResult {
    let coef: AnalyticCoefficient = read_json(coef)?;
    let cfg: Calibration = read_or_default(config)?;
    let scales = ScaleVector::new(eps).map_err(|e| e.to_string())?;
    let report = homogenize_coefficient(&coef, &scales, &cfg, reference).map_err(|e| e.to_string())?;
    let path = write_json(&report, out, "pipeline.json")?;
    println!("effective matrix: {:?}", report.abar);
    for st in &report.stages {
        println!("stage {:?} over scales {:?}", st.kind, st.scales);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {}", path.display());
    Ok(match &report.measured {
        Some(m) if m.l2_error > m.budget => {
            println!("measured L2 error {:.3e} exceeds budget {:.3e}", m.l2_error, m.budget);
            EXIT_THRESHOLD
        }
        _ => EXIT_PASS,
    })
}

fn calibrate(config: Option<&Path>, out: &Path) -> CliResult {
    let base: Calibration = read_or_default(config)?;
    let report = calibrate_supercell(&base).map_err(|e| e.to_string())?;
    for p in &report.points {
        println!(
            "c_sep {:<5} c_tau {:<5} delta {:<7.4} gap {:>10.3e} tol {:>10.3e} {}",
            p.c_sep,
            p.c_tau,
            p.delta,
            p.gap,
            p.tolerance,
            if p.pass { "PASS" } else { "FAIL" }
        );
    }
    let path = write_json(&report, out, "calibration.json")?;
    println!("wrote {}", path.display());
    Ok(if report.recommended.is_some() {
        EXIT_PASS
    } else {
        eprintln!("no calibration passed the oracle");
        EXIT_THRESHOLD
    })
}

fn configure_threads() -> Result<(), String> {
    if let Ok(v) = std::env::var("HOMOSCALE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| format!("HOMOSCALE_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Run { experiment, config, out } => run(&experiment, config.as_deref(), &out),
        Command::Homogenize {
            coef,
            eps,
            config,
            reference,
            out,
        } => homogenize(&coef, eps, config.as_deref(), reference, &out),
        Command::Calibrate { oracle: Oracle::Supercell, config, out } => calibrate(config.as_deref(), &out),
        Command::List => {
            for name in EXPERIMENTS {
                println!("{name}");
            }
            Ok(EXIT_PASS)
        }
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
