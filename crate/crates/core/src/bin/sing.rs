use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sing::harness::{self, verify, ExperimentConfig};
use sing::Error;

#[derive(Parser)]
#[command(name = "sing", version, about = "Sinkhorn natural gradient experiments")]
struct Cli {
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for cost-matrix rows.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Overrides the output directory in the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment; writes run.csv, loss.svg and summary.json.
    Run { config: PathBuf },
    /// Run self-checks and print a JSON report.
    Verify {
        #[arg(long, default_value = "tiny")]
        suite: String,
    },
    /// Plot one or more run.csv files into a single chart.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write the eSIM at the config's initial parameters as CSV.
    ExportSim {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn load_config(cli: &Cli, path: &Path) -> sing::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

/// Legend label: the optimizer from a sibling summary.json, else the file
/// stem.
fn run_label(path: &Path) -> String {
    let summary = path.with_file_name("summary.json");
    std::fs::read_to_string(summary)
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| v.get("optimizer").and_then(|o| o.as_str()).map(str::to_string))
        .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
}

fn execute(cli: &Cli) -> sing::Result<()> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = load_config(cli, config)?;
            let record = harness::run_experiment(&cfg)?;
            for w in &record.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(e) = record.error {
                return Err(Error::RunAborted(e));
            }
            println!(
                "{}",
                serde_json::json!({
                    "output_dir": cfg.output_dir,
                    "final_objective": record.rows.last().map(|r| r.objective),
                })
            );
            Ok(())
        }
        Command::Verify { suite } => {
            let report = verify::run_suite(suite.parse()?)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(dir) = &cli.out_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(format!("verify-{}.json", report.suite));
                std::fs::write(&path, format!("{text}\n")).map_err(|e| Error::io(&path, e))?;
            }
            println!("{text}");
            if report.passed {
                Ok(())
            } else {
                Err(Error::RunAborted("verification failed".into()))
            }
        }
        Command::Plot { runs, output } => {
            let mut loaded = Vec::new();
            for path in runs {
                loaded.push((run_label(path), harness::read_csv(path)?));
            }
            let refs: Vec<(&str, &[harness::RunRow])> = loaded.iter().map(|(l, r)| (l.as_str(), r.as_slice())).collect();
            harness::emit_svg_multi(&refs, output)
        }
        Command::ExportSim { config, output } => {
            let cfg = load_config(cli, config)?;
            let op = harness::export_sim(&cfg)?;
            let csv = op.to_csv().expect("explicit mode");
            std::fs::write(output, csv).map_err(|e| Error::io(output, e))
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::DimensionMismatch { .. } => "dimension_mismatch",
        Error::InvalidMeasure(_) => "invalid_measure",
        Error::InvalidConfig(_) => "invalid_config",
        Error::NonFinitePotential => "non_finite_potential",
        Error::NotConverged { .. } => "not_converged",
        Error::PotentialNotConverged { .. } => "potential_not_converged",
        Error::StalePotential { .. } => "stale_potential",
        Error::JacobianNotConverged { .. } => "jacobian_not_converged",
        Error::IndefiniteSolve { .. } => "indefinite_solve",
        Error::NonFiniteProbe { .. } => "non_finite_probe",
        Error::Io { .. } => "io",
        Error::Parse { .. } => "parse",
        Error::Json(_) => "json",
        Error::EmptyRecord => "empty_record",
        Error::RunAborted(_) => "run_aborted",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": "threads", "message": e.to_string()}));
            return ExitCode::FAILURE;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": error_kind(&e), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
