use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flcleaner::harness::{build_partition, emit_reports, load_dataset, run_experiment, ExperimentConfig};
use flcleaner::{oracle, Error};

#[derive(Parser)]
#[command(name = "flcleaner", version, about = "Federated-learning poisoning defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the client partition of a config.
    Partition {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print the full `{client_id: [indices]}` JSON instead of sizes.
        #[arg(long)]
        inspect: bool,
    },
    /// Cross-check a fast routine against its brute-force reference.
    Oracle {
        which: OracleKind,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    Geomed,
    Trust,
}

fn config_from(path: Option<&PathBuf>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let result = run_experiment(&cfg)?;
            emit_reports(&result, &out)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            for r in &result.reports {
                for w in &r.warnings {
                    eprintln!("warning: round {}: {w}", r.round);
                }
                println!(
                    "round {:>3}  acc {:.4}  recall {:.3}  fpr {:.3}  asr {:.4}  blocked {:?}",
                    r.round, r.acc, r.recall, r.fpr, r.asr, r.blocked_ids
                );
            }
            println!("reports written to {}", out.display());
            Ok(true)
        }
        Command::Partition { config, inspect } => {
            let cfg = config_from(config.as_ref())?;
            let (train, _) = load_dataset(&cfg)?;
            let train = if cfg.train_limit > 0 { train.truncated(cfg.train_limit) } else { train };
            let p = build_partition(&cfg, &train)?;
            if inspect {
                println!("{}", p.to_json());
            } else {
                for (c, n) in p.sizes().iter().enumerate() {
                    println!("client {c}: {n} samples");
                }
            }
            Ok(true)
        }
        Command::Oracle { which, instances, seed } => {
            let report = match which {
                OracleKind::Geomed => oracle::check_geomed(instances, seed)?,
                OracleKind::Trust => oracle::check_trust(instances, seed)?,
            };
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
