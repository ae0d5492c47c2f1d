use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsim::orchestrator::{cluster_report, compare, run, RunConfig, RunOptions};
use fedsim::Error;

#[derive(Parser)]
#[command(name = "fedsim", about = "Deterministic federated-learning simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunFlags {
    /// Override the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-round parameter snapshots for offline recomputation.
    #[arg(long)]
    dump_params: bool,
    /// Write per-round similarity/weight matrices.
    #[arg(long)]
    dump_similarity: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one config: traces per seed plus a consolidated report.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run several configs and print a method × scenario table.
    Compare {
        configs: Vec<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Print the feature-space cluster assignment for a config.
    Cluster { config: PathBuf },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn out_dir(flags: &RunFlags, cfg: &RunConfig) -> PathBuf {
    flags
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("fedsim_out"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Json(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, flags } => {
            let cfg = load(&config, flags.seed)?;
            let out = out_dir(&flags, &cfg);
            let opts = RunOptions {
                dump_params: flags.dump_params,
                dump_similarity: flags.dump_similarity,
            };
            let report = run(&cfg, &out, opts)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Compare { configs, flags } => {
            if configs.is_empty() {
                return Err(Error::Config("compare needs at least one config".into()));
            }
            let mut cfgs = Vec::new();
            for p in &configs {
                cfgs.push(load(p, flags.seed)?);
            }
            let out = flags.out.clone().unwrap_or_else(|| PathBuf::from("fedsim_out"));
            let opts = RunOptions {
                dump_params: flags.dump_params,
                dump_similarity: flags.dump_similarity,
            };
            let comparison = compare(&cfgs, &out, opts)?;
            print!("{}", comparison.to_table());
            Ok(())
        }
        Command::Cluster { config } => {
            let cfg = load(&config, None)?;
            let assignment = cluster_report(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&assignment)?);
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load(&config, None)?;
            println!("ok: {} / {}", cfg.method.name(), cfg.scenario_label());
            Ok(())
        }
    }
}
