//! `fedmoe` command-line runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedmoe_core::experiment::run_experiment;
use fedmoe_core::report::{cvi_from_summaries, read_profile_csv, read_summary, summary_value, write_reports};
use fedmoe_core::search::{exhaustive_search, heuristic_search};
use fedmoe_core::{ExperimentConfig, Variant};

#[derive(Parser)]
#[command(name = "fedmoe", version, about = "Personalized sub-MoE federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its reports to the configured output directory.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation variant (full, no_stage1, no_stage2).
    Ablate {
        config: PathBuf,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exhaustive submodel search on a profile CSV (`[client,]layer,expert,p`).
    OracleSearch {
        profile: PathBuf,
        /// Client memory budget in bytes.
        #[arg(long)]
        budget: u64,
        /// Experiment config supplying model sizes and optimizer.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Client to read when the CSV holds several.
        #[arg(long)]
        client: Option<usize>,
        /// Memory threshold coefficient override.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Per-task coefficient of variation and CVI across several summary.csv files.
    Cvi {
        #[arg(required = true, num_args = 2..)]
        summaries: Vec<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>, rounds: Option<usize>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    if !path.exists() {
        bail!("config file not found: {}", path.display());
    }
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("invalid config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = rounds {
        cfg.rounds = r;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cfg: &ExperimentConfig) -> Result<()> {
    let report = run_experiment(cfg)?;
    write_reports(&report, &cfg.output_dir)
        .with_context(|| format!("writing reports to {}", cfg.output_dir.display()))?;
    let rows = fedmoe_core::report::summary_rows(&report);
    let get = |m: &str| summary_value(&rows, m, None).unwrap_or(f64::NAN);
    println!(
        "method={:?} variant={:?} seed={} rounds={} mean_final_test_accuracy={:.4} total_comm_bytes={} peak_memory_bytes={} avg_experts {} -> {}",
        cfg.method,
        cfg.variant,
        cfg.seed,
        cfg.rounds,
        get("mean_final_test_accuracy"),
        get("total_comm_bytes"),
        get("peak_memory_bytes"),
        get("initial_avg_expert_count"),
        get("final_avg_expert_count"),
    );
    println!("reports written to {}", cfg.output_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, rounds, out } => execute(&load_config(&config, seed, rounds, out)?),
        Command::Ablate { config, variant, seed, rounds, out } => {
            let mut cfg = load_config(&config, seed, rounds, out)?;
            cfg.variant = variant;
            execute(&cfg)
        }
        Command::OracleSearch { profile, budget, config, client, alpha } => {
            if !profile.exists() {
                bail!("profile file not found: {}", profile.display());
            }
            let prof = read_profile_csv(&profile, client)?;
            let mut cfg = match config {
                Some(p) => load_config(&p, None, None, None)?,
                None => {
                    let mut c = ExperimentConfig::default();
                    c.model.num_layers = prof.probs.nrows();
                    c.model.experts_per_layer = prof.probs.ncols();
                    c
                }
            };
            if let Some(a) = alpha {
                cfg.search.alpha_mem = a;
            }
            cfg.search.validate()?;
            let mode = cfg.memory_mode();
            let oracle = exhaustive_search(&prof, budget, &cfg.search, &cfg.model, mode)?;
            let heur = heuristic_search(&prof, budget, &cfg.search, &cfg.model, mode)?;
            println!("layer,expert,retained");
            for (i, layer) in oracle.mask.iter().enumerate() {
                for (j, &r) in layer.iter().enumerate() {
                    println!("{i},{j},{r}");
                }
            }
            println!("# exhaustive theta={} experts={} mem={}", oracle.theta, oracle.expert_count(), oracle.mem_estimate);
            println!("# heuristic  theta={} experts={} mem={}", heur.theta, heur.expert_count(), heur.mem_estimate);
            Ok(())
        }
        Command::Cvi { summaries } => {
            let parsed = summaries
                .iter()
                .map(|p| {
                    if !p.exists() {
                        bail!("summary file not found: {}", p.display());
                    }
                    Ok(read_summary(p)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let (cvs, cvi) = cvi_from_summaries(&parsed)?;
            println!("task,cv");
            for (t, cv) in cvs.iter().enumerate() {
                println!("{t},{cv}");
            }
            println!("cvi,{cvi}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
