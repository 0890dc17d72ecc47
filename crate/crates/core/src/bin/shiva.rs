//! Experiment harness CLI.
//!
//! `shiva <subcommand> --config <path> [--seed n] [--out dir] [--set key=value ...]`
//!
//! Every command writes `report.json` and `series.csv` (plus `plot.svg`
//! and command-specific artifacts) into the output directory. Identical
//! config + seed produce byte-identical CSV output. Exit code is nonzero
//! on any error; `gradcheck` additionally exits nonzero if any check
//! fails.

use clap::{Parser, Subcommand};
use shiva_core::config::ExperimentConfig;
use shiva_core::experiments;
use shiva_core::report::CommandOutput;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "shiva", version, about = "Differentiable top-k selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Config file (key = value lines); defaults are built in.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (default: out/ + the command name).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override single config keys, e.g. --set n_tokens=64.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Joint router/budget learning on the synthetic signal-vs-noise task.
    #[command(alias = "budget_dynamics")]
    BudgetDynamics(CommonArgs),
    /// Monte Carlo cosine comparison of the single-path estimator against
    /// the exact surrogate gradient.
    #[command(alias = "grad_consistency")]
    GradConsistency(CommonArgs),
    /// Uniform vs stratified sampling variance comparison.
    #[command(alias = "variance_demo")]
    VarianceDemo(CommonArgs),
    /// All finite-difference and oracle checks; exit 0 iff everything
    /// passes.
    Gradcheck(CommonArgs),
    /// Three-stage training of the toy block stack.
    #[command(alias = "toy_train")]
    ToyTrain(CommonArgs),
}

fn load_config(args: &CommonArgs, name: &str) -> shiva_core::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.experiment = name.to_string();
    for pair in &args.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            shiva_core::ShivaError::Config(format!("--set expects key=value, got {pair:?}"))
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(name: &str, args: &CommonArgs) -> shiva_core::Result<(CommandOutput, PathBuf)> {
    let cfg = load_config(args, name)?;
    let started = Instant::now();
    let mut output = match name {
        "budget_dynamics" => experiments::run_budget_dynamics(&cfg)?,
        "grad_consistency" => experiments::run_grad_consistency(&cfg)?,
        "variance_demo" => experiments::run_variance_demo(&cfg)?,
        "gradcheck" => experiments::run_gradcheck(&cfg)?,
        "toy_train" => experiments::run_toy_train(&cfg)?,
        other => unreachable!("unknown command {other}"),
    };
    output.report.wall_clock_ms = started.elapsed().as_secs_f64() * 1000.0;
    // Precedence: --out flag, then the config's out_dir, then out/<command>.
    let out_dir = args.out.clone().unwrap_or_else(|| {
        if cfg.out_dir.is_empty() {
            PathBuf::from("out").join(name)
        } else {
            PathBuf::from(&cfg.out_dir)
        }
    });
    output.write_to(&out_dir)?;
    Ok((output, out_dir))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::BudgetDynamics(a) => ("budget_dynamics", a),
        Command::GradConsistency(a) => ("grad_consistency", a),
        Command::VarianceDemo(a) => ("variance_demo", a),
        Command::Gradcheck(a) => ("gradcheck", a),
        Command::ToyTrain(a) => ("toy_train", a),
    };
    match run(name, args) {
        Ok((output, out_dir)) => {
            for note in &output.report.notes {
                println!("{note}");
            }
            let mut keys: Vec<_> = output.report.summary.iter().collect();
            keys.sort_by(|a, b| a.0.cmp(b.0));
            for (k, v) in keys {
                println!("{k} = {v}");
            }
            println!(
                "wrote {} ({:.0} ms)",
                out_dir.display(),
                output.report.wall_clock_ms
            );
            if name == "gradcheck" && output.report.get("failures").unwrap_or(1.0) > 0.0 {
                eprintln!("gradcheck: FAILURES PRESENT");
                return ExitCode::FAILURE;
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
