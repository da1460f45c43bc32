//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on a failed check or runtime error, 2 on a
//! usage error (bad flags, missing or empty config).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, Scenario};
use crate::output::{write_json, write_profile, write_scenario};
use crate::scenarios::{profile_table, run_scenario, setup};
use crate::verify::{self, OverAcceptingRule};

const USAGE_ERROR: u8 = 2;
const FAILURE: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "specrl", version, about = "Speculative decoding inside an RL loop, simulated")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Profile every configuration at every batch bucket.
    Profile(RunArgs),
    /// Run a training scenario.
    Train(TrainArgs),
    /// Run the oracle checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run the losslessness checks against a rule that over-accepts by this much.
    #[arg(long, hide = true)]
    pub mutate_epsilon: Option<f64>,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Checks,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(Failure::Usage),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_run_args(cfg: &mut ExperimentConfig, args: &RunArgs) -> Result<PathBuf, Failure> {
    cfg.seed = Some(args.seed);
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate().map_err(Failure::Usage)?;
    cfg.out.clone().ok_or_else(|| Failure::Usage(anyhow::anyhow!("an output directory is required (pass --out)")))
}

fn cmd_profile(args: &RunArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    let out = apply_run_args(&mut cfg, args)?;
    let seed = cfg.require_seed().map_err(Failure::Usage)?;
    let setup = setup(&cfg, seed).map_err(Failure::Runtime)?;
    let table = profile_table(&cfg, seed, &setup).map_err(Failure::Runtime)?;
    write_profile(&out, &table).map_err(Failure::Runtime)?;
    for (bucket, best) in table.buckets.iter().zip(&table.best) {
        println!("batch <= {bucket:>3}: {best}");
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.run.config.as_deref())?;
    if let Some(scenario) = args.scenario {
        cfg.scenario = scenario;
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    let out = apply_run_args(&mut cfg, &args.run)?;
    let seed = cfg.require_seed().map_err(Failure::Usage)?;
    let output = run_scenario(&cfg, seed).map_err(Failure::Runtime)?;
    write_scenario(&out, &output).map_err(Failure::Runtime)?;
    for run in &output.runs {
        let s = &run.summary;
        let accept = |a: Option<f64>| a.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{}: reward {:.3} -> {:.3}, accept {} -> {}, sim time {:.1}",
            s.label,
            s.first_reward,
            s.final_reward,
            accept(s.first_accept_len),
            accept(s.final_accept_len),
            s.total_time
        );
    }
    if let Some(skew) = &output.skew {
        println!(
            "adaptive {:.1}, non-spec {:.1}, best fixed {} {:.1}, worst fixed {} {:.1}",
            skew.adaptive_time,
            skew.non_spec_time,
            skew.best_fixed.policy,
            skew.best_fixed.total_time,
            skew.worst_fixed.policy,
            skew.worst_fixed.total_time
        );
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), Failure> {
    // The config is only validated; the checks are self-contained.
    load_config(args.config.as_deref())?.validate().map_err(Failure::Usage)?;
    let results = match args.mutate_epsilon {
        Some(epsilon) => verify::losslessness_checks(&OverAcceptingRule { epsilon }, args.seed),
        None => verify::run_all(args.seed),
    };
    for r in &results {
        println!(
            "{} {:<36} max error {:.3e} (tolerance {:.0e}, {} instances, {:.2}s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_error,
            r.tolerance,
            r.instances,
            r.seconds
        );
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(e.into()))?;
        write_json(&out.join("verify.json"), &results).map_err(Failure::Runtime)?;
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Checks)
    }
}

pub fn run(cli: &Cli) -> ExitCode {
    let result = match &cli.command {
        Command::Profile(args) => cmd_profile(args),
        Command::Train(args) => cmd_train(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(USAGE_ERROR)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(FAILURE)
        }
        Err(Failure::Checks) => {
            eprintln!("verification failed");
            ExitCode::from(FAILURE)
        }
    }
}

pub fn main() -> ExitCode {
    run(&Cli::parse())
}
