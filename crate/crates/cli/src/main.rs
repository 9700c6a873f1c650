use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stylealign::experiment::{
    cmd_ablate, cmd_audit, cmd_eval, cmd_pipeline, cmd_pipeline_from_manifest, cmd_synth, Condition,
    EvalRequest, ExperimentError, RunConfig,
};

/// Style-alignment experiments on the synthetic feedback task.
#[derive(Debug, Parser)]
#[command(name = "stylealign", version)]
struct Cli {
    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the datasets and vocabulary manifest.
    Synth,
    /// Run every stage and write checkpoints, diagnostics and the report.
    Pipeline {
        /// Re-run from a manifest instead of a config.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
    },
    /// Run the ablation grid.
    Ablate {
        /// Run one row only (e.g. top-4, sft-only).
        #[arg(long)]
        condition: Option<String>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comparator for PWR.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Reward model for PWR (default: <out>/checkpoints/rm.json).
        #[arg(long)]
        reward: Option<PathBuf>,
    },
    /// Leakage audit of both split variants.
    Audit,
}

fn load_config(cli: &Cli) -> Result<RunConfig, ExperimentError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    if let Command::Pipeline { manifest: Some(m) } = &cli.command {
        let (report, _) = cmd_pipeline_from_manifest(m, cli.out.clone())?;
        print!("{}", report.to_markdown());
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth => {
            let d = cmd_synth(&cfg)?;
            for (f, h) in &d.hashes {
                println!("{h}  {f}");
            }
        }
        Command::Pipeline { .. } => {
            let (report, manifest) = cmd_pipeline(&cfg)?;
            for s in &manifest.stages {
                eprintln!("{:<14} {:<16} {:>8.1}s", s.name, s.status, s.seconds);
            }
            print!("{}", report.to_markdown());
        }
        Command::Ablate { condition } => {
            let only: Vec<Condition> = condition.as_deref().map(Condition::from_slug).transpose()?.into_iter().collect();
            print!("{}", cmd_ablate(&cfg, &only)?.to_markdown());
        }
        Command::Eval {
            checkpoint,
            baseline,
            reward,
        } => {
            let req = EvalRequest {
                checkpoint,
                baseline,
                reward,
            };
            print!("{}", cmd_eval(&cfg, &req)?.to_markdown());
        }
        Command::Audit => print!("{}", cmd_audit(&cfg)?.to_markdown()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
