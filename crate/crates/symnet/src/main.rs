use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use symnet::config::RunConfig;
use symnet::run::{
    cmd_compare, cmd_eval, cmd_train, cmd_verify, gradient_suite, EvalOptions, TrainOptions,
};

#[derive(Parser)]
#[command(
    name = "symnet",
    version,
    about = "Desk-scale Transformer translation with jointly trained, parameter-shared main/sub networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train per config: two-stage joint+margin training, or classic
    /// single-network training when symbiosis is disabled
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's train/data seed
        #[arg(long)]
        seed: Option<u64>,
        /// Validate the config and print the resolved layer map, no training
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint: corpus BLEU and token accuracy on the test split
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Average the last K per-epoch checkpoints next to the given one
        #[arg(long, default_value_t = 1)]
        avg_last: usize,
        /// Evaluate the S-Net view instead of the M-Net
        #[arg(long)]
        subnet: bool,
        /// Write decoded sentences (one per line) to this path
        #[arg(long)]
        decoded_out: Option<PathBuf>,
    },
    /// Depth sweep: classic vs symbiosis training under matched budgets
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference verification of every primitive and the full
    /// two-view objective
    Gradcheck,
    /// Verify storage-level parameter sharing on a checkpoint
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> symnet::Result<ExitCode> {
    match cli.cmd {
        Cmd::Train {
            config,
            seed,
            dry_run,
        } => {
            let cfg = RunConfig::load(&config)?;
            let arts = cmd_train(
                &cfg,
                &TrainOptions {
                    seed_override: seed,
                    dry_run,
                },
            )?;
            if let Some(map) = &arts.layer_map {
                println!("layer map: {map:?}");
            } else {
                println!("layer map: none (classic training)");
            }
            if dry_run {
                println!(
                    "dry run: config valid, output dir {}",
                    arts.out_dir.display()
                );
                return Ok(ExitCode::SUCCESS);
            }
            let outcome = arts.outcome.as_ref().expect("training ran");
            println!("run dir: {}", arts.out_dir.display());
            println!("steps: {}", outcome.steps_run);
            if let Some(last) = outcome.metrics.last() {
                println!("final loss: {:.6}", last.loss);
            }
            println!("validation nll (m-net): {:.6}", outcome.final_val.nll_m);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            config,
            checkpoint,
            avg_last,
            subnet,
            decoded_out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let report = cmd_eval(
                &cfg,
                &checkpoint,
                &EvalOptions {
                    avg_last,
                    subnet,
                    decoded_out,
                },
            )?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Compare { config } => {
            let cfg = RunConfig::load(&config)?;
            let table = cmd_compare(&cfg)?;
            print!("{}", table.render());
            if table.failed() {
                eprintln!("compare: some sub-runs failed (markers in table)");
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck => {
            let lines = gradient_suite();
            let mut ok = true;
            for l in &lines {
                println!("{l}");
                ok &= l.pass;
            }
            if ok {
                println!("gradient suite: all {} checks passed", lines.len());
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient suite: FAILURES present");
                Ok(ExitCode::FAILURE)
            }
        }
        Cmd::Verify { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            let report = cmd_verify(&cfg, &checkpoint)?;
            println!("{report}");
            if report.ok() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
