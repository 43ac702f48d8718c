//! Command-line front end: `run` a search from a config file, `resume` a
//! checkpointed one, `final-train` the winning network, `export` run
//! artifacts. All state lives in the config file and checkpoint;
//! environment variables are never consulted.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use conas_core::engine::{
    export_best, final_train, parse_run_config, Engine, GenerationRecord, RunConfig, RunReport,
};
use conas_core::eval::TrainerEvaluator;

#[derive(Parser)]
#[command(name = "conas", version, about = "Co-evolutionary neural architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a fresh evolution run from a config file.
    Run {
        /// Run configuration (run keys, dataset spec and parameter tables).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's evaluation worker count.
        #[arg(long)]
        workers: Option<usize>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue a run from the checkpoint in its output directory.
    Resume {
        /// Output directory holding checkpoint.json.
        #[arg(long)]
        out: PathBuf,
        /// Override the checkpointed worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Retrain the best evolved network on the full training split.
    FinalTrain {
        /// Output directory holding checkpoint.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        /// Weight-init seed; defaults to the run's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rewrite the run artifacts (network JSON, DOT files, log CSV).
    Export {
        /// Output directory holding checkpoint.json.
        #[arg(long)]
        out: PathBuf,
    },
}

fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoint.json")
}

fn build_evaluator(config: &RunConfig) -> Result<TrainerEvaluator> {
    let (train, validation) = config.dataset.load().context("loading dataset")?;
    Ok(TrainerEvaluator {
        input_shape: train.sample_shape(),
        class_count: train.class_count,
        train,
        validation,
    })
}

fn print_progress(record: &GenerationRecord) {
    println!(
        "generation {:>3}: best accuracy {:.4} (loss {:.4}), {} module species, {:.1}s",
        record.generation,
        record.best_score.accuracy,
        record.best_score.loss,
        record.species.len(),
        record.seconds,
    );
}

/// Drives the engine to completion, checkpointing and logging each
/// generation, then writes the artifacts.
fn drive(mut engine: Engine, out: &Path) -> Result<RunReport> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let evaluator = build_evaluator(&engine.config)?;
    let checkpoint = checkpoint_path(out);
    while !engine.finished() {
        let record = engine.step(&evaluator)?;
        print_progress(&record);
        engine.save_checkpoint(&checkpoint)?;
    }
    let report = engine.report()?;
    export_best(&report, evaluator.input_shape, evaluator.class_count, out)?;
    println!(
        "done: best accuracy {:.4} (loss {:.4}); artifacts in {}",
        report.best_score.accuracy,
        report.best_score.loss,
        out.display()
    );
    Ok(report)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, seed, workers, out } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut run_config = parse_run_config(&text)?;
            if let Some(seed) = seed {
                run_config.master_seed = seed;
            }
            if let Some(workers) = workers {
                run_config.workers = workers;
            }
            if let Some(out) = out {
                run_config.output_dir = out;
            }
            run_config.validate()?;
            let out = run_config.output_dir.clone();
            drive(Engine::new(run_config)?, &out)?;
        }
        Command::Resume { out, workers } => {
            let mut engine = Engine::load_checkpoint(&checkpoint_path(&out))?;
            if let Some(workers) = workers {
                engine.config.workers = workers;
                engine.config.validate()?;
            }
            if engine.finished() {
                bail!("run already finished after generation {}", engine.state.generation);
            }
            println!("resuming at generation {}", engine.state.generation);
            drive(engine, &out)?;
        }
        Command::FinalTrain { out, epochs, seed } => {
            let engine = Engine::load_checkpoint(&checkpoint_path(&out))?;
            let report = engine.report()?;
            let (train, validation) = engine.config.dataset.load()?;
            let seed = seed.unwrap_or(engine.config.master_seed);
            let (history, score) = final_train(&report.best, &train, &validation, epochs, seed)?;
            let mut csv =
                String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n");
            for epoch in 0..history.train_loss.len() {
                println!(
                    "epoch {:>3}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}",
                    epoch + 1,
                    history.train_loss[epoch],
                    history.train_accuracy[epoch],
                    history.val_loss[epoch],
                    history.val_accuracy[epoch],
                );
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    epoch + 1,
                    history.train_loss[epoch],
                    history.train_accuracy[epoch],
                    history.val_loss[epoch],
                    history.val_accuracy[epoch],
                ));
            }
            let path = out.join("final_history.csv");
            std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            println!("final validation accuracy {:.4} (loss {:.4})", score.accuracy, score.loss);
        }
        Command::Export { out } => {
            let engine = Engine::load_checkpoint(&checkpoint_path(&out))?;
            let report = engine.report()?;
            let (train, _) = engine.config.dataset.load()?;
            export_best(&report, train.sample_shape(), train.class_count, &out)?;
            println!("artifacts written to {}", out.display());
        }
    }
    Ok(())
}
