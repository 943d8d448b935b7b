use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use m2spe::benchmark::{evaluate_encoder, EvalSettings, EvalTasks, TaskSelection};
use m2spe::citegraph::{generate_corpus, CorpusGraph, CorpusSpec};
use m2spe::encoder::{Checkpoint, EncoderConfig};
use m2spe::train::{
    gradient_check, run_ablation, train, AblationGrid, GradCheckOptions, TrainConfig,
};

#[derive(Parser)]
#[command(name = "m2spe", version, about = "Multi-CLS paper encoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic citation corpus.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Train an encoder and write a checkpoint.
    Train {
        #[arg(long)]
        encoder_config: PathBuf,
        #[arg(long)]
        train_config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-step loss, one value per line.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "cite,cocite,clf")]
        tasks: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// JSON task sizes and probe settings.
        #[arg(long)]
        settings: Option<PathBuf>,
    },
    /// Compare autodiff gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        encoder_config: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Defaults to the seeds in the grid's training config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "cite,cocite,clf")]
        tasks: String,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<CorpusGraph> {
    CorpusGraph::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen { spec, out, seed } => {
            let spec: CorpusSpec = read_json(&spec)?;
            let graph = generate_corpus(&spec, seed)?;
            graph
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "{} papers, cross-domain citation fraction {:.3}",
                graph.len(),
                graph.cross_domain_fraction()
            );
        }
        Command::Train {
            encoder_config,
            train_config,
            corpus,
            seed,
            out,
            loss_log,
        } => {
            let encoder: EncoderConfig = read_json(&encoder_config)?;
            let train_config: TrainConfig = read_json(&train_config)?;
            let graph = load_corpus(&corpus)?;
            let outcome = train(&encoder, &train_config, &graph, seed)?;
            Checkpoint::new(encoder, outcome.params)?
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            if let Some(path) = loss_log {
                let lines: String = outcome.losses.iter().map(|l| format!("{l}\n")).collect();
                write(&path, lines)?;
            }
            let losses = &outcome.losses;
            eprintln!(
                "{} optimizer steps, loss {:.4} -> {:.4}",
                losses.len(),
                losses[0],
                losses[losses.len() - 1]
            );
        }
        Command::Eval {
            checkpoint,
            corpus,
            tasks,
            out,
            seed,
            settings,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let graph = load_corpus(&corpus)?;
            let settings: EvalSettings = match settings {
                Some(p) => read_json(&p)?,
                None => EvalSettings::default(),
            };
            let tasks = EvalTasks::build(&graph, TaskSelection::parse(&tasks)?, &settings, seed)?;
            let report = evaluate_encoder(&ckpt.params, &ckpt.config, &graph, &tasks, seed)?;
            write(&out, report.to_csv())?;
            for v in &report.values {
                eprintln!("{:<7} {:<12} {:.6}", v.task, v.metric, v.value);
            }
        }
        Command::Gradcheck {
            encoder_config,
            tolerance,
            instances,
            seed,
        } => {
            let config: EncoderConfig = read_json(&encoder_config)?;
            let report = gradient_check(
                &config,
                &GradCheckOptions {
                    instances,
                    tolerance,
                    seed,
                    ..GradCheckOptions::default()
                },
            )?;
            for (class, err) in &report.worst {
                let mark = if *err < tolerance { "ok" } else { "FAIL" };
                println!("{class:<20} {err:.3e} {mark}");
            }
            println!(
                "{} instances ({} redrawn near max-term ties), tolerance {tolerance:e}",
                report.instances, report.redrawn
            );
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate {
            grid,
            seeds,
            out,
            tasks,
        } => {
            let grid: AblationGrid = read_json(&grid)?;
            let seeds = seeds.unwrap_or_else(|| grid.train.seeds.clone());
            let report = run_ablation(
                &grid,
                &seeds,
                TaskSelection::parse(&tasks)?,
                |cell, seed, r| {
                    let summary: Vec<String> = r
                        .values
                        .iter()
                        .map(|v| format!("{}_{}={:.4}", v.task, v.metric, v.value))
                        .collect();
                    eprintln!("{} seed {seed}: {}", cell.label, summary.join(" "));
                },
            )?;
            write(&out, report.to_csv())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
