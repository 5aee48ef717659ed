//! Command-line entry point: dataset generation, training, evaluation,
//! benchmarking and attention visualization.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use memattn::bench::{run_bench, Mechanism};
use memattn::config::RunConfig;
use memattn::data::generate_copy_dataset;
use memattn::train::{run_eval, run_scoring_ablation, run_train};
use memattn::viz::run_viz;

#[derive(Parser)]
#[command(name = "memattn", about = "Sequence-to-sequence toolkit with fixed-size memory attention", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand that builds a model.
#[derive(Args)]
struct ConfigArgs {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied before the config file and overrides.
    #[arg(long)]
    preset: Option<String>,
    /// Repeatable key=value override, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(preset) = &self.preset {
            cfg.apply_preset(preset)?;
        }
        if let Some(path) = &self.config {
            cfg.merge_file(path)?;
        }
        for assignment in &self.set {
            cfg.apply_set(assignment)?;
        }
        if let Ok(seed) = std::env::var("MEMATTN_SEED") {
            cfg.seed = seed
                .parse()
                .with_context(|| format!("MEMATTN_SEED must be an integer, got '{seed}'"))?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a copy-task dataset (train.txt, valid.txt, meta.txt).
    GenData {
        #[arg(long)]
        max_len: usize,
        #[arg(long, default_value_t = 100_000)]
        train_size: usize,
        #[arg(long, default_value_t = 1_000)]
        valid_size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train all four scoring combinations instead of one model.
        #[arg(long)]
        scoring_ablation: bool,
    },
    /// Score a checkpoint on a dataset with beam search.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file (one example per line).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        /// Score the references against themselves (pipeline check).
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time greedy decoding for several attention mechanisms.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated list, e.g. memory:32,memory:64,bahdanau.
        #[arg(long, value_delimiter = ',')]
        mechanisms: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        /// Cap the workload; 0 uses the whole file.
        #[arg(long, default_value_t = 0)]
        max_examples: usize,
        #[arg(long)]
        out: PathBuf,
        /// Test hook: sleep this long during model construction.
        #[arg(long, default_value_t = 0, hide = true)]
        construction_delay_ms: u64,
    },
    /// Export alignment CSVs and PGM heatmaps for chosen examples.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated example indices.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        examples: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_resolved_config(out: &std::path::Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("resolved-config.txt"), cfg.to_text())?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            max_len,
            train_size,
            valid_size,
            seed,
            out,
        } => {
            let seed = match std::env::var("MEMATTN_SEED") {
                Ok(s) => s
                    .parse()
                    .with_context(|| format!("MEMATTN_SEED must be an integer, got '{s}'"))?,
                Err(_) => seed,
            };
            let meta = generate_copy_dataset(max_len, train_size, valid_size, seed, &out)?;
            println!(
                "wrote {} train / {} valid examples (s_max = {}) to {}",
                meta.train_size,
                meta.valid_size,
                meta.s_max,
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            scoring_ablation,
        } => {
            let cfg = config.resolve()?;
            if scoring_ablation {
                write_resolved_config(&out, &cfg)?;
                for (name, outcome) in run_scoring_ablation(&cfg, &data, &out)? {
                    println!(
                        "{name}: {} steps, final val BLEU {}",
                        outcome.steps_run,
                        outcome
                            .final_val_bleu
                            .map(|b| format!("{b:.2}"))
                            .unwrap_or_else(|| "n/a".into())
                    );
                }
            } else {
                let outcome = run_train(&cfg, &data, &out)?;
                println!(
                    "trained {} steps; final val BLEU {}; last checkpoint {}",
                    outcome.steps_run,
                    outcome
                        .final_val_bleu
                        .map(|b| format!("{b:.2}"))
                        .unwrap_or_else(|| "n/a".into()),
                    outcome.last_checkpoint.display()
                );
            }
        }
        Command::Eval {
            checkpoint,
            data,
            beam,
            oracle,
            out,
        } => {
            let report = run_eval(&checkpoint, &data, beam, oracle)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("bleu.txt"), format!("{report}\n"))?;
            println!("{report}");
        }
        Command::Bench {
            config,
            mechanisms,
            data,
            runs,
            max_examples,
            out,
            construction_delay_ms,
        } => {
            let cfg = config.resolve()?;
            write_resolved_config(&out, &cfg)?;
            let mechanisms = mechanisms
                .iter()
                .map(|m| Mechanism::parse(m))
                .collect::<Result<Vec<_>>>()?;
            let delay = (construction_delay_ms > 0)
                .then(|| Duration::from_millis(construction_delay_ms));
            let reports = run_bench(&cfg, &mechanisms, &data, runs, max_examples, &out, delay)?;
            for r in &reports {
                println!(
                    "{} (K={}): mean {:.4}s over {} runs, {:.3} ms/example, {} attention MACs",
                    r.mechanism, r.k, r.mean_seconds, r.runs, r.per_example_ms, r.attention_mac_count
                );
            }
        }
        Command::Viz {
            checkpoint,
            data,
            examples,
            beam,
            out,
        } => {
            run_viz(&checkpoint, &data, &examples, beam, &out)?;
            println!("wrote alignments for {} example(s) to {}", examples.len(), out.display());
        }
    }
    Ok(())
}
