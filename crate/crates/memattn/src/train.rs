//! Training loop with periodic validation, checkpointing and metric
//! logging, plus checkpoint-based evaluation.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use memattn_core::bleu::{corpus_bleu, BleuReport};
use memattn_core::decode::{beam_search, greedy_decode};
use memattn_core::optim::Adam;
use memattn_core::rng::Rng;
use memattn_core::seq2seq::{train_step, Batch, Model};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{dataset_paths, load_dataset, Batcher, DatasetMeta, DATA_VOCAB};

/// What a finished (or early-stopped) training run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub final_val_bleu: Option<f64>,
    pub last_checkpoint: PathBuf,
}

/// Greedy-decodes `sources` in chunks and scores against the copy-task
/// references (the sources themselves).
pub fn greedy_bleu(model: &Model, sources: &[Vec<usize>]) -> Result<BleuReport> {
    let mut hyps = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(16) {
        hyps.extend(greedy_decode(model, chunk).map_err(|e| anyhow::anyhow!("{e}"))?);
    }
    corpus_bleu(&hyps, sources).map_err(|e| anyhow::anyhow!("{e}"))
}

fn validation_loss(model: &Model, sources: &[Vec<usize>], batch_size: usize) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in sources.chunks(batch_size) {
        let batch = Batch::from_sources(chunk);
        let fwd = model
            .forward(&batch, false, &mut rng)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        total += fwd.loss_value() * fwd.unmasked_targets as f64;
        count += fwd.unmasked_targets;
    }
    Ok(total / count as f64)
}

/// Trains per `cfg` on the dataset in `data_dir`, writing `metrics.csv`,
/// `resolved-config.txt` and periodic checkpoints into `out_dir`.
pub fn run_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let (train_path, valid_path, meta_path) = dataset_paths(data_dir);
    let meta = DatasetMeta::load(&meta_path)?;
    let train_set = load_dataset(&train_path)?;
    let valid_set = load_dataset(&valid_path)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let mut resolved = cfg.clone();
    resolved.s_max = Some(meta.s_max);
    std::fs::write(out_dir.join("resolved-config.txt"), resolved.to_text())?;

    let model_cfg = resolved.to_model_config(meta.vocab_size, meta.s_max);
    let mut model = Model::new(model_cfg).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut adam = Adam::new(&model.params, resolved.learning_rate);
    let mut rng = Rng::seed_from_u64(resolved.seed.wrapping_add(1));
    let batcher = Batcher::new(train_set, resolved.batch_size, resolved.seed)?;

    let val_subset: &[Vec<usize>] = if resolved.eval_examples == 0 {
        &valid_set
    } else {
        &valid_set[..resolved.eval_examples.min(valid_set.len())]
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = std::fs::File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    writeln!(metrics, "step,train_loss,val_loss,val_bleu,elapsed_seconds")?;

    let save_at = |step: usize, model: &Model, adam: &Adam| -> Result<PathBuf> {
        let path = out_dir.join(format!("checkpoint-{step}.bin"));
        checkpoint::save(&path, &model.params, Some(adam), &resolved)?;
        Ok(path)
    };

    let started = Instant::now();
    let mut last_checkpoint = save_at(0, &model, &adam)?;
    let mut step = 0usize;
    let mut final_val_bleu = None;
    let mut epoch = 0u64;
    'training: while step < resolved.max_steps {
        for batch in batcher.epoch(epoch) {
            step += 1;
            let loss = train_step(&mut model, &batch, &mut adam, resolved.clip_norm, &mut rng)
                .map_err(|e| {
                    anyhow::anyhow!(
                        "step {step}: {e}; last good checkpoint: {}",
                        last_checkpoint.display()
                    )
                })?;
            let due_eval = step.is_multiple_of(resolved.eval_every_steps) || step == resolved.max_steps;
            if due_eval {
                let val_loss = validation_loss(&model, val_subset, resolved.batch_size)?;
                let report = greedy_bleu(&model, val_subset)?;
                final_val_bleu = Some(report.score);
                writeln!(
                    metrics,
                    "{step},{loss:.6},{val_loss:.6},{:.4},{:.3}",
                    report.score,
                    started.elapsed().as_secs_f64()
                )?;
                metrics.flush()?;
                if resolved.target_bleu > 0.0 && report.score >= resolved.target_bleu {
                    break 'training;
                }
            }
            if step.is_multiple_of(resolved.checkpoint_every_steps) {
                last_checkpoint = save_at(step, &model, &adam)?;
            }
            if step >= resolved.max_steps {
                break 'training;
            }
        }
        epoch += 1;
    }
    if step > 0 && !step.is_multiple_of(resolved.checkpoint_every_steps) {
        last_checkpoint = save_at(step, &model, &adam)?;
    }
    Ok(TrainOutcome {
        steps_run: step,
        final_val_bleu,
        last_checkpoint,
    })
}

/// Rebuilds the model a checkpoint was trained with.
pub fn load_model(checkpoint_path: &Path) -> Result<(Model, RunConfig)> {
    let cfg = checkpoint::load_config(checkpoint_path)?;
    let s_max = cfg
        .s_max
        .with_context(|| format!("{}: metadata lacks s_max", checkpoint_path.display()))?;
    let mut model = Model::new(cfg.to_model_config(DATA_VOCAB, s_max))
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    checkpoint::load_params(checkpoint_path, &mut model.params)?;
    Ok((model, cfg))
}

/// Evaluates a checkpoint on a dataset file with beam search. With
/// `oracle` the references are scored against themselves instead of
/// decoding, as a pipeline check.
pub fn run_eval(
    checkpoint_path: &Path,
    data_path: &Path,
    beam_size: usize,
    oracle: bool,
) -> Result<BleuReport> {
    let sources = load_dataset(data_path)?;
    if oracle {
        return corpus_bleu(&sources, &sources).map_err(|e| anyhow::anyhow!("{e}"));
    }
    let (model, _) = load_model(checkpoint_path)?;
    let mut hyps = Vec::with_capacity(sources.len());
    if beam_size == 1 {
        for chunk in sources.chunks(16) {
            hyps.extend(greedy_decode(&model, chunk).map_err(|e| anyhow::anyhow!("{e}"))?);
        }
    } else {
        for source in &sources {
            let result =
                beam_search(&model, source, beam_size, None).map_err(|e| anyhow::anyhow!("{e}"))?;
            hyps.push(result.tokens);
        }
    }
    corpus_bleu(&hyps, &sources).map_err(|e| anyhow::anyhow!("{e}"))
}

/// Runs all four encoder/decoder scoring combinations of the memory
/// mechanism with a shared budget, producing one metrics CSV per
/// combination under `out_dir/<combo>/`.
pub fn run_scoring_ablation(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<(String, TrainOutcome)>> {
    use memattn_core::attention::ScoringFunction::{Sigmoid, Softmax};
    let mut results = Vec::new();
    for (enc, dec) in [
        (Softmax, Softmax),
        (Softmax, Sigmoid),
        (Sigmoid, Softmax),
        (Sigmoid, Sigmoid),
    ] {
        let mut combo_cfg = cfg.clone();
        combo_cfg.encoder_scoring = enc;
        combo_cfg.decoder_scoring = dec;
        let name = format!("{}-{}", enc.as_str(), dec.as_str());
        let combo_dir = out_dir.join(&name);
        let outcome = run_train(&combo_cfg, data_dir, &combo_dir)?;
        results.push((name, outcome));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_copy_dataset;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            embedding_dim: 8,
            encoder_units: 8,
            encoder_layers: 1,
            decoder_units: 8,
            decoder_layers: 1,
            k: 2,
            batch_size: 4,
            eval_every_steps: 5,
            checkpoint_every_steps: 5,
            eval_examples: 4,
            learning_rate: 1e-2,
            dropout_keep: 1.0,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_steps_emits_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        generate_copy_dataset(4, 8, 4, 5, &data).unwrap();
        let out = dir.path().join("run");
        let mut cfg = tiny_cfg();
        cfg.max_steps = 0;
        let outcome = run_train(&cfg, &data, &out).unwrap();
        assert_eq!(outcome.steps_run, 0);
        assert!(out.join("checkpoint-0.bin").exists());
        assert!(out.join("resolved-config.txt").exists());
        let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1);
    }

    #[test]
    fn short_run_logs_metrics_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        generate_copy_dataset(4, 8, 4, 5, &data).unwrap();
        let out = dir.path().join("run");
        let mut cfg = tiny_cfg();
        cfg.max_steps = 10;
        let outcome = run_train(&cfg, &data, &out).unwrap();
        assert_eq!(outcome.steps_run, 10);
        assert!(outcome.final_val_bleu.is_some());
        let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        let mut steps = Vec::new();
        for line in metrics.lines().skip(1) {
            let step: usize = line.split(',').next().unwrap().parse().unwrap();
            steps.push(step);
        }
        assert_eq!(steps, vec![5, 10]);
        assert!(out.join("checkpoint-5.bin").exists());
        assert!(out.join("checkpoint-10.bin").exists());
        // The saved checkpoint reloads into a usable model.
        let (model, cfg2) = load_model(&out.join("checkpoint-10.bin")).unwrap();
        assert_eq!(cfg2.k, 2);
        let sources = vec![vec![3, 4, 5]];
        greedy_decode(&model, &sources).unwrap();
    }

    #[test]
    fn oracle_eval_scores_100() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        generate_copy_dataset(8, 8, 4, 5, &data).unwrap();
        let report = run_eval(Path::new("/nonexistent"), &data.join("valid.txt"), 10, true).unwrap();
        assert!((report.score - 100.0).abs() < 1e-9);
    }
}
