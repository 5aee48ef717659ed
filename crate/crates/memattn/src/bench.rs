//! Wall-clock inference benchmark comparing attention mechanisms.
//!
//! The dataset is materialized and the model constructed before timing
//! starts; each run greedy-decodes the whole workload one example at a
//! time, single-threaded. Alongside the timings the report carries the
//! attention-specific multiply-accumulate count for the same workload.

use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use memattn_core::attention::{count_attention_ops, AttentionKind};
use memattn_core::decode::greedy_decode;
use memattn_core::seq2seq::Model;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{load_dataset, DATA_VOCAB};

/// One mechanism's timing results.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub mechanism: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub dataset: String,
    pub runs: usize,
    pub mean_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub per_example_ms: f64,
    pub attention_mac_count: u64,
}

/// A `memory:32`-style mechanism selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mechanism {
    pub kind: AttentionKind,
    pub k: usize,
}

impl Mechanism {
    /// Parses `bahdanau`, `luong`, `none` or `memory:<K>`.
    pub fn parse(s: &str) -> Result<Mechanism> {
        let (kind, k) = match s.split_once(':') {
            Some((name, k)) => (
                AttentionKind::parse(name).map_err(|e| anyhow::anyhow!("{e}"))?,
                k.parse()
                    .with_context(|| format!("bad K in mechanism '{s}'"))?,
            ),
            None => (
                AttentionKind::parse(s).map_err(|e| anyhow::anyhow!("{e}"))?,
                0,
            ),
        };
        if kind == AttentionKind::Memory && k == 0 {
            bail!("memory mechanism needs a K, e.g. memory:32");
        }
        if kind != AttentionKind::Memory && k != 0 {
            bail!("only the memory mechanism takes a K, got '{s}'");
        }
        Ok(Mechanism { kind, k })
    }

    /// File-name-friendly label, e.g. `memory-k32`.
    pub fn label(&self) -> String {
        match self.kind {
            AttentionKind::Memory => format!("memory-k{}", self.k),
            other => other.as_str().to_string(),
        }
    }
}

/// Total attention MACs for decoding `sources` (target length = source
/// length + 1 for the copy task's closing token).
pub fn workload_attention_macs(
    kind: AttentionKind,
    d: usize,
    k: usize,
    sources: &[Vec<usize>],
) -> Result<u64> {
    let mut total = 0;
    for s in sources {
        if kind == AttentionKind::None {
            continue;
        }
        total += count_attention_ops(kind, d, k, s.len(), s.len() + 1)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    Ok(total)
}

fn time_workload(model: &Model, sources: &[Vec<usize>]) -> Result<Duration> {
    let start = Instant::now();
    for source in sources {
        greedy_decode(model, std::slice::from_ref(source)).map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    Ok(start.elapsed())
}

/// Benchmarks one mechanism. `construction_delay` is a test hook: it
/// sleeps during model construction, which must not affect the timings.
pub fn bench_mechanism(
    cfg: &RunConfig,
    mechanism: Mechanism,
    sources: &[Vec<usize>],
    dataset_name: &str,
    runs: usize,
    s_max: usize,
    construction_delay: Option<Duration>,
) -> Result<BenchReport> {
    if runs == 0 {
        bail!("runs must be at least 1");
    }
    let mut model_cfg = cfg.to_model_config(DATA_VOCAB, s_max.max(1));
    model_cfg.attention_kind = mechanism.kind;
    model_cfg.k = mechanism.k.max(1);
    let model = Model::new(model_cfg).map_err(|e| anyhow::anyhow!("{e}"))?;
    if let Some(delay) = construction_delay {
        std::thread::sleep(delay);
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        times.push(time_workload(&model, sources)?.as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / runs as f64;
    let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = times.iter().cloned().fold(0.0_f64, f64::max);
    let macs = workload_attention_macs(
        mechanism.kind,
        2 * cfg.encoder_units,
        mechanism.k,
        sources,
    )?;
    Ok(BenchReport {
        mechanism: mechanism.kind.as_str().to_string(),
        k: mechanism.k,
        dataset: dataset_name.to_string(),
        runs,
        mean_seconds: mean,
        min_seconds: if sources.is_empty() { 0.0 } else { min },
        max_seconds: max,
        per_example_ms: if sources.is_empty() {
            0.0
        } else {
            1000.0 * mean / sources.len() as f64
        },
        attention_mac_count: macs,
    })
}

/// Benchmarks every requested mechanism on the same workload and writes
/// one `bench-<label>.json` per mechanism into `out_dir`.
pub fn run_bench(
    cfg: &RunConfig,
    mechanisms: &[Mechanism],
    data_path: &Path,
    runs: usize,
    max_examples: usize,
    out_dir: &Path,
    construction_delay: Option<Duration>,
) -> Result<Vec<BenchReport>> {
    let mut sources = load_dataset(data_path)?;
    if max_examples > 0 {
        sources.truncate(max_examples);
    }
    let s_max = sources.iter().map(|s| s.len()).max().unwrap_or(1);
    std::fs::create_dir_all(out_dir)?;
    let dataset_name = data_path.display().to_string();
    let mut reports = Vec::new();
    for &mechanism in mechanisms {
        let report = bench_mechanism(
            cfg,
            mechanism,
            &sources,
            &dataset_name,
            runs,
            s_max,
            construction_delay,
        )?;
        let path = out_dir.join(format!("bench-{}.json", mechanism.label()));
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
        reports.push(report);
    }
    Ok(reports)
}
