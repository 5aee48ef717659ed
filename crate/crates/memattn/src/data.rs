//! Copy-task dataset generation, loading and batching.
//!
//! A dataset directory holds `train.txt`, `valid.txt` and `meta.txt`. Data
//! files are UTF-8 with LF line endings, one example per line as
//! space-separated integer token ids; the target of each example is the
//! source itself, so only sources are stored.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use memattn_core::rng::Rng;
use memattn_core::seq2seq::{Batch, SYMBOL_OFFSET};

/// Number of distinct data symbols; ids `SYMBOL_OFFSET .. SYMBOL_OFFSET +
/// DATA_VOCAB` in the model vocabulary.
pub const DATA_VOCAB: usize = 20;

/// Dataset-level facts recorded next to the data files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub max_len: usize,
    pub vocab_size: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub seed: u64,
    /// Maximum source length observed across all generated sequences.
    pub s_max: usize,
}

impl DatasetMeta {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "max_len = {}", self.max_len);
        let _ = writeln!(out, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(out, "train_size = {}", self.train_size);
        let _ = writeln!(out, "valid_size = {}", self.valid_size);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "s_max = {}", self.s_max);
        out
    }

    pub fn load(path: &Path) -> Result<DatasetMeta> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading metadata {}", path.display()))?;
        let mut meta = DatasetMeta {
            max_len: 0,
            vocab_size: 0,
            train_size: 0,
            valid_size: 0,
            seed: 0,
            s_max: 0,
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                anyhow!("{}:{}: expected 'key = value'", path.display(), lineno + 1)
            })?;
            let value: u64 = value.trim().parse().with_context(|| {
                format!("{}:{}: bad value for {}", path.display(), lineno + 1, key.trim())
            })?;
            match key.trim() {
                "max_len" => meta.max_len = value as usize,
                "vocab_size" => meta.vocab_size = value as usize,
                "train_size" => meta.train_size = value as usize,
                "valid_size" => meta.valid_size = value as usize,
                "seed" => meta.seed = value,
                "s_max" => meta.s_max = value as usize,
                other => bail!("{}: unknown metadata key '{}'", path.display(), other),
            }
        }
        if meta.max_len == 0 || meta.s_max == 0 {
            bail!("{}: incomplete metadata", path.display());
        }
        Ok(meta)
    }
}

fn serialize(example: &[usize]) -> String {
    let mut line = String::new();
    for (i, id) in example.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        let _ = write!(line, "{id}");
    }
    line
}

fn draw_example(rng: &mut Rng, max_len: usize) -> Vec<usize> {
    let len = 1 + rng.uniform_usize(max_len);
    (0..len)
        .map(|_| SYMBOL_OFFSET + rng.uniform_usize(DATA_VOCAB))
        .collect()
}

/// Generates `train.txt`, `valid.txt` and `meta.txt` under `out_dir`.
/// Sequence lengths are uniform on `1..=max_len`; symbols uniform over the
/// 20-symbol vocabulary. Deterministic per seed.
pub fn generate_copy_dataset(
    max_len: usize,
    train_size: usize,
    valid_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetMeta> {
    if max_len == 0 {
        bail!("max_len must be at least 1");
    }
    if train_size == 0 {
        bail!("train_size must be at least 1");
    }
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let mut rng = Rng::seed_from_u64(seed);
    let mut s_max = 0;
    let write_split = |name: &str, count: usize, rng: &mut Rng, s_max: &mut usize| -> Result<()> {
        let mut text = String::new();
        for _ in 0..count {
            let ex = draw_example(rng, max_len);
            *s_max = (*s_max).max(ex.len());
            text.push_str(&serialize(&ex));
            text.push('\n');
        }
        let path = out_dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    };
    write_split("train.txt", train_size, &mut rng, &mut s_max)?;
    write_split("valid.txt", valid_size, &mut rng, &mut s_max)?;
    let meta = DatasetMeta {
        max_len,
        vocab_size: DATA_VOCAB,
        train_size,
        valid_size,
        seed,
        s_max,
    };
    std::fs::write(out_dir.join("meta.txt"), meta.to_text())
        .with_context(|| format!("writing {}", out_dir.join("meta.txt").display()))?;
    Ok(meta)
}

/// Reads one-example-per-line token sequences. Parse failures carry the
/// file path and line number.
pub fn load_dataset(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading dataset {}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut example = Vec::new();
        for tok in line.split_whitespace() {
            let id: usize = tok.parse().map_err(|_| {
                anyhow!(
                    "{}:{}: invalid token '{}'",
                    path.display(),
                    lineno + 1,
                    tok
                )
            })?;
            example.push(id);
        }
        if example.is_empty() {
            bail!("{}:{}: empty example", path.display(), lineno + 1);
        }
        out.push(example);
    }
    Ok(out)
}

/// Deterministic epoch-shuffled batching; the final partial batch is
/// emitted.
pub struct Batcher {
    examples: Vec<Vec<usize>>,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(examples: Vec<Vec<usize>>, batch_size: usize, seed: u64) -> Result<Batcher> {
        if batch_size == 0 {
            bail!("batch_size must be at least 1");
        }
        if examples.is_empty() {
            bail!("cannot batch an empty dataset");
        }
        Ok(Batcher {
            examples,
            batch_size,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Batches for one epoch; the order depends only on `(seed, epoch)`.
    pub fn epoch(&self, epoch: u64) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        let mut rng = Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng.shuffle(&mut order);
        order
            .chunks(self.batch_size)
            .map(|chunk| {
                let sources: Vec<Vec<usize>> =
                    chunk.iter().map(|&i| self.examples[i].clone()).collect();
                Batch::from_sources(&sources)
            })
            .collect()
    }
}

/// Convenience paths within a dataset directory.
pub fn dataset_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join("train.txt"),
        dir.join("valid.txt"),
        dir.join("meta.txt"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let meta_a = generate_copy_dataset(10, 50, 10, 7, &a).unwrap();
        let meta_b = generate_copy_dataset(10, 50, 10, 7, &b).unwrap();
        assert_eq!(meta_a, meta_b);
        assert_eq!(
            std::fs::read(a.join("train.txt")).unwrap(),
            std::fs::read(b.join("train.txt")).unwrap()
        );
        let loaded = load_dataset(&a.join("train.txt")).unwrap();
        assert_eq!(loaded.len(), 50);
        for ex in &loaded {
            assert!(!ex.is_empty() && ex.len() <= 10);
            for &id in ex {
                assert!((SYMBOL_OFFSET..SYMBOL_OFFSET + DATA_VOCAB).contains(&id));
            }
        }
        let meta = DatasetMeta::load(&a.join("meta.txt")).unwrap();
        assert_eq!(meta, meta_a);
        assert_eq!(meta.s_max, loaded.iter().map(|e| e.len()).max().unwrap().max(
            load_dataset(&a.join("valid.txt")).unwrap().iter().map(|e| e.len()).max().unwrap(),
        ));
    }

    #[test]
    fn single_example_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let meta = generate_copy_dataset(1, 1, 1, 3, dir.path()).unwrap();
        assert_eq!(meta.s_max, 1);
        let train = load_dataset(&dir.path().join("train.txt")).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(train[0].len(), 1);
    }

    #[test]
    fn mean_length_matches_uniform_sampling() {
        let dir = tempfile::tempdir().unwrap();
        generate_copy_dataset(50, 20_000, 10, 11, dir.path()).unwrap();
        let train = load_dataset(&dir.path().join("train.txt")).unwrap();
        let mean: f64 =
            train.iter().map(|e| e.len() as f64).sum::<f64>() / train.len() as f64;
        assert!((mean - 25.5).abs() < 0.5, "mean length {mean}");
    }

    #[test]
    fn symbol_frequencies_pass_chi_square() {
        // 19 degrees of freedom; critical value 43.82 at p = 0.001.
        let dir = tempfile::tempdir().unwrap();
        generate_copy_dataset(20, 20_000, 10, 13, dir.path()).unwrap();
        let train = load_dataset(&dir.path().join("train.txt")).unwrap();
        let mut counts = [0usize; DATA_VOCAB];
        let mut total = 0usize;
        for ex in &train {
            for &id in ex {
                counts[id - SYMBOL_OFFSET] += 1;
                total += 1;
            }
        }
        let expected = total as f64 / DATA_VOCAB as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 43.82, "chi-square statistic {chi2}");
    }

    #[test]
    fn parse_error_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "3 4 5\n6 x 7\n").unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains(":2"), "{err}");
    }

    #[test]
    fn batcher_pads_and_is_deterministic() {
        let examples = vec![vec![3, 4], vec![5, 6, 7, 8, 9]];
        let batcher = Batcher::new(examples, 2, 1).unwrap();
        let batches = batcher.epoch(0);
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.source[0].len(), 5);
        let again = batcher.epoch(0);
        assert_eq!(again[0].source, b.source);
        // A different epoch may reorder but must cover the same examples.
        let other = batcher.epoch(1);
        let mut lens: Vec<usize> = other[0].source_lengths.clone();
        lens.sort_unstable();
        assert_eq!(lens, vec![2, 5]);
    }

    #[test]
    fn oversized_batch_contains_everything() {
        let examples = vec![vec![3], vec![4], vec![5]];
        let batcher = Batcher::new(examples, 100, 0).unwrap();
        let batches = batcher.epoch(0);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].batch_size(), 3);
    }

    #[test]
    fn partial_final_batch_is_emitted() {
        let examples = vec![vec![3], vec![4], vec![5]];
        let batcher = Batcher::new(examples, 2, 0).unwrap();
        let batches = batcher.epoch(0);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[1].batch_size(), 1);
    }
}
