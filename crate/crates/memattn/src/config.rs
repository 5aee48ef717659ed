//! Run configuration: flat `key = value` files, presets and `--set`
//! overrides.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use memattn_core::attention::{AttentionKind, ScoringFunction};
use memattn_core::lstm::DecoderInit;
use memattn_core::seq2seq::{ModelConfig, SYMBOL_OFFSET};

/// Every tunable of a run: model shape, attention mechanism, optimizer and
/// loop settings. Serialized as one `key = value` per line.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub embedding_dim: usize,
    pub encoder_units: usize,
    pub encoder_layers: usize,
    pub decoder_units: usize,
    pub decoder_layers: usize,
    pub attention_kind: AttentionKind,
    pub k: usize,
    pub encoder_scoring: ScoringFunction,
    pub decoder_scoring: ScoringFunction,
    pub use_position_encodings: bool,
    pub pe_after_scoring: bool,
    pub alpha_over_timesteps: bool,
    pub dropout_keep: f64,
    pub seed: u64,
    pub decoder_init: DecoderInit,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub checkpoint_every_steps: usize,
    pub eval_every_steps: usize,
    pub clip_norm: f64,
    /// Validation examples used for periodic BLEU/loss during training;
    /// 0 means the whole validation set.
    pub eval_examples: usize,
    /// Stop early once validation BLEU reaches this value; 0 disables.
    pub target_bleu: f64,
    /// Beam width for final evaluation.
    pub beam_size: usize,
    /// Maximum source length of the dataset; normally read from dataset
    /// metadata, settable so checkpoint metadata is self-contained.
    pub s_max: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            embedding_dim: 256,
            encoder_units: 256,
            encoder_layers: 2,
            decoder_units: 256,
            decoder_layers: 2,
            attention_kind: AttentionKind::Memory,
            k: 16,
            encoder_scoring: ScoringFunction::Softmax,
            decoder_scoring: ScoringFunction::Softmax,
            use_position_encodings: false,
            pe_after_scoring: false,
            alpha_over_timesteps: false,
            dropout_keep: 0.8,
            seed: 42,
            decoder_init: DecoderInit::Bridge,
            learning_rate: 1e-4,
            batch_size: 128,
            max_steps: 200_000,
            checkpoint_every_steps: 1000,
            eval_every_steps: 500,
            clip_norm: 5.0,
            eval_examples: 100,
            target_bleu: 0.0,
            beam_size: 10,
            s_max: None,
        }
    }
}

const VALID_KEYS: &[&str] = &[
    "embedding_dim",
    "encoder_units",
    "encoder_layers",
    "decoder_units",
    "decoder_layers",
    "attention_kind",
    "K",
    "encoder_scoring",
    "decoder_scoring",
    "use_position_encodings",
    "pe_after_scoring",
    "alpha_over_timesteps",
    "dropout_keep",
    "seed",
    "decoder_init",
    "learning_rate",
    "batch_size",
    "max_steps",
    "checkpoint_every_steps",
    "eval_every_steps",
    "clip_norm",
    "eval_examples",
    "target_bleu",
    "beam_size",
    "s_max",
];

pub const PRESETS: &[&str] = &["desk-L10", "desk-L50", "desk-L100", "desk-L200"];

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => bail!("{key}: expected a boolean, got '{v}'"),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment. Unknown keys are errors and
    /// list the valid keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let num =
            |v: &str| -> Result<usize> { v.parse().map_err(|_| anyhow!("{key}: expected an integer, got '{v}'")) };
        let real =
            |v: &str| -> Result<f64> { v.parse().map_err(|_| anyhow!("{key}: expected a number, got '{v}'")) };
        match key {
            "embedding_dim" => self.embedding_dim = num(value)?,
            "encoder_units" => self.encoder_units = num(value)?,
            "encoder_layers" => self.encoder_layers = num(value)?,
            "decoder_units" => self.decoder_units = num(value)?,
            "decoder_layers" => self.decoder_layers = num(value)?,
            "attention_kind" => self.attention_kind = AttentionKind::parse(value)?,
            "K" => self.k = num(value)?,
            "encoder_scoring" => self.encoder_scoring = ScoringFunction::parse(value)?,
            "decoder_scoring" => self.decoder_scoring = ScoringFunction::parse(value)?,
            "use_position_encodings" => self.use_position_encodings = parse_bool(key, value)?,
            "pe_after_scoring" => self.pe_after_scoring = parse_bool(key, value)?,
            "alpha_over_timesteps" => self.alpha_over_timesteps = parse_bool(key, value)?,
            "dropout_keep" => self.dropout_keep = real(value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| anyhow!("seed: expected an integer, got '{value}'"))?
            }
            "decoder_init" => {
                self.decoder_init = match value {
                    "bridge" => DecoderInit::Bridge,
                    "zero" => DecoderInit::Zero,
                    _ => bail!("decoder_init: expected 'bridge' or 'zero', got '{value}'"),
                }
            }
            "learning_rate" => self.learning_rate = real(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "max_steps" => self.max_steps = num(value)?,
            "checkpoint_every_steps" => self.checkpoint_every_steps = num(value)?,
            "eval_every_steps" => self.eval_every_steps = num(value)?,
            "clip_norm" => self.clip_norm = real(value)?,
            "eval_examples" => self.eval_examples = num(value)?,
            "target_bleu" => self.target_bleu = real(value)?,
            "beam_size" => self.beam_size = num(value)?,
            "s_max" => self.s_max = Some(num(value)?),
            _ => bail!(
                "unknown config key '{key}'; valid keys: {}",
                VALID_KEYS.join(", ")
            ),
        }
        Ok(())
    }

    /// Applies a `--set key=value` override.
    pub fn apply_set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got '{assignment}'"))?;
        self.apply(key.trim(), value.trim())
    }

    /// Desk-scale presets: 2-layer 64-unit models with 128-dimensional
    /// embeddings, step budget scaled with sequence length. The learning
    /// rate is raised to 1e-3 so the small models converge within the
    /// budget on a CPU.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let max_steps = match name {
            "desk-L10" => 20_000,
            "desk-L50" => 30_000,
            "desk-L100" => 40_000,
            "desk-L200" => 60_000,
            _ => bail!("unknown preset '{name}'; valid presets: {}", PRESETS.join(", ")),
        };
        self.embedding_dim = 128;
        self.encoder_units = 64;
        self.decoder_units = 64;
        self.encoder_layers = 2;
        self.decoder_layers = 2;
        self.max_steps = max_steps;
        self.learning_rate = 1e-3;
        self.batch_size = 32;
        self.target_bleu = 99.5;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    /// Parses a flat config file into `self`. Lines are `key = value`;
    /// blank lines and `#` comments are skipped.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                anyhow!("{}:{}: expected 'key = value'", path.display(), lineno + 1)
            })?;
            self.apply(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(())
    }

    /// Full snapshot, parseable by [`RunConfig::merge_file`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut w = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        w("embedding_dim", self.embedding_dim.to_string());
        w("encoder_units", self.encoder_units.to_string());
        w("encoder_layers", self.encoder_layers.to_string());
        w("decoder_units", self.decoder_units.to_string());
        w("decoder_layers", self.decoder_layers.to_string());
        w("attention_kind", self.attention_kind.as_str().to_string());
        w("K", self.k.to_string());
        w("encoder_scoring", self.encoder_scoring.as_str().to_string());
        w("decoder_scoring", self.decoder_scoring.as_str().to_string());
        w(
            "use_position_encodings",
            self.use_position_encodings.to_string(),
        );
        w("pe_after_scoring", self.pe_after_scoring.to_string());
        w("alpha_over_timesteps", self.alpha_over_timesteps.to_string());
        w("dropout_keep", self.dropout_keep.to_string());
        w("seed", self.seed.to_string());
        w(
            "decoder_init",
            match self.decoder_init {
                DecoderInit::Bridge => "bridge".to_string(),
                DecoderInit::Zero => "zero".to_string(),
            },
        );
        w("learning_rate", self.learning_rate.to_string());
        w("batch_size", self.batch_size.to_string());
        w("max_steps", self.max_steps.to_string());
        w(
            "checkpoint_every_steps",
            self.checkpoint_every_steps.to_string(),
        );
        w("eval_every_steps", self.eval_every_steps.to_string());
        w("clip_norm", self.clip_norm.to_string());
        w("eval_examples", self.eval_examples.to_string());
        w("target_bleu", self.target_bleu.to_string());
        w("beam_size", self.beam_size.to_string());
        if let Some(s_max) = self.s_max {
            w("s_max", s_max.to_string());
        }
        out
    }

    /// Builds the core model configuration. `data_vocab` is the number of
    /// data symbols (ids start after the reserved tokens); `s_max` the
    /// maximum source length of the dataset.
    pub fn to_model_config(&self, data_vocab: usize, s_max: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: SYMBOL_OFFSET + data_vocab,
            embedding_dim: self.embedding_dim,
            encoder_units: self.encoder_units,
            encoder_layers: self.encoder_layers,
            decoder_units: self.decoder_units,
            decoder_layers: self.decoder_layers,
            attention_kind: self.attention_kind,
            k: self.k,
            encoder_scoring: self.encoder_scoring,
            decoder_scoring: self.decoder_scoring,
            use_position_encodings: self.use_position_encodings,
            pe_after_scoring: self.pe_after_scoring,
            alpha_over_timesteps: self.alpha_over_timesteps,
            dropout_keep: self.dropout_keep,
            seed: self.seed,
            s_max,
            decoder_init: self.decoder_init,
        }
    }
}
