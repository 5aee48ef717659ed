//! The assembled encoder-attention-decoder model.
//!
//! Teacher-forced training: the source is encoded once (for memory
//! attention the `K x D` matrix is also built once), then each target
//! position runs one decoder step, one attention context and the output
//! projection `softmax(W [h; c] + b)`. The decoder state, not an encoder
//! state, enters the projection.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::attention::{
    memory_context, memory_encode_with_axis, position_table, standard_context, AlphaAxis,
    AttentionKind, AttentionMemory, PositionTable, ScoringFunction,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::lstm::{
    decoder_step, encode_bidirectional, init_decoder_state, BoundCell, BridgeParams, DecoderInit,
    EncoderParams, EncoderStates, LstmCellParams,
};
use crate::optim::{Adam, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Reserved token ids.
pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
/// First id available to data symbols.
pub const SYMBOL_OFFSET: usize = 3;

/// Model hyperparameters.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub encoder_units: usize,
    pub encoder_layers: usize,
    pub decoder_units: usize,
    pub decoder_layers: usize,
    pub attention_kind: AttentionKind,
    /// Number of attention context vectors (memory attention only).
    pub k: usize,
    pub encoder_scoring: ScoringFunction,
    pub decoder_scoring: ScoringFunction,
    pub use_position_encodings: bool,
    /// Apply the PE column after the scoring nonlinearity instead of before.
    pub pe_after_scoring: bool,
    /// Normalize encoder scores over timesteps instead of over contexts.
    pub alpha_over_timesteps: bool,
    pub dropout_keep: f64,
    pub seed: u64,
    /// Maximum source length across the dataset; column extent of the
    /// position-encoding table.
    pub s_max: usize,
    pub decoder_init: DecoderInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: SYMBOL_OFFSET + 20,
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
            s_max: 50,
            decoder_init: DecoderInit::Bridge,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= SYMBOL_OFFSET {
            return Err(Error::Config(format!(
                "vocab_size must exceed {} reserved ids",
                SYMBOL_OFFSET
            )));
        }
        for (name, v) in [
            ("embedding_dim", self.embedding_dim),
            ("encoder_units", self.encoder_units),
            ("encoder_layers", self.encoder_layers),
            ("decoder_units", self.decoder_units),
            ("decoder_layers", self.decoder_layers),
            ("s_max", self.s_max),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.attention_kind == AttentionKind::Memory && self.k == 0 {
            return Err(Error::Config(String::from(
                "memory attention requires K >= 1",
            )));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout_keep must be in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        Ok(())
    }

    /// Width of the encoder-state / attention-context vectors.
    pub fn context_dim(&self) -> usize {
        2 * self.encoder_units
    }
}

/// Attention parameter handles, per mechanism.
#[derive(Debug, Clone)]
pub enum AttnParams {
    None,
    Bahdanau { w_a: ParamId, v_a: ParamId },
    Luong { w_a: ParamId },
    Memory { w_alpha: ParamId, w_beta: ParamId },
}

/// A padded training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source: Vec<Vec<usize>>,
    pub source_lengths: Vec<usize>,
    pub decoder_input: Vec<Vec<usize>>,
    pub decoder_target: Vec<Vec<usize>>,
    pub target_mask: Vec<Vec<bool>>,
}

impl Batch {
    /// Builds a teacher-forcing batch from unpadded source sequences; the
    /// copy-task target equals the source. Decoder input is `SOS ++ source`,
    /// decoder target is `source ++ EOS`.
    pub fn from_sources(sources: &[Vec<usize>]) -> Batch {
        Self::from_pairs(sources, sources)
    }

    pub fn from_pairs(sources: &[Vec<usize>], targets: &[Vec<usize>]) -> Batch {
        let b = sources.len();
        let s_pad = sources.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let t_pad = targets.iter().map(|t| t.len() + 1).max().unwrap_or(1);
        let mut batch = Batch {
            source: vec![vec![PAD; s_pad]; b],
            source_lengths: Vec::with_capacity(b),
            decoder_input: vec![vec![PAD; t_pad]; b],
            decoder_target: vec![vec![PAD; t_pad]; b],
            target_mask: vec![vec![false; t_pad]; b],
        };
        for (bi, (src, tgt)) in sources.iter().zip(targets).enumerate() {
            batch.source_lengths.push(src.len());
            batch.source[bi][..src.len()].copy_from_slice(src);
            batch.decoder_input[bi][0] = SOS;
            batch.decoder_input[bi][1..=tgt.len()].copy_from_slice(tgt);
            batch.decoder_target[bi][..tgt.len()].copy_from_slice(tgt);
            batch.decoder_target[bi][tgt.len()] = EOS;
            for m in batch.target_mask[bi][..=tgt.len()].iter_mut() {
                *m = true;
            }
        }
        batch
    }

    pub fn batch_size(&self) -> usize {
        self.source.len()
    }

    fn source_column(&self, t: usize) -> Vec<usize> {
        self.source.iter().map(|row| row[t]).collect()
    }

    fn decoder_input_column(&self, i: usize) -> Vec<usize> {
        self.decoder_input.iter().map(|row| row[i]).collect()
    }
}

/// One taped forward pass with everything a caller may need afterwards:
/// the tape itself, the scalar loss, per-step logits and attention scores,
/// and the encoder-state read instrumentation.
pub struct Forward {
    pub graph: Graph,
    pub loss: VarId,
    pub step_logits: Vec<VarId>,
    /// Encoder-side memory scores per timestep (memory attention only).
    pub alphas: Option<Vec<VarId>>,
    /// Per decode step: `beta [B x K]` for memory attention, softmax
    /// weights `[B x S]` for content-based attention.
    pub step_attention: Vec<VarId>,
    pub bound: Vec<VarId>,
    /// Shared encoder-state element-read counter.
    pub enc_reads: Rc<Cell<u64>>,
    /// Counter value when the decode phase began.
    pub enc_reads_at_decode_start: u64,
    pub memory_context_calls: usize,
    pub unmasked_targets: usize,
}

impl Forward {
    /// Encoder-state element reads performed after encoding finished.
    pub fn decode_phase_reads(&self) -> u64 {
        self.enc_reads.get() - self.enc_reads_at_decode_start
    }

    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss).item()
    }
}

/// The trainable model: parameter store plus structure handles.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub embed: ParamId,
    pub encoder: EncoderParams,
    pub decoder: Vec<LstmCellParams>,
    pub bridge: Option<BridgeParams>,
    pub attn: AttnParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub pos_table: Option<PositionTable>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let v = config.vocab_size;
        let e = config.embedding_dim;
        let d = config.context_dim();
        let h = config.decoder_units;

        let embed = params.add("embed", rng.uniform_init(&[v, e], e));
        let encoder = EncoderParams::new(
            &mut params,
            e,
            config.encoder_units,
            config.encoder_layers,
            &mut rng,
        );
        let decoder: Vec<LstmCellParams> = (0..config.decoder_layers)
            .map(|l| {
                let in_size = if l == 0 { e } else { h };
                LstmCellParams::new(&mut params, &format!("decoder/layer{l}"), in_size, h, &mut rng)
            })
            .collect();
        let bridge = match config.decoder_init {
            DecoderInit::Bridge => Some(BridgeParams::new(
                &mut params,
                config.encoder_units,
                h,
                config.decoder_layers,
                &mut rng,
            )),
            DecoderInit::Zero => None,
        };
        let attn = match config.attention_kind {
            AttentionKind::None => AttnParams::None,
            AttentionKind::Bahdanau => {
                let a_dim = h;
                AttnParams::Bahdanau {
                    w_a: params.add("attention/w_a", rng.uniform_init(&[h + d, a_dim], h + d)),
                    v_a: params.add("attention/v_a", rng.uniform_init(&[a_dim, 1], a_dim)),
                }
            }
            AttentionKind::Luong => AttnParams::Luong {
                w_a: params.add("attention/w_a", rng.uniform_init(&[h, d], h)),
            },
            AttentionKind::Memory => AttnParams::Memory {
                w_alpha: params.add("attention/w_alpha", rng.uniform_init(&[d, config.k], d)),
                w_beta: params.add("attention/w_beta", rng.uniform_init(&[h, config.k], h)),
            },
        };
        let out_w = params.add("output/w", rng.uniform_init(&[h + d, v], h + d));
        let out_b = params.add("output/b", Tensor::zeros(&[v]));
        let pos_table = if config.attention_kind == AttentionKind::Memory
            && config.use_position_encodings
        {
            Some(position_table(config.k, config.s_max)?)
        } else {
            None
        };
        Ok(Model {
            config,
            params,
            embed,
            encoder,
            decoder,
            bridge,
            attn,
            out_w,
            out_b,
            pos_table,
        })
    }

    fn check_token_range(&self, batch: &Batch) -> Result<()> {
        let v = self.config.vocab_size;
        for rows in [&batch.source, &batch.decoder_input, &batch.decoder_target] {
            for row in rows.iter() {
                for &id in row {
                    if id >= v {
                        return Err(Error::IndexOutOfRange {
                            what: "token id",
                            index: id,
                            bound: v,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Encodes the source and builds, for memory attention, the attention
    /// memory. Returns the encoder states and optional memory.
    pub(crate) fn encode(
        &self,
        g: &mut Graph,
        bound: &[VarId],
        batch: &Batch,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(EncoderStates, Option<AttentionMemory>)> {
        let embed_id = bound[self.embed.index()];
        let s_pad = batch.source[0].len();
        let embedded: Vec<VarId> = (0..s_pad)
            .map(|t| g.gather_rows(embed_id, &batch.source_column(t)))
            .collect::<Result<Vec<_>>>()?;
        let enc = encode_bidirectional(
            g,
            &self.encoder,
            bound,
            &embedded,
            &batch.source_lengths,
            self.config.dropout_keep,
            rng,
            training,
        )?;
        let mem = match &self.attn {
            AttnParams::Memory { w_alpha, .. } => {
                let axis = if self.config.alpha_over_timesteps {
                    AlphaAxis::Timesteps
                } else {
                    AlphaAxis::Contexts
                };
                Some(memory_encode_with_axis(
                    g,
                    &enc,
                    bound[w_alpha.index()],
                    self.config.encoder_scoring,
                    self.pos_table.as_ref(),
                    self.config.pe_after_scoring,
                    axis,
                )?)
            }
            _ => None,
        };
        Ok((enc, mem))
    }

    /// Teacher-forced forward pass over a batch, producing the masked mean
    /// cross-entropy loss.
    pub fn forward(&self, batch: &Batch, training: bool, rng: &mut Rng) -> Result<Forward> {
        self.check_token_range(batch)?;
        let mut g = Graph::new();
        let bound = self.params.bind_all(&mut g);
        let (enc, mem) = self.encode(&mut g, &bound, batch, rng, training)?;
        let enc_reads = enc.reads_counter();
        let mut dec_states = init_decoder_state(
            &mut g,
            &enc,
            self.bridge
                .as_ref()
                .map(|b| (b, bound.as_slice())),
            self.config.decoder_layers,
            self.config.decoder_units,
        )?;
        let dec_cells: Vec<BoundCell> = self.decoder.iter().map(|c| c.bind(&bound)).collect();
        let batch_size = batch.batch_size();
        let d = self.config.context_dim();
        let t_pad = batch.decoder_input[0].len();
        let embed_id = bound[self.embed.index()];
        let out_w = bound[self.out_w.index()];
        let out_b = bound[self.out_b.index()];

        let enc_reads_at_decode_start = enc_reads.get();
        let mut memory_context_calls = 0usize;
        let mut step_logits = Vec::with_capacity(t_pad);
        let mut step_attention = Vec::with_capacity(t_pad);
        let mut ce_terms = Vec::with_capacity(t_pad);
        let mut unmasked_targets = 0usize;
        for i in 0..t_pad {
            let emb = g.gather_rows(embed_id, &batch.decoder_input_column(i))?;
            let h = decoder_step(
                &mut g,
                emb,
                &mut dec_states,
                &dec_cells,
                self.config.dropout_keep,
                rng,
                training,
            )?;
            let context = match &self.attn {
                AttnParams::None => g.constant(Tensor::zeros(&[batch_size, d])),
                AttnParams::Bahdanau { w_a, v_a } => {
                    let (c, w) = standard_context(
                        &mut g,
                        h,
                        &enc,
                        AttentionKind::Bahdanau,
                        bound[w_a.index()],
                        Some(bound[v_a.index()]),
                    )?;
                    step_attention.push(w);
                    c
                }
                AttnParams::Luong { w_a } => {
                    let (c, w) = standard_context(
                        &mut g,
                        h,
                        &enc,
                        AttentionKind::Luong,
                        bound[w_a.index()],
                        None,
                    )?;
                    step_attention.push(w);
                    c
                }
                AttnParams::Memory { w_beta, .. } => {
                    let mem = mem.as_ref().expect("memory built during encode");
                    let (c, beta) = memory_context(
                        &mut g,
                        h,
                        mem,
                        bound[w_beta.index()],
                        self.config.decoder_scoring,
                    )?;
                    memory_context_calls += 1;
                    step_attention.push(beta);
                    c
                }
            };
            let hc = g.concat_cols(h, context)?;
            let proj = g.matmul(hc, out_w)?;
            let logits = g.add_row_broadcast(proj, out_b)?;
            step_logits.push(logits);
            let targets: Vec<usize> = batch.decoder_target.iter().map(|r| r[i]).collect();
            let mask: Vec<bool> = batch.target_mask.iter().map(|r| r[i]).collect();
            unmasked_targets += mask.iter().filter(|&&m| m).count();
            ce_terms.push(g.cross_entropy_sum(logits, &targets, &mask)?);
        }
        if unmasked_targets == 0 {
            return Err(Error::Usage(String::from(
                "forward: batch has no unmasked target positions",
            )));
        }
        let mut total = ce_terms[0];
        for &t in &ce_terms[1..] {
            total = g.add(total, t)?;
        }
        let loss = g.scale(total, 1.0 / unmasked_targets as f64);
        let alphas = mem.map(|m| m.alphas);
        Ok(Forward {
            graph: g,
            loss,
            step_logits,
            alphas,
            step_attention,
            bound,
            enc_reads,
            enc_reads_at_decode_start,
            memory_context_calls,
            unmasked_targets,
        })
    }
}

/// One optimization step: forward, backward, global-norm clip, Adam
/// update, gradient zeroing. Returns the loss value. A non-finite loss is
/// an error; the caller decides how to abort.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    adam: &mut Adam,
    clip_norm: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let fwd = model.forward(batch, true, rng)?;
    let loss = fwd.loss_value();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss = {loss}")));
    }
    let grads = fwd.graph.backward(fwd.loss)?;
    model.params.accumulate_grads(&fwd.bound, &grads);
    if clip_norm > 0.0 {
        model.params.clip_global_norm(clip_norm);
    }
    adam.step(&mut model.params)?;
    model.params.zero_grads();
    Ok(loss)
}
