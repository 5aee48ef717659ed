//! Greedy and beam-search decoding.
//!
//! The source is encoded once into an [`EncodedSource`]; decoding then
//! steps token by token on small throwaway graphs. For memory attention
//! only the `K x D` matrix crosses the encode/decode boundary; the
//! encoder-state read counter on [`EncodedSource`] stays untouched during
//! decoding, which is the measurable form of the mechanism's promise.

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::attention::{memory_context, standard_context, AttentionKind, AttentionMemory};
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::lstm::{decoder_step, states_from_tensors, BoundCell};
use crate::rng::Rng;
use crate::seq2seq::{AttnParams, Batch, Model, EOS, SOS};
use crate::tensor::Tensor;

/// Encoder-side results materialized as plain tensors, ready for repeated
/// decode steps.
pub struct EncodedSource {
    pub lengths: Vec<usize>,
    /// Initial decoder state per layer, `[B x H]`.
    pub init_states: Vec<(Tensor, Tensor)>,
    pub payload: EncPayload,
    /// Encoder-side memory scores per timestep, `[B x K]` (memory only).
    pub alphas: Option<Vec<Tensor>>,
    /// Encoder-state elements handed to decode steps.
    pub reads: Rc<Cell<u64>>,
}

pub enum EncPayload {
    /// No attention: nothing crosses the boundary except the initial state.
    None,
    /// Content-based attention keeps every encoder state, `[B x D]` per
    /// timestep.
    States(Vec<Tensor>),
    /// Memory attention keeps only the `[B x K x D]` matrix.
    Memory { c: Tensor },
}

impl Model {
    /// Runs the encoder (and for memory attention the memory build) once,
    /// extracting everything decoding needs.
    pub fn encode_source(&self, sources: &[Vec<usize>]) -> Result<EncodedSource> {
        let batch = Batch::from_sources(sources);
        let mut rng = Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let bound = self.params.bind_all(&mut g);
        let (enc, mem) = self.encode(&mut g, &bound, &batch, &mut rng, false)?;
        let init = crate::lstm::init_decoder_state(
            &mut g,
            &enc,
            self.bridge.as_ref().map(|b| (b, bound.as_slice())),
            self.config.decoder_layers,
            self.config.decoder_units,
        )?;
        let init_states = init
            .into_iter()
            .map(|(h, c)| (g.value(h).clone(), g.value(c).clone()))
            .collect();
        let (payload, alphas) = match mem {
            Some(m) => (
                EncPayload::Memory {
                    c: g.value(m.c).clone(),
                },
                Some(m.alphas.iter().map(|&a| g.value(a).clone()).collect()),
            ),
            None => match self.attn {
                AttnParams::None => (EncPayload::None, None),
                _ => (
                    EncPayload::States(
                        enc.read_all().iter().map(|&s| g.value(s).clone()).collect(),
                    ),
                    None,
                ),
            },
        };
        Ok(EncodedSource {
            lengths: batch.source_lengths,
            init_states,
            payload,
            alphas,
            reads: Rc::new(Cell::new(0)),
        })
    }

}

/// Output of one batched decode step.
pub struct StepOutput {
    /// `log softmax` over the vocabulary, `[B' x V]`.
    pub log_probs: Tensor,
    /// Updated decoder state per layer, `[B' x H]`.
    pub states: Vec<(Tensor, Tensor)>,
    /// Attention scores for this step (`beta` or content weights), if any.
    pub attention: Option<Tensor>,
}

fn select_rows(src: &Tensor, rows: &[usize]) -> Tensor {
    let cols = src.cols();
    let mut out = Tensor::zeros(&[rows.len(), cols]);
    for (r, &row) in rows.iter().enumerate() {
        out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(src.row_slice(row));
    }
    out
}

fn log_softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let (rows, cols) = (t.rows(), t.cols());
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&x| libm::exp(x - max)).sum();
        let log_z = max + libm::log(sum);
        for v in row.iter_mut() {
            *v -= log_z;
        }
    }
    out
}

/// One decode step for a batch of hypotheses. `rows[i]` is the encoded
/// example behind hypothesis row `i`; `prev_tokens[i]` its previous output
/// token; `states` its decoder state.
pub fn decode_step(
    model: &Model,
    enc: &EncodedSource,
    rows: &[usize],
    prev_tokens: &[usize],
    states: &[(Tensor, Tensor)],
) -> Result<StepOutput> {
    let b = rows.len();
    if prev_tokens.len() != b || states.len() != model.config.decoder_layers {
        return Err(Error::Usage(String::from(
            "decode_step: inconsistent batch arity",
        )));
    }
    let mut g = Graph::new();
    let cv = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
    let embed = cv(&mut g, &model.params.get(model.embed).value);
    let emb = g.gather_rows(embed, prev_tokens)?;
    let dec_cells: Vec<BoundCell> = model
        .decoder
        .iter()
        .map(|cell| {
            let wx = cv(&mut g, &model.params.get(cell.wx).value);
            let wh = cv(&mut g, &model.params.get(cell.wh).value);
            let bb = cv(&mut g, &model.params.get(cell.b).value);
            BoundCell {
                wx,
                wh,
                b: bb,
                hidden: cell.hidden,
            }
        })
        .collect();
    let mut dec_states: Vec<(VarId, VarId)> = states
        .iter()
        .map(|(h, c)| (g.constant(h.clone()), g.constant(c.clone())))
        .collect();
    let mut rng = Rng::seed_from_u64(0);
    let h = decoder_step(
        &mut g,
        emb,
        &mut dec_states,
        &dec_cells,
        1.0,
        &mut rng,
        false,
    )?;

    let d = model.config.context_dim();
    let mut attention = None;
    let context = match (&model.attn, &enc.payload) {
        (AttnParams::None, _) => g.constant(Tensor::zeros(&[b, d])),
        (AttnParams::Memory { w_beta, .. }, EncPayload::Memory { c }) => {
            let k = model.config.k;
            // Broadcast each hypothesis's memory rows; C is not an encoder
            // state, so the read counter is untouched.
            let mut cb = Tensor::zeros(&[b, k, d]);
            for (r, &row) in rows.iter().enumerate() {
                let src = &c.data()[row * k * d..(row + 1) * k * d];
                cb.data_mut()[r * k * d..(r + 1) * k * d].copy_from_slice(src);
            }
            let mem = AttentionMemory {
                c: g.constant(cb),
                alphas: vec![],
                k,
            };
            let wb = cv(&mut g, &model.params.get(*w_beta).value);
            let (c, beta) = memory_context(&mut g, h, &mem, wb, model.config.decoder_scoring)?;
            attention = Some(g.value(beta).clone());
            c
        }
        (AttnParams::Bahdanau { w_a, v_a }, EncPayload::States(states_t)) => {
            let lengths: Vec<usize> = rows.iter().map(|&r| enc.lengths[r]).collect();
            let broadcast: Vec<Tensor> =
                states_t.iter().map(|s| select_rows(s, rows)).collect();
            enc.reads
                .set(enc.reads.get() + (broadcast.len() * b * d) as u64);
            let tmp = states_from_tensors(&mut g, &broadcast, &lengths);
            let wa = cv(&mut g, &model.params.get(*w_a).value);
            let va = cv(&mut g, &model.params.get(*v_a).value);
            let (c, w) =
                standard_context(&mut g, h, &tmp, AttentionKind::Bahdanau, wa, Some(va))?;
            attention = Some(g.value(w).clone());
            c
        }
        (AttnParams::Luong { w_a }, EncPayload::States(states_t)) => {
            let lengths: Vec<usize> = rows.iter().map(|&r| enc.lengths[r]).collect();
            let broadcast: Vec<Tensor> =
                states_t.iter().map(|s| select_rows(s, rows)).collect();
            enc.reads
                .set(enc.reads.get() + (broadcast.len() * b * d) as u64);
            let tmp = states_from_tensors(&mut g, &broadcast, &lengths);
            let wa = cv(&mut g, &model.params.get(*w_a).value);
            let (c, w) = standard_context(&mut g, h, &tmp, AttentionKind::Luong, wa, None)?;
            attention = Some(g.value(w).clone());
            c
        }
        _ => {
            return Err(Error::Usage(String::from(
                "decode_step: encoded payload does not match the model's attention kind",
            )))
        }
    };
    let hc = g.concat_cols(h, context)?;
    let out_w = cv(&mut g, &model.params.get(model.out_w).value);
    let out_b = cv(&mut g, &model.params.get(model.out_b).value);
    let proj = g.matmul(hc, out_w)?;
    let logits = g.add_row_broadcast(proj, out_b)?;
    let log_probs = log_softmax_rows(g.value(logits));
    let new_states = dec_states
        .into_iter()
        .map(|(h, c)| (g.value(h).clone(), g.value(c).clone()))
        .collect();
    Ok(StepOutput {
        log_probs,
        states: new_states,
        attention,
    })
}

/// Output length cap: `2 |S| + 10`, guarding against non-terminating
/// decodes from undertrained models.
pub fn max_output_length(source_len: usize) -> usize {
    2 * source_len + 10
}

/// Greedy (argmax) decoding of a batch of sources. Returns the emitted
/// token sequences without `EOS`.
pub fn greedy_decode(model: &Model, sources: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    if sources.is_empty() {
        return Ok(vec![]);
    }
    let enc = model.encode_source(sources)?;
    let b = sources.len();
    let rows: Vec<usize> = (0..b).collect();
    let mut states: Vec<(Tensor, Tensor)> = enc.init_states.clone();
    let mut prev = vec![SOS; b];
    let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    let caps: Vec<usize> = sources.iter().map(|s| max_output_length(s.len())).collect();
    let max_cap = caps.iter().copied().max().unwrap_or(0);
    for _ in 0..max_cap {
        if done.iter().all(|&d| d) {
            break;
        }
        let step = decode_step(model, &enc, &rows, &prev, &states)?;
        states = step.states;
        for bi in 0..b {
            if done[bi] {
                prev[bi] = EOS;
                continue;
            }
            let row = step.log_probs.row_slice(bi);
            let tok = argmax(row);
            if tok == EOS || outputs[bi].len() + 1 > caps[bi] {
                done[bi] = true;
                prev[bi] = EOS;
            } else {
                outputs[bi].push(tok);
                prev[bi] = tok;
            }
        }
    }
    Ok(outputs)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A partial target sequence during beam search.
#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub states: Vec<(Tensor, Tensor)>,
    pub finished: bool,
    /// Attention scores captured at each emitted step.
    pub attention: Vec<Vec<f64>>,
}

/// Result of decoding one example.
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Per-step attention scores of the winning hypothesis.
    pub attention: Vec<Vec<f64>>,
}

/// Length-unnormalized beam search over one source sequence. Hypotheses
/// finish on `EOS`; decoding stops when every beam slot has finished or the
/// output cap is reached. Returns the best finished hypothesis, or the best
/// unfinished one if none finished.
pub fn beam_search(
    model: &Model,
    source: &[usize],
    beam_size: usize,
    max_out_len: Option<usize>,
) -> Result<DecodeResult> {
    if beam_size == 0 {
        return Err(Error::Config(String::from("beam_size must be >= 1")));
    }
    let enc = model.encode_source(&[source.to_vec()])?;
    let cap = max_out_len.unwrap_or_else(|| max_output_length(source.len()));
    let mut live = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        states: enc.init_states.clone(),
        finished: false,
        attention: Vec::new(),
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..cap {
        if live.is_empty() {
            break;
        }
        let rows = vec![0usize; live.len()];
        let prev: Vec<usize> = live
            .iter()
            .map(|h| *h.tokens.last().unwrap_or(&SOS))
            .collect();
        // States per layer, stacked over live hypotheses.
        let layers = model.config.decoder_layers;
        let hidden = model.config.decoder_units;
        let stacked: Vec<(Tensor, Tensor)> = (0..layers)
            .map(|l| {
                let mut h = Tensor::zeros(&[live.len(), hidden]);
                let mut c = Tensor::zeros(&[live.len(), hidden]);
                for (r, hyp) in live.iter().enumerate() {
                    h.data_mut()[r * hidden..(r + 1) * hidden]
                        .copy_from_slice(hyp.states[l].0.row_slice(0));
                    c.data_mut()[r * hidden..(r + 1) * hidden]
                        .copy_from_slice(hyp.states[l].1.row_slice(0));
                }
                (h, c)
            })
            .collect();
        let step = decode_step(model, &enc, &rows, &prev, &stacked)?;

        // Expand every live hypothesis over the vocabulary and keep the
        // best `beam_size` candidates by accumulated log-probability.
        let vocab = step.log_probs.cols();
        let mut candidates: Vec<(usize, usize, f64)> = Vec::with_capacity(live.len() * vocab);
        for (r, hyp) in live.iter().enumerate() {
            let row = step.log_probs.row_slice(r);
            for (v, &lp) in row.iter().enumerate().take(vocab) {
                candidates.push((r, v, hyp.log_prob + lp));
            }
        }
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(core::cmp::Ordering::Equal));
        let slots = beam_size - finished.len();
        let mut next_live = Vec::with_capacity(slots);
        for &(r, v, score) in candidates.iter().take(slots) {
            let parent = &live[r];
            let states: Vec<(Tensor, Tensor)> = (0..model.config.decoder_layers)
                .map(|l| {
                    (
                        select_rows(&step.states[l].0, &[r]),
                        select_rows(&step.states[l].1, &[r]),
                    )
                })
                .collect();
            let mut attention = parent.attention.clone();
            if let Some(att) = &step.attention {
                attention.push(att.row_slice(r).to_vec());
            }
            let mut hyp = BeamHypothesis {
                tokens: parent.tokens.clone(),
                log_prob: score,
                states,
                finished: false,
                attention,
            };
            if v == EOS {
                hyp.finished = true;
                finished.push(hyp);
            } else {
                hyp.tokens.push(v);
                next_live.push(hyp);
            }
        }
        live = next_live;
        if finished.len() >= beam_size {
            break;
        }
    }
    let best = finished
        .into_iter()
        .chain(live)
        .max_by(|a, b| {
            // Finished hypotheses win ties and rank above unfinished ones
            // at equal score.
            (a.finished, a.log_prob)
                .partial_cmp(&(b.finished, b.log_prob))
                .unwrap_or(core::cmp::Ordering::Equal)
        })
        .ok_or_else(|| Error::Usage(String::from("beam_search: no hypothesis produced")))?;
    Ok(DecodeResult {
        tokens: best.tokens,
        log_prob: best.log_prob,
        attention: best.attention,
    })
}

/// Total log-probability of `target ++ EOS` given `source`, computed by
/// teacher-forced stepping through the same inference path decoding uses.
pub fn score_sequence(model: &Model, source: &[usize], target: &[usize]) -> Result<f64> {
    let enc = model.encode_source(&[source.to_vec()])?;
    let mut states = enc.init_states.clone();
    let mut prev = SOS;
    let mut total = 0.0;
    for i in 0..=target.len() {
        let step = decode_step(model, &enc, &[0], &[prev], &states)?;
        states = step.states;
        let tok = if i < target.len() { target[i] } else { EOS };
        total += step.log_probs.at2(0, tok);
        prev = tok;
    }
    Ok(total)
}
