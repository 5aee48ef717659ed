//! Attention mechanisms.
//!
//! Three mechanisms are provided:
//!
//! - content-based attention with the Bahdanau (additive) or Luong
//!   (bilinear) score, recomputed against all encoder states at every
//!   decoder step;
//! - memory-based attention: during encoding, `K` score vectors per
//!   timestep build a fixed-size matrix `C [K x D]`; during decoding the
//!   context is a `K`-way mixture of the rows of `C`, with no access to the
//!   encoder states;
//! - optional position encodings, a constant `K x S` table biasing early
//!   contexts toward early source positions.
//!
//! Raw scores can be turned into weights by either softmax (normalized) or
//! sigmoid (unnormalized gates), chosen independently per side.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::lstm::EncoderStates;
use crate::tensor::Tensor;

/// Effective negative infinity for score masking: large enough that
/// `exp(x - max)` underflows to exactly 0, small enough to stay finite.
const NEG_INF: f64 = -1.0e30;

/// Nonlinearity applied to raw attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringFunction {
    Softmax,
    Sigmoid,
}

impl ScoringFunction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(ScoringFunction::Softmax),
            "sigmoid" => Ok(ScoringFunction::Sigmoid),
            other => Err(Error::Config(format!(
                "unknown scoring function '{other}' (expected softmax or sigmoid)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScoringFunction::Softmax => "softmax",
            ScoringFunction::Sigmoid => "sigmoid",
        }
    }
}

/// Content-based attention variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    None,
    Bahdanau,
    Luong,
    Memory,
}

impl AttentionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionKind::None),
            "bahdanau" => Ok(AttentionKind::Bahdanau),
            "luong" => Ok(AttentionKind::Luong),
            "memory" => Ok(AttentionKind::Memory),
            other => Err(Error::Config(format!(
                "unknown attention mechanism '{other}' (expected none, bahdanau, luong or memory)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Bahdanau => "bahdanau",
            AttentionKind::Luong => "luong",
            AttentionKind::Memory => "memory",
        }
    }
}

/// Axis of the encoder-side softmax. The default normalizes each
/// timestep's score vector over the `K` contexts; the experimental
/// alternative normalizes each context over the timesteps instead.
/// Sigmoid scoring is elementwise and ignores this choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphaAxis {
    #[default]
    Contexts,
    Timesteps,
}

/// The fixed-size attention memory: `c` is the `[B x K x D]` matrix built
/// during encoding and `alphas[t]` the `[B x K]` encoder-side scores that
/// produced it.
pub struct AttentionMemory {
    pub c: VarId,
    pub alphas: Vec<VarId>,
    pub k: usize,
}

/// The constant position-encoding table
/// `L[k][s] = (1 - k/K)(1 - s/S) + (k/K)(s/S)` for `k` in `1..=K` and `s`
/// in `0..=S_max`. Timestep `t` of a sequence uses column `s = t + 1`;
/// column 0 exists only as the manifold's left endpoint.
#[derive(Debug, Clone)]
pub struct PositionTable {
    l: Tensor,
    pub k: usize,
    pub s_max: usize,
}

/// Builds the position-encoding table; cached once per run.
pub fn position_table(k: usize, s_max: usize) -> Result<PositionTable> {
    if k < 1 || s_max < 1 {
        return Err(Error::Config(format!(
            "position_table: K and S_max must be >= 1, got K={k}, S_max={s_max}"
        )));
    }
    let mut l = Tensor::zeros(&[k, s_max + 1]);
    for ki in 1..=k {
        let kf = ki as f64 / k as f64;
        for s in 0..=s_max {
            let sf = s as f64 / s_max as f64;
            l.set2(ki - 1, s, (1.0 - kf) * (1.0 - sf) + kf * sf);
        }
    }
    Ok(PositionTable { l, k, s_max })
}

impl PositionTable {
    /// Raw table entry for 1-based context index `k` and position `s`.
    pub fn entry(&self, k: usize, s: usize) -> f64 {
        self.l.at2(k - 1, s)
    }

    /// Masks the table to a sequence of `seq_len` timesteps (columns
    /// `1..=seq_len`) and renormalizes each row to sum to 1. Result is
    /// `[K x seq_len]`.
    pub fn mask_renormalize(&self, seq_len: usize) -> Result<Tensor> {
        if seq_len < 1 || seq_len > self.s_max {
            return Err(Error::Config(format!(
                "mask_renormalize: seq_len {seq_len} out of range 1..={}",
                self.s_max
            )));
        }
        let mut out = Tensor::zeros(&[self.k, seq_len]);
        for k in 0..self.k {
            let mut sum = 0.0;
            for s in 0..seq_len {
                sum += self.l.at2(k, s + 1);
            }
            if sum <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "mask_renormalize: row k={} sums to 0 before renormalization",
                    k + 1
                )));
            }
            for s in 0..seq_len {
                out.set2(k, s, self.l.at2(k, s + 1) / sum);
            }
        }
        Ok(out)
    }
}

/// `[B x S]` additive mask that is `NEG_INF` at padded positions.
fn padding_neg_mask(lengths: &[usize], s_len: usize) -> Tensor {
    let b = lengths.len();
    let mut m = Tensor::zeros(&[b, s_len]);
    for (bi, &len) in lengths.iter().enumerate() {
        for t in len..s_len {
            m.set2(bi, t, NEG_INF);
        }
    }
    m
}

/// Bahdanau additive score `v_a . tanh(W_a [h; s_j])` for every timestep;
/// `[B x S]` with padded positions at `NEG_INF`.
pub fn bahdanau_score(
    g: &mut Graph,
    h: VarId,
    enc: &EncoderStates,
    w_a: VarId,
    v_a: VarId,
) -> Result<VarId> {
    let states = enc.read_all().to_vec();
    let mut cols = Vec::with_capacity(states.len());
    for &s in &states {
        let hs = g.concat_cols(h, s)?;
        let proj = g.matmul(hs, w_a)?;
        let act = g.tanh(proj);
        cols.push(g.matmul(act, v_a)?);
    }
    let scores = g.stack_cols(&cols)?;
    g.add_const(scores, padding_neg_mask(&enc.lengths, states.len()))
}

/// Luong bilinear score `h^T W_a s_j`; `[B x S]` with padded positions at
/// `NEG_INF`.
pub fn luong_score(
    g: &mut Graph,
    h: VarId,
    enc: &EncoderStates,
    w_a: VarId,
) -> Result<VarId> {
    let states = enc.read_all().to_vec();
    let hw = g.matmul(h, w_a)?;
    let mut cols = Vec::with_capacity(states.len());
    for &s in &states {
        cols.push(g.rowwise_dot(hw, s)?);
    }
    let scores = g.stack_cols(&cols)?;
    g.add_const(scores, padding_neg_mask(&enc.lengths, states.len()))
}

/// Content-based attention context: softmax over valid timesteps of the
/// chosen score, then the weighted average of encoder states. Returns
/// `(context [B x D], weights [B x S])`.
pub fn standard_context(
    g: &mut Graph,
    h: VarId,
    enc: &EncoderStates,
    kind: AttentionKind,
    w_a: VarId,
    v_a: Option<VarId>,
) -> Result<(VarId, VarId)> {
    if enc.lengths.contains(&0) {
        return Err(Error::Usage(
            String::from("standard_context: an example has no unpadded source positions"),
        ));
    }
    let scores = match kind {
        AttentionKind::Bahdanau => {
            let v_a = v_a.ok_or_else(|| {
                Error::Usage(String::from("standard_context: bahdanau requires v_a"))
            })?;
            bahdanau_score(g, h, enc, w_a, v_a)?
        }
        AttentionKind::Luong => luong_score(g, h, enc, w_a)?,
        other => {
            return Err(Error::Config(format!(
                "standard_context: unsupported mechanism '{}'",
                other.as_str()
            )))
        }
    };
    let weights = g.softmax(scores, 1)?;
    let states = enc.read_all().to_vec();
    let c = g.weighted_state_sum(weights, &states)?;
    Ok((c, weights))
}

/// Builds the attention memory `C` from the encoder states (Eqs. 4-5, or
/// the position-encoded form when `pe` is given). Score vectors at padded
/// timesteps are forced to zero so they contribute nothing to `C`.
///
/// With `pe_after_scoring = false` (the default form) the position column
/// multiplies the raw scores before the scoring nonlinearity; with `true`
/// it multiplies the scored weights instead.
pub fn memory_encode(
    g: &mut Graph,
    enc: &EncoderStates,
    w_alpha: VarId,
    scoring: ScoringFunction,
    pe: Option<&PositionTable>,
    pe_after_scoring: bool,
) -> Result<AttentionMemory> {
    memory_encode_with_axis(
        g,
        enc,
        w_alpha,
        scoring,
        pe,
        pe_after_scoring,
        AlphaAxis::Contexts,
    )
}

/// [`memory_encode`] with an explicit choice of softmax axis.
#[allow(clippy::too_many_arguments)]
pub fn memory_encode_with_axis(
    g: &mut Graph,
    enc: &EncoderStates,
    w_alpha: VarId,
    scoring: ScoringFunction,
    pe: Option<&PositionTable>,
    pe_after_scoring: bool,
    alpha_axis: AlphaAxis,
) -> Result<AttentionMemory> {
    let k = g.shape(w_alpha)[1];
    // Per-example position columns, masked and renormalized to the
    // example's length.
    let pe_tables: Option<Vec<Tensor>> = match pe {
        None => None,
        Some(table) => {
            if table.k != k {
                return Err(Error::Config(format!(
                    "memory_encode: position table K={} does not match W_alpha K={k}",
                    table.k
                )));
            }
            let mut per_example = Vec::with_capacity(enc.lengths.len());
            for &len in &enc.lengths {
                if len == 0 {
                    per_example.push(Tensor::zeros(&[k, 0]));
                } else {
                    per_example.push(table.mask_renormalize(len)?);
                }
            }
            Some(per_example)
        }
    };

    let states = enc.read_all().to_vec();
    let s_len = states.len();
    let batch = enc.lengths.len();

    // Raw scores per timestep, with the PE column applied pre-nonlinearity
    // unless configured otherwise.
    let mut raw = Vec::with_capacity(s_len);
    let mut pe_factors: Vec<Option<Tensor>> = Vec::with_capacity(s_len);
    for (t, &s) in states.iter().enumerate() {
        let mut scores = g.matmul(s, w_alpha)?;
        let pe_factor = pe_tables.as_ref().map(|tables| {
            let mut f = Tensor::zeros(&[batch, k]);
            for (bi, lt) in tables.iter().enumerate() {
                if t < enc.lengths[bi] {
                    for ki in 0..k {
                        f.set2(bi, ki, lt.at2(ki, t));
                    }
                }
            }
            f
        });
        if let (Some(f), false) = (&pe_factor, pe_after_scoring) {
            scores = g.mul_const(scores, f.clone())?;
        }
        raw.push(scores);
        pe_factors.push(pe_factor);
    }

    let zero_mask = |t: usize| {
        let mut mask = Tensor::zeros(&[batch, k]);
        for (bi, &len) in enc.lengths.iter().enumerate() {
            if t < len {
                for ki in 0..k {
                    mask.set2(bi, ki, 1.0);
                }
            }
        }
        mask
    };

    let mut alphas = Vec::with_capacity(s_len);
    match (scoring, alpha_axis) {
        (ScoringFunction::Softmax, AlphaAxis::Timesteps) => {
            // Normalize each context over valid timesteps. Padded steps are
            // pushed to NEG_INF; the per-(b, k) max over time is a runtime
            // constant, so subtracting it leaves the softmax unchanged.
            let mut masked = Vec::with_capacity(s_len);
            for (t, &r) in raw.iter().enumerate() {
                let mut neg = Tensor::zeros(&[batch, k]);
                for (bi, &len) in enc.lengths.iter().enumerate() {
                    if t >= len {
                        for ki in 0..k {
                            neg.set2(bi, ki, NEG_INF);
                        }
                    }
                }
                masked.push(g.add_const(r, neg)?);
            }
            let mut max = Tensor::full(&[batch, k], f64::NEG_INFINITY);
            for &m in &masked {
                for (i, &v) in g.value(m).data().iter().enumerate() {
                    if v > max.data()[i] {
                        max.data_mut()[i] = v;
                    }
                }
            }
            let neg_max = {
                let mut t = max;
                for v in t.data_mut() {
                    *v = -*v;
                }
                t
            };
            let exps: Vec<VarId> = masked
                .into_iter()
                .map(|m| {
                    let shifted = g.add_const(m, neg_max.clone())?;
                    Ok(g.exp(shifted))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = exps[0];
            for &e in &exps[1..] {
                total = g.add(total, e)?;
            }
            for (t, &e) in exps.iter().enumerate() {
                let mut alpha = g.div(e, total)?;
                if let (Some(f), true) = (&pe_factors[t], pe_after_scoring) {
                    alpha = g.mul_const(alpha, f.clone())?;
                }
                alpha = g.mul_const(alpha, zero_mask(t))?;
                alphas.push(alpha);
            }
        }
        _ => {
            for (t, &scores) in raw.iter().enumerate() {
                let mut alpha = match scoring {
                    ScoringFunction::Softmax => g.softmax(scores, 1)?,
                    ScoringFunction::Sigmoid => g.sigmoid(scores),
                };
                if let (Some(f), true) = (&pe_factors[t], pe_after_scoring) {
                    alpha = g.mul_const(alpha, f.clone())?;
                }
                alpha = g.mul_const(alpha, zero_mask(t))?;
                alphas.push(alpha);
            }
        }
    }
    let c = g.batch_outer_sum(&alphas, &states)?;
    Ok(AttentionMemory { c, alphas, k })
}

/// Decoder-side memory readout (Eqs. 6-7): scores `beta = f(W_beta h)` and
/// context `c = beta^T C`. Takes no encoder states by construction.
pub fn memory_context(
    g: &mut Graph,
    h: VarId,
    mem: &AttentionMemory,
    w_beta: VarId,
    scoring: ScoringFunction,
) -> Result<(VarId, VarId)> {
    let scores = g.matmul(h, w_beta)?;
    let beta = match scoring {
        ScoringFunction::Softmax => g.softmax(scores, 1)?,
        ScoringFunction::Sigmoid => g.sigmoid(scores),
    };
    let c = g.batch_vecmat(beta, mem.c)?;
    Ok((c, beta))
}

/// Source-target alignment for one decoded example: the product of the
/// encoder scores `alpha [S x K]` and decoder scores `betas [T x K]`,
/// giving `[S x T]`.
pub fn combined_alignment(alpha: &Tensor, betas: &Tensor) -> Result<Tensor> {
    if alpha.rank() != 2 || betas.rank() != 2 || alpha.cols() != betas.cols() {
        return Err(Error::ShapeMismatch {
            op: "combined_alignment",
            lhs: alpha.shape().to_vec(),
            rhs: betas.shape().to_vec(),
        });
    }
    let (s, k, t) = (alpha.rows(), alpha.cols(), betas.rows());
    let mut out = Tensor::zeros(&[s, t]);
    for si in 0..s {
        for ti in 0..t {
            let mut acc = 0.0;
            for ki in 0..k {
                acc += alpha.at2(si, ki) * betas.at2(ti, ki);
            }
            out.set2(si, ti, acc);
        }
    }
    Ok(out)
}

/// The per-context slice of the alignment: `alpha[:, k] . betas[:, k]^T`.
pub fn alignment_slice_k(alpha: &Tensor, betas: &Tensor, k: usize) -> Result<Tensor> {
    if alpha.cols() != betas.cols() || k >= alpha.cols() {
        return Err(Error::IndexOutOfRange {
            what: "alignment_slice_k",
            index: k,
            bound: alpha.cols(),
        });
    }
    let (s, t) = (alpha.rows(), betas.rows());
    let mut out = Tensor::zeros(&[s, t]);
    for si in 0..s {
        for ti in 0..t {
            out.set2(si, ti, alpha.at2(si, k) * betas.at2(ti, k));
        }
    }
    Ok(out)
}

/// Exact multiply-accumulate count of the attention-specific computation
/// for one decoded example, measured by running the instrumented ops on
/// zero tensors (RNN and output projection excluded). Assumes the
/// bidirectional convention `H = D/2` for the decoder state size and an
/// additive-attention projection width equal to `H`.
pub fn count_attention_ops(
    kind: AttentionKind,
    d: usize,
    k: usize,
    s_len: usize,
    t_len: usize,
) -> Result<u64> {
    if d == 0 || s_len == 0 || t_len == 0 {
        return Err(Error::Config(String::from(
            "count_attention_ops: D, S and T must be positive",
        )));
    }
    let h_dim = d / 2;
    let mut g = Graph::new();
    let enc = crate::lstm::synthetic_states(&mut g, 1, d, s_len);
    let h = g.constant(Tensor::zeros(&[1, h_dim]));
    match kind {
        AttentionKind::None => Ok(0),
        AttentionKind::Memory => {
            if k == 0 {
                return Err(Error::Config(String::from(
                    "count_attention_ops: memory attention requires K >= 1",
                )));
            }
            let w_alpha = g.constant(Tensor::zeros(&[d, k]));
            let w_beta = g.constant(Tensor::zeros(&[h_dim, k]));
            let before = g.macs();
            let mem = memory_encode(
                &mut g,
                &enc,
                w_alpha,
                ScoringFunction::Softmax,
                None,
                false,
            )?;
            for _ in 0..t_len {
                memory_context(&mut g, h, &mem, w_beta, ScoringFunction::Softmax)?;
            }
            Ok(g.macs() - before)
        }
        AttentionKind::Bahdanau => {
            let a_dim = h_dim;
            let w_a = g.constant(Tensor::zeros(&[h_dim + d, a_dim]));
            let v_a = g.constant(Tensor::zeros(&[a_dim, 1]));
            let before = g.macs();
            for _ in 0..t_len {
                standard_context(&mut g, h, &enc, AttentionKind::Bahdanau, w_a, Some(v_a))?;
            }
            Ok(g.macs() - before)
        }
        AttentionKind::Luong => {
            let w_a = g.constant(Tensor::zeros(&[h_dim, d]));
            let before = g.macs();
            for _ in 0..t_len {
                standard_context(&mut g, h, &enc, AttentionKind::Luong, w_a, None)?;
            }
            Ok(g.macs() - before)
        }
    }
}
