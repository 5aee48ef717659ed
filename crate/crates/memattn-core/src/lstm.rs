//! LSTM cell, stacked layers, bidirectional encoder and decoder stepping.
//!
//! Gate order throughout is (input i, forget f, cell-candidate g, output o).
//! Padded timesteps are handled with copy-through masking inside the
//! recurrence (state carried unchanged past a sequence's end) and the
//! per-timestep outputs are zero-masked afterwards, so downstream consumers
//! see exact zeros beyond each sequence's length.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::error::{Error, Result};
use crate::graph::{dropout, Graph, VarId};
use crate::optim::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Parameter handles for one LSTM cell: input-to-gates `[I x 4H]`,
/// hidden-to-gates `[H x 4H]` and bias `[4H]`.
#[derive(Debug, Clone)]
pub struct LstmCellParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input_size: usize,
    pub hidden: usize,
}

impl LstmCellParams {
    /// Registers freshly initialized cell parameters under `prefix`.
    /// The forget-gate bias slice is initialized to 1.0.
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        input_size: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        let wx = params.add(
            format!("{prefix}/wx"),
            rng.uniform_init(&[input_size, 4 * hidden], input_size),
        );
        let wh = params.add(
            format!("{prefix}/wh"),
            rng.uniform_init(&[hidden, 4 * hidden], hidden),
        );
        let mut bias = Tensor::zeros(&[4 * hidden]);
        for i in hidden..2 * hidden {
            bias.data_mut()[i] = 1.0;
        }
        let b = params.add(format!("{prefix}/b"), bias);
        LstmCellParams {
            wx,
            wh,
            b,
            input_size,
            hidden,
        }
    }
}

/// Tape-bound handles for one cell within a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundCell {
    pub wx: VarId,
    pub wh: VarId,
    pub b: VarId,
    pub hidden: usize,
}

impl LstmCellParams {
    pub fn bind(&self, bound: &[VarId]) -> BoundCell {
        BoundCell {
            wx: bound[self.wx.index()],
            wh: bound[self.wh.index()],
            b: bound[self.b.index()],
            hidden: self.hidden,
        }
    }
}

/// One LSTM step: `c' = f.c + i.g`, `h' = o.tanh(c')`.
pub fn lstm_cell_step(
    g: &mut Graph,
    x: VarId,
    h: VarId,
    c: VarId,
    cell: &BoundCell,
) -> Result<(VarId, VarId)> {
    let hidden = cell.hidden;
    let xg = g.matmul(x, cell.wx)?;
    let hg = g.matmul(h, cell.wh)?;
    let pre = g.add(xg, hg)?;
    let pre = g.add_row_broadcast(pre, cell.b)?;
    let i_pre = g.slice_cols(pre, 0, hidden)?;
    let f_pre = g.slice_cols(pre, hidden, 2 * hidden)?;
    let g_pre = g.slice_cols(pre, 2 * hidden, 3 * hidden)?;
    let o_pre = g.slice_cols(pre, 3 * hidden, 4 * hidden)?;
    let i_gate = g.sigmoid(i_pre);
    let f_gate = g.sigmoid(f_pre);
    let cand = g.tanh(g_pre);
    let o_gate = g.sigmoid(o_pre);
    let fc = g.mul(f_gate, c)?;
    let ig = g.mul(i_gate, cand)?;
    let c_new = g.add(fc, ig)?;
    let c_tanh = g.tanh(c_new);
    let h_new = g.mul(o_gate, c_tanh)?;
    Ok((h_new, c_new))
}

/// One step through a stack of LSTM layers with dropout on each cell input.
/// `states` holds (h, c) per layer and is updated in place; returns the top
/// layer's new hidden state.
pub fn stacked_step(
    g: &mut Graph,
    input: VarId,
    states: &mut [(VarId, VarId)],
    layers: &[BoundCell],
    dropout_keep: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<VarId> {
    if states.len() != layers.len() {
        return Err(Error::Usage(format!(
            "stacked_step: {} states for {} layers",
            states.len(),
            layers.len()
        )));
    }
    let mut x = input;
    for (layer, state) in layers.iter().zip(states.iter_mut()) {
        let x_dropped = dropout(g, x, dropout_keep, rng, training)?;
        let (h, c) = lstm_cell_step(g, x_dropped, state.0, state.1, layer)?;
        *state = (h, c);
        x = h;
    }
    Ok(x)
}

/// Parameter handles for the bidirectional encoder (forward and backward
/// stacks, both with `layers` layers of `hidden` units).
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub fw: Vec<LstmCellParams>,
    pub bw: Vec<LstmCellParams>,
    pub hidden: usize,
}

impl EncoderParams {
    pub fn new(
        params: &mut ParamSet,
        input_size: usize,
        hidden: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut fw = Vec::new();
        let mut bw = Vec::new();
        for l in 0..layers {
            // Both directions are bidirectional per layer: layer l > 0
            // consumes the 2H-wide concatenation of layer l-1.
            let in_size = if l == 0 { input_size } else { 2 * hidden };
            fw.push(LstmCellParams::new(
                params,
                &format!("encoder/fw/layer{l}"),
                in_size,
                hidden,
                rng,
            ));
            bw.push(LstmCellParams::new(
                params,
                &format!("encoder/bw/layer{l}"),
                in_size,
                hidden,
                rng,
            ));
        }
        EncoderParams { fw, bw, hidden }
    }
}

/// Per-timestep top-layer encoder outputs `[B x D]` with `D = 2H`, plus the
/// per-example final directional states used to initialize the decoder.
///
/// Every access to the per-timestep states goes through [`EncoderStates::read_all`],
/// which counts the number of state elements handed out. The counter is the
/// evidence that memory attention never touches these states during decoding.
pub struct EncoderStates {
    states: Vec<VarId>,
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub d: usize,
    reads: Rc<Cell<u64>>,
    pub final_fw: (VarId, VarId),
    pub final_bw: (VarId, VarId),
}

impl EncoderStates {
    /// Source length after padding (number of timesteps).
    pub fn seq_len(&self) -> usize {
        self.states.len()
    }

    /// All per-timestep states; bumps the element-read counter by
    /// `S * B * D`.
    pub fn read_all(&self) -> &[VarId] {
        self.reads.set(
            self.reads.get() + (self.states.len() * self.batch * self.d) as u64,
        );
        &self.states
    }

    /// Shared handle to the element-read counter.
    pub fn reads_counter(&self) -> Rc<Cell<u64>> {
        Rc::clone(&self.reads)
    }
}

/// Zero-valued encoder states with full-length sequences; used for op
/// counting and attention unit tests.
pub fn synthetic_states(g: &mut Graph, batch: usize, d: usize, s_len: usize) -> EncoderStates {
    let states: Vec<VarId> = (0..s_len)
        .map(|_| g.constant(Tensor::zeros(&[batch, d])))
        .collect();
    let half = d / 2;
    let fw = zeros_state(g, batch, half.max(1));
    let bw = zeros_state(g, batch, half.max(1));
    EncoderStates {
        states,
        lengths: alloc::vec![s_len; batch],
        batch,
        d,
        reads: Rc::new(Cell::new(0)),
        final_fw: fw,
        final_bw: bw,
    }
}

/// Encoder states from explicit per-timestep tensors; for tests.
pub fn states_from_tensors(
    g: &mut Graph,
    tensors: &[Tensor],
    lengths: &[usize],
) -> EncoderStates {
    let batch = lengths.len();
    let d = tensors[0].cols();
    let states: Vec<VarId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let half = (d / 2).max(1);
    let fw = zeros_state(g, batch, half);
    let bw = zeros_state(g, batch, half);
    EncoderStates {
        states,
        lengths: lengths.to_vec(),
        batch,
        d,
        reads: Rc::new(Cell::new(0)),
        final_fw: fw,
        final_bw: bw,
    }
}

fn zeros_state(g: &mut Graph, batch: usize, hidden: usize) -> (VarId, VarId) {
    let h = g.constant(Tensor::zeros(&[batch, hidden]));
    let c = g.constant(Tensor::zeros(&[batch, hidden]));
    (h, c)
}

/// 0/1 mask `[B x width]` that is 1 where `t < length(b)`.
fn step_mask(lengths: &[usize], t: usize, width: usize) -> Tensor {
    let b = lengths.len();
    let mut m = Tensor::zeros(&[b, width]);
    for (bi, &len) in lengths.iter().enumerate() {
        if t < len {
            for c in 0..width {
                m.set2(bi, c, 1.0);
            }
        }
    }
    m
}

struct DirectionOutput {
    top: Vec<VarId>,
    final_top: (VarId, VarId),
}

/// Runs a stacked unidirectional pass over `order` (time indices in
/// processing order) with copy-through state masking at padded steps.
#[allow(clippy::too_many_arguments)]
fn run_direction(
    g: &mut Graph,
    layers: &[BoundCell],
    inputs: &[VarId],
    lengths: &[usize],
    order: &[usize],
    dropout_keep: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<DirectionOutput> {
    let batch = lengths.len();
    let hidden = layers[0].hidden;
    let mut layer_inputs: Vec<VarId> = order.iter().map(|&t| inputs[t]).collect();
    let mut final_top = zeros_state(g, batch, hidden);
    for (li, layer) in layers.iter().enumerate() {
        let mut state = zeros_state(g, batch, hidden);
        let mut outputs = Vec::with_capacity(layer_inputs.len());
        for (step, &x) in layer_inputs.iter().enumerate() {
            let t = order[step];
            let x_dropped = dropout(g, x, dropout_keep, rng, training)?;
            let (h_new, c_new) = lstm_cell_step(g, x_dropped, state.0, state.1, layer)?;
            let keep = step_mask(lengths, t, hidden);
            let carry = {
                let mut inv = keep.clone();
                for v in inv.data_mut() {
                    *v = 1.0 - *v;
                }
                inv
            };
            let h_kept = g.mul_const(h_new, keep.clone())?;
            let h_carried = g.mul_const(state.0, carry.clone())?;
            let h = g.add(h_kept, h_carried)?;
            let c_kept = g.mul_const(c_new, keep)?;
            let c_carried = g.mul_const(state.1, carry)?;
            let c = g.add(c_kept, c_carried)?;
            state = (h, c);
            outputs.push(h);
        }
        if li + 1 == layers.len() {
            final_top = state;
        }
        layer_inputs = outputs;
    }
    // Undo the processing-order permutation so outputs are in time order.
    let mut top = layer_inputs.clone();
    for (step, &t) in order.iter().enumerate() {
        top[t] = layer_inputs[step];
    }
    Ok(DirectionOutput {
        top,
        final_top,
    })
}

/// Bidirectional encoding of embedded inputs (`embedded[t]` is `[B x E]`).
/// Top-layer forward/backward outputs are concatenated to `D = 2H` per
/// timestep and zeroed past each sequence's length.
#[allow(clippy::too_many_arguments)]
pub fn encode_bidirectional(
    g: &mut Graph,
    enc: &EncoderParams,
    bound: &[VarId],
    embedded: &[VarId],
    lengths: &[usize],
    dropout_keep: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<EncoderStates> {
    if embedded.is_empty() {
        return Err(Error::Usage("encode_bidirectional: empty input".into()));
    }
    let s_len = embedded.len();
    let batch = lengths.len();
    let hidden = enc.hidden;
    let fw_cells: Vec<BoundCell> = enc.fw.iter().map(|c| c.bind(bound)).collect();
    let bw_cells: Vec<BoundCell> = enc.bw.iter().map(|c| c.bind(bound)).collect();

    // Layer l > 0 consumes the concatenated fw/bw outputs of layer l - 1,
    // so the directional passes are interleaved per layer.
    let forward_order: Vec<usize> = (0..s_len).collect();
    let backward_order: Vec<usize> = (0..s_len).rev().collect();
    let mut layer_in: Vec<VarId> = embedded.to_vec();
    let mut fw_final = zeros_state(g, batch, hidden);
    let mut bw_final = zeros_state(g, batch, hidden);
    let mut top: Vec<VarId> = Vec::new();
    for l in 0..fw_cells.len() {
        let fw_out = run_direction(
            g,
            &fw_cells[l..l + 1],
            &layer_in,
            lengths,
            &forward_order,
            dropout_keep,
            rng,
            training,
        )?;
        let bw_out = run_direction(
            g,
            &bw_cells[l..l + 1],
            &layer_in,
            lengths,
            &backward_order,
            dropout_keep,
            rng,
            training,
        )?;
        top = (0..s_len)
            .map(|t| g.concat_cols(fw_out.top[t], bw_out.top[t]))
            .collect::<Result<Vec<_>>>()?;
        fw_final = fw_out.final_top;
        bw_final = bw_out.final_top;
        layer_in = top.clone();
    }

    // Zero the concatenated outputs at padded positions.
    let d = 2 * hidden;
    let states: Vec<VarId> = top
        .into_iter()
        .enumerate()
        .map(|(t, s)| g.mul_const(s, step_mask(lengths, t, d)))
        .collect::<Result<Vec<_>>>()?;

    Ok(EncoderStates {
        states,
        lengths: lengths.to_vec(),
        batch,
        d,
        reads: Rc::new(Cell::new(0)),
        final_fw: fw_final,
        final_bw: bw_final,
    })
}

/// How the decoder's initial state is produced from the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderInit {
    /// Learned `tanh` projection of the final forward/backward states.
    Bridge,
    /// All-zero initial state.
    Zero,
}

/// Bridge projections, one (h, c) pair of `[2H_e x H_d]` matrices per
/// decoder layer.
#[derive(Debug, Clone)]
pub struct BridgeParams {
    pub per_layer: Vec<(ParamId, ParamId)>,
}

impl BridgeParams {
    pub fn new(
        params: &mut ParamSet,
        enc_hidden: usize,
        dec_hidden: usize,
        dec_layers: usize,
        rng: &mut Rng,
    ) -> Self {
        let per_layer = (0..dec_layers)
            .map(|l| {
                let wh = params.add(
                    format!("bridge/layer{l}/h"),
                    rng.uniform_init(&[2 * enc_hidden, dec_hidden], 2 * enc_hidden),
                );
                let wc = params.add(
                    format!("bridge/layer{l}/c"),
                    rng.uniform_init(&[2 * enc_hidden, dec_hidden], 2 * enc_hidden),
                );
                (wh, wc)
            })
            .collect();
        BridgeParams { per_layer }
    }
}

/// Initial decoder state per layer from the encoder's final directional
/// states.
pub fn init_decoder_state(
    g: &mut Graph,
    enc_states: &EncoderStates,
    bridge: Option<(&BridgeParams, &[VarId])>,
    dec_layers: usize,
    dec_hidden: usize,
) -> Result<Vec<(VarId, VarId)>> {
    match bridge {
        None => {
            let batch = enc_states.batch;
            Ok((0..dec_layers)
                .map(|_| zeros_state(g, batch, dec_hidden))
                .collect())
        }
        Some((bridge, bound)) => {
            let h_cat = g.concat_cols(enc_states.final_fw.0, enc_states.final_bw.0)?;
            let c_cat = g.concat_cols(enc_states.final_fw.1, enc_states.final_bw.1)?;
            bridge
                .per_layer
                .iter()
                .map(|&(wh, wc)| {
                    let h_proj = g.matmul(h_cat, bound[wh.index()])?;
                    let c_proj = g.matmul(c_cat, bound[wc.index()])?;
                    Ok((g.tanh(h_proj), g.tanh(c_proj)))
                })
                .collect()
        }
    }
}

/// One decoder step over the stacked layers. The input is the previous
/// target token's embedding only; the attention context is not fed back
/// into the recurrence.
pub fn decoder_step(
    g: &mut Graph,
    prev_embedding: VarId,
    states: &mut [(VarId, VarId)],
    layers: &[BoundCell],
    dropout_keep: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<VarId> {
    if states.is_empty() {
        return Err(Error::Usage(
            String::from("decoder_step: state not initialized"),
        ));
    }
    stacked_step(g, prev_embedding, states, layers, dropout_keep, rng, training)
}
