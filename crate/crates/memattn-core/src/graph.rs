//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward computation as a flat list of nodes in
//! topological order (inputs always precede their consumers). [`Graph::backward`]
//! walks the tape once in reverse, visiting every recorded operation exactly
//! once and accumulating gradients for all nodes that need them. A graph is
//! built per training step and discarded after backward.
//!
//! The graph also counts multiply-accumulate operations performed by the
//! forward pass; this counter is the measurement behind the attention
//! complexity comparisons.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: VarId,
        b: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Sub {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    AddRowBroadcast {
        a: VarId,
        bias: VarId,
    },
    Scale {
        a: VarId,
        c: f64,
    },
    AddConst {
        a: VarId,
    },
    MulConst {
        a: VarId,
        t: Tensor,
    },
    Div {
        a: VarId,
        b: VarId,
    },
    Exp {
        a: VarId,
    },
    Sigmoid {
        a: VarId,
    },
    Tanh {
        a: VarId,
    },
    Softmax {
        a: VarId,
        axis: usize,
    },
    Sum {
        a: VarId,
    },
    ConcatCols {
        a: VarId,
        b: VarId,
    },
    SliceCols {
        a: VarId,
        start: usize,
    },
    StackCols {
        parts: Vec<VarId>,
    },
    RowwiseDot {
        a: VarId,
        b: VarId,
    },
    GatherRows {
        table: VarId,
        ids: Vec<usize>,
    },
    CrossEntropySum {
        logits: VarId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    WeightedStateSum {
        weights: VarId,
        states: Vec<VarId>,
    },
    BatchOuterSum {
        alphas: Vec<VarId>,
        states: Vec<VarId>,
    },
    BatchVecMat {
        beta: VarId,
        mem: VarId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward traversal, indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// The computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulate count of the forward computation so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Records an input tensor. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a constant; no gradient ever flows into it.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    fn shape_err(&self, op: &'static str, a: VarId, b: VarId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `[m x k] x [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = matmul_raw(av, bv);
        self.macs += (m * k * n) as u64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul { a, b }, ng))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("sub", a, b));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub { a, b }, ng))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.macs += data.len() as u64;
        let out = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    /// Elementwise quotient of same-shape tensors.
    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("div", a, b));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let out = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Div { a, b }, ng))
    }

    /// Elementwise `exp`.
    pub fn exp(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| libm::exp(x)).collect();
        let out = Tensor::from_vec(self.shape(a).to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(out, Op::Exp { a }, ng)
    }

    /// `[m x n] + [n]` with the bias broadcast across rows.
    pub fn add_row_broadcast(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.rank() != 2 || bv.rank() != 1 || av.cols() != bv.shape()[0] {
            return Err(self.shape_err("add_row_broadcast", a, bias));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = av.clone();
        for r in 0..m {
            for c in 0..n {
                let v = out.at2(r, c) + bv.data()[c];
                out.set2(r, c, v);
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddRowBroadcast { a, bias }, ng))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::from_vec(self.shape(a).to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(out, Op::Scale { a, c }, ng)
    }

    /// Adds a constant tensor (no gradient into the constant).
    pub fn add_const(&mut self, a: VarId, t: Tensor) -> Result<VarId> {
        if self.shape(a) != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_const",
                lhs: self.shape(a).to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(t.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(t.shape().to_vec(), data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::AddConst { a }, ng))
    }

    /// Elementwise product with a constant tensor (masks, dropout, position
    /// encodings).
    pub fn mul_const(&mut self, a: VarId, t: Tensor) -> Result<VarId> {
        if self.shape(a) != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(t.data())
            .map(|(x, y)| x * y)
            .collect();
        self.macs += data.len() as u64;
        let out = Tensor::from_vec(t.shape().to_vec(), data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::MulConst { a, t }, ng))
    }

    /// Numerically stable elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor::from_vec(self.shape(a).to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid { a }, ng)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| libm::tanh(x)).collect();
        let out = Tensor::from_vec(self.shape(a).to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(out, Op::Tanh { a }, ng)
    }

    /// Softmax along `axis` with max-subtraction for stability.
    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(Error::Usage(format!(
                "softmax: axis {axis} invalid for rank {}",
                av.rank()
            )));
        }
        let mut out = av.clone();
        for_each_lane(av.shape(), axis, |idx| {
            let mut max = f64::NEG_INFINITY;
            for &i in idx {
                max = max.max(out.data()[i]);
            }
            let mut sum = 0.0;
            for &i in idx {
                let e = libm::exp(out.data()[i] - max);
                out.data_mut()[i] = e;
                sum += e;
            }
            for &i in idx {
                out.data_mut()[i] /= sum;
            }
        });
        let ng = self.needs(a);
        Ok(self.push(out, Op::Softmax { a, axis }, ng))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, ng)
    }

    /// `[m x p] ++ [m x q] -> [m x (p+q)]`.
    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows() {
            return Err(self.shape_err("concat_cols", a, b));
        }
        let (m, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(av.row_slice(r));
            data.extend_from_slice(bv.row_slice(r));
        }
        let out = Tensor::matrix(m, p + q, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatCols { a, b }, ng))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: VarId, start: usize, end: usize) -> Result<VarId> {
        let av = self.value(a);
        if av.rank() != 2 || start >= end || end > av.cols() {
            return Err(Error::Usage(format!(
                "slice_cols: range {start}..{end} invalid for shape {:?}",
                av.shape()
            )));
        }
        let m = av.rows();
        let mut data = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            data.extend_from_slice(&av.row_slice(r)[start..end]);
        }
        let out = Tensor::matrix(m, end - start, data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::SliceCols { a, start }, ng))
    }

    /// Stacks `[m x 1]` columns into `[m x p]`.
    pub fn stack_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Usage("stack_cols: empty input".into()));
        }
        let m = self.value(parts[0]).rows();
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.cols() != 1 || pv.rows() != m {
                return Err(self.shape_err("stack_cols", parts[0], p));
            }
        }
        let cols = parts.len();
        let mut out = Tensor::zeros(&[m, cols]);
        for (j, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            for r in 0..m {
                out.set2(r, j, pv.at2(r, 0));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::StackCols {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Per-row dot product: `[m x n], [m x n] -> [m x 1]`.
    pub fn rowwise_dot(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) || self.value(a).rank() != 2 {
            return Err(self.shape_err("rowwise_dot", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let (m, n) = (av.rows(), av.cols());
        let mut out = Tensor::zeros(&[m, 1]);
        for r in 0..m {
            let mut acc = 0.0;
            for c in 0..n {
                acc += av.at2(r, c) * bv.at2(r, c);
            }
            out.set2(r, 0, acc);
        }
        self.macs += (m * n) as u64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::RowwiseDot { a, b }, ng))
    }

    /// Embedding lookup: rows `ids` of `table [V x E] -> [B x E]`.
    pub fn gather_rows(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::Usage("gather_rows: table must be rank 2".into()));
        }
        let (v, e) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(tv.row_slice(id));
        }
        let out = Tensor::matrix(ids.len(), e, data)?;
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Sum over unmasked rows of `-log softmax(logits)[target]`; scalar.
    pub fn cross_entropy_sum(
        &mut self,
        logits: VarId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<VarId> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != targets.len() || targets.len() != mask.len() {
            return Err(Error::Usage(format!(
                "cross_entropy_sum: logits {:?} vs {} targets / {} mask entries",
                lv.shape(),
                targets.len(),
                mask.len()
            )));
        }
        let vocab = lv.cols();
        let mut total = 0.0;
        for (b, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if t >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    bound: vocab,
                });
            }
            let row = lv.row_slice(b);
            total -= log_softmax_at(row, t);
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over unmasked rows of the cross entropy; scalar. Errors if no
    /// row is unmasked.
    pub fn cross_entropy_mean(
        &mut self,
        logits: VarId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<VarId> {
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(Error::Usage("cross_entropy_mean: all rows masked".into()));
        }
        let s = self.cross_entropy_sum(logits, targets, mask)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Context from per-timestep states: `out[b,d] = sum_j w[b,j] s_j[b,d]`.
    pub fn weighted_state_sum(&mut self, weights: VarId, states: &[VarId]) -> Result<VarId> {
        let wv = self.value(weights);
        if wv.rank() != 2 || wv.cols() != states.len() || states.is_empty() {
            return Err(Error::Usage(format!(
                "weighted_state_sum: weights {:?} vs {} states",
                wv.shape(),
                states.len()
            )));
        }
        let b = wv.rows();
        let d = self.value(states[0]).cols();
        for &s in states {
            let sv = self.value(s);
            if sv.rank() != 2 || sv.rows() != b || sv.cols() != d {
                return Err(self.shape_err("weighted_state_sum", states[0], s));
            }
        }
        let mut out = Tensor::zeros(&[b, d]);
        for (j, &s) in states.iter().enumerate() {
            let sv = &self.nodes[s.0].value;
            for r in 0..b {
                let w = self.nodes[weights.0].value.at2(r, j);
                let src = sv.row_slice(r);
                let dst = &mut out.data_mut()[r * d..(r + 1) * d];
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += w * x;
                }
            }
        }
        self.macs += (b * d * states.len()) as u64;
        let ng = self.needs(weights) || states.iter().any(|&s| self.needs(s));
        Ok(self.push(
            out,
            Op::WeightedStateSum {
                weights,
                states: states.to_vec(),
            },
            ng,
        ))
    }

    /// Memory matrix build: `out[b,k,d] = sum_t alpha_t[b,k] s_t[b,d]`.
    pub fn batch_outer_sum(&mut self, alphas: &[VarId], states: &[VarId]) -> Result<VarId> {
        if alphas.len() != states.len() || alphas.is_empty() {
            return Err(Error::Usage(format!(
                "batch_outer_sum: {} score vectors vs {} states",
                alphas.len(),
                states.len()
            )));
        }
        let b = self.value(alphas[0]).rows();
        let k = self.value(alphas[0]).cols();
        let d = self.value(states[0]).cols();
        for (&a, &s) in alphas.iter().zip(states) {
            let (av, sv) = (self.value(a), self.value(s));
            if av.rows() != b || av.cols() != k || sv.rows() != b || sv.cols() != d {
                return Err(self.shape_err("batch_outer_sum", a, s));
            }
        }
        let mut out = Tensor::zeros(&[b, k, d]);
        for (&a, &s) in alphas.iter().zip(states) {
            for bi in 0..b {
                for ki in 0..k {
                    let w = self.nodes[a.0].value.at2(bi, ki);
                    let src = self.nodes[s.0].value.row_slice(bi);
                    let dst = &mut out.data_mut()[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                    for (o, x) in dst.iter_mut().zip(src) {
                        *o += w * x;
                    }
                }
            }
        }
        self.macs += (alphas.len() * b * k * d) as u64;
        let ng =
            alphas.iter().any(|&a| self.needs(a)) || states.iter().any(|&s| self.needs(s));
        Ok(self.push(
            out,
            Op::BatchOuterSum {
                alphas: alphas.to_vec(),
                states: states.to_vec(),
            },
            ng,
        ))
    }

    /// Memory readout: `out[b,d] = sum_k beta[b,k] mem[b,k,d]`.
    pub fn batch_vecmat(&mut self, beta: VarId, mem: VarId) -> Result<VarId> {
        let (bv, mv) = (self.value(beta), self.value(mem));
        if bv.rank() != 2 || mv.rank() != 3 || bv.rows() != mv.shape()[0] || bv.cols() != mv.shape()[1]
        {
            return Err(self.shape_err("batch_vecmat", beta, mem));
        }
        let (b, k, d) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
        let mut out = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            for ki in 0..k {
                let w = self.nodes[beta.0].value.at2(bi, ki);
                let src = &self.nodes[mem.0].value.data()[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                let dst = &mut out.data_mut()[bi * d..(bi + 1) * d];
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += w * x;
                }
            }
        }
        self.macs += (b * k * d) as u64;
        let ng = self.needs(beta) || self.needs(mem);
        Ok(self.push(out, Op::BatchVecMat { beta, mem }, ng))
    }

    /// Reverse-topological gradient accumulation from a scalar loss.
    /// Repeated calls return fresh gradient sets; accumulation across calls
    /// is the caller's concern.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: VarId, delta: &Tensor) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(delta).expect("gradient shapes match"),
            slot => *slot = Some(delta.clone()),
        }
    }

    fn propagate(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                if self.needs(*a) {
                    let da = matmul_nt(gout, self.value(*b));
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = matmul_tn(self.value(*a), gout);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout);
                self.accumulate(grads, *b, gout);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gout);
                if self.needs(*b) {
                    let neg = map_tensor(gout, |x| -x);
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da = hadamard(gout, self.value(*b));
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = hadamard(gout, self.value(*a));
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::AddRowBroadcast { a, bias } => {
                self.accumulate(grads, *a, gout);
                if self.needs(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = Tensor::zeros(&[n]);
                    for r in 0..gout.rows() {
                        for c in 0..n {
                            db.data_mut()[c] += gout.at2(r, c);
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::Scale { a, c } => {
                let da = map_tensor(gout, |x| x * c);
                self.accumulate(grads, *a, &da);
            }
            Op::AddConst { a, .. } => {
                self.accumulate(grads, *a, gout);
            }
            Op::MulConst { a, t } => {
                let da = hadamard(gout, t);
                self.accumulate(grads, *a, &da);
            }
            Op::Div { a, b } => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    let da = zip_tensor(gout, bv, |g, y| g / y);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let mut db = Tensor::zeros(bv.shape());
                    for i in 0..db.numel() {
                        db.data_mut()[i] =
                            -gout.data()[i] * av.data()[i] / (bv.data()[i] * bv.data()[i]);
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Exp { a } => {
                let da = hadamard(gout, &node.value);
                self.accumulate(grads, *a, &da);
            }
            Op::Sigmoid { a } => {
                let y = &node.value;
                let da = zip_tensor(gout, y, |g, y| g * y * (1.0 - y));
                self.accumulate(grads, *a, &da);
            }
            Op::Tanh { a } => {
                let y = &node.value;
                let da = zip_tensor(gout, y, |g, y| g * (1.0 - y * y));
                self.accumulate(grads, *a, &da);
            }
            Op::Softmax { a, axis } => {
                let y = &node.value;
                let mut da = Tensor::zeros(y.shape());
                for_each_lane(y.shape(), *axis, |idx| {
                    let mut dot = 0.0;
                    for &j in idx {
                        dot += gout.data()[j] * y.data()[j];
                    }
                    for &j in idx {
                        da.data_mut()[j] = y.data()[j] * (gout.data()[j] - dot);
                    }
                });
                self.accumulate(grads, *a, &da);
            }
            Op::Sum { a } => {
                let g = gout.item();
                let da = Tensor::full(self.shape(*a), g);
                self.accumulate(grads, *a, &da);
            }
            Op::ConcatCols { a, b } => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                let m = gout.rows();
                if self.needs(*a) {
                    let mut da = Tensor::zeros(&[m, p]);
                    for r in 0..m {
                        for c in 0..p {
                            da.set2(r, c, gout.at2(r, c));
                        }
                    }
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(&[m, q]);
                    for r in 0..m {
                        for c in 0..q {
                            db.set2(r, c, gout.at2(r, p + c));
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::SliceCols { a, start, .. } => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.shape());
                for r in 0..gout.rows() {
                    for c in 0..gout.cols() {
                        da.set2(r, start + c, gout.at2(r, c));
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::StackCols { parts } => {
                let m = gout.rows();
                for (j, &p) in parts.iter().enumerate() {
                    if !self.needs(p) {
                        continue;
                    }
                    let mut dp = Tensor::zeros(&[m, 1]);
                    for r in 0..m {
                        dp.set2(r, 0, gout.at2(r, j));
                    }
                    self.accumulate(grads, p, &dp);
                }
            }
            Op::RowwiseDot { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (av.rows(), av.cols());
                if self.needs(*a) {
                    let mut da = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        let g = gout.at2(r, 0);
                        for c in 0..n {
                            da.set2(r, c, g * bv.at2(r, c));
                        }
                    }
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        let g = gout.at2(r, 0);
                        for c in 0..n {
                            db.set2(r, c, g * av.at2(r, c));
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::GatherRows { table, ids } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.shape());
                    let e = tv.cols();
                    for (b, &id) in ids.iter().enumerate() {
                        let src = gout.row_slice(b);
                        let dst = &mut dt.data_mut()[id * e..(id + 1) * e];
                        for (o, x) in dst.iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *table, &dt);
                }
            }
            Op::CrossEntropySum {
                logits,
                targets,
                mask,
            } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let g = gout.item();
                    let mut dl = Tensor::zeros(lv.shape());
                    for (b, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = lv.row_slice(b);
                        let probs = softmax_slice(row);
                        for (v, p) in probs.iter().enumerate() {
                            let delta = if v == t { p - 1.0 } else { *p };
                            dl.set2(b, v, g * delta);
                        }
                    }
                    self.accumulate(grads, *logits, &dl);
                }
            }
            Op::WeightedStateSum { weights, states } => {
                let wv = self.value(*weights);
                let (b, d) = (gout.rows(), gout.cols());
                if self.needs(*weights) {
                    let mut dw = Tensor::zeros(wv.shape());
                    for (j, &s) in states.iter().enumerate() {
                        let sv = self.value(s);
                        for r in 0..b {
                            let mut acc = 0.0;
                            for c in 0..d {
                                acc += gout.at2(r, c) * sv.at2(r, c);
                            }
                            dw.set2(r, j, acc);
                        }
                    }
                    self.accumulate(grads, *weights, &dw);
                }
                for (j, &s) in states.iter().enumerate() {
                    if !self.needs(s) {
                        continue;
                    }
                    let mut ds = Tensor::zeros(&[b, d]);
                    for r in 0..b {
                        let w = wv.at2(r, j);
                        for c in 0..d {
                            ds.set2(r, c, w * gout.at2(r, c));
                        }
                    }
                    self.accumulate(grads, s, &ds);
                }
            }
            Op::BatchOuterSum { alphas, states } => {
                let shape = node.value.shape();
                let (b, k, d) = (shape[0], shape[1], shape[2]);
                for (&a, &s) in alphas.iter().zip(states) {
                    if self.needs(a) {
                        let sv = self.value(s);
                        let mut da = Tensor::zeros(&[b, k]);
                        for bi in 0..b {
                            for ki in 0..k {
                                let gslice =
                                    &gout.data()[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                                let mut acc = 0.0;
                                for (g, x) in gslice.iter().zip(sv.row_slice(bi)) {
                                    acc += g * x;
                                }
                                da.set2(bi, ki, acc);
                            }
                        }
                        self.accumulate(grads, a, &da);
                    }
                    if self.needs(s) {
                        let av = self.value(a);
                        let mut ds = Tensor::zeros(&[b, d]);
                        for bi in 0..b {
                            for ki in 0..k {
                                let w = av.at2(bi, ki);
                                let gslice =
                                    &gout.data()[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                                let dst = &mut ds.data_mut()[bi * d..(bi + 1) * d];
                                for (o, g) in dst.iter_mut().zip(gslice) {
                                    *o += w * g;
                                }
                            }
                        }
                        self.accumulate(grads, s, &ds);
                    }
                }
            }
            Op::BatchVecMat { beta, mem } => {
                let bv = self.value(*beta);
                let mv = self.value(*mem);
                let (b, k, d) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
                if self.needs(*beta) {
                    let mut db = Tensor::zeros(&[b, k]);
                    for bi in 0..b {
                        for ki in 0..k {
                            let src = &mv.data()[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                            let mut acc = 0.0;
                            for (g, x) in gout.row_slice(bi).iter().zip(src) {
                                acc += g * x;
                            }
                            db.set2(bi, ki, acc);
                        }
                    }
                    self.accumulate(grads, *beta, &db);
                }
                if self.needs(*mem) {
                    let mut dm = Tensor::zeros(&[b, k, d]);
                    for bi in 0..b {
                        for ki in 0..k {
                            let w = bv.at2(bi, ki);
                            let dst =
                                &mut dm.data_mut()[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                            for (o, g) in dst.iter_mut().zip(gout.row_slice(bi)) {
                                *o = w * g;
                            }
                        }
                    }
                    self.accumulate(grads, *mem, &dm);
                }
            }
        }
    }
}

/// Inverted dropout. In training mode each element is zeroed with
/// probability `1 - keep_prob` and survivors are scaled by `1/keep_prob`;
/// in inference mode the input is returned untouched.
pub fn dropout(
    g: &mut Graph,
    x: VarId,
    keep_prob: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<VarId> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Config(format!(
            "dropout keep_prob must be in (0, 1], got {keep_prob}"
        )));
    }
    if !training || keep_prob == 1.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let scale = 1.0 / keep_prob;
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.bernoulli(keep_prob) { scale } else { 0.0 })
        .collect();
    g.mul_const(x, Tensor::from_vec(shape, mask)?)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| libm::exp(x - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&x| libm::exp(x - max)).sum();
    row[idx] - max - libm::log(sum)
}

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
    Tensor::from_vec(t.shape().to_vec(), data).expect("same shape")
}

fn zip_tensor(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("same shape")
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_tensor(a, b, |x, y| x * y)
}

/// `a [m x k] * b [k x n]`, blocked over k for cache friendliness.
fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row_slice(i);
        let orow = &mut out.data_mut()[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let brow = b.row_slice(p);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [m x n] * b^T` where `b` is `[k x n]`; result `[m x k]`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (a.rows(), a.cols(), b.rows());
    let mut out = Tensor::zeros(&[m, k]);
    for i in 0..m {
        let arow = a.row_slice(i);
        for j in 0..k {
            let brow = b.row_slice(j);
            let mut acc = 0.0;
            for c in 0..n {
                acc += arow[c] * brow[c];
            }
            out.set2(i, j, acc);
        }
    }
    out
}

/// `a^T * b` where `a` is `[m x k]`, `b` is `[m x n]`; result `[k x n]`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[k, n]);
    for i in 0..m {
        let arow = a.row_slice(i);
        let brow = b.row_slice(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data_mut()[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Calls `f` with the flat indices of every lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut idx = vec![0usize; lane];
    for o in 0..outer {
        for i in 0..inner {
            for (k, slot) in idx.iter_mut().enumerate() {
                *slot = o * lane * inner + k * inner + i;
            }
            f(&idx);
        }
    }
}
