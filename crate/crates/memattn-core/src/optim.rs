//! Named parameter store, Adam optimizer and global-norm gradient clipping.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, VarId};
use crate::tensor::Tensor;

/// A trainable tensor with an optional accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning [`ParamSet`]; aligned with `bind_all` output.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order, which fixes the checkpoint layout and the optimizer update order.
#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Binds every parameter as a differentiable leaf on `g`. The returned
    /// vector is aligned with parameter order.
    pub fn bind_all(&self, g: &mut Graph) -> Vec<VarId> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), true))
            .collect()
    }

    /// Accumulates tape gradients back into the parameter store.
    pub fn accumulate_grads(&mut self, bound: &[VarId], grads: &Gradients) {
        for (param, &id) in self.params.iter_mut().zip(bound) {
            if let Some(g) = grads.get(id) {
                match &mut param.grad {
                    Some(acc) => acc.add_assign(g).expect("gradient shapes match"),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad = None;
        }
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let mut sq = 0.0;
        for p in self.params.iter() {
            if let Some(g) = &p.grad {
                for v in g.data() {
                    sq += v * v;
                }
            }
        }
        let norm = libm::sqrt(sq);
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in self.params.iter_mut() {
                if let Some(g) = &mut p.grad {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        norm
    }
}

/// Per-parameter Adam state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shape: &[usize], learning_rate: f64) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update with bias correction. The gradient buffer is left
/// untouched; the caller zeroes it.
pub fn adam_step(param: &mut Param, state: &mut AdamState) -> Result<()> {
    let grad = param.grad.as_ref().ok_or_else(|| {
        Error::Usage(alloc::format!("adam_step: no gradient for '{}'", param.name))
    })?;
    if grad.shape() != param.value.shape() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: param.value.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - libm::pow(state.beta1, t);
    let bc2 = 1.0 - libm::pow(state.beta2, t);
    for i in 0..param.value.numel() {
        let g = grad.data()[i];
        let m = state.beta1 * state.m.data()[i] + (1.0 - state.beta1) * g;
        let v = state.beta2 * state.v.data()[i] + (1.0 - state.beta2) * g * g;
        state.m.data_mut()[i] = m;
        state.v.data_mut()[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        param.value.data_mut()[i] -= state.learning_rate * m_hat / (libm::sqrt(v_hat) + state.epsilon);
    }
    Ok(())
}

/// Adam states for every parameter of a [`ParamSet`], in parameter order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &ParamSet, learning_rate: f64) -> Self {
        Adam {
            states: params
                .iter()
                .map(|p| AdamState::new(p.value.shape(), learning_rate))
                .collect(),
        }
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (param, state) in params.iter_mut().zip(self.states.iter_mut()) {
            if param.grad.is_some() {
                adam_step(param, state)?;
            } else {
                // Unreached parameters still advance the clock so that all
                // bias corrections stay aligned.
                state.t += 1;
            }
        }
        Ok(())
    }
}
