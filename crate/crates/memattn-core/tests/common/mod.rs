//! Shared helpers for the integration tests: finite-difference gradient
//! checking and small random tensors.

use memattn_core::graph::{Graph, VarId};
use memattn_core::rng::Rng;
use memattn_core::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Random tensor with entries uniform in [-1, 1].
pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.uniform(-1.0, 1.0))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Checks tape gradients of `build` against central finite differences.
/// `build` receives fresh leaves bound from `inputs` and must return a
/// scalar loss; it is re-invoked for every perturbed evaluation.
pub fn check_gradients(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[VarId]) -> VarId,
) {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let leaves: Vec<VarId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &leaves);
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let leaves: Vec<VarId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &leaves);
    let grads = g.backward(loss).expect("backward");

    for (i, input) in inputs.iter().enumerate() {
        let tape = grads
            .get(leaves[i])
            .unwrap_or_else(|| panic!("no gradient for input {i}"));
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let got = tape.data()[j];
            let denom = fd.abs().max(got.abs()).max(1e-6);
            assert!(
                ((fd - got).abs() / denom) < FD_REL_TOL,
                "input {i} coordinate {j}: finite difference {fd} vs tape {got}"
            );
        }
    }
}
