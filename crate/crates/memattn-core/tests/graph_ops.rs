//! Forward-value oracles and gradient checks for the tape operations.

mod common;

use common::{check_gradients, random_tensor};
use memattn_core::graph::{dropout, Graph};
use memattn_core::optim::ParamSet;
use memattn_core::rng::Rng;
use memattn_core::Tensor;

fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn matmul_identity_and_projector() {
    let mut g = Graph::new();
    let i2 = g.constant(t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = g.constant(t2(2, 2, vec![1.0, 0.0, 0.0, 0.0]));
    let m2 = g.constant(t2(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
    let out2 = g.matmul(p, m2).unwrap();
    assert_eq!(g.value(out2).data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let out = g.matmul(av, bv).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut expect = 0.0;
            for k in 0..4 {
                expect += a.at2(i, k) * b.at2(k, j);
            }
            assert!((g.value(out).at2(i, j) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn softmax_uniform_and_large_logits() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[0.0, 0.0, 0.0]));
    let s = g.softmax(x, 1).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let big = g.constant(Tensor::row(&[1000.0, 1000.0]));
    let s2 = g.softmax(big, 1).unwrap();
    assert_eq!(g.value(s2).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_matches_extended_precision_oracle() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[1.0, 2.0, 3.0]));
    let s = g.softmax(x, 1).unwrap();
    let exps: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|v| (v - 3.0_f64).exp()).collect();
    let z: f64 = exps.iter().sum();
    for (got, e) in g.value(s).data().iter().zip(&exps) {
        assert!((got - e / z).abs() < 1e-12);
    }
    let sum: f64 = g.value(s).data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-9);
}

#[test]
fn sigmoid_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[0.0, 100.0, -100.0, 1.0]));
    let s = g.sigmoid(x);
    let v = g.value(s).data();
    assert_eq!(v[0], 0.5);
    assert!((v[1] - 1.0).abs() < 1e-12);
    assert!(v[2] > 0.0 && v[2] < 1e-12);
    assert!((v[3] - 0.7310585786).abs() < 1e-9);
}

#[test]
fn cross_entropy_uniform_logits_is_log_vocab() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[1, 20]));
    let loss = g.cross_entropy_mean(logits, &[7], &[true]).unwrap();
    assert!((g.value(loss).item() - (20.0_f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_saturated_correct_prediction() {
    let mut data = vec![0.0; 5];
    data[2] = 100.0;
    let mut g = Graph::new();
    let logits = g.constant(t2(1, 5, data));
    let loss = g.cross_entropy_mean(logits, &[2], &[true]).unwrap();
    assert!(g.value(loss).item() < 1e-9);
}

#[test]
fn cross_entropy_matches_two_step_oracle() {
    let mut rng = Rng::seed_from_u64(2);
    let logits = random_tensor(&mut rng, &[2, 5]);
    let targets = [3, 0];
    let mut g = Graph::new();
    let lv = g.constant(logits.clone());
    let loss = g.cross_entropy_mean(lv, &targets, &[true, true]).unwrap();
    let mut expect = 0.0;
    for (b, &t) in targets.iter().enumerate() {
        let row = logits.row_slice(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let p = (row[t] - max).exp() / z;
        expect -= p.ln();
    }
    expect /= 2.0;
    assert!((g.value(loss).item() - expect).abs() < 1e-12);
}

#[test]
fn cross_entropy_masked_rows_contribute_nothing() {
    let mut rng = Rng::seed_from_u64(3);
    let logits = random_tensor(&mut rng, &[3, 4]);
    let mut g = Graph::new();
    let lv = g.leaf(logits.clone(), true);
    let loss = g
        .cross_entropy_sum(lv, &[1, 2, 3], &[true, false, true])
        .unwrap();
    let grads = g.backward(loss).unwrap();
    let grad = grads.get(lv).unwrap();
    assert!(grad.row_slice(1).iter().all(|&v| v == 0.0));
    assert!(grad.row_slice(0).iter().any(|&v| v != 0.0));

    // Same value as dropping the masked row entirely.
    let mut g2 = Graph::new();
    let trimmed = t2(
        2,
        4,
        [logits.row_slice(0), logits.row_slice(2)].concat(),
    );
    let lv2 = g2.constant(trimmed);
    let loss2 = g2.cross_entropy_sum(lv2, &[1, 3], &[true, true]).unwrap();
    assert!((g.value(loss).item() - g2.value(loss2).item()).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[1, 4]));
    assert!(g.cross_entropy_sum(logits, &[4], &[true]).is_err());
}

#[test]
fn dropout_identity_cases() {
    let mut rng = Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[3, 3]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kept = dropout(&mut g, xv, 1.0, &mut rng, true).unwrap();
    assert_eq!(g.value(kept).data(), x.data());
    let inference = dropout(&mut g, xv, 0.3, &mut rng, false).unwrap();
    assert_eq!(g.value(inference).data(), x.data());
    assert!(dropout(&mut g, xv, 0.0, &mut rng, true).is_err());
    assert!(dropout(&mut g, xv, 1.5, &mut rng, true).is_err());
}

#[test]
fn dropout_statistics_match_keep_probability() {
    let n = 100_000;
    let mut rng = Rng::seed_from_u64(5);
    let x = Tensor::full(&[1, n], 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = dropout(&mut g, xv, 0.8, &mut rng, true).unwrap();
    let data = g.value(out).data();
    let kept = data.iter().filter(|&&v| v != 0.0).count();
    let frac = kept as f64 / n as f64;
    assert!((frac - 0.8).abs() < 0.01, "keep fraction {frac}");
    for &v in data.iter().filter(|&&v| v != 0.0) {
        assert!((v - 1.25).abs() < 1e-12);
    }
    // Inverted scaling preserves the mean within 3 sigma of the
    // Bernoulli standard error.
    let mean: f64 = data.iter().sum::<f64>() / n as f64;
    let sigma = (0.2_f64 * 0.8 / n as f64).sqrt() * 1.25;
    assert!((mean - 1.0).abs() < 3.0 * sigma * 1.25 + 1e-9, "mean {mean}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::row(&[1.0, 2.0, 3.0]), true);
    let loss = g.sum(w);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_quadratic_form() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::row(&[1.0, 2.0]), true);
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::row(&[1.0, 2.0]), true);
    assert!(g.backward(w).is_err());
}

#[test]
fn grad_accumulation_without_zeroing() {
    let mut params = ParamSet::new();
    let id = params.add("w", Tensor::row(&[1.0, 2.0, 3.0]));
    for _ in 0..2 {
        let mut g = Graph::new();
        let bound = params.bind_all(&mut g);
        let loss = g.sum(bound[id.index()]);
        let grads = g.backward(loss).unwrap();
        params.accumulate_grads(&bound, &grads);
    }
    assert_eq!(
        params.get(id).grad.as_ref().unwrap().data(),
        &[2.0, 2.0, 2.0]
    );
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = Rng::seed_from_u64(6);
    let a = random_tensor(&mut rng, &[2, 3]);
    let b = random_tensor(&mut rng, &[3, 2]);
    let c = random_tensor(&mut rng, &[2, 2]);
    check_gradients(&[a, b, c], |g, leaves| {
        let prod = g.matmul(leaves[0], leaves[1]).unwrap();
        let act = g.tanh(prod);
        let mix = g.mul(act, leaves[2]).unwrap();
        let sm = g.softmax(mix, 1).unwrap();
        let sq = g.mul(sm, sm).unwrap();
        g.sum(sq)
    });
}

#[test]
fn elementwise_and_broadcast_ops_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(7);
    let a = random_tensor(&mut rng, &[2, 4]);
    let b = random_tensor(&mut rng, &[2, 4]);
    let bias = random_tensor(&mut rng, &[4]);
    check_gradients(&[a, b, bias], |g, leaves| {
        let s = g.add(leaves[0], leaves[1]).unwrap();
        let d = g.sub(s, leaves[1]).unwrap();
        let biased = g.add_row_broadcast(d, leaves[2]).unwrap();
        let sig = g.sigmoid(biased);
        let e = g.exp(sig);
        let q = g.div(e, leaves[1]).unwrap();
        let scaled = g.scale(q, 0.25);
        g.sum(scaled)
    });
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(8);
    let a = random_tensor(&mut rng, &[2, 3]);
    let b = random_tensor(&mut rng, &[2, 2]);
    let table = random_tensor(&mut rng, &[4, 3]);
    check_gradients(&[a, b, table], |g, leaves| {
        let cat = g.concat_cols(leaves[0], leaves[1]).unwrap();
        let slice = g.slice_cols(cat, 1, 4).unwrap();
        let gathered = g.gather_rows(leaves[2], &[3, 1]).unwrap();
        let dot = g.rowwise_dot(slice, gathered).unwrap();
        let stacked = g.stack_cols(&[dot, dot]).unwrap();
        let sm = g.softmax(stacked, 1).unwrap();
        
        g.cross_entropy_sum(sm, &[0, 1], &[true, true]).unwrap()
    });
}

#[test]
fn batched_attention_ops_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(9);
    let w = random_tensor(&mut rng, &[2, 3]);
    let s0 = random_tensor(&mut rng, &[2, 4]);
    let s1 = random_tensor(&mut rng, &[2, 4]);
    let s2 = random_tensor(&mut rng, &[2, 4]);
    check_gradients(&[w.clone(), s0.clone(), s1.clone(), s2.clone()], |g, l| {
        let ctx = g.weighted_state_sum(l[0], &[l[1], l[2], l[3]]).unwrap();
        let sq = g.mul(ctx, ctx).unwrap();
        g.sum(sq)
    });

    let a0 = random_tensor(&mut rng, &[2, 3]);
    let a1 = random_tensor(&mut rng, &[2, 3]);
    let beta = random_tensor(&mut rng, &[2, 3]);
    check_gradients(&[a0, a1, s0, s1, beta], |g, l| {
        let mem = g.batch_outer_sum(&[l[0], l[1]], &[l[2], l[3]]).unwrap();
        let ctx = g.batch_vecmat(l[4], mem).unwrap();
        let sq = g.mul(ctx, ctx).unwrap();
        g.sum(sq)
    });
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = Rng::seed_from_u64(10);
    let logits = random_tensor(&mut rng, &[3, 5]);
    check_gradients(&[logits], |g, l| {
        g.cross_entropy_sum(l[0], &[1, 4, 0], &[true, false, true])
            .unwrap()
    });
}

#[test]
fn seeded_runs_are_bit_identical() {
    let run = || {
        let mut rng = Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, &[4, 4]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let d = dropout(&mut g, xv, 0.7, &mut rng, true).unwrap();
        let s = g.softmax(d, 1).unwrap();
        g.value(s).data().to_vec()
    };
    assert_eq!(run(), run());
}
