//! Randomized property tests for softmax, BLEU, LSTM stability and the
//! position-encoding table.

use memattn_core::attention::position_table;
use memattn_core::bleu::corpus_bleu;
use memattn_core::graph::Graph;
use memattn_core::lstm::{lstm_cell_step, LstmCellParams};
use memattn_core::optim::ParamSet;
use memattn_core::rng::Rng;
use memattn_core::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_positive_distributions(
        rows in 1usize..5,
        cols in 1usize..8,
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.uniform(-scale, scale))
            .collect();
        let t = Tensor::from_vec(vec![rows, cols], data).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t);
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s);
        for r in 0..rows {
            let row = v.row_slice(r);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_of_identity_is_100(
        seqs in prop::collection::vec(
            prop::collection::vec(3usize..23, 4..30),
            1..6,
        ),
    ) {
        let report = corpus_bleu(&seqs, &seqs).unwrap();
        prop_assert!((report.score - 100.0).abs() < 1e-9);
        prop_assert!((report.brevity_penalty - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_is_invariant_to_corpus_order(
        pairs in prop::collection::vec(
            (
                prop::collection::vec(3usize..23, 1..15),
                prop::collection::vec(3usize..23, 1..15),
            ),
            2..6,
        ),
    ) {
        let hyps: Vec<Vec<usize>> = pairs.iter().map(|(h, _)| h.clone()).collect();
        let refs: Vec<Vec<usize>> = pairs.iter().map(|(_, r)| r.clone()).collect();
        let forward = corpus_bleu(&hyps, &refs).unwrap();
        let hyps_rev: Vec<Vec<usize>> = hyps.iter().rev().cloned().collect();
        let refs_rev: Vec<Vec<usize>> = refs.iter().rev().cloned().collect();
        let reversed = corpus_bleu(&hyps_rev, &refs_rev).unwrap();
        prop_assert!((forward.score - reversed.score).abs() < 1e-9);
    }

    #[test]
    fn lstm_hidden_state_stays_in_unit_box(
        seed in any::<u64>(),
        steps in 1usize..30,
        input_scale in 0.1f64..10.0,
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let cell = LstmCellParams::new(&mut params, "cell", 3, 4, &mut rng);
        let mut g = Graph::new();
        let bound = params.bind_all(&mut g);
        let cell = cell.bind(&bound);
        let mut h = g.constant(Tensor::zeros(&[1, 4]));
        let mut c = g.constant(Tensor::zeros(&[1, 4]));
        for _ in 0..steps {
            let data: Vec<f64> = (0..3)
                .map(|_| rng.uniform(-input_scale, input_scale))
                .collect();
            let x = g.constant(Tensor::from_vec(vec![1, 3], data).unwrap());
            let (h2, c2) = lstm_cell_step(&mut g, x, h, c, &cell).unwrap();
            h = h2;
            c = c2;
            prop_assert!(g.value(h).data().iter().all(|&v| v.abs() <= 1.0 && v.is_finite()));
        }
    }

    #[test]
    fn position_rows_renormalize_for_all_sizes(
        k_pick in 0usize..4,
        s_pick in 0usize..4,
        len_frac in 0.01f64..1.0,
    ) {
        let k = [1usize, 4, 16, 64][k_pick];
        let s_max = [1usize, 5, 50, 200][s_pick];
        let seq_len = ((s_max as f64 * len_frac).ceil() as usize).clamp(1, s_max);
        let table = position_table(k, s_max).unwrap();
        let m = table.mask_renormalize(seq_len).unwrap();
        for ki in 0..k {
            let row = m.row_slice(ki);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "k={k} s_max={s_max} len={seq_len}");
        }
    }
}
