//! Acceptance gate: one test per measurable claim of the project.
//!
//! Tests 1, 2, 3 and 10 involve multi-hour training runs and are marked
//! `#[ignore]`; run them explicitly with
//! `cargo test --release -p memattn --test acceptance -- --ignored`.
//! The remaining tests run in the default suite.

use std::time::Instant;

use memattn::bench::Mechanism;
use memattn::config::RunConfig;
use memattn::data::{dataset_paths, generate_copy_dataset, DATA_VOCAB};
use memattn::train::{run_eval, run_scoring_ablation, run_train};
use memattn_core::attention::{
    count_attention_ops, memory_context, memory_encode, position_table, AttentionKind,
    ScoringFunction,
};
use memattn_core::bleu::corpus_bleu;
use memattn_core::decode::{beam_search, decode_step, score_sequence};
use memattn_core::graph::Graph;
use memattn_core::lstm::{lstm_cell_step, states_from_tensors, DecoderInit};
use memattn_core::rng::Rng;
use memattn_core::seq2seq::{Batch, Model, ModelConfig};
use memattn_core::Tensor;

fn desk_preset(name: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_preset(name).unwrap();
    cfg
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.uniform(-1.0, 1.0))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Central finite differences against tape gradients; relative error must
/// stay below 1e-4 at every coordinate.
fn check_fd(inputs: &[Tensor], build: impl Fn(&mut Graph, &[memattn_core::graph::VarId]) -> memattn_core::graph::VarId) {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let leaves: Vec<_> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &leaves);
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let leaves: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &leaves);
    let grads = g.backward(loss).expect("backward");
    let h = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        let tape = grads.get(leaves[i]).expect("gradient present");
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let got = tape.data()[j];
            let denom = fd.abs().max(got.abs()).max(1e-6);
            assert!(
                ((fd - got).abs() / denom) < 1e-4,
                "input {i}[{j}]: finite difference {fd} vs tape {got}"
            );
        }
    }
}

#[test]
#[ignore = "multi-hour training run; execute with -- --ignored"]
fn acceptance_01_memory_k16_copies_l50_at_high_bleu() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_copy_dataset(50, 10_000, 1_000, 42, &data).unwrap();
    let mut cfg = desk_preset("desk-L50");
    cfg.k = 16;
    let out = dir.path().join("run");
    let outcome = run_train(&cfg, &data, &out).unwrap();
    let (_, valid, _) = dataset_paths(&data);
    let report = run_eval(&outcome.last_checkpoint, &valid, 10, false).unwrap();
    assert!(report.score >= 95.0, "beam-10 validation BLEU {}", report.score);
}

#[test]
#[ignore = "multi-hour training run; execute with -- --ignored"]
fn acceptance_02_k1_underfits_where_k32_fits() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_copy_dataset(100, 10_000, 1_000, 42, &data).unwrap();
    let (_, valid, _) = dataset_paths(&data);
    let score_for_k = |k: usize| -> f64 {
        let mut cfg = desk_preset("desk-L100");
        cfg.k = k;
        let out = dir.path().join(format!("run-k{k}"));
        let outcome = run_train(&cfg, &data, &out).unwrap();
        run_eval(&outcome.last_checkpoint, &valid, 10, false)
            .unwrap()
            .score
    };
    let k32 = score_for_k(32);
    let k1 = score_for_k(1);
    assert!(
        k32 - k1 >= 20.0,
        "K=1 BLEU {k1} not at least 20 points below K=32 BLEU {k32}"
    );
}

#[test]
#[ignore = "multi-hour training run; execute with -- --ignored"]
fn acceptance_03_no_attention_degrades_l100() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_copy_dataset(100, 10_000, 1_000, 42, &data).unwrap();
    let (_, valid, _) = dataset_paths(&data);
    let score_for = |kind: &str, k: usize| -> f64 {
        let mut cfg = desk_preset("desk-L100");
        cfg.apply_set(&format!("attention_kind={kind}")).unwrap();
        cfg.k = k;
        let out = dir.path().join(format!("run-{kind}"));
        let outcome = run_train(&cfg, &data, &out).unwrap();
        run_eval(&outcome.last_checkpoint, &valid, 10, false)
            .unwrap()
            .score
    };
    let memory = score_for("memory", 16);
    let none = score_for("none", 0);
    assert!(
        memory - none >= 15.0,
        "no-attention BLEU {none} not at least 15 below memory BLEU {memory}"
    );
}

#[test]
fn acceptance_04_memory_decoding_is_faster_than_additive_attention() {
    // Desk-scale model shapes (64-unit 2-layer, 128-dim embeddings,
    // D = 128) on a 200-token source. The output bias is nudged toward a
    // fixed symbol so both models decode to the same length cap and the
    // timing compares equal workloads.
    let cfg = desk_preset("desk-L200");
    let source: Vec<usize> = (0..200).map(|i| 3 + (i % DATA_VOCAB)).collect();
    let timed_decode = |mechanism: &str| -> f64 {
        let m = Mechanism::parse(mechanism).unwrap();
        let mut model_cfg = cfg.to_model_config(DATA_VOCAB, 200);
        model_cfg.attention_kind = m.kind;
        model_cfg.k = m.k.max(1);
        model_cfg.dropout_keep = 1.0;
        let mut model = Model::new(model_cfg).unwrap();
        model.params.by_name_mut("output/b").unwrap().value.data_mut()[3] = 100.0;
        let sources = vec![source.clone()];
        // Warm-up, then two timed runs.
        memattn_core::decode::greedy_decode(&model, &sources).unwrap();
        let start = Instant::now();
        for _ in 0..2 {
            memattn_core::decode::greedy_decode(&model, &sources).unwrap();
        }
        start.elapsed().as_secs_f64() / 2.0
    };
    let memory = timed_decode("memory:32");
    let bahdanau = timed_decode("bahdanau");
    assert!(
        bahdanau >= 1.15 * memory,
        "memory {memory:.3}s not 1.15x faster than bahdanau {bahdanau:.3}s"
    );

    let mac_memory = count_attention_ops(AttentionKind::Memory, 128, 32, 200, 201).unwrap();
    let mac_bahdanau = count_attention_ops(AttentionKind::Bahdanau, 128, 0, 200, 201).unwrap();
    assert!(
        mac_bahdanau > 2 * mac_memory,
        "MAC ratio {:.2} not above 2",
        mac_bahdanau as f64 / mac_memory as f64
    );
}

#[test]
fn acceptance_05_complexity_laws_are_integer_exact() {
    let f = |kind, s, t| count_attention_ops(kind, 16, 8, s, t).unwrap() as i64;
    // Memory attention: affine in S at fixed T and affine in T at fixed S,
    // shown by exactly vanishing second differences.
    for (s, t) in [(5usize, 7usize), (11, 3), (40, 40)] {
        let kind = AttentionKind::Memory;
        assert_eq!(f(kind, s + 2, t) - 2 * f(kind, s + 1, t) + f(kind, s, t), 0);
        assert_eq!(f(kind, s, t + 2) - 2 * f(kind, s, t + 1) + f(kind, s, t), 0);
    }
    // Standard attention: doubling S and T quadruples the count up to an
    // additive term that does not depend on S.
    for kind in [AttentionKind::Bahdanau, AttentionKind::Luong] {
        let residual = |s: usize, t: usize| f(kind, 2 * s, 2 * t) - 4 * f(kind, s, t);
        assert_eq!(residual(5, 6), residual(17, 6), "{kind:?}");
        assert_eq!(residual(8, 11), residual(31, 11), "{kind:?}");
    }
    // And for the purely per-position additive score the residual is zero.
    assert_eq!(
        f(AttentionKind::Bahdanau, 24, 14),
        4 * f(AttentionKind::Bahdanau, 12, 7)
    );
}

#[test]
fn acceptance_06_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(1);

    // (a) 10-step LSTM unroll.
    let wx = rng.uniform_init(&[2, 8], 2);
    let wh = rng.uniform_init(&[2, 8], 2);
    let b = Tensor::zeros(&[8]);
    let xs: Vec<Tensor> = (0..10).map(|_| random_tensor(&mut rng, &[1, 2])).collect();
    check_fd(&[wx, wh, b], |g, leaves| {
        let cell = memattn_core::lstm::BoundCell {
            wx: leaves[0],
            wh: leaves[1],
            b: leaves[2],
            hidden: 2,
        };
        let mut h = g.constant(Tensor::zeros(&[1, 2]));
        let mut c = g.constant(Tensor::zeros(&[1, 2]));
        let mut acc = None;
        for x in &xs {
            let xv = g.constant(x.clone());
            let (h2, c2) = lstm_cell_step(g, xv, h, c, &cell).unwrap();
            h = h2;
            c = c2;
            let s = g.sum(h);
            acc = Some(match acc {
                None => s,
                Some(a) => g.add(a, s).unwrap(),
            });
        }
        acc.unwrap()
    });

    // (b) memory encode composed with the decoder-side readout.
    let states: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[2, 3])).collect();
    let w_alpha = random_tensor(&mut rng, &[3, 2]);
    let w_beta = random_tensor(&mut rng, &[2, 2]);
    let h = random_tensor(&mut rng, &[2, 2]);
    check_fd(&[w_alpha, w_beta, h], |g, leaves| {
        let enc = states_from_tensors(g, &states, &[3, 2]);
        let mem = memory_encode(g, &enc, leaves[0], ScoringFunction::Softmax, None, false).unwrap();
        let (ctx, _) = memory_context(g, leaves[2], &mem, leaves[1], ScoringFunction::Softmax)
            .unwrap();
        g.sum(ctx)
    });

    // (c) every parameter of a full tiny model against the training loss.
    let model_cfg = ModelConfig {
        vocab_size: 8,
        embedding_dim: 4,
        encoder_units: 3,
        encoder_layers: 1,
        decoder_units: 3,
        decoder_layers: 1,
        attention_kind: AttentionKind::Memory,
        k: 2,
        encoder_scoring: ScoringFunction::Softmax,
        decoder_scoring: ScoringFunction::Softmax,
        use_position_encodings: false,
        pe_after_scoring: false,
        alpha_over_timesteps: false,
        dropout_keep: 1.0,
        seed: 5,
        s_max: 10,
        decoder_init: DecoderInit::Bridge,
    };
    let mut model = Model::new(model_cfg).unwrap();
    let batch = Batch::from_sources(&[vec![3, 4, 5], vec![6, 7]]);
    let mut fwd_rng = Rng::seed_from_u64(0);
    let fwd = model.forward(&batch, true, &mut fwd_rng).unwrap();
    let grads = fwd.graph.backward(fwd.loss).unwrap();
    model.params.accumulate_grads(&fwd.bound, &grads);
    let eval = |m: &Model| -> f64 {
        let mut rng = Rng::seed_from_u64(0);
        m.forward(&batch, false, &mut rng).unwrap().loss_value()
    };
    let h_step = 1e-5;
    for pi in 0..model.params.len() {
        let numel = model.params.iter().nth(pi).unwrap().value.numel();
        for j in 0..numel {
            let (got, name) = {
                let p = model.params.iter().nth(pi).unwrap();
                (p.grad.as_ref().unwrap().data()[j], p.name.clone())
            };
            let orig = model.params.iter().nth(pi).unwrap().value.data()[j];
            model.params.iter_mut().nth(pi).unwrap().value.data_mut()[j] = orig + h_step;
            let plus = eval(&model);
            model.params.iter_mut().nth(pi).unwrap().value.data_mut()[j] = orig - h_step;
            let minus = eval(&model);
            model.params.iter_mut().nth(pi).unwrap().value.data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * h_step);
            let denom = fd.abs().max(got.abs()).max(1e-6);
            assert!(
                ((fd - got).abs() / denom) < 1e-4,
                "{name}[{j}]: finite difference {fd} vs tape {got}"
            );
        }
    }
}

#[test]
fn acceptance_07_normalization_invariants_hold_across_the_sweep() {
    for &k in &[1usize, 4, 16, 64] {
        for &s_max in &[1usize, 5, 50, 200] {
            let table = position_table(k, s_max).unwrap();
            // Exact endpoints of the last context's row.
            assert_eq!(table.entry(k, s_max), 1.0);
            assert_eq!(table.entry(k, 0), 0.0);
            if s_max % 2 == 0 {
                for ki in 1..=k {
                    assert_eq!(table.entry(ki, s_max / 2), 0.5);
                }
            }
            for seq_len in [1, s_max.div_ceil(2), s_max] {
                let m = table.mask_renormalize(seq_len).unwrap();
                for ki in 0..k {
                    let sum: f64 = m.row_slice(ki).iter().sum();
                    assert!(
                        (sum - 1.0).abs() < 1e-6,
                        "K={k} S_max={s_max} len={seq_len}: row sum {sum}"
                    );
                }
            }

            // Softmax-scored encoder weights form distributions over the
            // contexts at every valid timestep.
            let s_len = seq_len_for(s_max);
            let mut rng = Rng::seed_from_u64((k * 1000 + s_max) as u64);
            let tensors: Vec<Tensor> =
                (0..s_len).map(|_| random_tensor(&mut rng, &[1, 4])).collect();
            let mut g = Graph::new();
            let enc = states_from_tensors(&mut g, &tensors, &[s_len]);
            let w = g.constant(random_tensor(&mut rng, &[4, k]));
            let mem = memory_encode(&mut g, &enc, w, ScoringFunction::Softmax, None, false)
                .unwrap();
            for alpha in &mem.alphas {
                let sum: f64 = g.value(*alpha).row_slice(0).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}

fn seq_len_for(s_max: usize) -> usize {
    s_max.clamp(1, 20)
}

#[test]
fn acceptance_08_outputs_match_brute_force_oracles() {
    // Matrix product against the triple loop.
    let mut rng = Rng::seed_from_u64(3);
    let a = random_tensor(&mut rng, &[4, 6]);
    let b = random_tensor(&mut rng, &[6, 5]);
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let cv = g.matmul(av, bv).unwrap();
    for i in 0..4 {
        for j in 0..5 {
            let mut acc = 0.0;
            for t in 0..6 {
                acc += a.at2(i, t) * b.at2(t, j);
            }
            assert!((g.value(cv).at2(i, j) - acc).abs() < 1e-12);
        }
    }

    // Beam search against exhaustive enumeration on a 4-token vocabulary
    // with a 3-step cap (every finishable target has length <= 2).
    let model_cfg = ModelConfig {
        vocab_size: 4,
        embedding_dim: 4,
        encoder_units: 3,
        encoder_layers: 1,
        decoder_units: 3,
        decoder_layers: 1,
        attention_kind: AttentionKind::Memory,
        k: 2,
        encoder_scoring: ScoringFunction::Softmax,
        decoder_scoring: ScoringFunction::Softmax,
        use_position_encodings: false,
        pe_after_scoring: false,
        alpha_over_timesteps: false,
        dropout_keep: 1.0,
        seed: 17,
        s_max: 10,
        decoder_init: DecoderInit::Bridge,
    };
    let model = Model::new(model_cfg).unwrap();
    let source = vec![3usize, 3, 3];
    let beamed = beam_search(&model, &source, 40, Some(3)).unwrap();
    let symbols = [0usize, 1, 3];
    let mut best = (f64::NEG_INFINITY, vec![]);
    let mut candidates: Vec<Vec<usize>> = vec![vec![]];
    for &x in &symbols {
        candidates.push(vec![x]);
        for &y in &symbols {
            candidates.push(vec![x, y]);
        }
    }
    for cand in candidates {
        let s = score_sequence(&model, &source, &cand).unwrap();
        if s > best.0 {
            best = (s, cand);
        }
    }
    assert_eq!(beamed.tokens, best.1, "beam differs from exhaustive optimum");
    assert!((beamed.log_prob - best.0).abs() < 1e-9);

    // BLEU against the hand-computed example: a 4-token hypothesis that is
    // a prefix of a 5-token reference has all precisions 1 and brevity
    // penalty exp(1 - 5/4), i.e. 77.88.
    let hyp = vec![vec![3usize, 4, 5, 6]];
    let reference = vec![vec![3usize, 4, 5, 6, 7]];
    let report = corpus_bleu(&hyp, &reference).unwrap();
    assert!(
        (report.score - 77.88).abs() < 0.01,
        "hand example BLEU {}",
        report.score
    );
    let identity = corpus_bleu(&reference, &reference).unwrap();
    assert!((identity.score - 100.0).abs() < 1e-9);
}

#[test]
fn acceptance_09_decoding_never_touches_encoder_states() {
    let mut cfg = desk_preset("desk-L50");
    cfg.dropout_keep = 1.0;
    cfg.k = 16;
    let model = Model::new(cfg.to_model_config(DATA_VOCAB, 50)).unwrap();

    // Teacher-forced forward pass: zero reads after encoding finished.
    let batch = Batch::from_sources(&[vec![3, 4, 5, 6, 7], vec![8, 9]]);
    let mut rng = Rng::seed_from_u64(0);
    let fwd = model.forward(&batch, false, &mut rng).unwrap();
    assert_eq!(fwd.decode_phase_reads(), 0);

    // Inference stepping: the encoded source's counter stays at zero across
    // an entire decode.
    let source: Vec<usize> = (0..30).map(|i| 3 + (i % DATA_VOCAB)).collect();
    let enc = model.encode_source(&[source]).unwrap();
    let mut states = enc.init_states.clone();
    let mut prev = 1usize;
    for _ in 0..20 {
        let step = decode_step(&model, &enc, &[0], &[prev], &states).unwrap();
        states = step.states;
        prev = 3;
    }
    assert_eq!(enc.reads.get(), 0, "decode read encoder states");
}

#[test]
#[ignore = "four desk-L50 training runs; execute with -- --ignored"]
fn acceptance_10_scoring_ablation_completes_and_mostly_fits() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_copy_dataset(50, 10_000, 1_000, 42, &data).unwrap();
    let mut cfg = desk_preset("desk-L50");
    cfg.k = 16;
    let out = dir.path().join("ablation");
    let results = run_scoring_ablation(&cfg, &data, &out).unwrap();
    assert_eq!(results.len(), 4);
    let mut fitting = 0;
    for (name, outcome) in &results {
        let metrics = out.join(name).join("metrics.csv");
        assert!(metrics.exists(), "missing learning curve for {name}");
        if outcome.final_val_bleu.unwrap_or(0.0) >= 90.0 {
            fitting += 1;
        }
    }
    assert!(fitting >= 3, "only {fitting}/4 combinations reached BLEU 90");
}
