use dgcrn_core::container::Dtype;
use dgcrn_core::diagnostics::{end_to_end_gradcheck, tiny_config, tiny_problem, TinyProblem};
use dgcrn_core::generator::{FilterMode, HyperKind};
use dgcrn_core::model::{
    cell_step, decode, encode, forward, load_checkpoint, readout, save_checkpoint, static_operands, Model,
    ModelConfig,
};
use dgcrn_core::numerics::{concat_last, Tape, Tensor};
use dgcrn_core::{Ablation, Config};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn zeroed(mut p: TinyProblem) -> TinyProblem {
    for t in p.model.params.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    p
}

/// Normalized predictions of a full pass, plus graph counts.
fn predict(p: &TinyProblem, horizon: usize, prob: f64, seed: u64) -> (Vec<Tensor>, usize, usize, usize) {
    let tape = Tape::new();
    let bound = p.model.params.bind(&tape);
    let stat = static_operands(&tape, &p.graph, p.model.n_nodes).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = forward(&tape, &p.batch, &stat, &p.model, &bound, horizon, prob, &mut rng).unwrap();
    let preds = out.predictions.iter().map(|v| v.value()).collect();
    (preds, out.encoder_graphs.len(), out.decoder_graphs.len(), out.teacher_steps)
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let p = tiny_problem(tiny_config(), seed).unwrap();
        let r = end_to_end_gradcheck(&p, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {} at {}", r.max_rel_error, r.worst);
        assert_eq!(r.n_scalars, p.model.params.numel());
    }
}

#[test]
fn variant_gradients_match_finite_differences() {
    let variants = [
        ModelConfig {
            filter: FilterMode::MatMul,
            ..tiny_config()
        },
        ModelConfig {
            hyper: HyperKind::Linear,
            ..tiny_config()
        },
        ModelConfig {
            readout_hidden: 3,
            share_embeddings: true,
            ..tiny_config()
        },
    ];
    for cfg in variants {
        let p = tiny_problem(cfg.clone(), 11).unwrap();
        let r = end_to_end_gradcheck(&p, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{cfg:?}: {} at {}", r.max_rel_error, r.worst);
    }
}

#[test]
fn zero_parameter_cell_halves_the_state() {
    let p = zeroed(tiny_problem(tiny_config(), 3).unwrap());
    let tape = Tape::new();
    let bound = p.model.params.bind(&tape);
    let stat = static_operands(&tape, &p.graph, 3).unwrap();
    let x = tape.constant(p.batch.encoder_inputs[0].clone());
    let h_prev = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin());
    let (h, g) = cell_step(x, tape.constant(h_prev.clone()), &stat, &p.model.encoder, &p.model.config, &bound, 0).unwrap();
    assert_eq!(h.value(), h_prev.map(|v| 0.5 * v));
    // Zero filters give zero embeddings, hence no dynamic edges.
    let g = g.unwrap();
    assert!(g.raw.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_parameter_encoder_stays_at_zero() {
    let p = zeroed(tiny_problem(tiny_config(), 4).unwrap());
    let tape = Tape::new();
    let bound = p.model.params.bind(&tape);
    let stat = static_operands(&tape, &p.graph, 3).unwrap();
    let inputs: Vec<_> = p.batch.encoder_inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let (h, trace, graphs) = encode(&inputs, &stat, &p.model, &bound).unwrap();
    assert_eq!(h.shape(), vec![2, 3, 4]);
    assert!(h.value().data().iter().all(|&v| v == 0.0));
    assert_eq!((trace.len(), graphs.len()), (2, 2));
    assert!(encode(&[], &stat, &p.model, &bound).is_err());
}

#[test]
fn hidden_state_stays_inside_unit_ball() {
    let cfg = ModelConfig {
        input_len: 8,
        ..tiny_config()
    };
    for seed in 0..5 {
        let mut p = tiny_problem(cfg.clone(), seed).unwrap();
        // Larger weights push the gates toward saturation without rounding
        // tanh to exactly one.
        for t in p.model.params.tensors_mut() {
            for v in t.data_mut() {
                *v *= 2.0;
            }
        }
        let tape = Tape::new();
        let bound = p.model.params.bind(&tape);
        let stat = static_operands(&tape, &p.graph, 3).unwrap();
        let inputs: Vec<_> = p.batch.encoder_inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let (_, trace, _) = encode(&inputs, &stat, &p.model, &bound).unwrap();
        for h in trace {
            assert!(h.value().data().iter().all(|v| v.abs() < 1.0));
        }
    }
}

#[test]
fn one_graph_per_cell_step() {
    let p = tiny_problem(tiny_config(), 5).unwrap();
    for horizon in 1..=2 {
        let (preds, enc, dec, _) = predict(&p, horizon, 0.0, 0);
        assert_eq!((preds.len(), enc, dec), (horizon, 2, horizon));
        assert_eq!(preds[0].shape(), &[2, 3]);
    }
    let mut cfg = Config {
        model: tiny_config(),
        ..Config::default()
    };
    Ablation::NoDynamicGraph.apply(&mut cfg);
    let p = tiny_problem(cfg.model, 5).unwrap();
    let (_, enc, dec, _) = predict(&p, 2, 0.0, 0);
    assert_eq!((enc, dec), (0, 0));
}

#[test]
fn free_running_decode_ignores_labels() {
    let p = tiny_problem(tiny_config(), 6).unwrap();
    let (a, ..) = predict(&p, 2, 0.0, 1);
    let mut q = tiny_problem(tiny_config(), 6).unwrap();
    for t in &mut q.batch.teacher {
        *t = t.map(|v| v + 5.0);
    }
    let (b, ..) = predict(&q, 2, 0.0, 1);
    assert_eq!(a, b);
}

#[test]
fn full_teacher_forcing_feeds_labels() {
    let p = tiny_problem(tiny_config(), 7).unwrap();
    let (forced, _, _, teacher_steps) = predict(&p, 2, 1.0, 2);
    assert_eq!(teacher_steps, 1);

    // Manual unroll feeding the label at every step.
    let tape = Tape::new();
    let bound = p.model.params.bind(&tape);
    let stat = static_operands(&tape, &p.graph, 3).unwrap();
    let inputs: Vec<_> = p.batch.encoder_inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let (mut h, _, _) = encode(&inputs, &stat, &p.model, &bound).unwrap();
    let mut speed = tape.constant(Tensor::zeros(&[2, 3, 1]));
    let mut manual = Vec::new();
    for q in 0..2 {
        let x = concat_last(&[speed, tape.constant(p.batch.decoder_tod[q].clone())]).unwrap();
        h = cell_step(x, h, &stat, &p.model.decoder, &p.model.config, &bound, 2 + q).unwrap().0;
        manual.push(readout(h, &p.model, &bound).unwrap().value());
        speed = tape.constant(p.batch.teacher[q].clone());
    }
    assert_eq!(forced, manual);
}

#[test]
fn decode_rejects_bad_arguments() {
    let p = tiny_problem(tiny_config(), 8).unwrap();
    let tape = Tape::new();
    let bound = p.model.params.bind(&tape);
    let stat = static_operands(&tape, &p.graph, 3).unwrap();
    let h = tape.constant(Tensor::zeros(&[2, 3, 4]));
    let tod: Vec<_> = p.batch.decoder_tod.iter().map(|t| tape.constant(t.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (horizon, prob) in [(0, 0.0), (3, 0.0), (1, 0.5)] {
        assert!(decode(h, &tod, None, prob, horizon, &stat, &p.model, &bound, &mut rng).is_err());
    }
}

#[test]
fn readout_examples() {
    let mut p = zeroed(tiny_problem(tiny_config(), 9).unwrap());
    let tape = Tape::new();
    let h = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.1 - 1.0);
    {
        let bound = p.model.params.bind(&tape);
        let y = readout(tape.constant(h.clone()), &p.model, &bound).unwrap();
        assert_eq!(y.value(), Tensor::zeros(&[2, 3]));
    }
    let b = p.model.readout.bias;
    p.model.params.get_mut(b).data_mut()[0] = 2.5;
    let tape = Tape::new();
    let bound = p.model.params.bind(&tape);
    let y = readout(tape.constant(h), &p.model, &bound).unwrap();
    assert_eq!(y.value(), Tensor::full(&[2, 3], 2.5));
}

#[test]
fn forward_is_deterministic() {
    let p = tiny_problem(tiny_config(), 10).unwrap();
    assert_eq!(predict(&p, 2, 0.5, 3), predict(&p, 2, 0.5, 3));
}

#[test]
fn ablations_run_with_no_more_parameters() {
    let full = Model::new(tiny_config(), 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for a in Ablation::ALL {
        let mut cfg = Config {
            model: tiny_config(),
            ..Config::default()
        };
        a.apply(&mut cfg);
        let p = tiny_problem(cfg.model, 1).unwrap();
        let (preds, ..) = predict(&p, 2, 0.0, 0);
        assert!(preds.iter().all(|t| t.all_finite()), "{a}");
        if a != Ablation::HyperNetMatMul {
            assert!(p.model.parameter_count() <= full.parameter_count(), "{a}");
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = tiny_problem(tiny_config(), 12).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&p.model, (50.0, 10.0), Dtype::F64, &path).unwrap();
    let (back, norm) = load_checkpoint(&path).unwrap();
    assert_eq!(back, p.model);
    assert_eq!(norm, (50.0, 10.0));

    save_checkpoint(&p.model, (50.0, 10.0), Dtype::F32, &path).unwrap();
    let (back, _) = load_checkpoint(&path).unwrap();
    for (a, b) in back.params.tensors().iter().zip(p.model.params.tensors()) {
        let rounded = b.map(|v| v as f32 as f64);
        assert_eq!(a, &rounded);
    }

    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
