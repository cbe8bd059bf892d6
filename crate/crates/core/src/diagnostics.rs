//! End-to-end gradient check on a tiny seeded problem: generator, dual
//! convolutions, recurrent cell and masked-MAE loss against central
//! differences.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::NormStats;
use crate::error::Result;
use crate::graph::{build_adjacency, StaticGraph};
use crate::model::{forward, static_operands, Batch, Model, ModelConfig};
use crate::numerics::{finite_diff_grad, rel_error, Tape, Tensor};
use crate::training::masked_mae_loss;

/// A model, graph and batch small enough for finite differences.
pub struct TinyProblem {
    pub model: Model,
    pub graph: StaticGraph,
    pub batch: Batch,
    pub norm: NormStats,
}

/// `N = 3`, `P = Q = 2`, `h = 4`, `K = 2`, batch of 2, one missing target.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 4,
        emb_dim: 3,
        hyper_dim: 2,
        hops: 2,
        hyper_hops: 2,
        input_len: 2,
        output_len: 2,
        ..ModelConfig::default()
    }
}

pub fn tiny_problem(config: ModelConfig, seed: u64) -> Result<TinyProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3;
    let dist = Tensor::from_fn(&[n, n], |k| if k / n == k % n { 0.0 } else { rng.random_range(1.0..4.0) });
    let graph = build_adjacency(&dist, 0.1)?;
    let mut model = Model::new(config, n, &mut rng)?;
    // Nonzero biases so every parameter has a generic gradient.
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let (b, p, q) = (2, model.config.input_len, model.config.output_len);
    // Zero mean: adding and then subtracting a speed level near 50 costs
    // about 1e-10 of central-difference noise, as large as the smallest
    // gradients being checked.
    let norm = NormStats { mean: 0.0, std: 2.0 };
    let step = |rng: &mut ChaCha8Rng, last: usize| {
        let shape: Vec<usize> = if last == 0 { vec![b, n] } else { vec![b, n, last] };
        Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))
    };
    let encoder_inputs = (0..p).map(|_| step(&mut rng, 2)).collect();
    let decoder_tod = (0..q).map(|_| step(&mut rng, 1)).collect();
    let teacher = (0..q).map(|_| step(&mut rng, 1)).collect();
    let truth: Vec<Tensor> = (0..q).map(|_| step(&mut rng, 0).map(|z| norm.inverse(z))).collect();
    let mut mask: Vec<Tensor> = (0..q).map(|_| Tensor::ones(&[b, n])).collect();
    mask[q - 1].data_mut()[1] = 0.0;
    let batch = Batch {
        size: b,
        encoder_inputs,
        decoder_tod,
        teacher,
        truth,
        mask,
    };
    Ok(TinyProblem {
        model,
        graph,
        batch,
        norm,
    })
}

/// Loss of the full forward pass for the given parameter values.
fn loss_at(problem: &TinyProblem, params: &[Tensor]) -> Result<f64> {
    let mut model = problem.model.clone();
    model.params.tensors_mut().clone_from_slice(params);
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let stat = static_operands(&tape, &problem.graph, model.n_nodes)?;
    let q = model.config.output_len;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward(&tape, &problem.batch, &stat, &model, &bound, q, 0.0, &mut rng)?;
    let loss = masked_mae_loss(&out.predictions, &problem.batch, problem.norm)?.expect("observed targets");
    let value = loss.value_ref().data()[0];
    Ok(value)
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst: String,
    pub n_params: usize,
    pub n_scalars: usize,
}

/// Backprop gradient of the masked-MAE loss against central differences,
/// over every parameter of the problem's model.
pub fn end_to_end_gradcheck(problem: &TinyProblem, eps: f64) -> Result<GradcheckReport> {
    let model = &problem.model;
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let stat = static_operands(&tape, &problem.graph, model.n_nodes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward(&tape, &problem.batch, &stat, model, &bound, model.config.output_len, 0.0, &mut rng)?;
    let loss = masked_mae_loss(&out.predictions, &problem.batch, problem.norm)?.expect("observed targets");
    let grads = bound.grads(&tape.backward(loss)?);

    let base = model.params.tensors().to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        n_params: base.len(),
        n_scalars: 0,
    };
    for id in model.params.ids() {
        let j = id.index();
        let work = RefCell::new(base.clone());
        let fd = finite_diff_grad(
            |x| {
                work.borrow_mut()[j] = x.clone();
                loss_at(problem, &work.borrow())
            },
            &base[j],
            eps,
        )?;
        report.n_scalars += fd.numel();
        for (&a, &b) in grads[j].data().iter().zip(fd.data()) {
            let e = rel_error(a, b);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = model.params.name(id).to_string();
            }
        }
    }
    Ok(report)
}
