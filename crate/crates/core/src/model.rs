//! Graph-convolutional GRU cell and the sequence-to-sequence wrapper.
//!
//! Every dense map of a GRU is replaced by a dual-directional graph
//! convolution over the static graph and the step's generated dynamic graph:
//!
//! ```text
//! z  = sigmoid(Theta_z * (x ∥ h))
//! r  = sigmoid(Theta_r * (x ∥ h))
//! h~ = tanh(Theta_h * (x ∥ r ⊙ h))
//! h' = z ⊙ h + (1 - z) ⊙ h~
//! ```
//!
//! The encoder runs `P` steps from a zero state and hands its final state to
//! the decoder, which emits `i <= Q` predictions through a shared readout.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Dtype};
use crate::conv::{DualConvParams, DualStates, DynamicGraph, Mixing, StaticOperands};
use crate::error::{Error, Result};
use crate::generator::{generate, FilterMode, GeneratorParams, GeneratorSpec, HyperKind};
use crate::graph::StaticGraph;
use crate::numerics::{concat_last, BoundParams, ParamId, ParamSet, Tape, Tensor, Var};

/// Input features per node and step: speed and time of day.
pub const INPUT_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden state width `h`.
    pub hidden_dim: usize,
    /// Node-embedding width `D_e`.
    pub emb_dim: usize,
    /// Hyper-network convolution width `D_h`.
    pub hyper_dim: usize,
    /// Hops `K` of the gate convolutions.
    pub hops: usize,
    /// Hops `K_h` of the hyper-network convolution.
    pub hyper_hops: usize,
    /// Saturation rate of the embedding and adjacency activations.
    pub alpha_sat: f64,
    /// Standard deviation of the initial node embeddings.
    pub emb_init_std: f64,
    pub alpha_mix: f64,
    pub beta_mix: f64,
    pub gamma_mix: f64,
    /// Encoder length `P`.
    pub input_len: usize,
    /// Decoder length `Q`.
    pub output_len: usize,
    pub hyper: HyperKind,
    pub filter: FilterMode,
    /// Width of an extra ReLU layer in the readout; 0 keeps a single affine map.
    pub readout_hidden: usize,
    /// Decoder generator reuses the encoder's node embeddings.
    pub share_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let m = Mixing::default();
        ModelConfig {
            hidden_dim: 64,
            emb_dim: 40,
            hyper_dim: 16,
            hops: 2,
            hyper_hops: 2,
            alpha_sat: 3.0,
            emb_init_std: 1.0,
            alpha_mix: m.alpha,
            beta_mix: m.beta,
            gamma_mix: m.gamma,
            input_len: 12,
            output_len: 12,
            hyper: HyperKind::Gcn,
            filter: FilterMode::Hadamard,
            readout_hidden: 0,
            share_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn mixing(&self) -> Mixing {
        Mixing {
            alpha: self.alpha_mix,
            beta: self.beta_mix,
            gamma: self.gamma_mix,
        }
    }

    /// Whether any dynamic graph is generated at all.
    pub fn uses_dynamic_graph(&self) -> bool {
        self.beta_mix > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.mixing().validate()?;
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("emb_dim", self.emb_dim),
            ("hyper_dim", self.hyper_dim),
            ("input_len", self.input_len),
            ("output_len", self.output_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if !(self.alpha_sat > 0.0) || !self.alpha_sat.is_finite() {
            return Err(Error::Config(format!("model.alpha_sat must be positive, got {}", self.alpha_sat)));
        }
        if !(self.emb_init_std > 0.0) || !self.emb_init_std.is_finite() {
            return Err(Error::Config(format!("model.emb_init_std must be positive, got {}", self.emb_init_std)));
        }
        Ok(())
    }

    fn generator_spec(&self, n_nodes: usize) -> GeneratorSpec {
        GeneratorSpec {
            n_nodes,
            hidden_dim: self.hidden_dim,
            emb_dim: self.emb_dim,
            hyper_dim: self.hyper_dim,
            hyper_hops: self.hyper_hops,
            alpha_sat: self.alpha_sat,
            emb_init_std: self.emb_init_std,
            hyper: self.hyper,
            filter: self.filter,
            mixing: self.mixing(),
        }
    }
}

/// Gate convolutions and the graph generator of one half of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub theta_z: DualConvParams,
    pub theta_r: DualConvParams,
    pub theta_h: DualConvParams,
    /// Absent when the dynamic-graph term is disabled.
    pub generator: Option<GeneratorParams>,
}

impl CellParams {
    fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        cfg: &ModelConfig,
        n_nodes: usize,
        shared: Option<&GeneratorParams>,
        rng: &mut R,
    ) -> Result<Self> {
        let (d_in, h) = (INPUT_DIM + cfg.hidden_dim, cfg.hidden_dim);
        let mixing = cfg.mixing();
        let mut gate = |g: &str, rng: &mut R| {
            DualConvParams::init(params, &format!("{name}.{g}"), d_in, h, cfg.hops, mixing, true, rng)
        };
        let theta_z = gate("theta_z", rng);
        let theta_r = gate("theta_r", rng);
        let theta_h = gate("theta_h", rng);
        let generator = if cfg.uses_dynamic_graph() {
            let mut g = GeneratorParams::init(params, &format!("{name}.gen"), &cfg.generator_spec(n_nodes), rng)?;
            if let Some(s) = shared {
                // Drop the freshly drawn tables in favour of the shared ones.
                g.emb_src = s.emb_src;
                g.emb_tgt = s.emb_tgt;
            }
            Some(g)
        } else {
            None
        };
        Ok(CellParams {
            theta_z,
            theta_r,
            theta_h,
            generator,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub hidden: Option<(ParamId, ParamId)>,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// All learnable tensors plus the structure that addresses them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub n_nodes: usize,
    pub params: ParamSet,
    pub encoder: CellParams,
    pub decoder: CellParams,
    pub readout: Readout,
}

fn uniform_fan_in<R: Rng + ?Sized>(fan_in: usize, shape: &[usize], rng: &mut R) -> Tensor {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -b, b, rng)
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, n_nodes: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if n_nodes == 0 {
            return Err(Error::Config("model needs at least one node".into()));
        }
        let mut params = ParamSet::new();
        let encoder = CellParams::init(&mut params, "encoder", &config, n_nodes, None, rng)?;
        let shared = if config.share_embeddings {
            encoder.generator.clone()
        } else {
            None
        };
        let decoder = CellParams::init(&mut params, "decoder", &config, n_nodes, shared.as_ref(), rng)?;
        let h = config.hidden_dim;
        let readout = if config.readout_hidden > 0 {
            let r = config.readout_hidden;
            let w1 = params.add("readout.hidden.weight", uniform_fan_in(h, &[h, r], rng));
            let b1 = params.add("readout.hidden.bias", Tensor::zeros(&[r]));
            Readout {
                hidden: Some((w1, b1)),
                weight: params.add("readout.weight", uniform_fan_in(r, &[r, 1], rng)),
                bias: params.add("readout.bias", Tensor::zeros(&[1])),
            }
        } else {
            Readout {
                hidden: None,
                weight: params.add("readout.weight", uniform_fan_in(h, &[h, 1], rng)),
                bias: params.add("readout.bias", Tensor::zeros(&[1])),
            }
        };
        Ok(Model {
            config,
            n_nodes,
            params,
            encoder,
            decoder,
            readout,
        })
    }

    /// Number of scalar parameters actually used by the forward pass.
    pub fn parameter_count(&self) -> usize {
        let mut used = vec![true; self.params.len()];
        if self.config.share_embeddings {
            // The decoder's own tables are registered but never read.
            for suffix in ["emb_src", "emb_tgt"] {
                if let Some(id) = self.params.find(&format!("decoder.gen.{suffix}")) {
                    used[id.index()] = false;
                }
            }
        }
        self.params
            .ids()
            .filter(|id| used[id.index()])
            .map(|id| self.params.get(id).numel())
            .sum()
    }
}

/// One batch in the layout the recurrence consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    /// `P` encoder inputs, each `[B, N, 2]` (normalized speed, time of day).
    pub encoder_inputs: Vec<Tensor>,
    /// `Q` target-step times of day, each `[B, N, 1]`.
    pub decoder_tod: Vec<Tensor>,
    /// `Q` normalized labels fed back under teacher forcing, each `[B, N, 1]`.
    pub teacher: Vec<Tensor>,
    /// `Q` ground-truth speeds in original units, each `[B, N]`; 0 where missing.
    pub truth: Vec<Tensor>,
    /// `Q` observation masks, each `[B, N]` with entries 0 or 1.
    pub mask: Vec<Tensor>,
}

/// Output of a forward pass.
pub struct Forward<'t> {
    /// Normalized predictions for the first `i` steps, each `[B, N]`.
    pub predictions: Vec<Var<'t>>,
    pub encoder_graphs: Vec<DynamicGraph<'t>>,
    pub decoder_graphs: Vec<DynamicGraph<'t>>,
    pub encoder_steps: usize,
    pub decoder_steps: usize,
    /// Decoder steps whose input was the label rather than the prediction.
    pub teacher_steps: usize,
}

/// Records the static graph once per tape.
pub fn static_operands<'t>(tape: &'t Tape, graph: &StaticGraph, n_nodes: usize) -> Result<StaticOperands<'t>> {
    if graph.n_nodes != n_nodes {
        return Err(Error::dim(
            "static graph",
            format!("graph has {} nodes, model expects {n_nodes}", graph.n_nodes),
        ));
    }
    Ok(StaticOperands::record(tape, graph))
}

/// One recurrent step; returns the new state and the generated graph.
pub fn cell_step<'t>(
    x_t: Var<'t>,
    h_prev: Var<'t>,
    stat: &StaticOperands<'t>,
    cell: &CellParams,
    cfg: &ModelConfig,
    bound: &BoundParams<'t>,
    step: usize,
) -> Result<(Var<'t>, Option<DynamicGraph<'t>>)> {
    let xs = x_t.shape();
    if xs.len() != 3 || xs[2] != INPUT_DIM {
        return Err(Error::dim("cell_step", format!("input {xs:?}, expected [B, N, {INPUT_DIM}]")));
    }
    let dynamic = match &cell.generator {
        Some(g) => {
            let graph = generate(x_t.slice_last(0, 1)?, x_t.slice_last(1, 1)?, h_prev, stat, g, bound)?;
            graph.normalized.ensure_finite(&format!("dynamic graph at step {step}"))?;
            Some(graph)
        }
        None => None,
    };
    let mixing = cfg.mixing();
    let gates = DualStates::compute(concat_last(&[x_t, h_prev])?, dynamic.as_ref(), stat, mixing, cfg.hops)?;
    let z = gates.project(&cell.theta_z, bound)?.sigmoid();
    let r = gates.project(&cell.theta_r, bound)?.sigmoid();
    let cand_in = concat_last(&[x_t, r.mul(h_prev)?])?;
    let cand = DualStates::compute(cand_in, dynamic.as_ref(), stat, mixing, cfg.hops)?
        .project(&cell.theta_h, bound)?
        .tanh();
    // z h + (1 - z) h~ = h~ + z (h - h~)
    let h = cand.add(z.mul(h_prev.sub(cand)?)?)?;
    let h = h.ensure_finite(&format!("hidden state at step {step}"))?;
    Ok((h, dynamic))
}

/// Encoder pass from a zero state. Returns the final state, every state and
/// the generated graphs.
pub fn encode<'t>(
    inputs: &[Var<'t>],
    stat: &StaticOperands<'t>,
    model: &Model,
    bound: &BoundParams<'t>,
) -> Result<(Var<'t>, Vec<Var<'t>>, Vec<DynamicGraph<'t>>)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Precondition("encoder needs at least one input step".into()))?;
    let s = first.shape();
    let tape = first.tape();
    let mut h = tape.constant(Tensor::zeros(&[s[0], s[1], model.config.hidden_dim]));
    let mut trace = Vec::with_capacity(inputs.len());
    let mut graphs = Vec::new();
    for (t, &x) in inputs.iter().enumerate() {
        let (next, g) = cell_step(x, h, stat, &model.encoder, &model.config, bound, t)?;
        h = next;
        trace.push(h);
        graphs.extend(g);
    }
    Ok((h, trace, graphs))
}

/// Shared affine (or two-layer) map `[B, N, h] -> [B, N]`.
pub fn readout<'t>(h: Var<'t>, model: &Model, bound: &BoundParams<'t>) -> Result<Var<'t>> {
    let s = h.shape();
    let r = &model.readout;
    let mut z = h;
    if let Some((w1, b1)) = r.hidden {
        z = z.matmul(bound[w1])?.add(bound[b1])?.relu();
    }
    z.matmul(bound[r.weight])?.add(bound[r.bias])?.reshape(&s[..2])
}

/// Bernoulli draw choosing the label over the model's own prediction.
pub fn use_teacher<R: Rng + ?Sized>(rng: &mut R, sampling_prob: f64) -> bool {
    let c: f64 = rng.random();
    c < sampling_prob
}

/// Decoder pass of `horizon` steps.
#[allow(clippy::too_many_arguments)]
pub fn decode<'t, R: Rng + ?Sized>(
    h_init: Var<'t>,
    tod: &[Var<'t>],
    teacher: Option<&[Var<'t>]>,
    sampling_prob: f64,
    horizon: usize,
    stat: &StaticOperands<'t>,
    model: &Model,
    bound: &BoundParams<'t>,
    rng: &mut R,
) -> Result<(Vec<Var<'t>>, Vec<DynamicGraph<'t>>, usize)> {
    if horizon == 0 || horizon > tod.len() {
        return Err(Error::Precondition(format!(
            "decoder horizon {horizon} outside [1, {}]",
            tod.len()
        )));
    }
    if !(0.0..=1.0).contains(&sampling_prob) {
        return Err(Error::Precondition(format!("sampling probability {sampling_prob} outside [0, 1]")));
    }
    if teacher.is_none() && sampling_prob > 0.0 {
        return Err(Error::Precondition("teacher forcing requested without labels".into()));
    }
    if let Some(t) = teacher {
        if t.len() < horizon {
            return Err(Error::Precondition(format!("{} labels for horizon {horizon}", t.len())));
        }
    }
    let s = h_init.shape();
    let tape = h_init.tape();
    let mut speed = tape.constant(Tensor::zeros(&[s[0], s[1], 1]));
    let mut h = h_init;
    let mut preds = Vec::with_capacity(horizon);
    let mut graphs = Vec::new();
    let mut teacher_steps = 0;
    for q in 0..horizon {
        let x = concat_last(&[speed, tod[q]])?;
        let (next, g) = cell_step(x, h, stat, &model.decoder, &model.config, bound, model.config.input_len + q)?;
        h = next;
        graphs.extend(g);
        let y = readout(h, model, bound)?;
        preds.push(y);
        if q + 1 < horizon {
            speed = match teacher {
                Some(t) if sampling_prob > 0.0 && use_teacher(rng, sampling_prob) => {
                    teacher_steps += 1;
                    t[q]
                }
                _ => y.reshape(&[s[0], s[1], 1])?,
            };
        }
    }
    Ok((preds, graphs, teacher_steps))
}

/// Full encoder/decoder pass over a batch.
#[allow(clippy::too_many_arguments)]
pub fn forward<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    batch: &Batch,
    stat: &StaticOperands<'t>,
    model: &Model,
    bound: &BoundParams<'t>,
    horizon: usize,
    sampling_prob: f64,
    rng: &mut R,
) -> Result<Forward<'t>> {
    let cfg = &model.config;
    if batch.encoder_inputs.len() != cfg.input_len || batch.decoder_tod.len() != cfg.output_len {
        return Err(Error::dim(
            "forward",
            format!(
                "batch has {} input and {} output steps, model expects {} and {}",
                batch.encoder_inputs.len(),
                batch.decoder_tod.len(),
                cfg.input_len,
                cfg.output_len
            ),
        ));
    }
    let inputs: Vec<_> = batch.encoder_inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let (h, _, encoder_graphs) = encode(&inputs, stat, model, bound)?;
    let tod: Vec<_> = batch.decoder_tod[..horizon.min(cfg.output_len)]
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let teacher: Option<Vec<_>> = (sampling_prob > 0.0).then(|| {
        batch.teacher[..horizon.min(batch.teacher.len())]
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    });
    let (predictions, decoder_graphs, teacher_steps) = decode(
        h,
        &tod,
        teacher.as_deref(),
        sampling_prob,
        horizon,
        stat,
        model,
        bound,
        rng,
    )?;
    Ok(Forward {
        encoder_steps: inputs.len(),
        decoder_steps: predictions.len(),
        predictions,
        encoder_graphs,
        decoder_graphs,
        teacher_steps,
    })
}

const CONFIG_RECORD: &str = "__config__";
const NODES_RECORD: &str = "__nodes__";
const NORM_RECORD: &str = "__norm__";

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    model: ModelConfig,
}

/// Writes the parameters, structure and normalization statistics.
pub fn save_checkpoint(model: &Model, norm: (f64, f64), dtype: Dtype, path: &Path) -> Result<()> {
    let mut c = Container::new();
    let cfg = toml::to_string(&StoredConfig {
        model: model.config.clone(),
    })
    .map_err(|e| Error::Format {
        what: "checkpoint config",
        detail: e.to_string(),
    })?;
    c.push_text(CONFIG_RECORD, cfg);
    c.push_tensor(NODES_RECORD, Dtype::F64, Tensor::scalar(model.n_nodes as f64));
    c.push_tensor(NORM_RECORD, Dtype::F64, Tensor::new(vec![2], vec![norm.0, norm.1])?);
    for (name, t) in model.params.iter() {
        c.push_tensor(name, dtype, t.clone());
    }
    c.write(path)
}

/// Rebuilds a model from a checkpoint; returns it with its normalization
/// statistics `(mean, std)`.
pub fn load_checkpoint(path: &Path) -> Result<(Model, (f64, f64))> {
    let c = Container::read(path)?;
    let stored: StoredConfig = toml::from_str(c.text(CONFIG_RECORD)?).map_err(|e| Error::Format {
        what: "checkpoint config",
        detail: e.to_string(),
    })?;
    let n_nodes = c.tensor(NODES_RECORD)?.data()[0] as usize;
    let norm = c.tensor(NORM_RECORD)?;
    let norm = (norm.data()[0], norm.data()[1]);
    // Structure only; every tensor is overwritten below.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(stored.model, n_nodes, &mut rng)?;
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.name(id).to_string();
        let t = c.tensor(&name)?;
        if t.shape() != model.params.get(id).shape() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!(
                    "{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                ),
            });
        }
        *model.params.get_mut(id) = t.clone();
    }
    Ok((model, norm))
}
