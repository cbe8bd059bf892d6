//! Step-wise dynamic graph generation.
//!
//! At every recurrent step the current speed, time of day and previous
//! hidden state are concatenated and passed through two small graph
//! convolutions (the hyper-networks). Their outputs, the dynamic filters,
//! modulate two learnable node-embedding tables; the antisymmetric similarity
//! of the modulated embeddings gives a one-directional adjacency per batch
//! element.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{DualConvParams, DualStates, DynamicGraph, Mixing, StaticOperands};
use crate::error::{Error, Result};
use crate::numerics::{broadcast_hadamard, concat_last, BoundParams, ParamId, ParamSet, Tensor, Var};

/// How a dynamic filter acts on its node-embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Position-wise product `DF ⊙ E`.
    #[default]
    Hadamard,
    /// `DF` reshaped to `D_e x D_e` per node, acting on the embedding row.
    MatMul,
    /// Filters fixed to one: the graph no longer changes step by step.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HyperKind {
    /// Static-graph convolution followed by an affine projection.
    #[default]
    Gcn,
    /// A single affine map of the hyper input.
    Linear,
}

/// Hyper-network producing one dynamic filter.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNetParams {
    pub conv: Option<DualConvParams>,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub hyper_src: Option<HyperNetParams>,
    pub hyper_tgt: Option<HyperNetParams>,
    /// `E1`, `[N, D_e]`.
    pub emb_src: ParamId,
    /// `E2`, `[N, D_e]`.
    pub emb_tgt: ParamId,
    pub alpha_sat: f64,
    pub emb_dim: usize,
    pub filter: FilterMode,
    pub hyper_mixing: Mixing,
}

/// Shape and switches of a generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    pub n_nodes: usize,
    pub hidden_dim: usize,
    pub emb_dim: usize,
    pub hyper_dim: usize,
    pub hyper_hops: usize,
    pub alpha_sat: f64,
    /// Standard deviation of the initial node embeddings.
    pub emb_init_std: f64,
    pub hyper: HyperKind,
    pub filter: FilterMode,
    /// Mixing of the hyper-network convolution; its beta is forced to zero.
    pub mixing: Mixing,
}

impl GeneratorSpec {
    /// Width of the hyper input: speed, time of day, hidden state.
    pub fn input_dim(&self) -> usize {
        2 + self.hidden_dim
    }

    fn filter_dim(&self) -> usize {
        match self.filter {
            FilterMode::MatMul => self.emb_dim * self.emb_dim,
            _ => self.emb_dim,
        }
    }
}

impl HyperNetParams {
    fn init<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, spec: &GeneratorSpec, rng: &mut R) -> Self {
        let d_in = spec.input_dim();
        let d_out = spec.filter_dim();
        let (conv, proj_in) = match spec.hyper {
            HyperKind::Gcn => (
                Some(DualConvParams::init(
                    params,
                    &format!("{name}.gcn"),
                    d_in,
                    spec.hyper_dim,
                    spec.hyper_hops,
                    spec.mixing.without_dynamic(),
                    false,
                    rng,
                )),
                spec.hyper_dim,
            ),
            HyperKind::Linear => (None, d_in),
        };
        let bound = 1.0 / (proj_in as f64).sqrt();
        let out_weight = params.add(
            format!("{name}.out.weight"),
            Tensor::uniform(&[proj_in, d_out], -bound, bound, rng),
        );
        // A unit bias starts every filter near one, i.e. near the static
        // adaptive graph; a zero bias would put the filters at a saddle.
        let unit = match spec.filter {
            FilterMode::MatMul => Tensor::from_fn(&[d_out], |i| {
                if i / spec.emb_dim == i % spec.emb_dim {
                    1.0
                } else {
                    0.0
                }
            }),
            _ => Tensor::ones(&[d_out]),
        };
        let out_bias = params.add(format!("{name}.out.bias"), unit);
        HyperNetParams {
            conv,
            out_weight,
            out_bias,
        }
    }
}

impl GeneratorParams {
    pub fn init<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, spec: &GeneratorSpec, rng: &mut R) -> Result<Self> {
        if !(spec.alpha_sat > 0.0) {
            return Err(Error::Config(format!("alpha_sat must be positive, got {}", spec.alpha_sat)));
        }
        if spec.emb_dim == 0 || spec.hyper_dim == 0 {
            return Err(Error::Config("embedding and hyper-network dimensions must be >= 1".into()));
        }
        let (hyper_src, hyper_tgt) = if spec.filter == FilterMode::Constant {
            (None, None)
        } else {
            (
                Some(HyperNetParams::init(params, &format!("{name}.hyper_src"), spec, rng)),
                Some(HyperNetParams::init(params, &format!("{name}.hyper_tgt"), spec, rng)),
            )
        };
        let emb_src = params.add(
            format!("{name}.emb_src"),
            Tensor::standard_normal(&[spec.n_nodes, spec.emb_dim], rng).map(|v| v * spec.emb_init_std),
        );
        let emb_tgt = params.add(
            format!("{name}.emb_tgt"),
            Tensor::standard_normal(&[spec.n_nodes, spec.emb_dim], rng).map(|v| v * spec.emb_init_std),
        );
        Ok(GeneratorParams {
            hyper_src,
            hyper_tgt,
            emb_src,
            emb_tgt,
            alpha_sat: spec.alpha_sat,
            emb_dim: spec.emb_dim,
            filter: spec.filter,
            hyper_mixing: spec.mixing.without_dynamic(),
        })
    }
}

fn check_bn(name: &str, v: &[usize], b: usize, n: usize) -> Result<()> {
    if v.len() != 3 || v[0] != b || v[1] != n {
        return Err(Error::dim(
            "assemble_hyper_input",
            format!("{name} has shape {v:?}, expected [{b}, {n}, _]"),
        ));
    }
    Ok(())
}

/// `speed ∥ time_of_day ∥ hidden` along the feature axis.
pub fn assemble_hyper_input<'t>(speed: Var<'t>, time_of_day: Var<'t>, hidden: Var<'t>) -> Result<Var<'t>> {
    let s = speed.shape();
    if s.len() != 3 || s[2] != 1 {
        return Err(Error::dim(
            "assemble_hyper_input",
            format!("speed has shape {s:?}, expected [B, N, 1]"),
        ));
    }
    let (b, n) = (s[0], s[1]);
    let t = time_of_day.shape();
    check_bn("time_of_day", &t, b, n)?;
    if t[2] != 1 {
        return Err(Error::dim(
            "assemble_hyper_input",
            format!("time_of_day has shape {t:?}, expected [{b}, {n}, 1]"),
        ));
    }
    check_bn("hidden", &hidden.shape(), b, n)?;
    concat_last(&[speed, time_of_day, hidden])
}

/// Dynamic filter of one hyper-network, `[B, N, D_f]`.
pub fn hyper_forward<'t>(
    input: Var<'t>,
    stat: &StaticOperands<'t>,
    params: &HyperNetParams,
    mixing: Mixing,
    bound: &BoundParams<'t>,
) -> Result<Var<'t>> {
    let states = hyper_states(input, stat, params, mixing)?;
    hyper_project(input, states.as_ref(), params, bound)
}

/// Static-graph propagation of the hyper input; `None` for the affine kind.
fn hyper_states<'t>(
    input: Var<'t>,
    stat: &StaticOperands<'t>,
    params: &HyperNetParams,
    mixing: Mixing,
) -> Result<Option<DualStates<'t>>> {
    params
        .conv
        .as_ref()
        .map(|conv| DualStates::compute(input, None, stat, mixing.without_dynamic(), conv.forward.hops()))
        .transpose()
}

fn hyper_project<'t>(
    input: Var<'t>,
    states: Option<&DualStates<'t>>,
    params: &HyperNetParams,
    bound: &BoundParams<'t>,
) -> Result<Var<'t>> {
    let features = match (&params.conv, states) {
        (Some(conv), Some(st)) => st.project(conv, bound)?,
        _ => input,
    };
    features.matmul(bound[params.out_weight])?.add(bound[params.out_bias])
}

fn modulate<'t>(filter: Var<'t>, emb: Var<'t>, mode: FilterMode, emb_dim: usize) -> Result<Var<'t>> {
    match mode {
        FilterMode::Hadamard | FilterMode::Constant => broadcast_hadamard(filter, emb),
        FilterMode::MatMul => {
            let fs = filter.shape();
            let n = emb.shape()[0];
            if fs.len() != 3 || fs[1] != n || fs[2] != emb_dim * emb_dim {
                return Err(Error::dim(
                    "dynamic_embeddings",
                    format!("matmul filter {fs:?} for {n} nodes of dim {emb_dim}"),
                ));
            }
            let b = fs[0];
            let f = filter.reshape(&[b, n, emb_dim, emb_dim])?;
            let rows = emb.reshape(&[n, 1, emb_dim])?;
            rows.matmul(f)?.reshape(&[b, n, emb_dim])
        }
    }
}

/// `DE1 = tanh(a (DF1 ⊙ E1))`, `DE2 = tanh(a (DF2 ⊙ E2))`.
pub fn dynamic_embeddings<'t>(
    df_src: Var<'t>,
    df_tgt: Var<'t>,
    params: &GeneratorParams,
    bound: &BoundParams<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let a = params.alpha_sat;
    let de1 = modulate(df_src, bound[params.emb_src], params.filter, params.emb_dim)?
        .scale(a)
        .tanh();
    let de2 = modulate(df_tgt, bound[params.emb_tgt], params.filter, params.emb_dim)?
        .scale(a)
        .tanh();
    Ok((de1, de2))
}

/// `(A + I)` with every row divided by its sum, for `[.., N, N]` inputs.
fn self_loop_normalize<'t>(raw: Var<'t>) -> Result<Var<'t>> {
    let n = *raw.shape().last().unwrap();
    let eye = raw.tape().constant(Tensor::eye(n));
    let degree = raw.sum_last().affine(1.0, 1.0);
    raw.add(eye)?.div(degree)
}

/// `ReLU(tanh(a (DE1 DE2^T - DE2 DE1^T)))` and its self-loop normalizations.
pub fn dynamic_adjacency<'t>(de_src: Var<'t>, de_tgt: Var<'t>, alpha_sat: f64) -> Result<DynamicGraph<'t>> {
    if !(alpha_sat > 0.0) {
        return Err(Error::Precondition(format!("alpha_sat must be positive, got {alpha_sat}")));
    }
    if de_src.shape() != de_tgt.shape() {
        return Err(Error::dim(
            "dynamic_adjacency",
            format!("{:?} vs {:?}", de_src.shape(), de_tgt.shape()),
        ));
    }
    let m = de_src.matmul(de_tgt.transpose_last()?)?;
    // M - M^T is exactly antisymmetric, so the ReLU keeps at most one
    // direction of every pair and zeroes the diagonal.
    let raw = m.sub(m.transpose_last()?)?.scale(alpha_sat).tanh().relu();
    let normalized = self_loop_normalize(raw)?;
    let reversed = self_loop_normalize(raw.transpose_last()?)?;
    Ok(DynamicGraph {
        raw,
        normalized,
        reversed,
    })
}

/// Full generator step: hyper input, filters, embeddings, adjacency.
pub fn generate<'t>(
    speed: Var<'t>,
    time_of_day: Var<'t>,
    hidden: Var<'t>,
    stat: &StaticOperands<'t>,
    params: &GeneratorParams,
    bound: &BoundParams<'t>,
) -> Result<DynamicGraph<'t>> {
    let input = assemble_hyper_input(speed, time_of_day, hidden)?;
    let (df_src, df_tgt) = match (&params.hyper_src, &params.hyper_tgt) {
        (Some(src), Some(tgt)) => {
            // Both hyper-networks propagate the same input over the same
            // graph; only their projections differ.
            let states = hyper_states(input, stat, src, params.hyper_mixing)?;
            (
                hyper_project(input, states.as_ref(), src, bound)?,
                hyper_project(input, states.as_ref(), tgt, bound)?,
            )
        }
        _ => {
            let s = input.shape();
            let ones = input
                .tape()
                .constant(Tensor::ones(&[s[0], s[1], params.emb_dim]));
            (ones, ones)
        }
    };
    let (de1, de2) = dynamic_embeddings(df_src, df_tgt, params, bound)?;
    dynamic_adjacency(de1, de2, params.alpha_sat)
}

/// Step-invariant adaptive graph `ReLU(tanh(a (T1 T2^T - T2 T1^T)))` with
/// `Ti = tanh(a Ei)`, evaluated directly on plain tensors.
pub fn static_adaptive_graph(emb_src: &Tensor, emb_tgt: &Tensor, alpha_sat: f64) -> Result<Tensor> {
    let t1 = emb_src.map(|x| (alpha_sat * x).tanh());
    let t2 = emb_tgt.map(|x| (alpha_sat * x).tanh());
    let m = t1.matmul(&t2.transpose_last())?;
    let mt = m.transpose_last();
    let data = m
        .data()
        .iter()
        .zip(mt.data())
        .map(|(&x, &y)| {
            let v = (alpha_sat * (x - y)).tanh();
            if v > 0.0 {
                v
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(m.shape().to_vec(), data)
}
