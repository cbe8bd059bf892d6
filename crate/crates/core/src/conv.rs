//! K-hop graph convolution fusing the input signal, a dynamic graph and the
//! static graph through a skip-weighted propagation:
//!
//! ```text
//! H(0) = H_in
//! H(k) = alpha * H_in + beta * P_dyn H(k-1) + gamma * P_static H(k-1)
//! H_out = sum_k H(k) W(k)
//! ```
//!
//! `P` are row-stochastic matrices acting on the node axis. The dual form
//! runs a second pass over the reversed graphs with independent weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::StaticGraph;
use crate::numerics::{BoundParams, ParamId, ParamSet, Tape, Tensor, Var};

/// Weights of the input skip, dynamic-graph and static-graph terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mixing {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for Mixing {
    fn default() -> Self {
        Mixing {
            alpha: 0.05,
            beta: 0.95,
            gamma: 0.95,
        }
    }
}

impl Mixing {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("mixing weight {name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// The same mixing with the dynamic-graph term removed.
    pub fn without_dynamic(self) -> Mixing {
        Mixing { beta: 0.0, ..self }
    }
}

/// Learnable weights of one directional convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `W(0) ..= W(K)`, each `d_in x d_out`.
    pub hop_weights: Vec<ParamId>,
    pub bias: Option<ParamId>,
    pub mixing: Mixing,
}

impl ConvParams {
    /// Registers `K + 1` hop matrices drawn uniformly from `±1/sqrt(d_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        hops: usize,
        mixing: Mixing,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let hop_weights = (0..=hops)
            .map(|k| {
                params.add(
                    format!("{name}.w{k}"),
                    Tensor::uniform(&[d_in, d_out], -bound, bound, rng),
                )
            })
            .collect();
        let bias = with_bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        ConvParams {
            hop_weights,
            bias,
            mixing,
        }
    }

    pub fn hops(&self) -> usize {
        self.hop_weights.len() - 1
    }
}

/// Both directions of a dual convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DualConvParams {
    pub forward: ConvParams,
    pub backward: ConvParams,
}

impl DualConvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        hops: usize,
        mixing: Mixing,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        DualConvParams {
            forward: ConvParams::init(params, &format!("{name}.fwd"), d_in, d_out, hops, mixing, with_bias, rng),
            // One bias per dual pair is enough.
            backward: ConvParams::init(params, &format!("{name}.bwd"), d_in, d_out, hops, mixing, false, rng),
        }
    }
}

/// Static normalized matrices recorded as constants on a tape.
#[derive(Clone, Copy)]
pub struct StaticOperands<'t> {
    pub forward: Var<'t>,
    pub backward: Var<'t>,
}

impl<'t> StaticOperands<'t> {
    pub fn record(tape: &'t Tape, graph: &StaticGraph) -> Self {
        StaticOperands {
            forward: tape.constant(graph.forward_norm.clone()),
            backward: tape.constant(graph.backward_norm.clone()),
        }
    }
}

/// Per-step dynamic adjacency on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DynamicGraph<'t> {
    /// `ReLU(tanh(.))` similarity, `[B, N, N]`.
    pub raw: Var<'t>,
    /// `(raw + I)` with rows rescaled to sum to one.
    pub normalized: Var<'t>,
    /// `(raw^T + I)` with rows rescaled to sum to one.
    pub reversed: Var<'t>,
}

/// Node-axis aggregation: `out[b, n, :] = sum_m P[b, n, m] * h[b, m, :]`.
pub fn aggregate<'t>(h: Var<'t>, propagation: Var<'t>) -> Result<Var<'t>> {
    propagation.matmul(h)
}

/// Propagated states `H(0) ..= H(K)` along one direction.
pub fn propagate<'t>(
    h_in: Var<'t>,
    dynamic: Option<Var<'t>>,
    stat: Var<'t>,
    mixing: Mixing,
    hops: usize,
) -> Result<Vec<Var<'t>>> {
    let shape = h_in.shape();
    if shape.len() != 3 {
        return Err(Error::dim("dgconv", format!("input must be [B, N, D], got {shape:?}")));
    }
    let n = shape[1];
    if stat.shape() != [n, n] {
        return Err(Error::dim(
            "dgconv",
            format!("static graph {:?} for {n} nodes", stat.shape()),
        ));
    }
    let dynamic = if mixing.beta > 0.0 {
        let d = dynamic.ok_or_else(|| {
            Error::Config("beta > 0 requires a dynamic graph".into())
        })?;
        if d.shape() != [shape[0], n, n] {
            return Err(Error::dim(
                "dgconv",
                format!("dynamic graph {:?} for input {shape:?}", d.shape()),
            ));
        }
        Some(d)
    } else {
        None
    };

    let skip = (mixing.alpha != 0.0).then(|| h_in.scale(mixing.alpha));
    let mut states = Vec::with_capacity(hops + 1);
    states.push(h_in);
    for _ in 0..hops {
        let prev = *states.last().unwrap();
        let mut acc = skip;
        if let Some(d) = dynamic {
            let term = aggregate(prev, d)?.scale(mixing.beta);
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        if mixing.gamma != 0.0 {
            let term = aggregate(prev, stat)?.scale(mixing.gamma);
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        // alpha = beta = gamma = 0 leaves nothing to propagate.
        let next = match acc {
            Some(a) => a,
            None => h_in.scale(0.0),
        };
        states.push(next);
    }
    Ok(states)
}

/// `sum_k H(k) W(k) (+ bias)`.
pub fn project<'t>(states: &[Var<'t>], p: &ConvParams, bound: &BoundParams<'t>) -> Result<Var<'t>> {
    if states.len() != p.hop_weights.len() {
        return Err(Error::dim(
            "dgconv",
            format!("{} propagated states for {} hop weights", states.len(), p.hop_weights.len()),
        ));
    }
    let mut out: Option<Var<'t>> = None;
    for (h, &w) in states.iter().zip(&p.hop_weights) {
        let term = h.matmul(bound[w])?;
        out = Some(match out {
            Some(o) => o.add(term)?,
            None => term,
        });
    }
    let mut out = out.expect("at least one hop weight");
    if let Some(b) = p.bias {
        out = out.add(bound[b])?;
    }
    Ok(out)
}

/// Single-direction convolution.
pub fn dgconv_forward<'t>(
    h_in: Var<'t>,
    dynamic: Option<Var<'t>>,
    stat: Var<'t>,
    p: &ConvParams,
    bound: &BoundParams<'t>,
) -> Result<Var<'t>> {
    let states = propagate(h_in, dynamic, stat, p.mixing, p.hops())?;
    project(&states, p, bound)
}

/// Propagated states for both directions, reusable across several weight sets
/// that share the same input (the GRU update and reset gates).
pub struct DualStates<'t> {
    forward: Vec<Var<'t>>,
    backward: Vec<Var<'t>>,
}

impl<'t> DualStates<'t> {
    pub fn compute(
        h_in: Var<'t>,
        dynamic: Option<&DynamicGraph<'t>>,
        stat: &StaticOperands<'t>,
        mixing: Mixing,
        hops: usize,
    ) -> Result<Self> {
        Ok(DualStates {
            forward: propagate(h_in, dynamic.map(|d| d.normalized), stat.forward, mixing, hops)?,
            backward: propagate(h_in, dynamic.map(|d| d.reversed), stat.backward, mixing, hops)?,
        })
    }

    pub fn project(&self, p: &DualConvParams, bound: &BoundParams<'t>) -> Result<Var<'t>> {
        project(&self.forward, &p.forward, bound)?.add(project(&self.backward, &p.backward, bound)?)
    }
}

/// Dual-directional convolution: forward graphs plus reversed graphs, each
/// with its own weights, summed.
pub fn dual_dgconv<'t>(
    h_in: Var<'t>,
    dynamic: Option<&DynamicGraph<'t>>,
    stat: &StaticOperands<'t>,
    p: &DualConvParams,
    bound: &BoundParams<'t>,
) -> Result<Var<'t>> {
    if p.forward.mixing != p.backward.mixing || p.forward.hops() != p.backward.hops() {
        return Err(Error::Config("dual convolution directions disagree on mixing or hops".into()));
    }
    DualStates::compute(h_in, dynamic, stat, p.forward.mixing, p.forward.hops())?.project(p, bound)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_conv(params: &mut ParamSet, hops: usize, mixing: Mixing, w: f64) -> ConvParams {
        let hop_weights = (0..=hops)
            .map(|k| params.add(format!("w{k}"), Tensor::full(&[1, 1], w)))
            .collect();
        ConvParams {
            hop_weights,
            bias: None,
            mixing,
        }
    }

    #[test]
    fn zero_hops_is_plain_projection() {
        let mut ps = ParamSet::new();
        let p = fixed_conv(&mut ps, 0, Mixing::default(), 2.0);
        let tape = Tape::new();
        let bound = ps.bind(&tape);
        let h = tape.constant(Tensor::new(vec![1, 3, 1], vec![1.0, -2.0, 0.5]).unwrap());
        let stat = tape.constant(Tensor::from_rows(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]));
        let out = dgconv_forward(h, None, stat, &p, &bound);
        // beta > 0 without a dynamic graph is a configuration error even at K = 0.
        assert!(matches!(out, Err(Error::Config(_))));
        let p = ConvParams {
            mixing: Mixing::default().without_dynamic(),
            ..p
        };
        let out = dgconv_forward(h, None, stat, &p, &bound).unwrap().value();
        assert_eq!(out.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn hand_evaluated_two_node_example() {
        let mix = Mixing {
            alpha: 1.0,
            beta: 0.0,
            gamma: 1.0,
        };
        let mut ps = ParamSet::new();
        let p = fixed_conv(&mut ps, 1, mix, 1.0);
        let tape = Tape::new();
        let bound = ps.bind(&tape);
        let h = tape.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap());
        let stat = tape.constant(Tensor::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]));
        let out = dgconv_forward(h, None, stat, &p, &bound).unwrap().value();
        assert_eq!(out.data(), &[3.5, 5.5]);
    }

    #[test]
    fn mixing_validation() {
        assert!(Mixing::default().validate().is_ok());
        let bad = Mixing {
            alpha: 1.5,
            ..Mixing::default()
        };
        assert!(bad.validate().is_err());
    }
}
