//! Pre-defined adjacency from pairwise distances (thresholded Gaussian
//! kernel) and its row-normalized forward/backward forms.

use std::path::Path;

use crate::container::{Container, Dtype};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct StaticGraph {
    pub n_nodes: usize,
    /// Kernel weights `A`, entries in `[0, 1]`, unit diagonal.
    pub adjacency: Tensor,
    /// `D^-1 A`.
    pub forward_norm: Tensor,
    /// Row-normalized `A^T`.
    pub backward_norm: Tensor,
}

impl StaticGraph {
    /// Wraps an existing adjacency, computing both normalized forms.
    pub fn from_adjacency(adjacency: Tensor) -> Result<Self> {
        let shape = adjacency.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::dim("static graph", format!("adjacency shape {shape:?}")));
        }
        let n_nodes = shape[0];
        let forward_norm = normalize_static(&adjacency)?;
        let backward_norm = normalize_static(&adjacency.transpose_last())?;
        Ok(StaticGraph {
            n_nodes,
            adjacency,
            forward_norm,
            backward_norm,
        })
    }

    /// Number of nonzero off-diagonal entries.
    pub fn edge_count(&self) -> usize {
        let n = self.n_nodes;
        (0..n * n)
            .filter(|&k| k / n != k % n && self.adjacency.data()[k] > 0.0)
            .count()
    }
}

/// Population standard deviation of the finite off-diagonal distances.
pub fn distance_sigma(distances: &Tensor) -> f64 {
    let n = distances.shape()[0];
    let vals: Vec<f64> = (0..n * n)
        .filter(|&k| k / n != k % n)
        .map(|k| distances.data()[k])
        .filter(|d| d.is_finite())
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

/// Thresholded Gaussian kernel: `w = exp(-d^2 / sigma^2)`, kept iff `w >= kappa`.
///
/// `distances` is square with a zero diagonal; `f64::INFINITY` marks
/// unreachable pairs, which map to weight 0.
pub fn build_adjacency(distances: &Tensor, kappa: f64) -> Result<StaticGraph> {
    let shape = distances.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dim("build_adjacency", format!("distances shape {shape:?}")));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::Precondition(format!("need at least 2 nodes, got {n}")));
    }
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::Config(format!("kappa must lie in (0, 1), got {kappa}")));
    }
    for (k, &d) in distances.data().iter().enumerate() {
        if d < 0.0 || d.is_nan() {
            return Err(Error::Precondition(format!(
                "distance ({}, {}) = {d} is not a nonnegative number",
                k / n,
                k % n
            )));
        }
        if k / n == k % n && d != 0.0 {
            return Err(Error::Precondition(format!("diagonal distance ({0}, {0}) = {d}", k / n)));
        }
    }
    let sigma = distance_sigma(distances);
    if !(sigma > 0.0) {
        return Err(Error::Degenerate(
            "all finite distances are identical (sigma = 0)".into(),
        ));
    }
    let adjacency = distances.map(|d| {
        if d.is_infinite() {
            return 0.0;
        }
        let w = (-(d * d) / (sigma * sigma)).exp();
        if w >= kappa {
            w
        } else {
            0.0
        }
    });
    StaticGraph::from_adjacency(adjacency)
}

/// `D^-1 A` with `D_ii = sum_j A_ij`.
pub fn normalize_static(a: &Tensor) -> Result<Tensor> {
    let shape = a.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dim("normalize_static", format!("shape {shape:?}")));
    }
    let n = shape[0];
    let mut out = a.clone();
    for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            return Err(Error::Degenerate(format!("row {i} of adjacency sums to {s}")));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Reads a `from,to,distance` CSV into a dense distance matrix. Absent pairs
/// are unreachable. `n_nodes` defaults to one past the largest id seen.
pub fn read_distance_csv(path: &Path, n_nodes: Option<usize>) -> Result<Tensor> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    if cols != ["from", "to", "distance"] {
        return Err(Error::Format {
            what: "distance CSV",
            detail: format!("expected header from,to,distance, got {}", cols.join(",")),
        });
    }
    let mut edges = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let bad = |what: &str| Error::Format {
            what: "distance CSV",
            detail: format!("record {}: bad {what}", line + 1),
        };
        let from: usize = field(0).parse().map_err(|_| bad("from"))?;
        let to: usize = field(1).parse().map_err(|_| bad("to"))?;
        let d: f64 = field(2).parse().map_err(|_| bad("distance"))?;
        edges.push((from, to, d));
    }
    distances_from_edges(&edges, n_nodes)
}

pub fn distances_from_edges(edges: &[(usize, usize, f64)], n_nodes: Option<usize>) -> Result<Tensor> {
    let seen = edges.iter().map(|&(a, b, _)| a.max(b) + 1).max().unwrap_or(0);
    let n = n_nodes.unwrap_or(seen);
    if seen > n {
        return Err(Error::Format {
            what: "distance CSV",
            detail: format!("node id {} out of range for {n} nodes", seen - 1),
        });
    }
    if n == 0 {
        return Err(Error::Format {
            what: "distance CSV",
            detail: "no edges".into(),
        });
    }
    let mut d = Tensor::full(&[n, n], f64::INFINITY);
    for i in 0..n {
        d.set(&[i, i], 0.0);
    }
    for &(a, b, w) in edges {
        if a != b {
            d.set(&[a, b], w);
        }
    }
    Ok(d)
}

/// Writes a `from,to,distance` CSV listing every finite off-diagonal pair.
pub fn write_distance_csv(path: &Path, distances: &Tensor) -> Result<()> {
    let n = distances.shape()[0];
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["from", "to", "distance"]).map_err(|e| csv_err(path, e))?;
    for i in 0..n {
        for j in 0..n {
            let d = distances.at(&[i, j]);
            if i != j && d.is_finite() {
                w.write_record([i.to_string(), j.to_string(), format!("{d}")])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Caches the kernel weights; the normalized forms are rebuilt on load.
pub fn save_graph(graph: &StaticGraph, kappa: f64, path: &Path) -> Result<()> {
    let mut c = Container::new();
    c.push_tensor("adjacency", Dtype::F64, graph.adjacency.clone());
    c.push_tensor("kappa", Dtype::F64, Tensor::scalar(kappa));
    c.write(path)
}

/// Graph and threshold from a cache written by [`save_graph`].
pub fn load_graph(path: &Path) -> Result<(StaticGraph, f64)> {
    let c = Container::read(path)?;
    let kappa = c.tensor("kappa")?.data()[0];
    Ok((StaticGraph::from_adjacency(c.tensor("adjacency")?.clone())?, kappa))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            what: "CSV",
            detail: format!("{}: {other:?}", path.display()),
        },
    }
}
