//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod kernel;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, finite_diff_grads, max_rel_error, rel_error, REL_ERROR_FLOOR};
pub use params::{BoundParams, ParamId, ParamSet};
pub use tape::{concat_last, Gradients, Tape, Var};
pub use tensor::{broadcast_shapes, Tensor};

use crate::error::{Error, Result};

/// Position-wise product of a batched filter `[B, N, D]` with an `[N, D]`
/// embedding that is broadcast over the batch axis.
pub fn broadcast_hadamard<'t>(filter: Var<'t>, embedding: Var<'t>) -> Result<Var<'t>> {
    let (fs, es) = (filter.shape(), embedding.shape());
    if fs.len() != 3 || es.len() != 2 || fs[1..] != es[..] {
        return Err(Error::dim(
            "broadcast_hadamard",
            format!("filter {fs:?} vs embedding {es:?}"),
        ));
    }
    filter.mul(embedding)
}
