//! Central finite differences, used as an independent oracle for backprop.

use std::cell::RefCell;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Magnitude below which gradient entries are compared absolutely rather
/// than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Precondition(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        for v in [plus, minus] {
            if !v.is_finite() {
                return Err(Error::OracleFailure { index: i, value: v });
            }
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Central-difference gradients of `f` with respect to each tensor in `xs`.
pub fn finite_diff_grads<F>(f: F, xs: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let work = RefCell::new(xs.to_vec());
    xs.iter()
        .enumerate()
        .map(|(j, base)| {
            finite_diff_grad(
                |xj| {
                    let saved = std::mem::replace(&mut work.borrow_mut()[j], xj.clone());
                    let v = f(&work.borrow());
                    work.borrow_mut()[j] = saved;
                    v
                },
                base,
                eps,
            )
        })
        .collect()
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Largest entrywise relative error between two gradient tensors.
pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_error(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_rows(&[&[0.3, -1.0], &[2.5, 7.0]]);
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tanh_sum_at_zero() {
        let x = Tensor::zeros(&[3, 2]);
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v.tanh()).sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_value_reports_index() {
        let x = Tensor::from_rows(&[&[1.0, 0.0]]);
        let err = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v.sqrt()).sum()), &x, 1e-5)
        .unwrap_err();
        match err {
            Error::OracleFailure { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::zeros(&[1]);
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }

    #[test]
    fn multi_argument_product() {
        let a = Tensor::from_rows(&[&[2.0]]);
        let b = Tensor::from_rows(&[&[-3.0]]);
        let g = finite_diff_grads(|xs| Ok(xs[0].data()[0] * xs[1].data()[0]), &[a, b], 1e-5).unwrap();
        assert!((g[0].data()[0] + 3.0).abs() < 1e-9);
        assert!((g[1].data()[0] - 2.0).abs() < 1e-9);
    }
}
