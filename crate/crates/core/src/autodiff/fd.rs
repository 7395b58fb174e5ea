//! Finite-difference gradient checking.
//!
//! Central differences over every element of every parameter in a store,
//! evaluated through a caller-supplied loss closure. Used by the test suites
//! to validate analytic gradients end to end; exposed publicly because it is
//! useful wherever a new op or model head needs auditing.

use super::params::{GradMap, ParamStore};
use super::tensor::Tensor;
use crate::Result;

/// Central-difference gradients of `loss` with respect to every parameter.
///
/// Each element is perturbed by ±eps in place and restored; the closure must
/// therefore read parameter values fresh on every call.
pub fn central_diff_grads(
    store: &mut ParamStore,
    eps: f64,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let n = store.len();
    let mut out = Vec::with_capacity(n);
    for pi in 0..n {
        let (rows, cols) = {
            let p = store.get(super::params::ParamId(pi));
            (p.value.rows, p.value.cols)
        };
        let mut grad = Tensor::zeros(rows, cols);
        for e in 0..rows * cols {
            let orig = store.get(super::params::ParamId(pi)).value.data[e];
            store.get_mut(super::params::ParamId(pi)).value.data[e] = orig + eps;
            let plus = loss(store)?;
            store.get_mut(super::params::ParamId(pi)).value.data[e] = orig - eps;
            let minus = loss(store)?;
            store.get_mut(super::params::ParamId(pi)).value.data[e] = orig;
            grad.data[e] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Worst relative disagreement between analytic and finite-difference
/// gradients across all parameters.
///
/// Per element: |a - f| / max(|a|, |f|), with pairs that are both below
/// 1e-9 in magnitude treated as agreeing (pure roundoff).
pub fn max_rel_error(store: &ParamStore, analytic: &GradMap, fd: &[Tensor]) -> f64 {
    let mut worst = 0.0f64;
    for (id, param) in store.iter() {
        let zero = Tensor::zeros(param.value.rows, param.value.cols);
        let a = analytic.get(id).unwrap_or(&zero);
        let f = &fd[id.0];
        for (&av, &fv) in a.data.iter().zip(f.data.iter()) {
            if av.abs() < 1e-9 && fv.abs() < 1e-9 {
                continue;
            }
            let rel = (av - fv).abs() / av.abs().max(fv.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
