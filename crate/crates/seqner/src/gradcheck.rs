//! Central-difference verification of analytic gradients.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error between an analytic and a numeric gradient coordinate:
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks the gradient of a scalar-valued computation w.r.t. `x`.
///
/// `f` rebuilds the computation inside a fresh graph from the given input
/// node and must return a scalar. The analytic gradient comes from one
/// backward pass at `x`; the numeric one from central differences with
/// step `eps` per coordinate. Returns the max relative error over all
/// coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(TensorError::Invalid(format!(
            "finite-difference step {eps} outside [1e-6, 1e-4]"
        )));
    }
    let eval = |values: &[f64]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::new(x.shape.clone(), values.to_vec())?, false);
        let y = f(&mut g, v)?;
        if g.value(y).numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "finite_diff_check target must be scalar, got shape {:?}",
                g.shape(y)
            )));
        }
        Ok(g.item(y))
    };

    // Analytic pass.
    let analytic = {
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let y = f(&mut g, v)?;
        if g.value(y).numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "finite_diff_check target must be scalar, got shape {:?}",
                g.shape(y)
            )));
        }
        g.backward(y)?;
        g.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()])
    };

    let mut max_err: f64 = 0.0;
    let mut probe = x.data.clone();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = eval(&probe)?;
        probe[i] = orig - eps;
        let minus = eval(&probe)?;
        probe[i] = orig;
        let central = (plus - minus) / (2.0 * eps);
        if !central.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_check",
            });
        }
        max_err = max_err.max(rel_err(analytic[i], central));
    }
    Ok(max_err)
}
