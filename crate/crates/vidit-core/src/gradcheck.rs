//! Gradient verification against central differences.
//!
//! `grad_check` treats the graph-built function as a black box: it reads the
//! analytic gradient from `backward`, then re-evaluates the function at
//! `x_i +- eps` for every coordinate and compares. The error reported is
//!
//! ```text
//! max_i |analytic_i - central_i| / max(|analytic_i|, |central_i|, 1e-8)
//! ```
//!
//! Instantiate at f64 to measure the rules themselves (tolerances around
//! 1e-6 are attainable); instantiate at f32 to measure shipped precision,
//! where the difference quotient itself carries rounding noise of order
//! `f32 roundoff / eps`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const REL_FLOOR: f64 = 1e-8;

/// Builds the scalar function under test from a fresh graph and the
/// gradient-bearing input leaf.
pub type ScalarFn<T> = dyn Fn(&mut Graph<T>, Var) -> Result<Var>;

fn eval_at<T: Scalar>(f: &ScalarFn<T>, shape: &[usize], point: &[T]) -> Result<f64> {
    let mut g: Graph<T> = Graph::new();
    let x = g.leaf_owned(shape, point.to_vec(), false)?;
    let y = f(&mut g, x)?;
    if !g.shape(y).is_empty() {
        return Err(Error::dim(
            "grad_check",
            format!("function must be scalar, got {:?}", g.shape(y)),
        ));
    }
    Ok(g.value(y)[0].to_f64())
}

/// Central-difference gradient of `f` at `input`.
pub fn finite_diff_grad<T: Scalar>(
    f: &ScalarFn<T>,
    input: &Tensor,
    eps: f64,
) -> Result<Vec<f64>> {
    let base: Vec<T> = input.data().iter().map(|&v| T::from_f32(v)).collect();
    let mut grad = Vec::with_capacity(base.len());
    let mut point = base.clone();
    for i in 0..base.len() {
        let x0 = base[i].to_f64();
        point[i] = T::from_f64(x0 + eps);
        let plus = eval_at(f, input.shape(), &point)?;
        point[i] = T::from_f64(x0 - eps);
        let minus = eval_at(f, input.shape(), &point)?;
        point[i] = base[i];
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Maximum relative disagreement between the analytic gradient and central
/// differences, over all coordinates of `input`.
pub fn grad_check<T: Scalar>(f: &ScalarFn<T>, input: &Tensor, eps: f64) -> Result<f64> {
    let mut g: Graph<T> = Graph::new();
    let base: Vec<T> = input.data().iter().map(|&v| T::from_f32(v)).collect();
    let x = g.leaf_owned(input.shape(), base, true)?;
    let y = f(&mut g, x)?;
    if !g.shape(y).is_empty() {
        return Err(Error::dim(
            "grad_check",
            format!("function must be scalar, got {:?}", g.shape(y)),
        ));
    }
    let grads = g.backward(y)?;
    let analytic: Vec<f64> = match grads.get(x) {
        Some(gr) => gr.iter().map(|v| v.to_f64()).collect(),
        None => vec![0.0; input.numel()],
    };
    let numeric = finite_diff_grad(f, input, eps)?;
    Ok(max_rel_error(&analytic, &numeric))
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Norm-level relative disagreement between two gradient vectors, used for
/// whole-tensor comparisons where single near-zero coordinates would
/// otherwise dominate the coordinate-wise ratio.
pub fn norm_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nn = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(REL_FLOOR)
}
