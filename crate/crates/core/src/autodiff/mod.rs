//! Differentiable computation: a small reverse-mode engine plus the parameter
//! containers it differentiates with respect to.
//!
//! Every loss in the crate is written once as a closure that records onto a
//! [`Graph`]. [`evaluate_with_gradient`] runs it with a backward pass;
//! [`finite_difference_gradient`] re-runs the same closure at probe points and
//! serves as the independent check.

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{LayerShape, ParamLayout, ParamVector};
pub use tensor::{RowMap, Tensor};

use crate::error::{Error, Result};

/// Graph handles for every block of a [`ParamVector`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Option<Var>>,
}

impl ParamVars {
    /// Registers the blocks of `params` on `g`, as gradient-receiving leaves when `trainable`.
    pub fn register(g: &mut Graph, params: &ParamVector, trainable: bool) -> Self {
        let mut weights = Vec::with_capacity(params.layout().num_layers());
        let mut biases = Vec::with_capacity(params.layout().num_layers());
        for (w, b) in params.to_blocks() {
            let leaf = |g: &mut Graph, t| if trainable { g.param(t) } else { g.constant(t) };
            weights.push(leaf(g, w));
            biases.push(b.map(|b| leaf(g, b)));
        }
        Self { weights, biases }
    }

    /// Reassembles leaf gradients into a vector with the layout of `params`.
    /// Blocks the loss does not depend on get zero gradient.
    pub fn collect(&self, grads: &Gradients, params: &ParamVector) -> ParamVector {
        let layout = params.layout();
        let mut out = ParamVector::zeros(layout.clone());
        for (i, w) in self.weights.iter().enumerate() {
            if let Some(g) = grads.get(*w) {
                out.values_mut()[layout.weight_range(i)].copy_from_slice(g.data());
            }
            if let (Some(b), Some(range)) = (self.biases[i], layout.bias_range(i)) {
                if let Some(g) = grads.get(b) {
                    out.values_mut()[range].copy_from_slice(g.data());
                }
            }
        }
        out
    }
}

/// Loss value together with its full parameter gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub gradient: ParamVector,
    pub loss_value: f64,
}

/// Evaluates `loss` at `params` and returns the value with its exact gradient.
///
/// `loss` records its computation on the supplied graph and returns the scalar
/// node. A non-finite intermediate aborts with the first offending operation.
pub fn evaluate_with_gradient<F>(params: &ParamVector, loss: F) -> Result<GradientReport>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, params, true);
    let out = loss(&mut g, &vars)?;
    g.check_finite()?;
    let grads = g.backward(out)?;
    Ok(GradientReport {
        gradient: vars.collect(&grads, params),
        loss_value: g.scalar(out),
    })
}

/// Forward-only evaluation of a loss closure.
pub fn evaluate<F>(params: &ParamVector, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, params, false);
    let out = loss(&mut g, &vars)?;
    g.check_finite()?;
    if g.shape(out) != (1, 1) {
        return Err(Error::shape("evaluate", format!("loss has shape {:?}", g.shape(out))));
    }
    Ok(g.scalar(out))
}

/// Central-difference estimate `(L(p + h·eᵢ) − L(p − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(params: &ParamVector, step: f64, loss: F) -> Result<ParamVector>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut probe = params.clone();
    let mut out = ParamVector::zeros(params.layout().clone());
    for i in 0..params.len() {
        let base = params.values()[i];
        probe.values_mut()[i] = base + step;
        let plus = evaluate(&probe, &loss)?;
        probe.values_mut()[i] = base - step;
        let minus = evaluate(&probe, &loss)?;
        probe.values_mut()[i] = base;
        out.values_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// Largest elementwise relative error `|a − b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps coordinates whose true gradient is ~0 from dominating.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Relative error of whole vectors, `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn vector_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
