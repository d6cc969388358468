//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes on fresh graphs, so it
//! shares no code with the reverse sweep it validates. Coordinates whose
//! `+h` and `-h` evaluations land on different pieces of a piecewise op
//! (a ReLU kink, a rounding boundary) have no valid central difference;
//! they are excluded and counted instead.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: `max |analytic - numeric| / max(max |numeric|, max |analytic|, 1e-12)`.
    pub relative_errors: Vec<f64>,
    /// Coordinates excluded because the difference straddled a kink.
    pub straddled: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, for every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let graph = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&graph, &vars)?;
    let grads = graph.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let g = Graph::<f64>::new();
        g.track_branches();
        let vs: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vs)?;
        Ok((g.item(out)?, g.branch_signature()))
    };
    let (mut straddled, mut checked) = (0, 0);

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("inputs require grad").data().to_vec();
        let mut numeric = vec![None; analytic.len()];
        for i in 0..analytic.len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let (plus, sig_plus) = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let (minus, sig_minus) = eval(&work)?;
            work[k].data_mut()[i] = orig;
            if sig_plus == sig_minus {
                numeric[i] = Some((plus - minus) / (2.0 * h));
                checked += 1;
            } else {
                straddled += 1;
            }
        }
        let pairs: Vec<(f64, f64)> = analytic
            .iter()
            .zip(&numeric)
            .filter_map(|(&a, n)| n.map(|n| (a, n)))
            .collect();
        let scale = pairs
            .iter()
            .fold(1e-12f64, |m, (a, n)| m.max(a.abs()).max(n.abs()));
        let err = pairs.iter().fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        relative_errors.push(err / scale);
    }
    Ok(GradCheckReport {
        relative_errors,
        straddled,
        checked,
    })
}
