//! Finite-difference validation of reverse-mode gradients.
//!
//! [`grad_check`] builds the same scalar function twice — once for the
//! analytic backward pass, once per perturbed input for central differences —
//! and reports the worst relative disagreement. Training code never calls
//! this; it exists so every differentiable building block can be verified
//! against an oracle that knows nothing about the tape.

use crate::error::{Error, Result};
use crate::ndcore::graph::{Graph, NodeId};
use crate::ndcore::tensor::Tensor;

/// Differences below this magnitude are treated as exact agreement, so that
/// near-zero gradient components do not blow up the relative error.
const ABS_FLOOR: f64 = 1e-8;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Worst relative error over all components of the input.
    pub max_rel_err: f64,
    /// Whether `max_rel_err` is within the requested tolerance.
    pub pass: bool,
}

/// Compares the analytic gradient of `f` at `point` against central finite
/// differences with the given `step`, component by component.
///
/// `f` receives a fresh graph and the node id of the input leaf and must
/// return a scalar (1x1) node. The function is evaluated twice at the
/// unperturbed point first; if the two loss values differ bitwise the check
/// aborts, because finite differences are meaningless for a non-deterministic
/// function.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) || !(tolerance > 0.0) {
        return Err(Error::contract(format!(
            "grad_check needs positive step and tolerance, got {step} and {tolerance}"
        )));
    }

    let base_a = eval_scalar(&f, point)?;
    let base_b = eval_scalar(&f, point)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "loss changed between identical evaluations: {base_a:?} vs {base_b:?}"
        )));
    }

    let analytic = analytic_gradient(&f, point)?;
    let numeric = central_differences(&f, point, step)?;
    let max_rel_err = max_relative_error(analytic.data(), numeric.data());
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err <= tolerance,
    })
}

/// Analytic gradient of `f` at `point` via one backward pass. The leaf is
/// tracked regardless of `point.requires_grad()`.
pub fn analytic_gradient<F>(f: &F, point: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let tracked = point.clone().with_grad();
    let mut graph = Graph::new();
    let input = graph.leaf(&tracked);
    let loss = f(&mut graph, input)?;
    graph.scalar_value(loss)?;
    graph.backward(loss)?;
    graph.grad_tensor(input)
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// component of `point`.
pub fn central_differences<F>(f: &F, point: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut grad = vec![0.0; point.len()];
    let mut probe = point.clone();
    for (i, slot) in grad.iter_mut().enumerate() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let plus = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = original - step;
        let minus = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = original;
        *slot = (plus - minus) / (2.0 * step);
    }
    Tensor::new(point.rows(), point.cols(), grad)
}

/// Worst per-component relative error between two gradients. A component
/// counts as exact when the absolute difference is below `1e-8`; otherwise
/// the difference is scaled by the larger magnitude.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff <= ABS_FLOOR {
                0.0
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let input = graph.leaf(point);
    let loss = f(&mut graph, input)?;
    graph.scalar_value(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let point = Tensor::new(1, 3, vec![0.4, -1.2, 2.5]).unwrap();
        let report = grad_check(
            |g, x| {
                let sq = g.square(x)?;
                g.sum(sq)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max_rel_err = {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_fails() {
        // Negative control: a gradient off by 10% must be caught.
        let f = |g: &mut Graph, x: NodeId| {
            let sq = g.square(x)?;
            g.sum(sq)
        };
        let point = Tensor::new(1, 3, vec![0.4, -1.2, 2.5]).unwrap();
        let mut analytic = analytic_gradient(&f, &point).unwrap();
        for v in analytic.data_mut() {
            *v *= 1.1;
        }
        let numeric = central_differences(&f, &point, 1e-5).unwrap();
        let err = max_relative_error(analytic.data(), numeric.data());
        assert!(err > 1e-4, "corruption went unnoticed: {err}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let point = Tensor::new(1, 1, vec![1.0]).unwrap();
        let res = grad_check(|g, x| g.sum(x), &point, 0.0, 1e-4);
        assert!(matches!(res, Err(Error::Contract(_))));
    }
}
