//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::Tensor;
use crate::error::{Result, TfsError};

/// Outcome of one [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across every coordinate of every parameter.
    pub max_rel_err: f64,
    /// Largest absolute error.
    pub max_abs_err: f64,
    /// Per-parameter maxima of the relative error.
    pub per_param: Vec<f64>,
    /// (parameter index, coordinate) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    /// Whether `max_rel_err <= tolerance`.
    pub pass: bool,
}

/// Denominator floor: coordinates where both gradients are far below this are
/// compared absolutely rather than relatively, which keeps finite-difference
/// noise on true-zero gradients from registering as failures.
const REL_FLOOR: f64 = 1e-3;

/// Compares the analytic gradient of `f` at `params` against central finite
/// differences, coordinate by coordinate.
///
/// `f` must be a deterministic scalar-valued function of its leaf nodes (fix
/// any masks or dropout draws outside of it). The relative error of a
/// coordinate is `|a - n| / (max(|a|, |n|) + 1e-3)`.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if params.is_empty() {
        return Err(TfsError::Dimension("gradient check needs at least one parameter".into()));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(TfsError::Config(format!("finite-difference step must be positive, got {step}")));
    }

    let eval = |values: &[Vec<f64>], with_grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut graph = Graph::new();
        let ids: Vec<NodeId> = params
            .iter()
            .zip(values)
            .map(|(p, v)| graph.leaf(p.shape().to_vec(), v.clone(), with_grad))
            .collect::<Result<_>>()?;
        let loss = f(&mut graph, &ids)?;
        if graph.shape(loss) != [1] {
            return Err(TfsError::Dimension(format!(
                "gradient check function must return a scalar, got {:?}",
                graph.shape(loss)
            )));
        }
        let value = graph.value(loss)[0];
        if !with_grad {
            return Ok((value, None));
        }
        graph.backward(loss)?;
        let grads = ids
            .iter()
            .zip(params)
            .map(|(&id, p)| graph.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();
        Ok((value, Some(grads)))
    };

    let base: Vec<Vec<f64>> = params.iter().map(|p| p.data().to_vec()).collect();
    let (_, grads) = eval(&base, true)?;
    let analytic = grads.expect("with_grad returns gradients");

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        per_param: vec![0.0; params.len()],
        worst: None,
        pass: true,
    };

    let mut probe = base.clone();
    for pi in 0..params.len() {
        for ci in 0..base[pi].len() {
            probe[pi][ci] = base[pi][ci] + step;
            let (plus, _) = eval(&probe, false)?;
            probe[pi][ci] = base[pi][ci] - step;
            let (minus, _) = eval(&probe, false)?;
            probe[pi][ci] = base[pi][ci];

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][ci];
            let abs = (a - numeric).abs();
            let rel = abs / (a.abs().max(numeric.abs()) + REL_FLOOR);
            if abs > report.max_abs_err {
                report.max_abs_err = abs;
            }
            if rel > report.per_param[pi] {
                report.per_param[pi] = rel;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ci));
            }
        }
    }
    report.pass = report.max_rel_err <= tolerance;
    Ok(report)
}
