use crate::error::{Error, Result};

use super::{Array2, Graph, NodeId};

/// Per-input comparison of analytic and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct InputGradientReport {
    pub index: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub analytic: Array2,
    pub numeric: Array2,
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub max_relative_error: f64,
    pub inputs: Vec<InputGradientReport>,
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences `(f(x+h) - f(x-h)) / 2h`, entry by entry.
///
/// `function` receives a fresh graph and one parameter node per entry of
/// `point`, and must return a `1×1` node. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients<F>(function: F, point: &[Array2], step: f64) -> Result<GradientReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |values: &[Array2]| -> Result<f64> {
        let mut g = Graph::new();
        let inputs: Vec<NodeId> = values.iter().map(|v| g.parameter(v.clone())).collect();
        let loss = function(&mut g, &inputs)?;
        if g.shape(loss) != (1, 1) {
            return Err(Error::contract("checked function must return a 1x1 node"));
        }
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let inputs: Vec<NodeId> = point.iter().map(|v| g.parameter(v.clone())).collect();
    let loss = function(&mut g, &inputs)?;
    let grads = g.backward(loss)?;

    let mut reports = Vec::with_capacity(point.len());
    let mut overall = 0.0_f64;
    let mut work = point.to_vec();
    for (k, &id) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(id, point[k].shape());
        let mut numeric = Array2::zeros(point[k].rows(), point[k].cols());
        let (mut max_rel, mut max_abs) = (0.0_f64, 0.0_f64);
        for j in 0..point[k].len() {
            let orig = point[k].as_slice()[j];
            work[k].as_mut_slice()[j] = orig + step;
            let up = eval(&work)?;
            work[k].as_mut_slice()[j] = orig - step;
            let down = eval(&work)?;
            work[k].as_mut_slice()[j] = orig;
            let fd = (up - down) / (2.0 * step);
            if !fd.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite finite difference for input {k} entry {j}"
                )));
            }
            numeric.as_mut_slice()[j] = fd;
            let a = analytic.as_slice()[j];
            let abs = (a - fd).abs();
            let denom = a.abs().max(fd.abs()).max(1e-8);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / denom);
        }
        overall = overall.max(max_rel);
        reports.push(InputGradientReport {
            index: k,
            max_relative_error: max_rel,
            max_absolute_error: max_abs,
            analytic,
            numeric,
        });
    }
    Ok(GradientReport { max_relative_error: overall, inputs: reports })
}
