//! Central-difference validation of reverse-mode gradients.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Default perturbation half-width.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of one [`gradient_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of parameter elements compared.
    pub checked: usize,
    /// Largest relative error observed.
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
}

/// Relative error with an absolute floor so that a pair of exact zeros
/// compares equal instead of dividing by zero.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-12);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients against central differences
/// (loss(p+ε) − loss(p−ε)) / 2ε on a random subset of parameter elements.
///
/// `loss_fn` rebuilds the forward pass from scratch given freshly
/// registered parameter leaves, so it is called once for the analytic
/// sweep and twice per sampled element. Parameters are restored to their
/// original values before returning.
pub fn gradient_check<F, R>(
    params: &mut [Tensor],
    samples: usize,
    eps: f64,
    rng: &mut R,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    R: Rng + ?Sized,
{
    // Analytic pass.
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| graph.param(t)).collect();
    let loss = loss_fn(&mut graph, &ids)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params.iter())
        .map(|(&id, t)| {
            graph
                .grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| alloc::vec![0.0; t.len()])
        })
        .collect();

    // Flat index space over all parameter elements.
    let total: usize = params.iter().map(Tensor::len).sum();
    let picks = rand::seq::index::sample(rng, total, samples.min(total));

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|t| g.param(t)).collect();
        let l = loss_fn(&mut g, &ids)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for flat in picks {
        let (pi, ei) = locate(params, flat);
        let orig = params[pi].data()[ei];

        params[pi].data_mut()[ei] = orig + eps;
        let plus = eval(params)?;
        params[pi].data_mut()[ei] = orig - eps;
        let minus = eval(params)?;
        params[pi].data_mut()[ei] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let err = rel_error(analytic[pi][ei], numeric);
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((pi, ei));
        }
    }
    Ok(report)
}

fn locate(params: &[Tensor], mut flat: usize) -> (usize, usize) {
    for (pi, t) in params.iter().enumerate() {
        if flat < t.len() {
            return (pi, flat);
        }
        flat -= t.len();
    }
    unreachable!("flat index out of range");
}
