//! Central finite-difference gradient checker.

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares backward gradients against central differences at `point`.
///
/// `build` constructs a scalar root from parameter leaves (one per tensor
/// in `point`); it is re-invoked on perturbed copies for every probed
/// coordinate. `samples_per_tensor: None` probes every coordinate;
/// `Some(n)` probes an evenly strided subset of n per tensor, which keeps
/// composite whole-model checks inside their time budget.
///
/// Returns the maximum mixed relative error |fd − an| / max(1, |fd|, |an|).
pub fn finite_diff_check<F>(
    build: F,
    point: &[Tensor],
    h: f64,
    samples_per_tensor: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!(
            "finite_diff_check: h {h} must be > 0"
        )));
    }

    let grads = analytic_gradients(&build, point)?;

    let mut max_err: f64 = 0.0;
    for (ti, tensor) in point.iter().enumerate() {
        for i in probe_coordinates(tensor.len(), samples_per_tensor) {
            let mut plus = point.to_vec();
            plus[ti].data[i] += h;
            let f_plus = eval_value(&build, &plus)?;
            let mut minus = point.to_vec();
            minus[ti].data[i] -= h;
            let f_minus = eval_value(&build, &minus)?;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let an = grads[ti].data[i];
            let err = (fd - an).abs() / 1.0_f64.max(fd.abs()).max(an.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

fn probe_coordinates(len: usize, samples: Option<usize>) -> Vec<usize> {
    match samples {
        None => (0..len).collect(),
        Some(n) if n >= len => (0..len).collect(),
        Some(n) => {
            // Even stride starting at 0; deterministic and shape-independent.
            let stride = len / n;
            (0..n).map(|k| k * stride).collect()
        }
    }
}

fn build_graph<F>(build: &F, tensors: &[Tensor]) -> Result<(Graph, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = tensors
        .iter()
        .map(|t| g.parameter(t.clone()))
        .collect::<Result<_>>()?;
    let root = build(&mut g, &ids)?;
    Ok((g, ids, root))
}

fn eval_value<F>(build: &F, tensors: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let (g, _, root) = build_graph(build, tensors)?;
    Ok(g.value(root).data[0])
}

fn analytic_gradients<F>(build: &F, tensors: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let (mut g, ids, root) = build_graph(build, tensors)?;
    g.backward(root)?;
    Ok(ids
        .iter()
        .zip(tensors)
        .map(|(&id, t)| {
            // Leaves the root never touches legitimately get zero gradient.
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&t.shape))
        })
        .collect())
}
