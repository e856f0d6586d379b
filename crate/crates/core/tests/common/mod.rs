//! Shared fixtures for the integration suites: the per-primitive
//! finite-difference gradient checks used by both `gradients` and the
//! acceptance run.

use glr_core::autodiff::{finite_diff_check, BatchNormState, BnMode, Graph, NodeId};
use glr_core::geometry::ChamferMode;
use glr_core::tensor::Tensor;
use glr_core::Result;

const H: f64 = 1e-5;

fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("fixture tensor")
}

/// Weighted scalar readout: sum(y ⊙ C) with a fixed full-rank weighting so
/// every output coordinate feeds the root with a distinct coefficient.
fn weighted_sum(g: &mut Graph, y: NodeId) -> Result<NodeId> {
    let shape = g.value(y).shape.clone();
    let n = g.value(y).len();
    let weights: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * (i as f64) * (-1.0f64).powi(i as i32)).collect();
    let c = g.constant(Tensor::new(shape, weights)?)?;
    let prod = g.mul(y, c)?;
    Ok(g.sum_all(prod))
}

fn check<F>(name: &'static str, build: F, point: &[Tensor]) -> (&'static str, f64)
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let err = finite_diff_check(build, point, H, None)
        .unwrap_or_else(|e| panic!("{name}: {e}"));
    (name, err)
}

/// Runs a central finite-difference check for every differentiable
/// primitive, at inputs placed away from kinks and ties, and returns the
/// maximum mixed relative error per op.
pub fn primitive_gradient_checks() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let a34 = t(vec![3, 4], vec![
        0.31, -0.72, 1.05, 0.44, //
        -0.58, 0.93, -0.21, 0.66, //
        0.12, -1.34, 0.78, -0.49,
    ]);
    let b42 = t(vec![4, 2], vec![0.81, -0.37, 0.29, 0.94, -0.63, 0.18, 0.52, -0.85]);
    out.push(check(
        "matmul",
        |g, p| {
            let y = g.matmul(p[0], p[1])?;
            weighted_sum(g, y)
        },
        &[a34.clone(), b42],
    ));

    out.push(check(
        "transpose",
        |g, p| {
            let y = g.transpose(p[0])?;
            weighted_sum(g, y)
        },
        &[a34.clone()],
    ));

    let x23 = t(vec![2, 3], vec![0.4, -0.9, 1.3, -0.2, 0.7, -1.1]);
    let y23 = t(vec![2, 3], vec![-0.5, 0.8, 0.3, 1.2, -0.6, 0.9]);
    out.push(check(
        "add",
        |g, p| {
            let y = g.add(p[0], p[1])?;
            weighted_sum(g, y)
        },
        &[x23.clone(), y23.clone()],
    ));
    out.push(check(
        "sub",
        |g, p| {
            let y = g.sub(p[0], p[1])?;
            weighted_sum(g, y)
        },
        &[x23.clone(), y23.clone()],
    ));
    out.push(check(
        "mul",
        |g, p| {
            let y = g.mul(p[0], p[1])?;
            weighted_sum(g, y)
        },
        &[x23.clone(), y23.clone()],
    ));

    out.push(check(
        "add_bias",
        |g, p| {
            let y = g.add_bias(p[0], p[1])?;
            weighted_sum(g, y)
        },
        &[a34.clone(), t(vec![4], vec![0.2, -0.4, 0.6, -0.8])],
    ));

    out.push(check(
        "affine",
        |g, p| {
            let y = g.affine(p[0], -1.7, 0.4);
            weighted_sum(g, y)
        },
        &[x23.clone()],
    ));

    // All inputs at least 0.2 from the kink at zero.
    out.push(check(
        "relu",
        |g, p| {
            let y = g.relu(p[0]);
            weighted_sum(g, y)
        },
        &[t(vec![2, 4], vec![0.8, -0.5, 1.4, -0.3, 0.2, -1.2, 0.9, -0.7])],
    ));

    // Group maxima separated by at least 0.25 so perturbation by h never
    // flips an argmax.
    out.push(check(
        "max_over_set",
        |g, p| {
            let y = g.max_over_set(p[0], 3)?;
            weighted_sum(g, y)
        },
        &[t(vec![6, 3], vec![
            0.9, 0.1, 0.5, //
            0.2, 0.8, 0.1, //
            0.4, 0.3, 0.9, //
            -0.1, 0.6, 0.2, //
            0.7, 0.0, 0.6, //
            0.3, 0.2, -0.4,
        ])],
    ));

    out.push(check(
        "l2_normalize",
        |g, p| {
            let y = g.l2_normalize(p[0], 1e-12)?;
            weighted_sum(g, y)
        },
        &[t(vec![3, 3], vec![0.6, -0.8, 0.4, 1.5, 0.9, -0.3, -0.4, 0.2, 1.1])],
    ));

    out.push(check(
        "log_sum_exp",
        |g, p| {
            let y = g.log_sum_exp(p[0])?;
            weighted_sum(g, y)
        },
        &[t(vec![2, 5], vec![0.3, -1.2, 0.8, 0.1, -0.5, 1.4, 0.0, -0.9, 0.6, 0.2])],
    ));

    let bn_x = t(vec![4, 3], vec![
        0.9, -0.4, 1.2, //
        -0.6, 0.8, 0.3, //
        0.2, -1.1, -0.7, //
        1.4, 0.5, 0.6,
    ]);
    let bn_gamma = t(vec![3], vec![1.2, 0.8, -0.5]);
    let bn_beta = t(vec![3], vec![0.1, -0.3, 0.2]);
    out.push(check(
        "batch_norm_train",
        |g, p| {
            let mut state = BatchNormState::new(3);
            let y = g.batch_norm(p[0], p[1], p[2], &mut state, BnMode::Train)?;
            weighted_sum(g, y)
        },
        &[bn_x.clone(), bn_gamma.clone(), bn_beta.clone()],
    ));
    out.push(check(
        "batch_norm_eval",
        |g, p| {
            let mut state = BatchNormState::new(3);
            state.running_mean = t(vec![3], vec![0.1, -0.2, 0.3]);
            state.running_var = t(vec![3], vec![1.5, 0.7, 2.0]);
            let y = g.batch_norm(p[0], p[1], p[2], &mut state, BnMode::Eval)?;
            weighted_sum(g, y)
        },
        &[bn_x, bn_gamma, bn_beta],
    ));

    out.push(check(
        "concat_cols",
        |g, p| {
            let y = g.concat_cols(p[0], p[1])?;
            weighted_sum(g, y)
        },
        &[
            t(vec![2, 2], vec![0.4, -0.7, 1.1, 0.2]),
            t(vec![2, 3], vec![-0.3, 0.9, 0.5, 0.8, -1.2, 0.1]),
        ],
    ));

    // Index list repeats row 2 to exercise scatter-add.
    out.push(check(
        "gather_rows",
        |g, p| {
            let y = g.gather_rows(p[0], &[2, 0, 2, 3, 1])?;
            weighted_sum(g, y)
        },
        &[t(vec![4, 3], vec![
            0.5, -0.2, 0.8, 1.1, 0.4, -0.6, -0.9, 0.3, 0.7, 0.2, -1.3, 0.6,
        ])],
    ));

    out.push(check(
        "repeat_rows",
        |g, p| {
            let y = g.repeat_rows(p[0], 3)?;
            weighted_sum(g, y)
        },
        &[x23.clone()],
    ));

    out.push(check(
        "slice_rows",
        |g, p| {
            let y = g.slice_rows(p[0], 1, 3)?;
            weighted_sum(g, y)
        },
        &[t(vec![5, 2], vec![0.3, -0.8, 1.2, 0.5, -0.4, 0.9, 0.7, -1.1, 0.1, 0.6])],
    ));

    out.push(check("sum_all", |g, p| Ok(g.sum_all(p[0])), &[x23.clone()]));
    out.push(check("mean_all", |g, p| Ok(g.mean_all(p[0])), &[x23]));

    // Nearest-neighbour margins all exceed 0.1: perturbing by h cannot
    // reassign a match, so the frozen-match gradient is the true one.
    let cloud = t(vec![4, 3], vec![
        0.0, 0.0, 0.0, //
        1.0, 0.1, -0.2, //
        -0.8, 0.7, 0.3, //
        0.4, -0.6, 0.9,
    ]);
    let target = [
        [0.1, 0.1, 0.1],
        [0.9, 0.0, -0.1],
        [-0.7, 0.8, 0.2],
        [0.5, -0.5, 1.0],
        [2.0, 2.0, 2.0],
    ];
    out.push(check(
        "chamfer_sum",
        |g, p| g.chamfer_set(p[0], &target, ChamferMode::Sum),
        &[cloud.clone()],
    ));
    out.push(check(
        "chamfer_mean",
        |g, p| g.chamfer_set(p[0], &target, ChamferMode::Mean),
        &[cloud],
    ));

    out.push(check(
        "npair_terms",
        |g, p| {
            let terms = g.npair_terms(p[0], &[2, 0, 1])?;
            weighted_sum(g, terms)
        },
        &[t(vec![3, 4], vec![
            0.9, 0.1, 0.7, -0.3, //
            1.2, 0.3, -0.5, 0.0, //
            0.2, 0.8, 0.4, 0.6,
        ])],
    ));

    // Rows are unit within 1e-3 under perturbation by h; unoriented dots
    // stay at least 0.3 from the |cos| kink at zero.
    let pred = t(vec![4, 3], vec![
        1.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, //
        0.0, 0.0, 1.0, //
        0.6, 0.8, 0.0,
    ]);
    let cos_target = [
        [0.8, 0.6, 0.0],
        [0.0, -0.6, 0.8],
        [0.6, 0.0, 0.8],
        [1.0, 0.0, 0.0],
    ];
    out.push(check(
        "cosine_oriented",
        |g, p| g.cosine_set_loss(p[0], &cos_target, true),
        &[pred.clone()],
    ));
    out.push(check(
        "cosine_unoriented",
        |g, p| g.cosine_set_loss(p[0], &cos_target, false),
        &[pred],
    ));

    out
}
