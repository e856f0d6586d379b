//! Finite-difference verification of every differentiable primitive and of
//! a representative composite network graph.

mod common;

use glr_core::autodiff::{finite_diff_check, BatchNormState, BnMode};
use glr_core::tensor::Tensor;

#[test]
fn every_primitive_matches_central_differences() {
    for (name, err) in common::primitive_gradient_checks() {
        assert!(err < 1e-6, "{name}: max relative error {err:.3e} >= 1e-6");
    }
}

/// Two matmul+bias layers with train-mode batch norm and relu, a normalized
/// embedding head, and an N-pair readout over the self-similarity matrix.
/// Inputs keep every preactivation at least 1e-3 from the relu kink.
#[test]
fn composite_network_graph_matches_central_differences() {
    let x = Tensor::new(
        vec![4, 5],
        vec![
            0.31, -0.68, 0.92, 0.14, -0.47, //
            -0.81, 0.56, -0.23, 0.73, 0.38, //
            0.62, -0.15, -0.94, 0.41, -0.29, //
            0.18, 0.87, 0.33, -0.52, 0.69,
        ],
    )
    .unwrap();
    let w1 = Tensor::new(
        vec![5, 6],
        (0..30)
            .map(|i| 0.35 * ((i * 7 + 3) % 11) as f64 / 11.0 - 0.15)
            .collect(),
    )
    .unwrap();
    let b1 = Tensor::new(vec![6], vec![0.05, -0.1, 0.15, -0.05, 0.1, -0.15]).unwrap();
    let w2 = Tensor::new(
        vec![6, 3],
        (0..18)
            .map(|i| 0.4 * ((i * 5 + 2) % 13) as f64 / 13.0 - 0.18)
            .collect(),
    )
    .unwrap();
    let gamma = Tensor::new(vec![6], vec![1.1, 0.9, 1.05, 0.95, 1.2, 0.85]).unwrap();
    let beta = Tensor::new(vec![6], vec![0.02, -0.03, 0.01, 0.04, -0.02, 0.03]).unwrap();

    let err = finite_diff_check(
        |g, p| {
            let h1 = g.matmul(p[0], p[1])?;
            let h1 = g.add_bias(h1, p[2])?;
            let mut state = BatchNormState::new(6);
            let h1 = g.batch_norm(h1, p[4], p[5], &mut state, BnMode::Train)?;
            let h1 = g.relu(h1);
            let h2 = g.matmul(h1, p[3])?;
            let e = g.l2_normalize(h2, 1e-12)?;
            let et = g.transpose(e)?;
            let sims = g.matmul(e, et)?;
            let sims = g.affine(sims, 4.0, 0.0);
            let terms = g.npair_terms(sims, &[0, 1, 2, 3])?;
            Ok(g.mean_all(terms))
        },
        &[x, w1, b1, w2, gamma, beta],
        1e-5,
        None,
    )
    .unwrap();
    assert!(err < 1e-6, "composite graph: max relative error {err:.3e}");
}
