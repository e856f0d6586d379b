//! The training objectives: a metric loss pulling local embeddings
//! toward their object's global embedding against the other batch
//! globals, a folding reconstruction loss (Chamfer distance), a cosine
//! loss on predicted normals, and their unweighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::ChamferMode;
use crate::model::BatchForward;

/// Settings of the metric loss: similarity scale and which local levels
/// contribute terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricLossConfig {
    pub s: f64,
    pub include_level1: bool,
    pub include_level2: bool,
}

impl Default for MetricLossConfig {
    fn default() -> MetricLossConfig {
        MetricLossConfig {
            s: 64.0,
            include_level1: true,
            include_level2: true,
        }
    }
}

impl MetricLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) {
            return Err(Error::Config(format!("metric scale s = {} must be positive", self.s)));
        }
        if !self.include_level1 && !self.include_level2 {
            return Err(Error::Config(
                "metric loss needs at least one local level enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Which components of the combined objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossFlags {
    pub l2g: bool,
    pub recon: bool,
    pub normal: bool,
}

impl LossFlags {
    pub fn all() -> LossFlags {
        LossFlags {
            l2g: true,
            recon: true,
            normal: true,
        }
    }

    pub fn any(&self) -> bool {
        self.l2g || self.recon || self.normal
    }
}

/// Per-component loss values of one step; `total` is always the sum of
/// the enabled components (disabled ones report 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2g: f64,
    pub recon: f64,
    pub normal: f64,
    pub total: f64,
}

fn ensure_unit_rows(g: &Graph, id: NodeId, what: &str) -> Result<()> {
    let t = g.value(id);
    for r in 0..t.rows() {
        let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::Contract(format!(
                "{what}: row {r} norm {n:.6} deviates from unit by more than 1e-3"
            )));
        }
    }
    Ok(())
}

fn scalar(g: &Graph, id: NodeId) -> f64 {
    g.value(id).data[0]
}

/// Metric loss over one batch: every local embedding forms a softmax
/// term over ALL m batch globals (its own object's global is the
/// positive and appears in the denominator), scaled by `cfg.s`; the loss
/// is the mean over all terms of both enabled levels. Each level pairs
/// its embedding rows with the owning object's column index in
/// `globals`. A singleton batch has no negatives and scores exactly 0.
pub fn loss_l2g(
    g: &mut Graph,
    level1: Option<(NodeId, &[usize])>,
    level2: Option<(NodeId, &[usize])>,
    globals: NodeId,
    cfg: &MetricLossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let levels: Vec<(NodeId, &[usize])> = [
        (cfg.include_level1, level1),
        (cfg.include_level2, level2),
    ]
    .into_iter()
    .filter_map(|(on, lvl)| if on { lvl } else { None })
    .collect();
    if levels.is_empty() {
        return Err(Error::Contract(
            "metric loss: no local level provided and enabled".into(),
        ));
    }
    let gv = g.value(globals);
    if gv.rank() != 2 || gv.rows() == 0 {
        return Err(Error::Contract(format!(
            "metric loss: globals must be a non-empty matrix, got {:?}",
            gv.shape
        )));
    }
    let (m, width) = (gv.rows(), gv.cols());
    ensure_unit_rows(g, globals, "metric loss globals")?;

    let gt = g.transpose(globals)?;
    let mut sum: Option<NodeId> = None;
    let mut terms = 0usize;
    for (node, pos) in levels {
        let lv = g.value(node);
        if lv.rank() != 2 || lv.cols() != width || lv.rows() != pos.len() {
            return Err(Error::Contract(format!(
                "metric loss: locals {:?} incompatible with {} globals of width {width} and {} positives",
                lv.shape,
                m,
                pos.len()
            )));
        }
        if let Some(&bad) = pos.iter().find(|&&p| p >= m) {
            return Err(Error::Contract(format!(
                "metric loss: positive index {bad} outside batch of {m}"
            )));
        }
        ensure_unit_rows(g, node, "metric loss locals")?;
        let sims = g.matmul(node, gt)?;
        let scaled = g.affine(sims, cfg.s, 0.0);
        let t = g.npair_terms(scaled, pos)?;
        let s = g.sum_all(t);
        sum = Some(match sum {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
        terms += pos.len();
    }
    if terms == 0 {
        return Err(Error::Contract("metric loss: no local embeddings".into()));
    }
    Ok(g.affine(sum.expect("at least one level"), 1.0 / terms as f64, 0.0))
}

/// Reconstruction loss: mean-mode Chamfer distance between the decoded
/// set (differentiable) and the fixed input points.
pub fn loss_recon(g: &mut Graph, input: &[[f64; 3]], decoded: NodeId) -> Result<NodeId> {
    if input.is_empty() {
        return Err(Error::Contract("reconstruction loss: empty input set".into()));
    }
    g.chamfer_set(decoded, input, ChamferMode::Mean)
}

/// Normal loss: 1 − mean cosine between predicted and reference unit
/// normals; the unoriented variant takes |cos| so sign flips are free.
pub fn loss_normal(
    g: &mut Graph,
    pred: NodeId,
    target: &[[f64; 3]],
    oriented: bool,
) -> Result<NodeId> {
    g.cosine_set_loss(pred, target, oriented)
}

/// Combined objective over one forward batch. Disabled components build
/// no graph and report 0 in the breakdown; `total` is the sum of the
/// enabled ones, and the returned node evaluates to exactly that sum.
pub fn loss_glr(
    g: &mut Graph,
    fwd: &BatchForward,
    normals: Option<&[Vec<[f64; 3]>]>,
    metric: &MetricLossConfig,
    flags: LossFlags,
    oriented: bool,
) -> Result<(LossBreakdown, NodeId)> {
    if !flags.any() {
        return Err(Error::Contract(
            "combined loss: at least one component must be enabled".into(),
        ));
    }
    let b = fwd.sorted_points.len();
    let mut breakdown = LossBreakdown {
        l2g: 0.0,
        recon: 0.0,
        normal: 0.0,
        total: 0.0,
    };
    let mut total: Option<NodeId> = None;
    let push = |g: &mut Graph, total: &mut Option<NodeId>, node: NodeId| -> Result<f64> {
        *total = Some(match *total {
            None => node,
            Some(acc) => g.add(acc, node)?,
        });
        Ok(scalar(g, node))
    };

    if flags.l2g {
        let pos1: Vec<usize> = (0..b * fwd.s1).map(|r| r / fwd.s1).collect();
        let pos2: Vec<usize> = (0..b * fwd.s2).map(|r| r / fwd.s2).collect();
        let node = loss_l2g(
            g,
            Some((fwd.e1, &pos1)),
            Some((fwd.e2, &pos2)),
            fwd.eg,
            metric,
        )?;
        breakdown.l2g = push(g, &mut total, node)?;
    }
    if flags.recon {
        let decoded = fwd.decoded.ok_or_else(|| {
            Error::Contract("reconstruction enabled but the forward pass built no decoder".into())
        })?;
        let rows = g.value(decoded).rows();
        if rows % b != 0 {
            return Err(Error::Contract(format!(
                "decoded rows {rows} do not split over {b} objects"
            )));
        }
        let per = rows / b;
        let mut sum: Option<NodeId> = None;
        for o in 0..b {
            let slice = g.slice_rows(decoded, o * per, per)?;
            let c = loss_recon(g, &fwd.sorted_points[o], slice)?;
            sum = Some(match sum {
                None => c,
                Some(acc) => g.add(acc, c)?,
            });
        }
        let node = g.affine(sum.expect("b >= 1"), 1.0 / b as f64, 0.0);
        breakdown.recon = push(g, &mut total, node)?;
    }
    if flags.normal {
        let pred = fwd.pred_normals.ok_or_else(|| {
            Error::Contract("normal loss enabled but the forward pass built no normal head".into())
        })?;
        let gt = normals.ok_or_else(|| {
            Error::Contract("normal loss enabled but no reference normals provided".into())
        })?;
        if gt.len() != b {
            return Err(Error::Contract(format!(
                "normal loss: {} normal sets for {b} objects",
                gt.len()
            )));
        }
        // Predicted rows are in each object's sorted point order; route
        // the references through the same permutation.
        let mut target = Vec::with_capacity(g.value(pred).rows());
        for (o, perm) in fwd.sort_perms.iter().enumerate() {
            if gt[o].len() != perm.len() {
                return Err(Error::Contract(format!(
                    "normal loss: object {o} has {} normals for {} points",
                    gt[o].len(),
                    perm.len()
                )));
            }
            for &j in perm {
                target.push(gt[o][j]);
            }
        }
        let node = loss_normal(g, pred, &target, oriented)?;
        breakdown.normal = push(g, &mut total, node)?;
    }

    let total = total.expect("at least one component enabled");
    breakdown.total = scalar(g, total);
    Ok((breakdown, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::autodiff::BnMode;
    use crate::model::{bind_params, forward_batch, init_params, HeadSelection, ModelConfig};
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(seed: u64, rows: usize, cols: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let v: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            data.extend(v.iter().map(|x| x / n));
        }
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn singleton_batch_scores_exactly_zero() {
        let mut g = Graph::new();
        let locals = g.constant(unit_rows(1, 3, 4)).unwrap();
        let globals = g.constant(unit_rows(2, 1, 4)).unwrap();
        let loss = loss_l2g(
            &mut g,
            Some((locals, &[0, 0, 0])),
            None,
            globals,
            &MetricLossConfig::default(),
        )
        .unwrap();
        assert_eq!(g.value(loss).data[0], 0.0);
    }

    #[test]
    fn two_global_closed_form_anchors() {
        // One local aligned with its positive and orthogonal to the only
        // negative: loss = ln(1 + e^−64). Swapping roles gives ≈ 64.
        let mut g = Graph::new();
        let local = g
            .constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        let globals = g
            .constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let cfg = MetricLossConfig::default();
        let aligned = loss_l2g(&mut g, Some((local, &[0])), None, globals, &cfg).unwrap();
        let v = g.value(aligned).data[0];
        let want = (-64.0f64).exp();
        assert!(v > 0.0 && (v - want).abs() <= 1e-6 * want, "got {v}, want {want}");

        let swapped = loss_l2g(&mut g, Some((local, &[1])), None, globals, &cfg).unwrap();
        let v = g.value(swapped).data[0];
        assert!((v - 64.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn metric_loss_enforces_unit_norms_and_index_ranges() {
        let mut g = Graph::new();
        let skewed = g
            .constant(Tensor::new(vec![1, 2], vec![0.9, 0.0]).unwrap())
            .unwrap();
        let globals = g.constant(unit_rows(3, 2, 2)).unwrap();
        let cfg = MetricLossConfig::default();
        assert!(matches!(
            loss_l2g(&mut g, Some((skewed, &[0])), None, globals, &cfg),
            Err(Error::Contract(_))
        ));

        let ok = g.constant(unit_rows(4, 1, 2)).unwrap();
        assert!(matches!(
            loss_l2g(&mut g, Some((ok, &[2])), None, globals, &cfg),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            loss_l2g(&mut g, None, None, globals, &cfg),
            Err(Error::Contract(_))
        ));
        let no_levels = MetricLossConfig {
            include_level1: false,
            include_level2: false,
            ..MetricLossConfig::default()
        };
        assert!(matches!(
            loss_l2g(&mut g, Some((ok, &[0])), None, globals, &no_levels),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn metric_loss_depends_only_on_inner_products() {
        // A shared rotation of every embedding leaves the loss unchanged.
        let dim = 4;
        let locals1 = unit_rows(5, 3, dim);
        let locals2 = unit_rows(6, 2, dim);
        let globals = unit_rows(7, 3, dim);
        let pos1 = [0usize, 1, 2];
        let pos2 = [0usize, 2];

        let rotate = |t: &Tensor| -> Tensor {
            let mut out = t.clone();
            // Compose Givens rotations over three coordinate pairs.
            for (a, b, th) in [(0usize, 1usize, 0.7f64), (1, 2, -1.1), (2, 3, 2.4)] {
                let (c, s) = (th.cos(), th.sin());
                for r in 0..out.rows() {
                    let ra = out.data[r * dim + a];
                    let rb = out.data[r * dim + b];
                    out.data[r * dim + a] = c * ra - s * rb;
                    out.data[r * dim + b] = s * ra + c * rb;
                }
            }
            out
        };

        let eval = |l1: &Tensor, l2: &Tensor, gl: &Tensor| -> f64 {
            let mut g = Graph::new();
            let n1 = g.constant(l1.clone()).unwrap();
            let n2 = g.constant(l2.clone()).unwrap();
            let ng = g.constant(gl.clone()).unwrap();
            let loss = loss_l2g(
                &mut g,
                Some((n1, &pos1)),
                Some((n2, &pos2)),
                ng,
                &MetricLossConfig::default(),
            )
            .unwrap();
            g.value(loss).data[0]
        };

        let base = eval(&locals1, &locals2, &globals);
        let rot = eval(&rotate(&locals1), &rotate(&locals2), &rotate(&globals));
        assert!((base - rot).abs() < 1e-12, "{base} vs {rot}");
    }

    #[test]
    fn weakening_a_negative_never_increases_the_loss() {
        // One local whose positive is fixed; the single negative global
        // rotates away, monotonically decreasing its similarity.
        let mut prev = f64::INFINITY;
        for step in 1..=12 {
            let theta = 0.2 + 0.22 * step as f64;
            let mut g = Graph::new();
            let local = g
                .constant(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap())
                .unwrap();
            let globals = g
                .constant(
                    Tensor::new(
                        vec![2, 3],
                        vec![1.0, 0.0, 0.0, theta.cos(), theta.sin(), 0.0],
                    )
                    .unwrap(),
                )
                .unwrap();
            let loss = loss_l2g(
                &mut g,
                Some((local, &[0])),
                None,
                globals,
                &MetricLossConfig::default(),
            )
            .unwrap();
            let v = g.value(loss).data[0];
            assert!(
                v <= prev + 1e-15,
                "similarity drop raised the loss: {prev} -> {v}"
            );
            prev = v;
        }
    }

    #[test]
    fn metric_loss_averages_over_all_terms_across_levels() {
        // Hand-computed mean over M = 3 terms split 2/1 across levels.
        let l1 = unit_rows(8, 2, 3);
        let l2 = unit_rows(9, 1, 3);
        let gl = unit_rows(10, 2, 3);
        let pos1 = [0usize, 1];
        let pos2 = [1usize];
        let s = 64.0;

        let mut hand_terms = Vec::new();
        let sim = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        for (t, pos) in [(&l1, &pos1[..]), (&l2, &pos2[..])] {
            for (r, &p) in pos.iter().enumerate() {
                let sims: Vec<f64> = (0..2).map(|k| s * sim(t.row(r), gl.row(k))).collect();
                let rest: f64 = (0..2)
                    .filter(|&k| k != p)
                    .map(|k| (sims[k] - sims[p]).exp())
                    .sum();
                hand_terms.push(rest.ln_1p());
            }
        }
        let want = hand_terms.iter().sum::<f64>() / 3.0;

        let mut g = Graph::new();
        let n1 = g.constant(l1).unwrap();
        let n2 = g.constant(l2).unwrap();
        let ng = g.constant(gl).unwrap();
        let loss = loss_l2g(
            &mut g,
            Some((n1, &pos1)),
            Some((n2, &pos2)),
            ng,
            &MetricLossConfig::default(),
        )
        .unwrap();
        let got = g.value(loss).data[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn reconstruction_anchors() {
        let input = vec![[0.1, 0.2, 0.3], [0.4, -0.2, 0.0], [-0.3, 0.1, 0.5]];
        let mut g = Graph::new();
        let same = {
            let flat: Vec<f64> = input.iter().flatten().copied().collect();
            g.constant(Tensor::new(vec![3, 3], flat).unwrap()).unwrap()
        };
        let loss = loss_recon(&mut g, &input, same).unwrap();
        assert_eq!(g.value(loss).data[0], 0.0);

        let single_in = vec![[0.0, 0.0, 0.0]];
        let moved = g
            .constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.7]).unwrap())
            .unwrap();
        let loss = loss_recon(&mut g, &single_in, moved).unwrap();
        assert!((g.value(loss).data[0] - 1.4).abs() < 1e-12);

        assert!(matches!(
            loss_recon(&mut g, &[], moved),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn normal_loss_hits_its_anchor_values() {
        let target = vec![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
        let cases = [
            (vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], 0.0, 0.0),
            (vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 1.0, 1.0),
            (vec![0.0, 0.0, -1.0, 0.0, 0.0, -1.0], 2.0, 0.0),
        ];
        for (pred, oriented_want, unoriented_want) in cases {
            let mut g = Graph::new();
            let p = g.constant(Tensor::new(vec![2, 3], pred).unwrap()).unwrap();
            let o = loss_normal(&mut g, p, &target, true).unwrap();
            assert_eq!(g.value(o).data[0], oriented_want);
            let u = loss_normal(&mut g, p, &target, false).unwrap();
            assert_eq!(g.value(u).data[0], unoriented_want);
        }
    }

    #[test]
    fn every_loss_passes_composite_gradient_checks() {
        // Metric loss through normalization of raw features.
        let raw_locals = Tensor::new(
            vec![3, 4],
            vec![
                0.8, -0.3, 0.5, 0.2, -0.6, 0.9, 0.1, -0.4, 0.3, 0.7, -0.8, 0.6,
            ],
        )
        .unwrap();
        let raw_globals = Tensor::new(
            vec![2, 4],
            vec![0.9, 0.2, -0.5, 0.7, -0.2, 0.8, 0.6, -0.9],
        )
        .unwrap();
        let err = finite_diff_check(
            |g, params| {
                let locals = g.l2_normalize(params[0], 1e-12)?;
                let globals = g.l2_normalize(params[1], 1e-12)?;
                loss_l2g(
                    g,
                    Some((locals, &[0, 1, 0])),
                    None,
                    globals,
                    &MetricLossConfig::default(),
                )
            },
            &[raw_locals, raw_globals],
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-3, "metric loss FD error {err}");

        // Reconstruction, with clear nearest-neighbor margins.
        let decoded = Tensor::new(
            vec![3, 3],
            vec![0.1, 0.1, 0.0, 0.9, 1.0, 0.1, -0.8, -0.9, 0.2],
        )
        .unwrap();
        let target = [[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [-1.0, -1.0, 0.0]];
        let err = finite_diff_check(
            |g, params| loss_recon(g, &target, params[0]),
            &[decoded],
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-3, "reconstruction FD error {err}");

        // Normal loss through normalization, both orientations.
        let raw = Tensor::new(
            vec![2, 3],
            vec![0.7, 0.3, 0.8, -0.5, 0.9, -0.4],
        )
        .unwrap();
        let target = [[0.0, 0.6, 0.8], [1.0, 0.0, 0.0]];
        for oriented in [true, false] {
            let err = finite_diff_check(
                |g, params| {
                    let pred = g.l2_normalize(params[0], 1e-12)?;
                    loss_normal(g, pred, &target, oriented)
                },
                &[raw.clone()],
                1e-5,
                None,
            )
            .unwrap();
            assert!(err < 1e-3, "normal loss FD error {err} (oriented={oriented})");
        }
    }

    fn random_cloud(seed: u64, n: usize) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ]
            })
            .collect()
    }

    fn random_normals(seed: u64, n: usize) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: [f64; 3] = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
                [v[0] / norm, v[1] / norm, v[2] / norm]
            })
            .collect()
    }

    #[test]
    fn combined_loss_reflects_its_flags_and_adds_up() {
        let cfg = ModelConfig::desk();
        let mut params = init_params(&cfg, 21).unwrap();
        let clouds = vec![random_cloud(100, 256), random_cloud(101, 256)];
        let normals = vec![random_normals(102, 256), random_normals(103, 256)];
        let metric = MetricLossConfig::default();

        let run = |params: &mut crate::model::ModelParams,
                   heads: HeadSelection,
                   flags: LossFlags|
         -> Result<LossBreakdown> {
            let mut g = Graph::new();
            let bound = bind_params(&mut g, params, false)?;
            let fwd = forward_batch(&mut g, &bound, params, &cfg, &clouds, BnMode::Eval, heads)?;
            let (bd, node) = loss_glr(&mut g, &fwd, Some(&normals), &metric, flags, true)?;
            assert_eq!(bd.total, g.value(node).data[0]);
            Ok(bd)
        };

        let both = HeadSelection {
            decode: true,
            normals: true,
        };
        let bd = run(&mut params, both, LossFlags::all()).unwrap();
        assert!(bd.l2g > 0.0 && bd.recon > 0.0 && bd.normal > 0.0);
        assert!((bd.total - (bd.l2g + bd.recon + bd.normal)).abs() < 1e-12);

        let only_recon = run(
            &mut params,
            both,
            LossFlags {
                l2g: false,
                recon: true,
                normal: false,
            },
        )
        .unwrap();
        assert_eq!(only_recon.total, only_recon.recon);
        assert_eq!(only_recon.l2g, 0.0);
        assert_eq!(only_recon.recon, bd.recon);

        let only_l2g = run(
            &mut params,
            both,
            LossFlags {
                l2g: true,
                recon: false,
                normal: false,
            },
        )
        .unwrap();
        assert_eq!(only_l2g.total, only_l2g.l2g);
        assert_eq!(only_l2g.l2g, bd.l2g);

        // Missing heads or references are contract violations.
        let no_heads = HeadSelection {
            decode: false,
            normals: false,
        };
        assert!(matches!(
            run(
                &mut params,
                no_heads,
                LossFlags {
                    l2g: false,
                    recon: true,
                    normal: false
                }
            ),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            run(
                &mut params,
                no_heads,
                LossFlags {
                    l2g: false,
                    recon: false,
                    normal: true
                }
            ),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            run(
                &mut params,
                both,
                LossFlags {
                    l2g: false,
                    recon: false,
                    normal: false
                }
            ),
            Err(Error::Contract(_))
        ));

        let mut g = Graph::new();
        let bound = bind_params(&mut g, &params, false).unwrap();
        let fwd = forward_batch(&mut g, &bound, &mut params, &cfg, &clouds, BnMode::Eval, both)
            .unwrap();
        assert!(matches!(
            loss_glr(&mut g, &fwd, None, &metric, LossFlags::all(), true),
            Err(Error::Contract(_))
        ));
    }
}
