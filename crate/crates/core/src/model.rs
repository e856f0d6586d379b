//! The learnable networks: a two-level set-abstraction encoder with a
//! global pooling stage, shared prediction heads projecting every level
//! into one embedding space, feature aggregation, a two-stage folding
//! decoder, and a normal-estimation head, plus parameter initialization
//! and checkpoint serialization.
//!
//! Every forward pass, batched or single-object, is built on the same
//! graph constructors, so the two paths are numerically identical. Point
//! sets are sorted lexicographically at each set-abstraction entry, which
//! makes neighborhood membership, and with it the whole forward pass,
//! independent of input row order.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, BatchNormState, BnMode, Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::{ball_query, folding_grid, fps, group_relative, FoldingGrid};
use crate::rng::{seeded_rng, Stream};
use crate::tensor::Tensor;

/// One set-abstraction level: centroid count, neighborhood size and
/// radius, and the channel widths of the two shared layers around the
/// neighborhood max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SALayerConfig {
    pub n_centroids: usize,
    pub k: usize,
    pub r: f64,
    pub c_mid: usize,
    pub c_out: usize,
}

impl SALayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_centroids == 0 || self.k == 0 || self.c_mid == 0 || self.c_out == 0 {
            return Err(Error::Config(format!("set-abstraction layer has a zero field: {self:?}")));
        }
        if !(self.r > 0.0 && self.r <= 2.0) {
            return Err(Error::Config(format!(
                "set-abstraction radius {} outside (0, 2]",
                self.r
            )));
        }
        Ok(())
    }
}

/// Full architecture description. Channel counts are stored already
/// multiplied by the width multiplier `width_num/width_den`; the
/// constructor rejects multipliers that do not yield integers. Unset
/// JSON fields take the desk-profile values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub profile: String,
    pub width_num: usize,
    pub width_den: usize,
    pub n_points: usize,
    pub embed_dim: usize,
    pub sa1: SALayerConfig,
    pub sa2: SALayerConfig,
    pub global_out: usize,
    pub grid_side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Reference profile: 1024 points, full width, 512-wide embeddings,
    /// 32×32 folding grid.
    pub fn paper() -> ModelConfig {
        Self::from_multiplier("paper", 1, 1, 1024, 512, 32, (512, 48, 0.23), (128, 64, 0.32))
            .expect("reference profile is valid")
    }

    /// Desk profile: 256 points, quarter width, 64-wide embeddings, 16×16
    /// grid; all structural ratios of the reference profile preserved.
    pub fn desk() -> ModelConfig {
        Self::from_multiplier("desk", 1, 4, 256, 64, 16, (128, 16, 0.23), (32, 16, 0.32))
            .expect("desk profile is valid")
    }

    /// Builds a profile from the width multiplier and per-level geometry
    /// `(n_centroids, k, r)`. Base channel widths are 64/128 at level 1,
    /// 128/512 at level 2, and 1024 for the global feature.
    pub fn from_multiplier(
        profile: &str,
        width_num: usize,
        width_den: usize,
        n_points: usize,
        embed_dim: usize,
        grid_side: usize,
        sa1_geo: (usize, usize, f64),
        sa2_geo: (usize, usize, f64),
    ) -> Result<ModelConfig> {
        if width_num == 0 || width_den == 0 {
            return Err(Error::Config(format!(
                "width multiplier {width_num}/{width_den} must be positive"
            )));
        }
        let scale = |base: usize| -> Result<usize> {
            let v = base * width_num;
            if v % width_den != 0 {
                return Err(Error::Config(format!(
                    "channel width {base}·{width_num}/{width_den} is not an integer"
                )));
            }
            Ok(v / width_den)
        };
        let cfg = ModelConfig {
            profile: profile.to_string(),
            width_num,
            width_den,
            n_points,
            embed_dim,
            sa1: SALayerConfig {
                n_centroids: sa1_geo.0,
                k: sa1_geo.1,
                r: sa1_geo.2,
                c_mid: scale(64)?,
                c_out: scale(128)?,
            },
            sa2: SALayerConfig {
                n_centroids: sa2_geo.0,
                k: sa2_geo.1,
                r: sa2_geo.2,
                c_mid: scale(128)?,
                c_out: scale(512)?,
            },
            global_out: scale(1024)?,
            grid_side,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sa1.validate()?;
        self.sa2.validate()?;
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be even and at least 2",
                self.embed_dim
            )));
        }
        if self.n_points < self.sa1.n_centroids || self.sa1.n_centroids < self.sa2.n_centroids {
            return Err(Error::Config(format!(
                "centroid counts must nest: {} points ≥ {} ≥ {}",
                self.n_points, self.sa1.n_centroids, self.sa2.n_centroids
            )));
        }
        if self.grid_side < 2 {
            return Err(Error::Config(format!("grid_side {} < 2", self.grid_side)));
        }
        if self.global_out == 0 {
            return Err(Error::Config("global_out is zero".into()));
        }
        Ok(())
    }

    /// Width of the aggregated representation.
    pub fn agg_dim(&self) -> usize {
        3 * self.embed_dim
    }

    /// Hidden width of the level-1 prediction head.
    pub fn pred1_hidden(&self) -> usize {
        self.sa1.c_out.min(self.embed_dim)
    }

    /// Hidden width of the level-2 and global prediction heads.
    pub fn pred_hidden(&self) -> usize {
        self.embed_dim
    }

    /// Hidden widths of the folding stages and the normal head scale with
    /// the embedding: (embed, embed/2) mirrors the reference 512/256.
    pub fn fold_hidden(&self) -> (usize, usize) {
        (self.embed_dim, self.embed_dim / 2)
    }

    pub fn decoded_points(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

/// A fully connected layer: `weight` is [in, out], `bias` is [out].
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct SaLayerParams {
    pub fc1: Linear,
    pub bn1: BatchNormState,
    pub fc2: Linear,
    pub bn2: BatchNormState,
}

#[derive(Debug, Clone)]
pub struct PredHead {
    pub fc1: Linear,
    pub bn: BatchNormState,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Mlp3 {
    pub fc1: Linear,
    pub bn1: BatchNormState,
    pub fc2: Linear,
    pub bn2: BatchNormState,
    pub fc3: Linear,
}

/// All learnable state. Tensor enumeration order is fixed: encoder,
/// global stage, prediction heads, folding stages, normal head; within a
/// layer weight, bias, then batch-norm gamma, beta (running statistics
/// last in the full listing). Initialization, Adam slots, binding, and
/// checkpoints all share this order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub sa1: SaLayerParams,
    pub sa2: SaLayerParams,
    pub global_fc: Linear,
    pub global_bn: BatchNormState,
    pub pred1: PredHead,
    pub pred2: PredHead,
    pub pred3: PredHead,
    pub fold1: Mlp3,
    pub fold2: Mlp3,
    pub normal_head: Mlp3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl TensorKind {
    pub fn trainable(self) -> bool {
        !matches!(self, TensorKind::RunningMean | TensorKind::RunningVar)
    }
}

type Spec = (String, TensorKind, Vec<usize>);

fn spec_linear(out: &mut Vec<Spec>, prefix: &str, i: usize, o: usize) {
    out.push((format!("{prefix}.weight"), TensorKind::Weight, vec![i, o]));
    out.push((format!("{prefix}.bias"), TensorKind::Bias, vec![o]));
}

fn spec_bn(out: &mut Vec<Spec>, prefix: &str, c: usize) {
    out.push((format!("{prefix}.gamma"), TensorKind::Gamma, vec![c]));
    out.push((format!("{prefix}.beta"), TensorKind::Beta, vec![c]));
    out.push((format!("{prefix}.running_mean"), TensorKind::RunningMean, vec![c]));
    out.push((format!("{prefix}.running_var"), TensorKind::RunningVar, vec![c]));
}

/// Canonical tensor listing derived from the config alone: names, kinds,
/// and shapes in enumeration order. The source of truth for
/// initialization, checkpoint layout, and shape validation.
pub fn tensor_specs(cfg: &ModelConfig) -> Vec<Spec> {
    let mut out = Vec::new();
    let e = cfg.embed_dim;
    let (f1, f2) = cfg.fold_hidden();

    spec_linear(&mut out, "sa1.fc1", 3, cfg.sa1.c_mid);
    spec_bn(&mut out, "sa1.bn1", cfg.sa1.c_mid);
    spec_linear(&mut out, "sa1.fc2", cfg.sa1.c_mid, cfg.sa1.c_out);
    spec_bn(&mut out, "sa1.bn2", cfg.sa1.c_out);

    spec_linear(&mut out, "sa2.fc1", 3 + cfg.sa1.c_out, cfg.sa2.c_mid);
    spec_bn(&mut out, "sa2.bn1", cfg.sa2.c_mid);
    spec_linear(&mut out, "sa2.fc2", cfg.sa2.c_mid, cfg.sa2.c_out);
    spec_bn(&mut out, "sa2.bn2", cfg.sa2.c_out);

    spec_linear(&mut out, "global.fc", cfg.sa2.c_out, cfg.global_out);
    spec_bn(&mut out, "global.bn", cfg.global_out);

    spec_linear(&mut out, "pred1.fc1", cfg.sa1.c_out, cfg.pred1_hidden());
    spec_bn(&mut out, "pred1.bn", cfg.pred1_hidden());
    spec_linear(&mut out, "pred1.fc2", cfg.pred1_hidden(), e);
    spec_linear(&mut out, "pred2.fc1", cfg.sa2.c_out, cfg.pred_hidden());
    spec_bn(&mut out, "pred2.bn", cfg.pred_hidden());
    spec_linear(&mut out, "pred2.fc2", cfg.pred_hidden(), e);
    spec_linear(&mut out, "pred3.fc1", cfg.global_out, cfg.pred_hidden());
    spec_bn(&mut out, "pred3.bn", cfg.pred_hidden());
    spec_linear(&mut out, "pred3.fc2", cfg.pred_hidden(), e);

    let agg = cfg.agg_dim();
    for (name, d) in [("fold1", 2), ("fold2", 3), ("normal", 3)] {
        spec_linear(&mut out, &format!("{name}.fc1"), agg + d, f1);
        spec_bn(&mut out, &format!("{name}.bn1"), f1);
        spec_linear(&mut out, &format!("{name}.fc2"), f1, f2);
        spec_bn(&mut out, &format!("{name}.bn2"), f2);
        spec_linear(&mut out, &format!("{name}.fc3"), f2, 3);
    }
    out
}

/// Scaled uniform fan-in initialization: weights from U[−√(6/fan_in),
/// √(6/fan_in)] drawn in enumeration order, biases zero, batch-norm at
/// identity. Deterministic given the seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = seeded_rng(seed, Stream::ParamInit, 0);
    let mut weight = |i: usize, o: usize| -> Linear {
        let a = (6.0 / i as f64).sqrt();
        let data: Vec<f64> = (0..i * o).map(|_| rng.gen_range(-a..a)).collect();
        Linear {
            weight: Tensor::new(vec![i, o], data).expect("init shape"),
            bias: Tensor::zeros(&[o]),
        }
    };
    let e = cfg.embed_dim;
    let (f1w, f2w) = cfg.fold_hidden();
    let agg = cfg.agg_dim();

    let sa1 = SaLayerParams {
        fc1: weight(3, cfg.sa1.c_mid),
        bn1: BatchNormState::new(cfg.sa1.c_mid),
        fc2: weight(cfg.sa1.c_mid, cfg.sa1.c_out),
        bn2: BatchNormState::new(cfg.sa1.c_out),
    };
    let sa2 = SaLayerParams {
        fc1: weight(3 + cfg.sa1.c_out, cfg.sa2.c_mid),
        bn1: BatchNormState::new(cfg.sa2.c_mid),
        fc2: weight(cfg.sa2.c_mid, cfg.sa2.c_out),
        bn2: BatchNormState::new(cfg.sa2.c_out),
    };
    let global_fc = weight(cfg.sa2.c_out, cfg.global_out);
    let global_bn = BatchNormState::new(cfg.global_out);
    let mut pred = |i: usize, h: usize| -> PredHead {
        PredHead {
            fc1: weight(i, h),
            bn: BatchNormState::new(h),
            fc2: weight(h, e),
        }
    };
    let pred1 = pred(cfg.sa1.c_out, cfg.pred1_hidden());
    let pred2 = pred(cfg.sa2.c_out, cfg.pred_hidden());
    let pred3 = pred(cfg.global_out, cfg.pred_hidden());
    let mut mlp3 = |extra: usize| -> Mlp3 {
        Mlp3 {
            fc1: weight(agg + extra, f1w),
            bn1: BatchNormState::new(f1w),
            fc2: weight(f1w, f2w),
            bn2: BatchNormState::new(f2w),
            fc3: weight(f2w, 3),
        }
    };
    let fold1 = mlp3(2);
    let fold2 = mlp3(3);
    let normal_head = mlp3(3);

    Ok(ModelParams {
        sa1,
        sa2,
        global_fc,
        global_bn,
        pred1,
        pred2,
        pred3,
        fold1,
        fold2,
        normal_head,
    })
}

fn collect_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, l: &'a Linear) {
    out.push((format!("{prefix}.weight"), &l.weight));
    out.push((format!("{prefix}.bias"), &l.bias));
}

fn collect_bn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, bn: &'a BatchNormState, all: bool) {
    out.push((format!("{prefix}.gamma"), &bn.gamma));
    out.push((format!("{prefix}.beta"), &bn.beta));
    if all {
        out.push((format!("{prefix}.running_mean"), &bn.running_mean));
        out.push((format!("{prefix}.running_var"), &bn.running_var));
    }
}

fn collect_linear_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, l: &'a mut Linear) {
    out.push((format!("{prefix}.weight"), &mut l.weight));
    out.push((format!("{prefix}.bias"), &mut l.bias));
}

fn collect_bn_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    prefix: &str,
    bn: &'a mut BatchNormState,
    all: bool,
) {
    out.push((format!("{prefix}.gamma"), &mut bn.gamma));
    out.push((format!("{prefix}.beta"), &mut bn.beta));
    if all {
        out.push((format!("{prefix}.running_mean"), &mut bn.running_mean));
        out.push((format!("{prefix}.running_var"), &mut bn.running_var));
    }
}

impl ModelParams {
    fn collect(&self, all: bool) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        collect_linear(&mut out, "sa1.fc1", &self.sa1.fc1);
        collect_bn(&mut out, "sa1.bn1", &self.sa1.bn1, all);
        collect_linear(&mut out, "sa1.fc2", &self.sa1.fc2);
        collect_bn(&mut out, "sa1.bn2", &self.sa1.bn2, all);
        collect_linear(&mut out, "sa2.fc1", &self.sa2.fc1);
        collect_bn(&mut out, "sa2.bn1", &self.sa2.bn1, all);
        collect_linear(&mut out, "sa2.fc2", &self.sa2.fc2);
        collect_bn(&mut out, "sa2.bn2", &self.sa2.bn2, all);
        collect_linear(&mut out, "global.fc", &self.global_fc);
        collect_bn(&mut out, "global.bn", &self.global_bn, all);
        for (name, head) in [("pred1", &self.pred1), ("pred2", &self.pred2), ("pred3", &self.pred3)] {
            collect_linear(&mut out, &format!("{name}.fc1"), &head.fc1);
            collect_bn(&mut out, &format!("{name}.bn"), &head.bn, all);
            collect_linear(&mut out, &format!("{name}.fc2"), &head.fc2);
        }
        for (name, m) in [("fold1", &self.fold1), ("fold2", &self.fold2), ("normal", &self.normal_head)] {
            collect_linear(&mut out, &format!("{name}.fc1"), &m.fc1);
            collect_bn(&mut out, &format!("{name}.bn1"), &m.bn1, all);
            collect_linear(&mut out, &format!("{name}.fc2"), &m.fc2);
            collect_bn(&mut out, &format!("{name}.bn2"), &m.bn2, all);
            collect_linear(&mut out, &format!("{name}.fc3"), &m.fc3);
        }
        out
    }

    /// Trainable tensors (weights, biases, batch-norm affine parameters)
    /// in canonical order.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        self.collect(false)
    }

    /// Every tensor including batch-norm running statistics; the
    /// checkpoint payload.
    pub fn all_tensors(&self) -> Vec<(String, &Tensor)> {
        self.collect(true)
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        collect_linear_mut(&mut out, "sa1.fc1", &mut self.sa1.fc1);
        collect_bn_mut(&mut out, "sa1.bn1", &mut self.sa1.bn1, false);
        collect_linear_mut(&mut out, "sa1.fc2", &mut self.sa1.fc2);
        collect_bn_mut(&mut out, "sa1.bn2", &mut self.sa1.bn2, false);
        collect_linear_mut(&mut out, "sa2.fc1", &mut self.sa2.fc1);
        collect_bn_mut(&mut out, "sa2.bn1", &mut self.sa2.bn1, false);
        collect_linear_mut(&mut out, "sa2.fc2", &mut self.sa2.fc2);
        collect_bn_mut(&mut out, "sa2.bn2", &mut self.sa2.bn2, false);
        collect_linear_mut(&mut out, "global.fc", &mut self.global_fc);
        collect_bn_mut(&mut out, "global.bn", &mut self.global_bn, false);
        for (name, head) in [
            ("pred1", &mut self.pred1),
            ("pred2", &mut self.pred2),
            ("pred3", &mut self.pred3),
        ] {
            collect_linear_mut(&mut out, &format!("{name}.fc1"), &mut head.fc1);
            collect_bn_mut(&mut out, &format!("{name}.bn"), &mut head.bn, false);
            collect_linear_mut(&mut out, &format!("{name}.fc2"), &mut head.fc2);
        }
        for (name, m) in [
            ("fold1", &mut self.fold1),
            ("fold2", &mut self.fold2),
            ("normal", &mut self.normal_head),
        ] {
            collect_linear_mut(&mut out, &format!("{name}.fc1"), &mut m.fc1);
            collect_bn_mut(&mut out, &format!("{name}.bn1"), &mut m.bn1, false);
            collect_linear_mut(&mut out, &format!("{name}.fc2"), &mut m.fc2);
            collect_bn_mut(&mut out, &format!("{name}.bn2"), &mut m.bn2, false);
            collect_linear_mut(&mut out, &format!("{name}.fc3"), &mut m.fc3);
        }
        out
    }

    pub fn trainable_shapes(&self) -> Vec<Vec<usize>> {
        self.trainable().iter().map(|(_, t)| t.shape.clone()).collect()
    }

    /// Every batch-norm state, for schedule updates.
    pub fn bn_states_mut(&mut self) -> Vec<&mut BatchNormState> {
        vec![
            &mut self.sa1.bn1,
            &mut self.sa1.bn2,
            &mut self.sa2.bn1,
            &mut self.sa2.bn2,
            &mut self.global_bn,
            &mut self.pred1.bn,
            &mut self.pred2.bn,
            &mut self.pred3.bn,
            &mut self.fold1.bn1,
            &mut self.fold1.bn2,
            &mut self.fold2.bn1,
            &mut self.fold2.bn2,
            &mut self.normal_head.bn1,
            &mut self.normal_head.bn2,
        ]
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    /// Shape-checks every tensor against the config arithmetic and
    /// rejects non-finite values.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let specs = tensor_specs(cfg);
        let tensors = self.all_tensors();
        if specs.len() != tensors.len() {
            return Err(Error::Integrity(format!(
                "parameter census mismatch: {} tensors vs {} specs",
                tensors.len(),
                specs.len()
            )));
        }
        for ((name, _, shape), (got_name, t)) in specs.iter().zip(&tensors) {
            if name != got_name {
                return Err(Error::Integrity(format!(
                    "tensor order mismatch: expected {name}, found {got_name}"
                )));
            }
            if &t.shape != shape {
                return Err(Error::Integrity(format!(
                    "tensor {name}: shape {:?}, config implies {shape:?}",
                    t.shape
                )));
            }
            if !t.all_finite() {
                return Err(Error::Integrity(format!("tensor {name} has non-finite values")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct LinearNodes {
    w: NodeId,
    b: NodeId,
}

#[derive(Clone, Copy)]
struct BnNodes {
    gamma: NodeId,
    beta: NodeId,
}

#[derive(Clone, Copy)]
struct SaNodes {
    fc1: LinearNodes,
    bn1: BnNodes,
    fc2: LinearNodes,
    bn2: BnNodes,
}

#[derive(Clone, Copy)]
struct HeadNodes {
    fc1: LinearNodes,
    bn: BnNodes,
    fc2: LinearNodes,
}

#[derive(Clone, Copy)]
struct Mlp3Nodes {
    fc1: LinearNodes,
    bn1: BnNodes,
    fc2: LinearNodes,
    bn2: BnNodes,
    fc3: LinearNodes,
}

/// Graph handles for every parameter tensor of one bound model.
pub struct Bound {
    sa1: SaNodes,
    sa2: SaNodes,
    global_fc: LinearNodes,
    global_bn: BnNodes,
    pred1: HeadNodes,
    pred2: HeadNodes,
    pred3: HeadNodes,
    fold1: Mlp3Nodes,
    fold2: Mlp3Nodes,
    normal: Mlp3Nodes,
    /// (name, node) pairs parallel to [`ModelParams::trainable`]; empty
    /// when bound as constants.
    pub named: Vec<(String, NodeId)>,
}

struct Binder<'g> {
    g: &'g mut Graph,
    trainable: bool,
    named: Vec<(String, NodeId)>,
}

impl<'g> Binder<'g> {
    fn tensor(&mut self, name: &str, t: &Tensor) -> Result<NodeId> {
        if self.trainable {
            let id = self.g.parameter(t.clone())?;
            self.named.push((name.to_string(), id));
            Ok(id)
        } else {
            self.g.constant(t.clone())
        }
    }

    fn linear(&mut self, prefix: &str, l: &Linear) -> Result<LinearNodes> {
        Ok(LinearNodes {
            w: self.tensor(&format!("{prefix}.weight"), &l.weight)?,
            b: self.tensor(&format!("{prefix}.bias"), &l.bias)?,
        })
    }

    fn bn(&mut self, prefix: &str, bn: &BatchNormState) -> Result<BnNodes> {
        Ok(BnNodes {
            gamma: self.tensor(&format!("{prefix}.gamma"), &bn.gamma)?,
            beta: self.tensor(&format!("{prefix}.beta"), &bn.beta)?,
        })
    }

    fn sa(&mut self, prefix: &str, p: &SaLayerParams) -> Result<SaNodes> {
        Ok(SaNodes {
            fc1: self.linear(&format!("{prefix}.fc1"), &p.fc1)?,
            bn1: self.bn(&format!("{prefix}.bn1"), &p.bn1)?,
            fc2: self.linear(&format!("{prefix}.fc2"), &p.fc2)?,
            bn2: self.bn(&format!("{prefix}.bn2"), &p.bn2)?,
        })
    }

    fn head(&mut self, prefix: &str, p: &PredHead) -> Result<HeadNodes> {
        Ok(HeadNodes {
            fc1: self.linear(&format!("{prefix}.fc1"), &p.fc1)?,
            bn: self.bn(&format!("{prefix}.bn"), &p.bn)?,
            fc2: self.linear(&format!("{prefix}.fc2"), &p.fc2)?,
        })
    }

    fn mlp3(&mut self, prefix: &str, p: &Mlp3) -> Result<Mlp3Nodes> {
        Ok(Mlp3Nodes {
            fc1: self.linear(&format!("{prefix}.fc1"), &p.fc1)?,
            bn1: self.bn(&format!("{prefix}.bn1"), &p.bn1)?,
            fc2: self.linear(&format!("{prefix}.fc2"), &p.fc2)?,
            bn2: self.bn(&format!("{prefix}.bn2"), &p.bn2)?,
            fc3: self.linear(&format!("{prefix}.fc3"), &p.fc3)?,
        })
    }
}

/// Binds every parameter into the graph. `trainable` makes them gradient
/// leaves and fills `named` in the order of [`ModelParams::trainable`];
/// otherwise they enter as constants.
pub fn bind_params(g: &mut Graph, params: &ModelParams, trainable: bool) -> Result<Bound> {
    let mut b = Binder {
        g,
        trainable,
        named: Vec::new(),
    };
    let sa1 = b.sa("sa1", &params.sa1)?;
    let sa2 = b.sa("sa2", &params.sa2)?;
    let global_fc = b.linear("global.fc", &params.global_fc)?;
    let global_bn = b.bn("global.bn", &params.global_bn)?;
    let pred1 = b.head("pred1", &params.pred1)?;
    let pred2 = b.head("pred2", &params.pred2)?;
    let pred3 = b.head("pred3", &params.pred3)?;
    let fold1 = b.mlp3("fold1", &params.fold1)?;
    let fold2 = b.mlp3("fold2", &params.fold2)?;
    let normal = b.mlp3("normal", &params.normal_head)?;
    Ok(Bound {
        sa1,
        sa2,
        global_fc,
        global_bn,
        pred1,
        pred2,
        pred3,
        fold1,
        fold2,
        normal,
        named: b.named,
    })
}

/// Indices that sort the points lexicographically; stable, so duplicate
/// points keep ascending original order.
pub fn lex_sort_perm(points: &[[f64; 3]]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        points[a]
            .partial_cmp(&points[b])
            .expect("point coordinates must be finite")
    });
    idx
}

fn linear_graph(g: &mut Graph, x: NodeId, l: &LinearNodes) -> Result<NodeId> {
    let h = g.matmul(x, l.w)?;
    g.add_bias(h, l.b)
}

fn bn_relu(
    g: &mut Graph,
    x: NodeId,
    nodes: &BnNodes,
    state: &mut BatchNormState,
    mode: BnMode,
) -> Result<NodeId> {
    let h = g.batch_norm(x, nodes.gamma, nodes.beta, state, mode)?;
    Ok(g.relu(h))
}

/// Row normalization that never emits a zero row: an infinitesimal fixed
/// direction is added first, so a row that is exactly zero (possible at
/// initialization when every hidden channel is relu-killed and biases
/// are still zero) normalizes to a unit vector instead of surviving as
/// zeros and violating downstream unit-norm contracts. Rows with any
/// component above f64 resolution are unchanged bit for bit.
fn unit_normalize(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let c = g.value(x).cols();
    let mut tip = vec![0.0; c];
    tip[c - 1] = 1e-30;
    let tip = g.constant(Tensor::new(vec![c], tip)?)?;
    let shifted = g.add_bias(x, tip)?;
    g.l2_normalize(shifted, 1e-300)
}

/// One set-abstraction level over a batch of objects.
///
/// Each object is sorted lexicographically, its centroids chosen by
/// canonical FPS, and fixed-radius neighborhoods encoded by the shared
/// two-layer network around a per-neighborhood max. `feats` rows must be
/// aligned with the objects' input row order (object-major); the sort is
/// absorbed into the feature gather, so no reordering node is needed.
/// Centroid counts clamp to the object size.
fn sa_layer_graph(
    g: &mut Graph,
    objects: &[Vec<[f64; 3]>],
    feats: Option<NodeId>,
    nodes: &SaNodes,
    bn1: &mut BatchNormState,
    bn2: &mut BatchNormState,
    cfg: &SALayerConfig,
    mode: BnMode,
) -> Result<(Vec<Vec<[f64; 3]>>, NodeId)> {
    cfg.validate()?;
    if objects.is_empty() {
        return Err(Error::Contract("set abstraction: empty batch".into()));
    }
    let mut rel = Vec::new();
    let mut gather: Vec<usize> = Vec::new();
    let mut centroids_out = Vec::with_capacity(objects.len());
    let mut offset = 0usize;
    for points in objects {
        let n = points.len();
        if n == 0 {
            return Err(Error::Contract("set abstraction: empty object".into()));
        }
        let perm = lex_sort_perm(points);
        let sorted: Vec<[f64; 3]> = perm.iter().map(|&i| points[i]).collect();
        let s = cfg.n_centroids.min(n);
        let cidx = fps(&sorted, s)?;
        let cents: Vec<[f64; 3]> = cidx.iter().map(|&i| sorted[i]).collect();
        let hoods = ball_query(&sorted, &cents, cfg.r, cfg.k)?;
        if feats.is_some() {
            for hood in &hoods {
                for &nj in &hood.neighbors {
                    gather.push(offset + perm[nj]);
                }
            }
        }
        let grouped = group_relative(&sorted, None, &cents, &hoods)?;
        rel.extend_from_slice(&grouped.data);
        centroids_out.push(cents);
        offset += n;
    }
    let rows = rel.len() / 3;
    let x = g.constant(Tensor::new(vec![rows, 3], rel)?)?;

    let pre = match feats {
        None => g.matmul(x, nodes.fc1.w)?,
        Some(f) => {
            // fc1 weight rows split as [xyz | neighbor feature]; projecting
            // features once per input row and gathering afterwards is
            // row-for-row identical to grouping first.
            let c_in = g.value(nodes.fc1.w).rows() - 3;
            if g.value(f).cols() != c_in {
                return Err(Error::Contract(format!(
                    "set abstraction: {} feature channels, layer expects {c_in}",
                    g.value(f).cols()
                )));
            }
            let wx = g.slice_rows(nodes.fc1.w, 0, 3)?;
            let wf = g.slice_rows(nodes.fc1.w, 3, c_in)?;
            let proj = g.matmul(f, wf)?;
            let gathered = g.gather_rows(proj, &gather)?;
            let hx = g.matmul(x, wx)?;
            g.add(hx, gathered)?
        }
    };
    let h = g.add_bias(pre, nodes.fc1.b)?;
    let h = bn_relu(g, h, &nodes.bn1, bn1, mode)?;
    let h = g.max_over_set(h, cfg.k)?;
    let h = linear_graph(g, h, &nodes.fc2)?;
    let h = bn_relu(g, h, &nodes.bn2, bn2, mode)?;
    Ok((centroids_out, h))
}

fn pred_head_graph(
    g: &mut Graph,
    x: NodeId,
    nodes: &HeadNodes,
    state: &mut BatchNormState,
    mode: BnMode,
) -> Result<NodeId> {
    let h = linear_graph(g, x, &nodes.fc1)?;
    let h = bn_relu(g, h, &nodes.bn, state, mode)?;
    let h = linear_graph(g, h, &nodes.fc2)?;
    unit_normalize(g, h)
}

/// Shared three-layer MLP over rows conditioned on a per-object feature:
/// the first weight matrix splits into its conditioning and per-row
/// blocks, so the conditioning product is computed once per object and
/// broadcast, which is exactly equivalent to concatenating inputs.
fn conditioned_mlp3_graph(
    g: &mut Graph,
    agg: NodeId,
    per_row: NodeId,
    rows_per_object: usize,
    nodes: &Mlp3Nodes,
    bn1: &mut BatchNormState,
    bn2: &mut BatchNormState,
    mode: BnMode,
) -> Result<NodeId> {
    let a = g.value(agg).cols();
    let d = g.value(per_row).cols();
    if g.value(nodes.fc1.w).rows() != a + d {
        return Err(Error::Contract(format!(
            "conditioned MLP: weight expects {} input channels, got {a} + {d}",
            g.value(nodes.fc1.w).rows()
        )));
    }
    let wa = g.slice_rows(nodes.fc1.w, 0, a)?;
    let wr = g.slice_rows(nodes.fc1.w, a, d)?;
    let base = g.matmul(agg, wa)?;
    let rep = g.repeat_rows(base, rows_per_object)?;
    let hr = g.matmul(per_row, wr)?;
    let h = g.add(rep, hr)?;
    let h = g.add_bias(h, nodes.fc1.b)?;
    let h = bn_relu(g, h, &nodes.bn1, bn1, mode)?;
    let h = linear_graph(g, h, &nodes.fc2)?;
    let h = bn_relu(g, h, &nodes.bn2, bn2, mode)?;
    linear_graph(g, h, &nodes.fc3)
}

/// Which auxiliary heads a forward pass should build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSelection {
    pub decode: bool,
    pub normals: bool,
}

/// Node handles and host-side geometry of one batched forward pass.
/// Row blocks are object-major: object `o` owns rows [o·s1, (o+1)·s1) of
/// `e1`, rows [o·s2, (o+1)·s2) of `e2`, and row `o` of `eg` and `agg`.
pub struct BatchForward {
    pub s1: usize,
    pub s2: usize,
    pub e1: NodeId,
    pub e2: NodeId,
    pub eg: NodeId,
    pub agg: NodeId,
    pub decoded: Option<NodeId>,
    pub pred_normals: Option<NodeId>,
    pub centroids1: Vec<Vec<[f64; 3]>>,
    pub centroids2: Vec<Vec<[f64; 3]>>,
    /// Inputs in canonical (sorted) order; predicted normal rows align
    /// with these.
    pub sorted_points: Vec<Vec<[f64; 3]>>,
    /// `sort_perms[o][j]` is the original row of sorted row `j`.
    pub sort_perms: Vec<Vec<usize>>,
}

/// Full forward pass over a batch of equally sized clouds.
pub fn forward_batch(
    g: &mut Graph,
    bound: &Bound,
    params: &mut ModelParams,
    cfg: &ModelConfig,
    clouds: &[Vec<[f64; 3]>],
    mode: BnMode,
    heads: HeadSelection,
) -> Result<BatchForward> {
    let b = clouds.len();
    if b == 0 {
        return Err(Error::Contract("forward: empty batch".into()));
    }
    let n = clouds[0].len();
    if clouds.iter().any(|c| c.len() != n) {
        return Err(Error::Contract("forward: ragged batch".into()));
    }
    if n < cfg.sa2.n_centroids {
        return Err(Error::Contract(format!(
            "forward: {n} points is below the level-2 centroid count {}",
            cfg.sa2.n_centroids
        )));
    }

    let mut sorted_points = Vec::with_capacity(b);
    let mut sort_perms = Vec::with_capacity(b);
    for cloud in clouds {
        let perm = lex_sort_perm(cloud);
        sorted_points.push(perm.iter().map(|&i| cloud[i]).collect::<Vec<_>>());
        sort_perms.push(perm);
    }

    let (centroids1, f1) = sa_layer_graph(
        g,
        &sorted_points,
        None,
        &bound.sa1,
        &mut params.sa1.bn1,
        &mut params.sa1.bn2,
        &cfg.sa1,
        mode,
    )?;
    let s1 = centroids1[0].len();
    let (centroids2, f2) = sa_layer_graph(
        g,
        &centroids1,
        Some(f1),
        &bound.sa2,
        &mut params.sa2.bn1,
        &mut params.sa2.bn2,
        &cfg.sa2,
        mode,
    )?;
    let s2 = centroids2[0].len();

    let h = linear_graph(g, f2, &bound.global_fc)?;
    let h = bn_relu(g, h, &bound.global_bn, &mut params.global_bn, mode)?;
    let g_rows = g.max_over_set(h, s2)?;

    let e1 = pred_head_graph(g, f1, &bound.pred1, &mut params.pred1.bn, mode)?;
    let e2 = pred_head_graph(g, f2, &bound.pred2, &mut params.pred2.bn, mode)?;
    let eg = pred_head_graph(g, g_rows, &bound.pred3, &mut params.pred3.bn, mode)?;

    let m1 = g.max_over_set(e1, s1)?;
    let m2 = g.max_over_set(e2, s2)?;
    let m12 = g.concat_cols(m1, m2)?;
    let agg = g.concat_cols(m12, eg)?;

    let decoded = if heads.decode {
        let grid = folding_grid(cfg.grid_side)?;
        let rows = grid.points.len();
        let mut uv = Vec::with_capacity(b * rows * 2);
        for _ in 0..b {
            for p in &grid.points {
                uv.push(p[0]);
                uv.push(p[1]);
            }
        }
        let uv = g.constant(Tensor::new(vec![b * rows, 2], uv)?)?;
        let mid = conditioned_mlp3_graph(
            g,
            agg,
            uv,
            rows,
            &bound.fold1,
            &mut params.fold1.bn1,
            &mut params.fold1.bn2,
            mode,
        )?;
        let out = conditioned_mlp3_graph(
            g,
            agg,
            mid,
            rows,
            &bound.fold2,
            &mut params.fold2.bn1,
            &mut params.fold2.bn2,
            mode,
        )?;
        Some(out)
    } else {
        None
    };

    let pred_normals = if heads.normals {
        let mut flat = Vec::with_capacity(b * n * 3);
        for obj in &sorted_points {
            for p in obj {
                flat.extend_from_slice(p);
            }
        }
        let pts = g.constant(Tensor::new(vec![b * n, 3], flat)?)?;
        let h = conditioned_mlp3_graph(
            g,
            agg,
            pts,
            n,
            &bound.normal,
            &mut params.normal_head.bn1,
            &mut params.normal_head.bn2,
            mode,
        )?;
        Some(unit_normalize(g, h)?)
    } else {
        None
    };

    Ok(BatchForward {
        s1,
        s2,
        e1,
        e2,
        eg,
        agg,
        decoded,
        pred_normals,
        centroids1,
        centroids2,
        sorted_points,
        sort_perms,
    })
}

/// Per-level centroids and features of one encoded object, plus its
/// global feature.
#[derive(Debug, Clone)]
pub struct LevelFeatures {
    pub p1: Vec<[f64; 3]>,
    pub f1: Tensor,
    pub p2: Vec<[f64; 3]>,
    pub f2: Tensor,
    pub g: Tensor,
}

/// One set-abstraction level on a single object, as plain tensors.
pub fn sa_layer(
    points: &[[f64; 3]],
    feats: Option<&Tensor>,
    layer: &mut SaLayerParams,
    cfg: &SALayerConfig,
    mode: BnMode,
) -> Result<(Vec<[f64; 3]>, Tensor)> {
    let mut g = Graph::new();
    let mut binder = Binder {
        g: &mut g,
        trainable: false,
        named: Vec::new(),
    };
    let nodes = binder.sa("sa", layer)?;
    let f_node = match feats {
        None => None,
        Some(f) => Some(g.constant(f.clone())?),
    };
    let objects = [points.to_vec()];
    let (mut cents, out) = sa_layer_graph(
        &mut g,
        &objects,
        f_node,
        &nodes,
        &mut layer.bn1,
        &mut layer.bn2,
        cfg,
        mode,
    )?;
    Ok((cents.remove(0), g.value(out).clone()))
}

/// Encodes one object through both set-abstraction levels and the global
/// pooling stage. Accepts any point count at or above the level-2
/// centroid count; centroid counts clamp to the available points, which
/// supports density sweeps below the nominal profile size.
pub fn encode(
    points: &[[f64; 3]],
    params: &mut ModelParams,
    cfg: &ModelConfig,
    mode: BnMode,
) -> Result<LevelFeatures> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, false)?;
    let fwd = forward_encode_only(&mut g, &bound, params, cfg, points, mode)?;
    Ok(LevelFeatures {
        p1: fwd.0,
        f1: g.value(fwd.1).clone(),
        p2: fwd.2,
        f2: g.value(fwd.3).clone(),
        g: g.value(fwd.4).clone(),
    })
}

#[allow(clippy::type_complexity)]
fn forward_encode_only(
    g: &mut Graph,
    bound: &Bound,
    params: &mut ModelParams,
    cfg: &ModelConfig,
    points: &[[f64; 3]],
    mode: BnMode,
) -> Result<(Vec<[f64; 3]>, NodeId, Vec<[f64; 3]>, NodeId, NodeId)> {
    if points.len() < cfg.sa2.n_centroids {
        return Err(Error::Contract(format!(
            "encode: {} points is below the level-2 centroid count {}",
            points.len(),
            cfg.sa2.n_centroids
        )));
    }
    let objects = [points.to_vec()];
    let (mut c1, f1) = sa_layer_graph(
        g,
        &objects,
        None,
        &bound.sa1,
        &mut params.sa1.bn1,
        &mut params.sa1.bn2,
        &cfg.sa1,
        mode,
    )?;
    let (mut c2, f2) = sa_layer_graph(
        g,
        &c1,
        Some(f1),
        &bound.sa2,
        &mut params.sa2.bn1,
        &mut params.sa2.bn2,
        &cfg.sa2,
        mode,
    )?;
    let s2 = c2[0].len();
    let h = linear_graph(g, f2, &bound.global_fc)?;
    let h = bn_relu(g, h, &bound.global_bn, &mut params.global_bn, mode)?;
    let g_row = g.max_over_set(h, s2)?;
    Ok((c1.remove(0), f1, c2.remove(0), f2, g_row))
}

/// Unit embeddings of both local levels and the global feature, all in
/// the shared embedding space.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub e1: Tensor,
    pub e2: Tensor,
    pub eg: Tensor,
}

pub fn predict(levels: &LevelFeatures, params: &mut ModelParams, mode: BnMode) -> Result<Embeddings> {
    let mut g = Graph::new();
    let mut binder = Binder {
        g: &mut g,
        trainable: false,
        named: Vec::new(),
    };
    let p1 = binder.head("pred1", &params.pred1)?;
    let p2 = binder.head("pred2", &params.pred2)?;
    let p3 = binder.head("pred3", &params.pred3)?;
    let f1 = g.constant(levels.f1.clone())?;
    let f2 = g.constant(levels.f2.clone())?;
    let fg = g.constant(levels.g.clone())?;
    let e1 = pred_head_graph(&mut g, f1, &p1, &mut params.pred1.bn, mode)?;
    let e2 = pred_head_graph(&mut g, f2, &p2, &mut params.pred2.bn, mode)?;
    let eg = pred_head_graph(&mut g, fg, &p3, &mut params.pred3.bn, mode)?;
    Ok(Embeddings {
        e1: g.value(e1).clone(),
        e2: g.value(e2).clone(),
        eg: g.value(eg).clone(),
    })
}

/// Aggregated representation: columnwise max over each local level's
/// embeddings concatenated with the global embedding. Width 3×embed_dim;
/// every coordinate lies in [−1, 1] because all rows are unit vectors.
pub fn aggregate(emb: &Embeddings) -> Result<Tensor> {
    let e = emb.eg.cols();
    if emb.e1.cols() != e || emb.e2.cols() != e {
        return Err(Error::Contract(format!(
            "aggregate: embedding widths differ ({}, {}, {e})",
            emb.e1.cols(),
            emb.e2.cols()
        )));
    }
    if emb.eg.rows() != 1 {
        return Err(Error::Contract(format!(
            "aggregate: expected one global row, got {}",
            emb.eg.rows()
        )));
    }
    let colmax = |t: &Tensor| -> Vec<f64> {
        let mut m = t.row(0).to_vec();
        for r in 1..t.rows() {
            for (j, v) in t.row(r).iter().enumerate() {
                if *v > m[j] {
                    m[j] = *v;
                }
            }
        }
        m
    };
    let mut data = colmax(&emb.e1);
    data.extend(colmax(&emb.e2));
    data.extend_from_slice(emb.eg.row(0));
    Tensor::new(vec![1, 3 * e], data)
}

/// Decodes the aggregated feature through both folding stages onto the
/// grid. Returns grid-side² three-dimensional points.
pub fn fold_decode(
    agg: &Tensor,
    grid: &FoldingGrid,
    params: &mut ModelParams,
    mode: BnMode,
) -> Result<Tensor> {
    let agg = as_single_row(agg)?;
    let mut g = Graph::new();
    let mut binder = Binder {
        g: &mut g,
        trainable: false,
        named: Vec::new(),
    };
    let fold1 = binder.mlp3("fold1", &params.fold1)?;
    let fold2 = binder.mlp3("fold2", &params.fold2)?;
    let a = g.constant(agg)?;
    let rows = grid.points.len();
    let mut uv = Vec::with_capacity(rows * 2);
    for p in &grid.points {
        uv.push(p[0]);
        uv.push(p[1]);
    }
    let uv = g.constant(Tensor::new(vec![rows, 2], uv)?)?;
    let mid = conditioned_mlp3_graph(
        &mut g,
        a,
        uv,
        rows,
        &fold1,
        &mut params.fold1.bn1,
        &mut params.fold1.bn2,
        mode,
    )?;
    let out = conditioned_mlp3_graph(
        &mut g,
        a,
        mid,
        rows,
        &fold2,
        &mut params.fold2.bn1,
        &mut params.fold2.bn2,
        mode,
    )?;
    Ok(g.value(out).clone())
}

/// Predicts one unit normal per input point from the aggregated feature
/// and the point coordinates.
pub fn estimate_normals(
    agg: &Tensor,
    points: &[[f64; 3]],
    params: &mut ModelParams,
    mode: BnMode,
) -> Result<Tensor> {
    if points.is_empty() {
        return Err(Error::Contract("estimate_normals: no points".into()));
    }
    let agg = as_single_row(agg)?;
    let mut g = Graph::new();
    let mut binder = Binder {
        g: &mut g,
        trainable: false,
        named: Vec::new(),
    };
    let nodes = binder.mlp3("normal", &params.normal_head)?;
    let a = g.constant(agg)?;
    let mut flat = Vec::with_capacity(points.len() * 3);
    for p in points {
        flat.extend_from_slice(p);
    }
    let pts = g.constant(Tensor::new(vec![points.len(), 3], flat)?)?;
    let h = conditioned_mlp3_graph(
        &mut g,
        a,
        pts,
        points.len(),
        &nodes,
        &mut params.normal_head.bn1,
        &mut params.normal_head.bn2,
        mode,
    )?;
    let out = unit_normalize(&mut g, h)?;
    Ok(g.value(out).clone())
}

fn as_single_row(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        1 => Tensor::new(vec![1, t.len()], t.data.clone()),
        2 if t.shape[0] == 1 => Ok(t.clone()),
        _ => Err(Error::Contract(format!(
            "expected a single feature row, got shape {:?}",
            t.shape
        ))),
    }
}

const CKPT_MAGIC: [u8; 4] = *b"GLRC";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    epoch: u32,
    adam: Option<AdamMeta>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

/// A loaded checkpoint: parameters, the config they satisfy, the epoch
/// count completed, and optimizer state when the file carries one.
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: ModelConfig,
    pub epoch: u32,
    pub adam: Option<AdamState>,
}

/// Writes the checkpoint: magic, version, a length-prefixed JSON header,
/// then every tensor as (name, rank, dims, f64 payload), little-endian
/// throughout. Optimizer moments are stored per trainable tensor under
/// `adam.m.` / `adam.v.` prefixes.
pub fn save_checkpoint(
    params: &ModelParams,
    config: &ModelConfig,
    epoch: u32,
    adam: Option<&AdamState>,
    path: &Path,
) -> Result<()> {
    params.validate(config)?;
    let trainable = params.trainable();
    if let Some(state) = adam {
        if state.m.len() != trainable.len() {
            return Err(Error::Contract(format!(
                "checkpoint: {} optimizer slots for {} trainable tensors",
                state.m.len(),
                trainable.len()
            )));
        }
    }
    let header = CheckpointHeader {
        config: config.clone(),
        epoch,
        adam: adam.map(|s| AdamMeta {
            t: s.t,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
        }),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header serialization: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(&CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut write_tensor = |name: &str, t: &Tensor| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in params.all_tensors() {
        write_tensor(&name, t);
    }
    if let Some(state) = adam {
        for ((name, _), m) in trainable.iter().zip(&state.m) {
            write_tensor(&format!("adam.m.{name}"), m);
        }
        for ((name, _), v) in trainable.iter().zip(&state.v) {
            write_tensor(&format!("adam.v.{name}"), v);
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur
        .take(4)
        .map_err(|_| Error::Format(format!("{}: too short for a checkpoint", path.display())))?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = cur.u32().map_err(|_| Error::Format(format!("{}: no version", path.display())))?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let json_len = cur.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(cur.take(json_len)?)
        .map_err(|e| Error::Format(format!("{}: header: {e}", path.display())))?;

    let mut table = std::collections::BTreeMap::new();
    while !cur.done() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Format(format!("{}: tensor name: {e}", path.display())))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = cur.take(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Integrity(format!("{}: tensor {name}: {e}", path.display())))?;
        if table.insert(name.clone(), tensor).is_some() {
            return Err(Error::Integrity(format!(
                "{}: duplicate tensor {name}",
                path.display()
            )));
        }
    }

    let mut take_named = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = table.remove(name).ok_or_else(|| {
            Error::Integrity(format!("{}: missing tensor {name}", path.display()))
        })?;
        if t.shape != shape {
            return Err(Error::Integrity(format!(
                "{}: tensor {name} has shape {:?}, config implies {shape:?}",
                path.display(),
                t.shape
            )));
        }
        Ok(t)
    };

    let cfg = header.config;
    let specs = tensor_specs(&cfg);
    let mut by_spec = Vec::with_capacity(specs.len());
    for (name, _, shape) in &specs {
        by_spec.push(take_named(name, shape)?);
    }
    let adam = match header.adam {
        None => None,
        Some(meta) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, kind, shape) in &specs {
                if kind.trainable() {
                    m.push(take_named(&format!("adam.m.{name}"), shape)?);
                    v.push(take_named(&format!("adam.v.{name}"), shape)?);
                }
            }
            Some(AdamState {
                t: meta.t,
                beta1: meta.beta1,
                beta2: meta.beta2,
                eps: meta.eps,
                m,
                v,
            })
        }
    };
    if let Some(extra) = table.keys().next() {
        return Err(Error::Integrity(format!(
            "{}: unexpected tensor {extra}",
            path.display()
        )));
    }

    let params = params_from_tensors(&cfg, by_spec)?;
    params.validate(&cfg)?;
    Ok(Checkpoint {
        params,
        config: cfg,
        epoch: header.epoch,
        adam,
    })
}

/// Rebuilds ModelParams from tensors listed in spec order.
fn params_from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<ModelParams> {
    let mut it = tensors.into_iter();
    let mut next = move || it.next().expect("spec list length matches");
    let linear = |next: &mut dyn FnMut() -> Tensor| Linear {
        weight: next(),
        bias: next(),
    };
    let bn = |next: &mut dyn FnMut() -> Tensor| {
        let mut state = BatchNormState::new(1);
        state.gamma = next();
        state.beta = next();
        state.running_mean = next();
        state.running_var = next();
        state
    };
    let sa = |next: &mut dyn FnMut() -> Tensor| SaLayerParams {
        fc1: linear(next),
        bn1: bn(next),
        fc2: linear(next),
        bn2: bn(next),
    };
    let sa1 = sa(&mut next);
    let sa2 = sa(&mut next);
    let global_fc = linear(&mut next);
    let global_bn = bn(&mut next);
    let head = |next: &mut dyn FnMut() -> Tensor| PredHead {
        fc1: linear(next),
        bn: bn(next),
        fc2: linear(next),
    };
    let pred1 = head(&mut next);
    let pred2 = head(&mut next);
    let pred3 = head(&mut next);
    let mlp3 = |next: &mut dyn FnMut() -> Tensor| Mlp3 {
        fc1: linear(next),
        bn1: bn(next),
        fc2: linear(next),
        bn2: bn(next),
        fc3: linear(next),
    };
    let fold1 = mlp3(&mut next);
    let fold2 = mlp3(&mut next);
    let normal_head = mlp3(&mut next);
    let params = ModelParams {
        sa1,
        sa2,
        global_fc,
        global_bn,
        pred1,
        pred2,
        pred3,
        fold1,
        fold2,
        normal_head,
    };
    params.validate(cfg)?;
    Ok(params)
}
