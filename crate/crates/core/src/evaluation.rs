//! Measurement protocol on frozen representations: feature extraction,
//! one-vs-rest linear probing, robustness and label-fraction sweeps,
//! per-centroid similarity maps, and a 2-D principal-component export.
//!
//! Everything here treats the encoder as a fixed function: batch norm
//! runs in eval mode, no augmentation is applied, and every subsampling
//! decision is keyed by explicit seeds so sweeps are reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::BnMode;
use crate::data::{subsample, PointCloudSample};
use crate::error::{Error, Result};
use crate::model::{aggregate, encode, predict, ModelConfig, ModelParams};
use crate::rng::{derive_seed, hash_id, seeded_rng, Stream};
use crate::tensor::Tensor;

/// Regularization weight of the probe's squared-hinge objective.
pub const PROBE_C: f64 = 1.0;
/// Gradient-norm stopping tolerance for probe training.
pub const PROBE_TOL: f64 = 1e-4;
/// Iteration cap for probe training.
pub const PROBE_MAX_ITERS: usize = 10_000;

/// One aggregated feature row per sample, aligned with ids and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub labels: Vec<u32>,
    /// Label index -> class name, shared by every split of a dataset.
    pub class_names: Vec<String>,
    /// `[n_samples, width]`; width is 3x embed_dim when produced by
    /// `extract_features`.
    pub features: Tensor,
}

impl FeatureMatrix {
    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if self.ids.len() != n || self.labels.len() != n {
            return Err(Error::Contract(format!(
                "feature matrix misaligned: {} rows, {} ids, {} labels",
                n,
                self.ids.len(),
                self.labels.len()
            )));
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l as usize >= self.class_names.len() {
                return Err(Error::Integrity(format!(
                    "feature row {i}: label {l} outside {} classes",
                    self.class_names.len()
                )));
            }
        }
        for (i, v) in self.features.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Integrity(format!(
                    "feature matrix entry {i} is {v}"
                )));
            }
        }
        Ok(())
    }

    /// New matrix holding the given rows, in the order given.
    pub fn subset(&self, rows: &[usize]) -> Result<FeatureMatrix> {
        let n = self.features.rows();
        let d = self.features.cols();
        if rows.is_empty() {
            return Err(Error::Contract("feature subset: no rows selected".into()));
        }
        let mut ids = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Contract(format!(
                    "feature subset: row {r} outside {n} rows"
                )));
            }
            ids.push(self.ids[r].clone());
            labels.push(self.labels[r]);
            data.extend_from_slice(self.features.row(r));
        }
        Ok(FeatureMatrix {
            ids,
            labels,
            class_names: self.class_names.clone(),
            features: Tensor::new(vec![rows.len(), d], data)?,
        })
    }
}

/// One-vs-rest linear classifier over frozen features. Row `c` of
/// `weights` scores membership in `class_labels[c]`; labels ascend so
/// argmax ties resolve to the lowest class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub class_labels: Vec<u32>,
    pub class_names: Vec<String>,
    pub weights: Tensor,
    pub biases: Vec<f64>,
    pub c: f64,
    pub tol: f64,
}

/// Which measurement produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Probe,
    Robustness,
    LabelFraction,
    CrossDataset,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Protocol::Probe => "probe",
            Protocol::Robustness => "robustness",
            Protocol::LabelFraction => "label-fraction",
            Protocol::CrossDataset => "cross-dataset",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Accuracy summary plus the probe settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    /// Density or label fraction for sweep points; absent otherwise.
    pub setting: Option<f64>,
    pub accuracy: f64,
    pub n_test: usize,
    pub per_class: Vec<ClassAccuracy>,
    pub probe_classes: Vec<String>,
    pub probe_c: f64,
    pub probe_tol: f64,
    pub notes: Vec<String>,
}

/// One sweep setting; `accuracy` is absent when the point was skipped
/// and `note` then says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub setting: f64,
    pub accuracy: Option<f64>,
    pub note: Option<String>,
    pub report: Option<EvalReport>,
}

/// Runs the frozen encoder over every sample and stacks the aggregated
/// features. Eval-mode batch norm, no augmentation; repeated calls are
/// bit-identical. `params` is mutable only because batch-norm state is
/// threaded by `&mut`; eval mode never writes to it.
pub fn extract_features(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    samples: &[PointCloudSample],
    class_names: &[String],
) -> Result<FeatureMatrix> {
    if samples.is_empty() {
        return Err(Error::Config("extract_features: no samples".into()));
    }
    let width = cfg.agg_dim();
    let mut ids = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut data = Vec::with_capacity(samples.len() * width);
    for s in samples {
        if s.points.len() < cfg.sa2.n_centroids {
            return Err(Error::Contract(format!(
                "extract_features: sample {} has {} points, below the model minimum {}",
                s.id,
                s.points.len(),
                cfg.sa2.n_centroids
            )));
        }
        let levels = encode(&s.points, params, cfg, BnMode::Eval)?;
        let emb = predict(&levels, params, BnMode::Eval)?;
        let agg = aggregate(&emb)?;
        ids.push(s.id.clone());
        labels.push(s.label);
        data.extend_from_slice(&agg.data);
    }
    let fm = FeatureMatrix {
        ids,
        labels,
        class_names: class_names.to_vec(),
        features: Tensor::new(vec![samples.len(), width], data)?,
    };
    fm.validate()?;
    Ok(fm)
}

/// Largest eigenvalue of the bias-augmented Gram matrix X'ᵀX', by
/// matrix-free power iteration from a deterministic start. The estimate
/// approaches the true value from below, so callers add headroom before
/// using it as a smoothness constant.
fn lambda_max(feats: &Tensor) -> f64 {
    let n = feats.rows();
    let d = feats.cols() + 1;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut w = vec![0.0; d];
    let mut lambda = 0.0;
    for _ in 0..500 {
        w.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let row = feats.row(i);
            let mut s = v[d - 1];
            for j in 0..d - 1 {
                s += row[j] * v[j];
            }
            for j in 0..d - 1 {
                w[j] += s * row[j];
            }
            w[d - 1] += s;
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for j in 0..d {
            v[j] = w[j] / norm;
        }
        if (norm - lambda).abs() <= 1e-9 * norm.max(1.0) {
            return norm;
        }
        lambda = norm;
    }
    lambda
}

/// Primal squared-hinge objective with the bias folded into the weights
/// via a constant augmented coordinate (so the bias is regularized,
/// matching the reference classifier's augmented-intercept convention):
/// F(w, b) = (|w|^2 + b^2)/2 + C * sum_i max(0, 1 - y_i (w.x_i + b))^2.
pub fn probe_objective(feats: &Tensor, y: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let d = feats.cols();
    let mut f = 0.5 * (w.iter().map(|x| x * x).sum::<f64>() + b * b);
    for i in 0..feats.rows() {
        let row = feats.row(i);
        let s: f64 = b + row.iter().zip(w).map(|(a, q)| a * q).sum::<f64>();
        let m = 1.0 - y[i] * s;
        if m > 0.0 {
            f += c * m * m;
        }
    }
    debug_assert_eq!(w.len(), d);
    f
}

/// Full-batch gradient descent on the binary squared-hinge objective.
/// Zero start, fixed step, stops at gradient norm `tol` or `max_iters`.
/// Returns the augmented weight vector (bias last).
fn solve_binary(
    feats: &Tensor,
    y: &[f64],
    c: f64,
    tol: f64,
    max_iters: usize,
    step: f64,
) -> Vec<f64> {
    let n = feats.rows();
    let d = feats.cols() + 1;
    let mut v = vec![0.0; d];
    let mut grad = vec![0.0; d];
    for _ in 0..max_iters {
        grad.copy_from_slice(&v);
        for i in 0..n {
            let row = feats.row(i);
            let mut s = v[d - 1];
            for j in 0..d - 1 {
                s += row[j] * v[j];
            }
            let m = 1.0 - y[i] * s;
            if m > 0.0 {
                let coef = 2.0 * c * m * y[i];
                for j in 0..d - 1 {
                    grad[j] -= coef * row[j];
                }
                grad[d - 1] -= coef;
            }
        }
        let gnorm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gnorm <= tol {
            break;
        }
        for j in 0..d {
            v[j] -= step * grad[j];
        }
    }
    v
}

/// Trains a one-vs-rest squared-hinge probe (C=1) on the given features
/// by deterministic full-batch gradient descent with step 1/(1 + 2C*s)
/// where s bounds the spectral norm of the augmented Gram matrix. The
/// objective is 1-strongly convex, so the minimizer is unique and the
/// result does not depend on sample order beyond summation rounding.
pub fn train_probe(features: &FeatureMatrix) -> Result<LinearProbe> {
    features.validate()?;
    let mut classes = features.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "probe training needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let lam = lambda_max(&features.features) * 1.05;
    let step = 1.0 / (1.0 + 2.0 * PROBE_C * lam);
    let d = features.features.cols();
    let mut weights = Vec::with_capacity(classes.len() * d);
    let mut biases = Vec::with_capacity(classes.len());
    for &cls in &classes {
        let y: Vec<f64> = features
            .labels
            .iter()
            .map(|&l| if l == cls { 1.0 } else { -1.0 })
            .collect();
        let v = solve_binary(
            &features.features,
            &y,
            PROBE_C,
            PROBE_TOL,
            PROBE_MAX_ITERS,
            step,
        );
        weights.extend_from_slice(&v[..d]);
        biases.push(v[d]);
    }
    Ok(LinearProbe {
        class_names: classes
            .iter()
            .map(|&c| features.class_names[c as usize].clone())
            .collect(),
        weights: Tensor::new(vec![classes.len(), d], weights)?,
        class_labels: classes,
        biases,
        c: PROBE_C,
        tol: PROBE_TOL,
    })
}

/// Scores every feature row against every probe class and reports
/// overall plus per-class accuracy. Argmax ties go to the lowest class
/// index. Per-class accuracies are grouped by true label, so their
/// sample-weighted average equals the overall accuracy exactly.
pub fn evaluate(
    probe: &LinearProbe,
    features: &FeatureMatrix,
    protocol: Protocol,
    setting: Option<f64>,
) -> Result<EvalReport> {
    features.validate()?;
    let n = features.features.rows();
    if features.ids.is_empty() {
        return Err(Error::Config("evaluation: empty test set".into()));
    }
    if features.features.cols() != probe.weights.cols() {
        return Err(Error::Contract(format!(
            "evaluation: feature width {} does not match probe width {}",
            features.features.cols(),
            probe.weights.cols()
        )));
    }
    let k = probe.weights.rows();
    let mut by_class: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut correct_total = 0usize;
    for i in 0..n {
        let x = features.features.row(i);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..k {
            let w = probe.weights.row(c);
            let s: f64 = probe.biases[c] + w.iter().zip(x).map(|(a, q)| a * q).sum::<f64>();
            if s > best_score {
                best_score = s;
                best = c;
            }
        }
        let truth = features.labels[i];
        let hit = probe.class_labels[best] == truth;
        let slot = by_class.entry(truth).or_insert((0, 0));
        slot.1 += 1;
        if hit {
            slot.0 += 1;
            correct_total += 1;
        }
    }
    let per_class = by_class
        .iter()
        .map(|(&label, &(correct, total))| ClassAccuracy {
            class: features.class_names[label as usize].clone(),
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        })
        .collect();
    Ok(EvalReport {
        protocol,
        setting,
        accuracy: correct_total as f64 / n as f64,
        n_test: n,
        per_class,
        probe_classes: probe.class_names.clone(),
        probe_c: probe.c,
        probe_tol: probe.tol,
        notes: Vec::new(),
    })
}

/// Evaluates one probe (trained on full-density features) against test
/// sets thinned to each requested density. Subsampling is keyed per
/// (sample, density); a density equal to a sample's point count leaves
/// it untouched, so the full density reproduces the baseline exactly.
/// Densities below the model minimum are recorded as skipped.
pub fn robustness_sweep(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    probe: &LinearProbe,
    test: &[PointCloudSample],
    class_names: &[String],
    densities: &[usize],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if test.is_empty() {
        return Err(Error::Config("robustness sweep: empty test set".into()));
    }
    if densities.is_empty() {
        return Err(Error::Config("robustness sweep: no densities requested".into()));
    }
    let available = test.iter().map(|s| s.points.len()).min().unwrap_or(0);
    for &d in densities {
        if d > available {
            return Err(Error::Config(format!(
                "robustness sweep: density {d} exceeds the smallest test sample ({available} points)"
            )));
        }
    }
    let mut out = Vec::with_capacity(densities.len());
    for &dens in densities {
        if dens < cfg.sa2.n_centroids {
            out.push(SweepPoint {
                setting: dens as f64,
                accuracy: None,
                note: Some(format!(
                    "skipped: density {dens} below model minimum {}",
                    cfg.sa2.n_centroids
                )),
                report: None,
            });
            continue;
        }
        let thinned = test
            .iter()
            .map(|s| {
                if s.points.len() == dens {
                    Ok(s.clone())
                } else {
                    let sd = derive_seed(
                        derive_seed(seed, Stream::Subsample, dens as u64),
                        Stream::Subsample,
                        hash_id(&s.id),
                    );
                    subsample(s, dens, sd)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let feats = extract_features(params, cfg, &thinned, class_names)?;
        let report = evaluate(probe, &feats, Protocol::Robustness, Some(dens as f64))?;
        out.push(SweepPoint {
            setting: dens as f64,
            accuracy: Some(report.accuracy),
            note: None,
            report: Some(report),
        });
    }
    Ok(out)
}

/// Retrains the probe on stratified fractions of the training features
/// (representation fixed) and evaluates each on the full test set. Per
/// class, floor(fraction * count) rows are kept; classes that round to
/// zero are dropped from that probe and flagged. Fraction 1.0 keeps
/// every row in its original order, reproducing the baseline exactly.
pub fn label_fraction_sweep(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    train.validate()?;
    test.validate()?;
    if fractions.is_empty() {
        return Err(Error::Config("label-fraction sweep: no fractions requested".into()));
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) || !f.is_finite() {
            return Err(Error::Config(format!(
                "label-fraction sweep: fraction {f} outside (0, 1]"
            )));
        }
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in train.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut out = Vec::with_capacity(fractions.len());
    for &frac in fractions {
        let mut rows: Vec<usize> = Vec::new();
        let mut notes: Vec<String> = Vec::new();
        for (&cls, idxs) in &by_class {
            // The epsilon keeps exactly representable products like
            // 0.25 * 200 from flooring one short.
            let keep = ((frac * idxs.len() as f64) + 1e-9).floor() as usize;
            let keep = keep.min(idxs.len());
            if keep == 0 {
                notes.push(format!(
                    "class {} dropped at fraction {frac}: 0 of {} samples selected",
                    train.class_names[cls as usize],
                    idxs.len()
                ));
                continue;
            }
            if keep == idxs.len() {
                rows.extend_from_slice(idxs);
                continue;
            }
            let mut rng = seeded_rng(
                derive_seed(seed, Stream::Subsample, frac.to_bits()),
                Stream::Subsample,
                u64::from(cls),
            );
            let mut pool = idxs.clone();
            for i in 0..keep {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            let mut sel = pool[..keep].to_vec();
            sel.sort_unstable();
            rows.extend(sel);
        }
        rows.sort_unstable();
        let mut kept_classes: Vec<u32> = rows.iter().map(|&r| train.labels[r]).collect();
        kept_classes.sort_unstable();
        kept_classes.dedup();
        if kept_classes.len() < 2 {
            out.push(SweepPoint {
                setting: frac,
                accuracy: None,
                note: Some(format!(
                    "skipped: fewer than 2 classes survive at fraction {frac}"
                )),
                report: None,
            });
            continue;
        }
        let sub = train.subset(&rows)?;
        let probe = train_probe(&sub)?;
        let mut report = evaluate(&probe, test, Protocol::LabelFraction, Some(frac))?;
        report.notes.extend(notes.iter().cloned());
        out.push(SweepPoint {
            setting: frac,
            accuracy: Some(report.accuracy),
            note: if notes.is_empty() {
                None
            } else {
                Some(notes.join("; "))
            },
            report: Some(report),
        });
    }
    Ok(out)
}

/// Level-1 centroids with their similarity to the global embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub centroids: Vec<[f64; 3]>,
    pub scores: Vec<f64>,
}

/// Dot product of each level-1 embedding row with the global embedding.
/// Both sides are unit vectors, so every score is a cosine in [-1, 1].
pub fn similarity_map(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    points: &[[f64; 3]],
) -> Result<SimilarityMap> {
    if points.len() < cfg.sa2.n_centroids {
        return Err(Error::Contract(format!(
            "similarity_map: {} points, below the model minimum {}",
            points.len(),
            cfg.sa2.n_centroids
        )));
    }
    let levels = encode(points, params, cfg, BnMode::Eval)?;
    let emb = predict(&levels, params, BnMode::Eval)?;
    let global = emb.eg.row(0);
    let mut scores = Vec::with_capacity(emb.e1.rows());
    for i in 0..emb.e1.rows() {
        let s: f64 = emb.e1.row(i).iter().zip(global).map(|(a, b)| a * b).sum();
        if !s.is_finite() || s.abs() > 1.0 + 1e-9 {
            return Err(Error::Integrity(format!(
                "similarity score {s} for centroid {i} is not a cosine"
            )));
        }
        scores.push(s);
    }
    Ok(SimilarityMap {
        centroids: levels.p1,
        scores,
    })
}

/// Mean-centers the rows and projects them onto the top two principal
/// directions, found by power iteration with deflation (tolerance 1e-9
/// on the iterate). Each direction's sign is fixed so its largest-
/// magnitude component is positive. Returns the `[n, 2]` coordinates and
/// the two explained-variance fractions.
pub fn pca_project_2d(features: &Tensor) -> Result<(Tensor, [f64; 2])> {
    if features.rank() != 2 {
        return Err(Error::Contract(format!(
            "pca: expected a rank-2 matrix, got shape {:?}",
            features.shape
        )));
    }
    let n = features.rows();
    let d = features.cols();
    if n < 3 {
        return Err(Error::Contract(format!(
            "pca: needs at least 3 samples, got {n}"
        )));
    }
    if d < 2 {
        return Err(Error::Contract(format!(
            "pca: needs at least 2 feature columns, got {d}"
        )));
    }
    let raw_sq: f64 = features.data.iter().map(|v| v * v).sum();
    let mut x = features.data.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[i * d + j] -= mean;
        }
    }
    let total: f64 = x.iter().map(|v| v * v).sum();
    // Centering identical values only leaves rounding residue; treat
    // anything below the residue scale as zero variance.
    if total <= raw_sq * 1e-24 + 1e-300 {
        return Err(Error::Degenerate("pca: zero-variance features".into()));
    }
    let mul = |v: &[f64], out: &mut Vec<f64>| {
        out.iter_mut().for_each(|w| *w = 0.0);
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let s: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            for j in 0..d {
                out[j] += s * row[j];
            }
        }
    };
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut lambdas = [0.0f64; 2];
    for k in 0..2usize {
        let mut rng = seeded_rng(0, Stream::Probe, 1_000 + k as u64);
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for dir in &dirs {
            let p: f64 = v.iter().zip(dir).map(|(a, b)| a * b).sum();
            for j in 0..d {
                v[j] -= p * dir[j];
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in &mut v {
            *a /= norm;
        }
        let mut w = vec![0.0; d];
        let mut prev = vec![0.0; d];
        for _ in 0..100_000 {
            mul(&v, &mut w);
            for dir in &dirs {
                let p: f64 = w.iter().zip(dir).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    w[j] -= p * dir[j];
                }
            }
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 {
                // Remaining subspace has zero variance; keep the start.
                break;
            }
            prev.copy_from_slice(&v);
            for j in 0..d {
                v[j] = w[j] / norm;
            }
            let drift: f64 = v
                .iter()
                .zip(&prev)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if drift <= 1e-9 {
                break;
            }
        }
        let mut arg = 0usize;
        let mut mag = 0.0f64;
        for (j, a) in v.iter().enumerate() {
            if a.abs() > mag {
                mag = a.abs();
                arg = j;
            }
        }
        if v[arg] < 0.0 {
            for a in &mut v {
                *a = -*a;
            }
        }
        mul(&v, &mut w);
        lambdas[k] = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        dirs.push(v);
    }
    let mut coords = Vec::with_capacity(n * 2);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        for dir in &dirs {
            coords.push(row.iter().zip(dir).map(|(a, b)| a * b).sum());
        }
    }
    Ok((
        Tensor::new(vec![n, 2], coords)?,
        [lambdas[0] / total, lambdas[1] / total],
    ))
}

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Two-column CSV, one row per requested setting; skipped points keep
/// their row with an `NA` accuracy so the sweep stays complete.
pub fn write_sweep_csv(points: &[SweepPoint], setting_name: &str, path: &Path) -> Result<()> {
    let mut out = format!("{setting_name},accuracy\n");
    for p in points {
        match p.accuracy {
            Some(a) => out.push_str(&format!("{},{a}\n", p.setting)),
            None => out.push_str(&format!("{},NA\n", p.setting)),
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_similarity_csv(map: &SimilarityMap, path: &Path) -> Result<()> {
    if map.centroids.len() != map.scores.len() {
        return Err(Error::Contract(format!(
            "similarity map misaligned: {} centroids, {} scores",
            map.centroids.len(),
            map.scores.len()
        )));
    }
    let mut out = String::from("x,y,z,score\n");
    for (p, s) in map.centroids.iter().zip(&map.scores) {
        out.push_str(&format!("{},{},{},{s}\n", p[0], p[1], p[2]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Plot-ready projection rows; ids and labels must be CSV-safe, which
/// the ingestion pipeline's id sanitizer guarantees.
pub fn write_pca_csv(
    ids: &[String],
    labels: &[String],
    coords: &Tensor,
    path: &Path,
) -> Result<()> {
    if coords.rank() != 2 || coords.cols() != 2 || ids.len() != coords.rows() || labels.len() != coords.rows() {
        return Err(Error::Contract(format!(
            "pca export misaligned: {} ids, {} labels, coords {:?}",
            ids.len(),
            labels.len(),
            coords.shape
        )));
    }
    let mut out = String::from("id,label,u,v\n");
    for i in 0..coords.rows() {
        let r = coords.row(i);
        out.push_str(&format!("{},{},{},{}\n", ids[i], labels[i], r[0], r[1]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
