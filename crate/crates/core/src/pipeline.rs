//! The unsupervised training loop: seeded batching, learning-rate and
//! batch-norm momentum schedules, per-epoch logging, checkpointing every
//! twenty epochs, and bit-identical resume.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, BnMode, Graph};
use crate::data::{augment, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::{
    bind_params, forward_batch, init_params, load_checkpoint, save_checkpoint, HeadSelection,
    ModelConfig, ModelParams,
};
use crate::objectives::{loss_glr, LossFlags, MetricLossConfig};
use crate::rng::{derive_seed, hash_id, seeded_rng, Stream};
use crate::tensor::Tensor;

/// Epoch interval between periodic checkpoints.
pub const CHECKPOINT_EVERY: u32 = 20;

/// Training-log file name inside the output directory.
pub const TRAIN_LOG_NAME: &str = "train_log.jsonl";

/// Final-checkpoint file name inside the output directory.
pub const FINAL_CHECKPOINT_NAME: &str = "ckpt-final.glrc";

/// Hyperparameters of one training run. Unset JSON fields take the
/// published-recipe defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub profile: String,
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: u32,
    pub bn_momentum_start: f64,
    pub bn_momentum_decay: f64,
    pub bn_momentum_every: u32,
    pub bn_momentum_floor: f64,
    pub seed: u64,
    pub losses: LossFlags,
    pub oriented_normals: bool,
    pub metric: MetricLossConfig,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            profile: "paper".into(),
            epochs: 200,
            batch_size: 32,
            base_lr: 0.001,
            lr_decay: 0.7,
            lr_decay_every: 20,
            bn_momentum_start: 0.9,
            bn_momentum_decay: 0.5,
            bn_momentum_every: 20,
            bn_momentum_floor: 0.01,
            seed: 0,
            losses: LossFlags::all(),
            oriented_normals: true,
            metric: MetricLossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults: small batches and the sixty-epoch budget.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            profile: "desk".into(),
            epochs: 60,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        for (name, v) in [
            ("lr_decay", self.lr_decay),
            ("bn_momentum_decay", self.bn_momentum_decay),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} {v} must lie in (0, 1)")));
            }
        }
        if self.lr_decay_every == 0 || self.bn_momentum_every == 0 {
            return Err(Error::Config("schedule intervals must be at least 1".into()));
        }
        if !(self.bn_momentum_start > 0.0 && self.bn_momentum_start < 1.0) {
            return Err(Error::Config(format!(
                "bn_momentum_start {} must lie in (0, 1)",
                self.bn_momentum_start
            )));
        }
        if !(self.bn_momentum_floor > 0.0 && self.bn_momentum_floor < 1.0) {
            return Err(Error::Config(format!(
                "bn_momentum_floor {} must lie in (0, 1)",
                self.bn_momentum_floor
            )));
        }
        if !self.losses.any() {
            return Err(Error::Config("at least one loss component must be enabled".into()));
        }
        self.metric.validate()
    }

    /// Stepped exponential decay: base · decay^⌊epoch/every⌋.
    pub fn lr_schedule(&self, epoch: u32) -> f64 {
        self.base_lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Same stepped decay for batch-norm momentum, clamped to the floor.
    pub fn bn_momentum_schedule(&self, epoch: u32) -> f64 {
        let v = self.bn_momentum_start
            * self.bn_momentum_decay.powi((epoch / self.bn_momentum_every) as i32);
        v.max(self.bn_momentum_floor)
    }
}

/// One completed epoch: per-component loss averages (weighted by object
/// count), the schedule values used, and wall time. `seconds` is the one
/// field exempt from the determinism contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: u32,
    pub l2g: f64,
    pub recon: f64,
    pub normal: f64,
    pub total: f64,
    pub lr: f64,
    pub bn_momentum: f64,
    pub seconds: f64,
}

/// Shuffles the training ids with a stream keyed by (seed, epoch) and
/// chunks them into batches. The final short batch is kept; a trailing
/// singleton is merged into the previous batch (training-mode batch norm
/// needs at least one companion row at the global level).
pub fn make_batches(
    split: &DatasetSplit,
    m: usize,
    epoch: u32,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    if m == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if split.train.is_empty() {
        return Err(Error::Config("cannot batch an empty training split".into()));
    }
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut rng = seeded_rng(derive_seed(seed, Stream::Batching, epoch as u64), Stream::Batching, 0);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<String>> = order
        .chunks(m)
        .map(|c| c.iter().map(|&i| split.train[i].id.clone()).collect())
        .collect();
    if batches.len() >= 2 && batches.last().map(Vec::len) == Some(1) {
        let last = batches.pop().expect("checked len");
        batches.last_mut().expect("len >= 1").extend(last);
    }
    Ok(batches)
}

fn augment_seed(base: u64, epoch: u32, id: &str) -> u64 {
    derive_seed(derive_seed(base, Stream::Augment, epoch as u64), Stream::Augment, hash_id(id))
}

/// Runs one epoch: for every batch, augment, forward in train mode with
/// the scheduled batch-norm momentum, evaluate the combined loss,
/// backpropagate, and take one Adam step at the scheduled rate. Returns
/// the epoch's object-weighted loss averages.
pub fn train_epoch(
    params: &mut ModelParams,
    adam: &mut AdamState,
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    epoch: u32,
) -> Result<TrainRecord> {
    let start = Instant::now();
    let lr = cfg.lr_schedule(epoch);
    let momentum = cfg.bn_momentum_schedule(epoch);
    for bn in params.bn_states_mut() {
        bn.momentum = momentum;
    }
    let heads = HeadSelection {
        decode: cfg.losses.recon,
        normals: cfg.losses.normal,
    };

    let mut index = std::collections::BTreeMap::new();
    for (i, s) in split.train.iter().enumerate() {
        index.insert(s.id.as_str(), i);
    }

    let batches = make_batches(split, cfg.batch_size, epoch, cfg.seed)?;
    let mut sums = [0.0f64; 4];
    let mut objects = 0usize;
    for ids in &batches {
        let mut clouds = Vec::with_capacity(ids.len());
        let mut gt_normals = Vec::with_capacity(ids.len());
        for id in ids {
            let &i = index
                .get(id.as_str())
                .ok_or_else(|| Error::Contract(format!("batch references unknown id {id}")))?;
            let aug = augment(&split.train[i], augment_seed(cfg.seed, epoch, id));
            clouds.push(aug.points);
            gt_normals.push(aug.normals);
        }

        let mut g = Graph::new();
        let bound = bind_params(&mut g, params, true)?;
        let fwd = forward_batch(&mut g, &bound, params, model_cfg, &clouds, BnMode::Train, heads)?;
        let (bd, loss) = loss_glr(
            &mut g,
            &fwd,
            Some(&gt_normals),
            &cfg.metric,
            cfg.losses,
            cfg.oriented_normals,
        )?;
        if !bd.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {} on batch [{}]: l2g={} recon={} normal={}",
                epoch + 1,
                ids.join(", "),
                bd.l2g,
                bd.recon,
                bd.normal
            )));
        }
        g.backward(loss)?;

        let grads: Vec<Tensor> = bound
            .named
            .iter()
            .map(|&(_, node)| match g.grad(node) {
                Some(t) => t.clone(),
                None => Tensor::zeros(&g.value(node).shape),
            })
            .collect();
        let mut named = params.trainable_mut();
        adam_step(
            adam,
            lr,
            named
                .iter_mut()
                .zip(&grads)
                .map(|((name, value), grad)| (name.as_str(), &mut **value, grad)),
        )?;

        let b = ids.len() as f64;
        sums[0] += bd.l2g * b;
        sums[1] += bd.recon * b;
        sums[2] += bd.normal * b;
        sums[3] += bd.total * b;
        objects += ids.len();
    }

    let n = objects as f64;
    Ok(TrainRecord {
        epoch: epoch + 1,
        l2g: sums[0] / n,
        recon: sums[1] / n,
        normal: sums[2] / n,
        total: sums[3] / n,
        lr,
        bn_momentum: momentum,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// A finished (or resumed-to-finish) training run.
pub struct FitOutcome {
    pub records: Vec<TrainRecord>,
    pub final_checkpoint: PathBuf,
}

fn checkpoint_name(completed: u32) -> String {
    format!("ckpt-{completed:05}.glrc")
}

fn read_log(path: &Path) -> Result<Vec<TrainRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrainRecord = serde_json::from_str(line).map_err(|e| {
            Error::Format(format!("{}: log line {}: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_log(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serializes"));
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn append_log(path: &Path, record: &TrainRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record).expect("record serializes"))
        .map_err(|e| Error::io(path, e))
}

/// Latest checkpoint in `dir` by completed-epoch count, if any.
fn find_latest_checkpoint(dir: &Path) -> Result<Option<(u32, PathBuf)>> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut best: Option<(u32, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if !(name.starts_with("ckpt-") && name.ends_with(".glrc")) {
            continue;
        }
        let path = entry.path();
        let ck = load_checkpoint(&path)?;
        if best.as_ref().map_or(true, |(e, _)| ck.epoch > *e) {
            best = Some((ck.epoch, path));
        }
    }
    Ok(best)
}

/// Where a training run picks up from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resume {
    /// Initialize from the seed, ignoring any checkpoints on disk.
    Fresh,
    /// Continue from the newest checkpoint in the output directory,
    /// or from scratch if there is none.
    Latest,
    /// Continue from one specific checkpoint file.
    From(PathBuf),
}

/// Trains from scratch, or continues per [`Resume`]. Writes the
/// JSON-lines log, a checkpoint every [`CHECKPOINT_EVERY`] epochs, and
/// a final checkpoint; all checkpoint bytes are determined by
/// (configs, data, seed), so a resumed run finishes byte-identical to
/// an uninterrupted one.
pub fn fit(
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Resume,
) -> Result<FitOutcome> {
    fit_with(split, model_cfg, cfg, out_dir, resume, |_| {})
}

/// [`fit`] with a per-epoch observer, called after each record is
/// appended to the log.
pub fn fit_with(
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Resume,
    mut on_epoch: impl FnMut(&TrainRecord),
) -> Result<FitOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    split.validate()?;
    if cfg.profile != model_cfg.profile {
        return Err(Error::Config(format!(
            "training profile {} does not match model profile {}",
            cfg.profile, model_cfg.profile
        )));
    }
    if let Some(bad) = split
        .train
        .iter()
        .find(|s| s.points.len() != model_cfg.n_points)
    {
        return Err(Error::Config(format!(
            "sample {} has {} points, profile expects {}",
            bad.id,
            bad.points.len(),
            model_cfg.n_points
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(TRAIN_LOG_NAME);

    let mut params;
    let mut adam;
    let mut start_epoch = 0u32;
    let mut records: Vec<TrainRecord> = Vec::new();
    let resume_from = match resume {
        Resume::Fresh => None,
        Resume::Latest => find_latest_checkpoint(out_dir)?,
        Resume::From(path) => Some((load_checkpoint(&path)?.epoch, path)),
    };
    match resume_from {
        Some((epoch, path)) => {
            let ck = load_checkpoint(&path)?;
            if ck.config != *model_cfg {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            adam = ck.adam.ok_or_else(|| {
                Error::Integrity(format!(
                    "checkpoint {} carries no optimizer state to resume from",
                    path.display()
                ))
            })?;
            params = ck.params;
            start_epoch = epoch;
            if log_path.exists() {
                records = read_log(&log_path)?;
                records.retain(|r| r.epoch <= start_epoch);
            }
            write_log(&log_path, &records)?;
        }
        None => {
            params = init_params(model_cfg, cfg.seed)?;
            adam = AdamState::new(&params.trainable_shapes());
            write_log(&log_path, &[])?;
        }
    }
    if start_epoch > cfg.epochs {
        return Err(Error::Config(format!(
            "resumed checkpoint has {} completed epochs, past the budget of {}",
            start_epoch, cfg.epochs
        )));
    }

    for epoch in start_epoch..cfg.epochs {
        let record = train_epoch(&mut params, &mut adam, split, model_cfg, cfg, epoch)?;
        append_log(&log_path, &record)?;
        on_epoch(&record);
        records.push(record);
        let completed = epoch + 1;
        if completed % CHECKPOINT_EVERY == 0 {
            save_checkpoint(
                &params,
                model_cfg,
                completed,
                Some(&adam),
                &out_dir.join(checkpoint_name(completed)),
            )?;
        }
    }

    let final_path = out_dir.join(FINAL_CHECKPOINT_NAME);
    save_checkpoint(&params, model_cfg, cfg.epochs, Some(&adam), &final_path)?;
    Ok(FitOutcome {
        records,
        final_checkpoint: final_path,
    })
}
