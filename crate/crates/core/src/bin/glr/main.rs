//! Command-line driver: dataset synthesis and ingestion, training,
//! probing and sweeps, similarity-map export, and kernel benchmarks.
//!
//! Every command that writes an output directory echoes its resolved
//! parameters there as `config.lock.json`, so any artifact can be
//! regenerated from the lock file and the seeds inside it. Exit codes
//! are a stable contract: 0 ok, 2 config, 3 I/O, 4 empty ingest,
//! 5 numeric abort, 6 artifact mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use glr_core::data::{
    gen_synthetic, load_split, normalize_unit_sphere, parse_off, sample_mesh, sanitize_id,
    write_split, DatasetSplit, PerClassCounts, PointCloudSample, SyntheticClass,
};
use glr_core::error::{Error, Result};
use glr_core::evaluation::{
    evaluate, extract_features, label_fraction_sweep, pca_project_2d, robustness_sweep,
    similarity_map, train_probe, write_pca_csv, write_report_json, write_similarity_csv,
    write_sweep_csv, Protocol, SweepPoint,
};
use glr_core::geometry::{ball_query, chamfer, chamfer_brute, fps, ChamferMode};
use glr_core::model::{load_checkpoint, ModelConfig, ModelParams};
use glr_core::pipeline::{fit_with, Resume, TrainConfig};
use glr_core::rng::{derive_seed, hash_id, seeded_rng, Stream};

/// Synthetic-dataset recipe: which classes to draw and how many samples
/// of how many points. Unset JSON fields take the desk-dataset values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataSection {
    classes: Vec<String>,
    train_per_class: usize,
    test_per_class: usize,
    n_points: usize,
    seed: u64,
}

impl Default for DataSection {
    fn default() -> DataSection {
        DataSection {
            classes: SyntheticClass::ALL.iter().map(|c| c.to_string()).collect(),
            train_per_class: 200,
            test_per_class: 50,
            n_points: 256,
            seed: 0,
        }
    }
}

impl DataSection {
    fn validate(&self) -> Result<()> {
        let classes = self.parsed_classes()?;
        let mut seen = std::collections::BTreeSet::new();
        for c in &classes {
            if !seen.insert(c.to_string()) {
                return Err(Error::Config(format!("data.classes repeats {c}")));
            }
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config(
                "data.train_per_class and data.test_per_class must be at least 1".into(),
            ));
        }
        if self.n_points == 0 {
            return Err(Error::Config("data.n_points must be at least 1".into()));
        }
        Ok(())
    }

    fn parsed_classes(&self) -> Result<Vec<SyntheticClass>> {
        if self.classes.is_empty() {
            return Err(Error::Config("data.classes is empty".into()));
        }
        self.classes.iter().map(|s| s.parse()).collect()
    }
}

/// Sweep settings used by `probe` when the flags carry no explicit list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    densities: Vec<usize>,
    fractions: Vec<f64>,
    seed: u64,
}

impl Default for EvalSection {
    fn default() -> EvalSection {
        EvalSection {
            densities: vec![256, 128, 64],
            fractions: vec![1.0, 0.5, 0.25, 0.1, 0.01],
            seed: 0,
        }
    }
}

impl EvalSection {
    fn validate(&self) -> Result<()> {
        if self.densities.iter().any(|&d| d == 0) {
            return Err(Error::Config("eval.densities contains 0".into()));
        }
        if let Some(f) = self
            .fractions
            .iter()
            .find(|f| !(**f > 0.0 && **f <= 1.0))
        {
            return Err(Error::Config(format!(
                "eval.fractions entry {f} outside (0, 1]"
            )));
        }
        Ok(())
    }
}

/// Top-level experiment file: four sections, each optional, each
/// rejecting unknown keys. A missing section means the desk experiment;
/// inside a partially given section, unset fields take that section's
/// documented defaults (desk architecture for `model`, the published
/// recipe for `train`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExperimentConfig {
    data: DataSection,
    model: ModelConfig,
    train: TrainConfig,
    eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            data: DataSection::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }
}

/// Loads and validates the experiment file; no file means the default
/// desk experiment.
fn load_experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Echo of the resolved parameters a command ran with. `config` is
/// present for config-driven commands; `args` always carries the
/// command's own flags, so the pair regenerates the artifact.
#[derive(Serialize)]
struct ConfigLock<'a> {
    command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a ExperimentConfig>,
    args: serde_json::Value,
}

fn write_lock(
    out: &Path,
    command: &'static str,
    config: Option<&ExperimentConfig>,
    args: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let lock = ConfigLock { command, config, args };
    let text = serde_json::to_string_pretty(&lock).expect("lock serializes");
    let path = out.join("config.lock.json");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

#[derive(Parser)]
#[command(name = "glr", version, about = "Unsupervised point-cloud representation learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset cache described by the config.
    GenData(GenDataArgs),
    /// Build a dataset cache from a class/{train,test}/*.off mesh tree.
    IngestOff(IngestOffArgs),
    /// Train the encoder and heads; writes checkpoints and a log.
    Train(TrainArgs),
    /// Probe a checkpoint with a linear classifier, or run a sweep.
    Probe(ProbeArgs),
    /// Export per-centroid local-to-global similarity maps as CSV.
    Simmap(SimmapArgs),
    /// Time one geometry kernel and report median/p95 wall time.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Experiment JSON; omitted means the default desk experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset cache directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestOffArgs {
    /// Root of the class/{train,test}/*.off tree.
    #[arg(long)]
    dir: PathBuf,
    /// Points sampled per mesh surface.
    #[arg(long, default_value_t = 1024)]
    points: usize,
    /// Dataset cache directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Base seed for surface sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment JSON; omitted means the default desk experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset cache directory (from gen-data or ingest-off).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Continue training: bare --resume picks the newest checkpoint in
    /// --out, --resume <FILE> names one explicitly.
    #[arg(long, num_args = 0..=1)]
    resume: Option<Option<PathBuf>>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint produced by train.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset cache the probe trains and tests on.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for reports and sweep CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Experiment JSON supplying the eval section; optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Robustness sweep over these test densities (bare flag: the
    /// config's eval.densities).
    #[arg(long, num_args = 0..=1, value_delimiter = ',', conflicts_with_all = ["fractions", "cross_data"])]
    density: Option<Vec<usize>>,
    /// Label-fraction sweep over these fractions (bare flag: the
    /// config's eval.fractions).
    #[arg(long, num_args = 0..=1, value_delimiter = ',', conflicts_with = "cross_data")]
    fractions: Option<Vec<f64>>,
    /// Cross-dataset protocol: probe trained and tested on this other
    /// cache's labels, features from --ckpt's encoder.
    #[arg(long)]
    cross_data: Option<PathBuf>,
}

#[derive(Args)]
struct SimmapArgs {
    /// Checkpoint produced by train.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset cache holding the requested samples.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated sample ids to map.
    #[arg(long, value_delimiter = ',', required = true)]
    ids: Vec<String>,
    /// Output directory for the per-sample CSV maps.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum BenchKernel {
    Fps,
    Ballquery,
    Chamfer,
}

#[derive(Args)]
struct BenchArgs {
    /// Kernel to time.
    #[arg(long, value_enum)]
    kernel: BenchKernel,
    /// Input size in points.
    #[arg(long)]
    n: usize,
    /// Timed repetitions; median and p95 are taken over these.
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Optional directory for bench.json next to the stdout report.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::IngestOff(a) => cmd_ingest_off(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Probe(a) => cmd_probe(a),
        Cmd::Simmap(a) => cmd_simmap(a),
        Cmd::Bench(a) => cmd_bench(a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let exp = load_experiment(a.config.as_deref())?;
    let classes = exp.data.parsed_classes()?;
    let split = gen_synthetic(
        &classes,
        PerClassCounts {
            train: exp.data.train_per_class,
            test: exp.data.test_per_class,
        },
        exp.data.n_points,
        exp.data.seed,
    )?;
    write_split(&a.out, &split)?;
    write_lock(
        &a.out,
        "gen-data",
        Some(&exp),
        serde_json::json!({ "out": a.out.display().to_string() }),
    )?;
    println!(
        "wrote {} train + {} test samples of {} points across {} classes to {}",
        split.train.len(),
        split.test.len(),
        exp.data.n_points,
        split.class_names.len(),
        a.out.display()
    );
    Ok(())
}

/// Reads one mesh file into a normalized sample. Every error here is a
/// per-file problem the caller logs and skips.
fn ingest_one(path: &Path, points: usize, seed: u64, id: &str, label: u32) -> Result<PointCloudSample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mesh = parse_off(&bytes)?;
    let sample = sample_mesh(
        &mesh,
        points,
        derive_seed(seed, Stream::Synthesis, hash_id(id)),
        id,
        label,
    )?;
    normalize_unit_sphere(sample)
}

/// Sorted names of the subdirectories of `dir`.
fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

/// Sorted `*.off` files directly under `dir`; empty if `dir` is absent.
fn off_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_off = path
            .extension()
            .map_or(false, |x| x.eq_ignore_ascii_case("off"));
        if path.is_file() && is_off {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn cmd_ingest_off(a: IngestOffArgs) -> Result<()> {
    if a.points == 0 {
        return Err(Error::Config("--points must be at least 1".into()));
    }
    let classes = sorted_subdirs(&a.dir)?;
    if classes.is_empty() {
        return Err(Error::EmptyIngest(format!(
            "no class directories under {}",
            a.dir.display()
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut skipped = 0usize;
    for (label, (class, class_dir)) in classes.iter().enumerate() {
        for part in ["train", "test"] {
            let bucket: &mut Vec<PointCloudSample> =
                if part == "train" { &mut train } else { &mut test };
            for file in off_files(&class_dir.join(part))? {
                let stem = file
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let id = sanitize_id(&format!("{class}_{part}_{stem}"));
                match ingest_one(&file, a.points, a.seed, &id, label as u32) {
                    Ok(sample) => bucket.push(sample),
                    Err(e) => {
                        eprintln!("skipping {}: {e}", file.display());
                        skipped += 1;
                    }
                }
            }
        }
    }
    if train.is_empty() && test.is_empty() {
        return Err(Error::EmptyIngest(format!(
            "no usable OFF files under {} ({skipped} skipped)",
            a.dir.display()
        )));
    }
    let split = DatasetSplit {
        class_names: classes.into_iter().map(|(name, _)| name).collect(),
        train,
        test,
    };
    write_split(&a.out, &split)?;
    write_lock(
        &a.out,
        "ingest-off",
        None,
        serde_json::json!({
            "dir": a.dir.display().to_string(),
            "points": a.points,
            "seed": a.seed,
            "out": a.out.display().to_string(),
        }),
    )?;
    println!(
        "ingested {} train + {} test samples across {} classes to {} ({} skipped)",
        split.train.len(),
        split.test.len(),
        split.class_names.len(),
        a.out.display(),
        skipped
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let exp = load_experiment(a.config.as_deref())?;
    let split = load_split(&a.data)?;
    write_lock(
        &a.out,
        "train",
        Some(&exp),
        serde_json::json!({
            "data": a.data.display().to_string(),
            "out": a.out.display().to_string(),
            "resume": a.resume.as_ref().map(|r| match r {
                Some(p) => p.display().to_string(),
                None => "latest".to_string(),
            }),
        }),
    )?;
    let resume = match a.resume {
        None => Resume::Fresh,
        Some(None) => Resume::Latest,
        Some(Some(path)) => Resume::From(path),
    };
    let epochs = exp.train.epochs;
    let outcome = fit_with(&split, &exp.model, &exp.train, &a.out, resume, |r| {
        println!(
            "epoch {:>4}/{} total {:.6} l2g {:.6} recon {:.6} normal {:.6} lr {:.2e} {:.1}s",
            r.epoch, epochs, r.total, r.l2g, r.recon, r.normal, r.lr, r.seconds
        );
    })?;
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

/// The probed cache must hold clouds of exactly the checkpoint's point
/// count; anything else means the two artifacts belong to different
/// experiments.
fn check_artifact(split: &DatasetSplit, cfg: &ModelConfig, cache: &Path) -> Result<()> {
    if let Some(bad) = split
        .train
        .iter()
        .chain(&split.test)
        .find(|s| s.points.len() != cfg.n_points)
    {
        return Err(Error::ArtifactMismatch(format!(
            "sample {} in {} has {} points, checkpoint profile {} expects {}",
            bad.id,
            cache.display(),
            bad.points.len(),
            cfg.profile,
            cfg.n_points
        )));
    }
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let exp = load_experiment(a.config.as_deref())?;
    let ck = load_checkpoint(&a.ckpt)?;
    let mut params = ck.params;
    let model_cfg = ck.config;

    // The lock records the checkpoint's architecture, which overrides
    // whatever the experiment file said.
    let locked = ExperimentConfig {
        model: model_cfg.clone(),
        ..exp.clone()
    };
    write_lock(
        &a.out,
        "probe",
        Some(&locked),
        serde_json::json!({
            "ckpt": a.ckpt.display().to_string(),
            "data": a.data.display().to_string(),
            "out": a.out.display().to_string(),
            "density": a.density,
            "fractions": a.fractions,
            "cross_data": a.cross_data.as_ref().map(|p| p.display().to_string()),
        }),
    )?;

    let cache = a.cross_data.as_deref().unwrap_or(&a.data);
    let split = load_split(cache)?;
    check_artifact(&split, &model_cfg, cache)?;

    let train_fm = extract_features(&mut params, &model_cfg, &split.train, &split.class_names)?;
    let probe = train_probe(&train_fm)?;
    let test_fm = extract_features(&mut params, &model_cfg, &split.test, &split.class_names)?;

    if let Some(densities) = a.density {
        let densities = if densities.is_empty() { exp.eval.densities.clone() } else { densities };
        let points = robustness_sweep(
            &mut params,
            &model_cfg,
            &probe,
            &split.test,
            &split.class_names,
            &densities,
            exp.eval.seed,
        )?;
        write_sweep_points(&points, "density", &a.out, "robustness")?;
        return Ok(());
    }

    if let Some(fractions) = a.fractions {
        let fractions = if fractions.is_empty() { exp.eval.fractions.clone() } else { fractions };
        let points = label_fraction_sweep(&train_fm, &test_fm, &fractions, exp.eval.seed)?;
        write_sweep_points(&points, "fraction", &a.out, "fractions")?;
        return Ok(());
    }

    let protocol = if a.cross_data.is_some() { Protocol::CrossDataset } else { Protocol::Probe };
    let mut report = evaluate(&probe, &test_fm, protocol, None)?;
    if let Some(target) = &a.cross_data {
        report.notes.push(format!(
            "encoder from {}, probe labels from {}",
            a.ckpt.display(),
            target.display()
        ));
    }
    let report_path = a.out.join("report.json");
    write_report_json(&report, &report_path)?;
    println!(
        "{} accuracy {:.4} on {} test samples -> {}",
        report.protocol,
        report.accuracy,
        report.n_test,
        report_path.display()
    );

    // 2D map of the test features for plotting; a degenerate feature
    // matrix only costs the map, not the report.
    match pca_project_2d(&test_fm.features) {
        Ok((coords, explained)) => {
            let labels: Vec<String> = test_fm
                .labels
                .iter()
                .map(|&l| test_fm.class_names[l as usize].clone())
                .collect();
            let pca_path = a.out.join("pca.csv");
            write_pca_csv(&test_fm.ids, &labels, &coords, &pca_path)?;
            println!(
                "pca map ({:.1}% + {:.1}% variance) -> {}",
                100.0 * explained[0],
                100.0 * explained[1],
                pca_path.display()
            );
        }
        Err(Error::Degenerate(msg)) => eprintln!("skipping pca map: {msg}"),
        Err(e) => return Err(e),
    }
    Ok(())
}

/// Writes one sweep as `<stem>.csv` (setting,accuracy rows, NA for
/// skipped points) and `<stem>.json` (full per-point reports).
fn write_sweep_points(points: &[SweepPoint], setting: &str, out: &Path, stem: &str) -> Result<()> {
    let csv_path = out.join(format!("{stem}.csv"));
    write_sweep_csv(points, setting, &csv_path)?;
    let json_path = out.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(points)
        .map_err(|e| Error::Format(format!("sweep serialization: {e}")))?;
    std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    for p in points {
        match p.accuracy {
            Some(acc) => println!("{setting} {} accuracy {:.4}", p.setting, acc),
            None => println!(
                "{setting} {} skipped: {}",
                p.setting,
                p.note.as_deref().unwrap_or("no note")
            ),
        }
    }
    println!("sweep -> {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

fn cmd_simmap(a: SimmapArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let mut params: ModelParams = ck.params;
    let split = load_split(&a.data)?;
    check_artifact(&split, &ck.config, &a.data)?;
    write_lock(
        &a.out,
        "simmap",
        None,
        serde_json::json!({
            "ckpt": a.ckpt.display().to_string(),
            "data": a.data.display().to_string(),
            "ids": a.ids,
            "out": a.out.display().to_string(),
        }),
    )?;
    for id in &a.ids {
        let sample = split
            .train
            .iter()
            .chain(&split.test)
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::Config(format!("unknown sample id {id} in {}", a.data.display())))?;
        let map = similarity_map(&mut params, &ck.config, &sample.points)?;
        let path = a.out.join(format!("{id}.simmap.csv"));
        write_similarity_csv(&map, &path)?;
        println!("wrote {} ({} centroids)", path.display(), map.centroids.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    kernel: String,
    n: usize,
    reps: usize,
    median_ns: u64,
    p95_ns: u64,
    /// Brute-force over accelerated median; chamfer only.
    #[serde(skip_serializing_if = "Option::is_none")]
    speedup: Option<f64>,
}

/// Uniform cloud in [-0.5, 0.5]^3, deterministic in (n, index).
fn bench_cloud(n: usize, index: u64) -> Vec<[f64; 3]> {
    let mut rng = seeded_rng(derive_seed(0, Stream::Bench, n as u64), Stream::Bench, index);
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

/// Runs `f` once per rep and returns (median, p95) nanoseconds.
fn time_reps(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(u64, u64)> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_nanos() as u64);
    }
    times.sort_unstable();
    let median = times[(times.len() - 1) / 2];
    let p95_index = ((times.len() as f64 * 0.95).ceil() as usize).max(1) - 1;
    Ok((median, times[p95_index.min(times.len() - 1)]))
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    if a.reps == 0 {
        return Err(Error::Config("--reps must be at least 1".into()));
    }
    let cloud = bench_cloud(a.n, 0);
    let (kernel_name, median_ns, p95_ns, speedup) = match a.kernel {
        BenchKernel::Fps => {
            let k = (a.n / 4).max(1);
            let (median, p95) = time_reps(a.reps, || {
                std::hint::black_box(fps(std::hint::black_box(&cloud), k)?);
                Ok(())
            })?;
            (format!("fps(k={k})"), median, p95, None)
        }
        BenchKernel::Ballquery => {
            let centroids: Vec<[f64; 3]> = cloud.iter().step_by(4).copied().collect();
            let (r, k) = (0.3, 32);
            let (median, p95) = time_reps(a.reps, || {
                std::hint::black_box(ball_query(
                    std::hint::black_box(&cloud),
                    &centroids,
                    r,
                    k,
                )?);
                Ok(())
            })?;
            (
                format!("ballquery(r={r},k={k},centroids={})", centroids.len()),
                median,
                p95,
                None,
            )
        }
        BenchKernel::Chamfer => {
            let other = bench_cloud(a.n, 1);
            let (median, p95) = time_reps(a.reps, || {
                std::hint::black_box(chamfer(
                    std::hint::black_box(&cloud),
                    &other,
                    ChamferMode::Mean,
                )?);
                Ok(())
            })?;
            let (brute_median, _) = time_reps(a.reps, || {
                std::hint::black_box(chamfer_brute(
                    std::hint::black_box(&cloud),
                    &other,
                    ChamferMode::Mean,
                )?);
                Ok(())
            })?;
            (
                "chamfer".to_string(),
                median,
                p95,
                Some(brute_median as f64 / median as f64),
            )
        }
    };
    let report = BenchReport {
        kernel: kernel_name,
        n: a.n,
        reps: a.reps,
        median_ns,
        p95_ns,
        speedup,
    };
    let text = serde_json::to_string_pretty(&report).expect("bench report serializes");
    println!("{text}");
    if let Some(out) = a.out {
        write_lock(
            &out,
            "bench",
            None,
            serde_json::json!({ "kernel": report.kernel, "n": a.n, "reps": a.reps }),
        )?;
        let path = out.join("bench.json");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        println!("bench report -> {}", path.display());
    }
    Ok(())
}
