//! Python bindings: the geometry kernels, synthetic data generation,
//! and a frozen-model wrapper for feature extraction. Clouds cross the
//! boundary as sequences of (x, y, z) triples; I/O failures raise
//! `IOError`, every other library error raises `ValueError`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use glr_core::autodiff::BnMode;
use glr_core::data::{gen_synthetic, PerClassCounts, PointCloudSample, SyntheticClass};
use glr_core::error::Error;
use glr_core::evaluation::similarity_map;
use glr_core::geometry::{self, ChamferMode};
use glr_core::model::{
    aggregate, encode, estimate_normals, init_params, load_checkpoint, predict, ModelConfig,
    ModelParams,
};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Indices of `k` furthest-point samples, first point lexicographically
/// smallest, ties by lowest index.
#[pyfunction]
fn fps(points: Vec<[f64; 3]>, k: usize) -> PyResult<Vec<usize>> {
    geometry::fps(&points, k).map_err(py_err)
}

/// Per-centroid neighbor lists: up to `k` source indices within radius
/// `r`, nearest first, padded by repeating the nearest (or the centroid
/// owner when the ball is empty). Returns (centroid_index, neighbors)
/// pairs.
#[pyfunction]
fn ball_query(
    source: Vec<[f64; 3]>,
    centroids: Vec<[f64; 3]>,
    r: f64,
    k: usize,
) -> PyResult<Vec<(usize, Vec<usize>)>> {
    Ok(geometry::ball_query(&source, &centroids, r, k)
        .map_err(py_err)?
        .into_iter()
        .map(|n| (n.centroid, n.neighbors))
        .collect())
}

/// Symmetric Chamfer distance with unsquared L2 legs. `mode` is "mean"
/// (each directional sum divided by its own set size) or "sum".
#[pyfunction]
#[pyo3(signature = (a, b, mode = "mean"))]
fn chamfer(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>, mode: &str) -> PyResult<f64> {
    let mode = match mode {
        "mean" => ChamferMode::Mean,
        "sum" => ChamferMode::Sum,
        other => {
            return Err(PyValueError::new_err(format!(
                "chamfer mode {other:?}, expected \"mean\" or \"sum\""
            )))
        }
    };
    Ok(geometry::chamfer(&a, &b, mode).map_err(py_err)?.value)
}

/// The side x side folding lattice over [-0.5, 0.5]^2, row-major.
#[pyfunction]
fn folding_grid(side: usize) -> PyResult<Vec<[f64; 2]>> {
    Ok(geometry::folding_grid(side).map_err(py_err)?.points)
}

/// One cached point cloud with its surface normals and label.
#[pyclass(get_all, frozen)]
struct Sample {
    id: String,
    label: u32,
    class_name: String,
    points: Vec<[f64; 3]>,
    normals: Vec<[f64; 3]>,
}

fn into_samples(list: Vec<PointCloudSample>, class_names: &[String]) -> Vec<Sample> {
    list.into_iter()
        .map(|s| Sample {
            class_name: class_names[s.label as usize].clone(),
            id: s.id,
            label: s.label,
            points: s.points,
            normals: s.normals,
        })
        .collect()
}

/// Deterministic synthetic dataset: (class_names, train, test). Classes
/// are any of "sphere", "cuboid", "cylinder", "cone", "torus".
#[pyfunction]
fn synthetic_dataset(
    classes: Vec<String>,
    train_per_class: usize,
    test_per_class: usize,
    n_points: usize,
    seed: u64,
) -> PyResult<(Vec<String>, Vec<Sample>, Vec<Sample>)> {
    let classes: Vec<SyntheticClass> = classes
        .iter()
        .map(|s| s.parse().map_err(py_err))
        .collect::<PyResult<_>>()?;
    let split = gen_synthetic(
        &classes,
        PerClassCounts {
            train: train_per_class,
            test: test_per_class,
        },
        n_points,
        seed,
    )
    .map_err(py_err)?;
    Ok((
        split.class_names.clone(),
        into_samples(split.train, &split.class_names),
        into_samples(split.test, &split.class_names),
    ))
}

/// A frozen encoder plus its prediction heads, for inference only.
#[pyclass]
struct Model {
    params: ModelParams,
    config: ModelConfig,
}

impl Model {
    fn agg_features(&mut self, points: &[[f64; 3]]) -> PyResult<glr_core::tensor::Tensor> {
        let levels = encode(points, &mut self.params, &self.config, BnMode::Eval).map_err(py_err)?;
        let emb = predict(&levels, &mut self.params, BnMode::Eval).map_err(py_err)?;
        aggregate(&emb).map_err(py_err)
    }
}

#[pymethods]
impl Model {
    /// Fresh seeded weights for the named profile ("desk" or "paper").
    #[staticmethod]
    #[pyo3(signature = (profile = "desk", seed = 0))]
    fn init(profile: &str, seed: u64) -> PyResult<Model> {
        let config = match profile {
            "desk" => ModelConfig::desk(),
            "paper" => ModelConfig::paper(),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown profile {other:?}, expected \"desk\" or \"paper\""
                )))
            }
        };
        let params = init_params(&config, seed).map_err(py_err)?;
        Ok(Model { params, config })
    }

    /// Weights and architecture from a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Model> {
        let ck = load_checkpoint(&path).map_err(py_err)?;
        Ok(Model {
            params: ck.params,
            config: ck.config,
        })
    }

    /// The architecture as a JSON document.
    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string_pretty(&self.config).expect("config serializes")
    }

    /// Number of trainable scalars.
    fn param_count(&self) -> usize {
        self.params.trainable().iter().map(|(_, t)| t.data.len()).sum()
    }

    /// The aggregated feature vector (3 x embed_dim wide, entries in
    /// [-1, 1]): max-pooled level-1 and level-2 unit embeddings next to
    /// the global unit embedding.
    fn features(&mut self, points: Vec<[f64; 3]>) -> PyResult<Vec<f64>> {
        Ok(self.agg_features(&points)?.data)
    }

    /// Per-point unit normal estimates, one (x, y, z) triple per input
    /// point.
    fn normals(&mut self, points: Vec<[f64; 3]>) -> PyResult<Vec<[f64; 3]>> {
        let agg = self.agg_features(&points)?;
        let t = estimate_normals(&agg, &points, &mut self.params, BnMode::Eval).map_err(py_err)?;
        Ok(t.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Local-to-global cosine map: (level-1 centroids, scores in
    /// [-1, 1]).
    fn similarity(&mut self, points: Vec<[f64; 3]>) -> PyResult<(Vec<[f64; 3]>, Vec<f64>)> {
        let map = similarity_map(&mut self.params, &self.config, &points).map_err(py_err)?;
        Ok((map.centroids, map.scores))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(profile={:?}, n_points={}, embed_dim={}, params={})",
            self.config.profile,
            self.config.n_points,
            self.config.embed_dim,
            self.param_count()
        )
    }
}

// Shipped as `_native` inside the pure-Python `glr` package, which
// re-exports everything; the symbol Python dlopens comes from this name.
#[pymodule(name = "_native")]
fn glr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fps, m)?)?;
    m.add_function(wrap_pyfunction!(ball_query, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(folding_grid, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_class::<Sample>()?;
    m.add_class::<Model>()?;
    Ok(())
}
