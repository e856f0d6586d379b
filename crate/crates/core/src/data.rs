//! Dataset provisioning: a five-class synthetic shape generator with
//! analytic normals, an OFF mesh parser with area-weighted surface
//! sampling, unit-sphere normalization, train-time augmentation, density
//! subsampling, and the binary per-sample cache with its JSON manifest.
//!
//! All generation is pure given (input, seed). Per-sample seeds are
//! derived as `derive_seed(seed, Stream::Synthesis, global_index)`, so a
//! parallel implementation would produce byte-identical output.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};

/// One point cloud with per-point surface normals.
///
/// Cached samples satisfy: every normal unit within 1e-6, every point
/// within radius 1 + 1e-9 of the origin, and `points.len() == normals.len()`.
/// Transient samples produced by [`augment`] intentionally leave the unit
/// sphere; they are never written to the cache.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudSample {
    pub id: String,
    pub label: u32,
    pub points: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
}

impl PointCloudSample {
    /// Checks the cached-sample invariants listed on the type.
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.normals.len() {
            return Err(Error::Integrity(format!(
                "sample {}: {} points vs {} normals",
                self.id,
                self.points.len(),
                self.normals.len()
            )));
        }
        if self.points.is_empty() {
            return Err(Error::Integrity(format!("sample {}: empty", self.id)));
        }
        for (i, n) in self.normals.iter().enumerate() {
            let len = norm(n);
            if (len - 1.0).abs() > 1e-6 {
                return Err(Error::Integrity(format!(
                    "sample {}: normal {i} has length {len}",
                    self.id
                )));
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Integrity(format!(
                    "sample {}: point {i} not finite",
                    self.id
                )));
            }
            if norm(p) > 1.0 + 1e-9 {
                return Err(Error::Integrity(format!(
                    "sample {}: point {i} outside the unit sphere (radius {})",
                    self.id,
                    norm(p)
                )));
            }
        }
        Ok(())
    }
}

/// A dataset split: disjoint train and test sample lists plus the class
/// name table. Labels index into `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub class_names: Vec<String>,
    pub train: Vec<PointCloudSample>,
    pub test: Vec<PointCloudSample>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let classes = self.class_names.len() as u32;
        let mut seen = std::collections::BTreeSet::new();
        for s in self.train.iter().chain(&self.test) {
            if s.label >= classes {
                return Err(Error::Integrity(format!(
                    "sample {}: label {} outside {} classes",
                    s.id, s.label, classes
                )));
            }
            if !seen.insert(s.id.clone()) {
                return Err(Error::Integrity(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }
}

/// Triangle mesh carrier for OFF ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

/// The five synthetic classes. Order is the label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticClass {
    Sphere,
    Cuboid,
    Cylinder,
    Cone,
    Torus,
}

impl SyntheticClass {
    pub const ALL: [SyntheticClass; 5] = [
        SyntheticClass::Sphere,
        SyntheticClass::Cuboid,
        SyntheticClass::Cylinder,
        SyntheticClass::Cone,
        SyntheticClass::Torus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticClass::Sphere => "sphere",
            SyntheticClass::Cuboid => "cuboid",
            SyntheticClass::Cylinder => "cylinder",
            SyntheticClass::Cone => "cone",
            SyntheticClass::Torus => "torus",
        }
    }
}

impl FromStr for SyntheticClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SyntheticClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown class name {s:?}")))
    }
}

impl fmt::Display for SyntheticClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-class sample counts for synthetic generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerClassCounts {
    pub train: usize,
    pub test: usize,
}

/// Generates the synthetic dataset: `per_class` samples for each class,
/// each a fresh surface sampling of that class's shape with every
/// defining radius jittered independently, rotated by a random angle
/// about the z axis and normalized to the unit sphere.
///
/// Per-sample draw order: rotation angle, each defining radius in the
/// class's fixed parameter order, then surface points. Deterministic
/// given `seed`; different samples never share an RNG stream.
pub fn gen_synthetic(
    classes: &[SyntheticClass],
    per_class: PerClassCounts,
    n_points: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if classes.is_empty() {
        return Err(Error::Contract("gen_synthetic: no classes".into()));
    }
    for (i, c) in classes.iter().enumerate() {
        if classes[..i].contains(c) {
            return Err(Error::Config(format!("duplicate class {c}")));
        }
    }
    if n_points < 16 {
        return Err(Error::Contract(format!(
            "gen_synthetic: n_points {n_points} < 16"
        )));
    }
    if per_class.train + per_class.test == 0 {
        return Err(Error::Contract("gen_synthetic: zero samples per class".into()));
    }

    let group = per_class.train + per_class.test;
    let mut split = DatasetSplit {
        class_names: classes.iter().map(|c| c.name().to_string()).collect(),
        train: Vec::with_capacity(classes.len() * per_class.train),
        test: Vec::with_capacity(classes.len() * per_class.test),
    };
    for (label, &class) in classes.iter().enumerate() {
        for k in 0..group {
            let global = (label * group + k) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Synthesis, global));
            let (split_name, idx) = if k < per_class.train {
                ("train", k)
            } else {
                ("test", k - per_class.train)
            };
            let id = format!("{}_{}_{:04}", class.name(), split_name, idx);
            let sample = synth_sample(class, &mut rng, n_points, id, label as u32)?;
            if k < per_class.train {
                split.train.push(sample);
            } else {
                split.test.push(sample);
            }
        }
    }
    split.validate()?;
    Ok(split)
}

/// Canonical proportions per class, each scaled by an independent jitter
/// draw per defining radius. A uniform scale of a whole shape is cancelled
/// by the later unit-sphere normalization, so the independent draws are
/// what give a class its intra-class variation: boxes of varying aspect,
/// squat and tall cylinders and cones, fat and thin torus tubes. Rotation
/// about z and surface-sampling noise supply the rest.
const RADIUS_JITTER: (f64, f64) = (0.7, 1.0);
const CUBOID_HALF_EXTENTS: [f64; 3] = [1.0, 0.75, 0.5];
const CYLINDER_RADIUS: f64 = 0.5;
const CYLINDER_HALF_HEIGHT: f64 = 1.0;
const CONE_RADIUS: f64 = 0.7;
const CONE_HEIGHT: f64 = 1.6;
const TORUS_RING: f64 = 1.0;
const TORUS_TUBE: f64 = 0.3;

fn synth_sample(
    class: SyntheticClass,
    rng: &mut ChaCha8Rng,
    n_points: usize,
    id: String,
    label: u32,
) -> Result<PointCloudSample> {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(RADIUS_JITTER.0..RADIUS_JITTER.1);
    let (mut points, mut normals) = match class {
        SyntheticClass::Sphere => {
            let r = jitter(rng);
            sample_sphere(rng, n_points, r)
        }
        SyntheticClass::Cuboid => {
            let he = [
                jitter(rng) * CUBOID_HALF_EXTENTS[0],
                jitter(rng) * CUBOID_HALF_EXTENTS[1],
                jitter(rng) * CUBOID_HALF_EXTENTS[2],
            ];
            sample_cuboid(rng, n_points, he)
        }
        SyntheticClass::Cylinder => {
            let (r, h) = (jitter(rng) * CYLINDER_RADIUS, jitter(rng) * CYLINDER_HALF_HEIGHT);
            sample_cylinder(rng, n_points, r, h)
        }
        SyntheticClass::Cone => {
            let (r, h) = (jitter(rng) * CONE_RADIUS, jitter(rng) * CONE_HEIGHT);
            sample_cone(rng, n_points, r, h)
        }
        SyntheticClass::Torus => {
            let (ring, tube) = (jitter(rng) * TORUS_RING, jitter(rng) * TORUS_TUBE);
            sample_torus(rng, n_points, ring, tube)
        }
    };
    rotate_z(&mut points, theta);
    rotate_z(&mut normals, theta);
    let mut sample = PointCloudSample {
        id,
        label,
        points,
        normals,
    };
    sample = normalize_unit_sphere(sample)?;
    Ok(sample)
}

/// Uniform sampling of a sphere of radius `r` centered at the origin.
/// The normal is the unit position direction, so at r = 1 each normal
/// equals its point exactly.
pub fn sample_sphere(rng: &mut ChaCha8Rng, n: usize, r: f64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let s = (1.0 - z * z).sqrt();
        let u = [s * phi.cos(), s * phi.sin(), z];
        points.push([r * u[0], r * u[1], r * u[2]]);
        normals.push(u);
    }
    (points, normals)
}

/// Uniform sampling of an axis-aligned cuboid surface with half extents
/// `he`. Normals are exactly the six signed axis directions.
pub fn sample_cuboid(
    rng: &mut ChaCha8Rng,
    n: usize,
    he: [f64; 3],
) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let [a, b, c] = he;
    // Face order: +x, −x, +y, −y, +z, −z.
    let areas = [4.0 * b * c, 4.0 * b * c, 4.0 * a * c, 4.0 * a * c, 4.0 * a * b, 4.0 * a * b];
    let total: f64 = areas.iter().sum();
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.gen_range(0.0..total);
        let mut face = 0;
        while face + 1 < 6 && pick >= areas[face] {
            pick -= areas[face];
            face += 1;
        }
        let u: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(-1.0..1.0);
        let (p, nrm) = match face {
            0 => ([a, u * b, v * c], [1.0, 0.0, 0.0]),
            1 => ([-a, u * b, v * c], [-1.0, 0.0, 0.0]),
            2 => ([u * a, b, v * c], [0.0, 1.0, 0.0]),
            3 => ([u * a, -b, v * c], [0.0, -1.0, 0.0]),
            4 => ([u * a, v * b, c], [0.0, 0.0, 1.0]),
            _ => ([u * a, v * b, -c], [0.0, 0.0, -1.0]),
        };
        points.push(p);
        normals.push(nrm);
    }
    (points, normals)
}

/// Uniform sampling of a closed cylinder (axis z, radius `r`, half-height
/// `h`). Lateral normals are radial, cap normals are ±z.
pub fn sample_cylinder(
    rng: &mut ChaCha8Rng,
    n: usize,
    r: f64,
    h: f64,
) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let lateral = std::f64::consts::TAU * r * 2.0 * h;
    let cap = std::f64::consts::PI * r * r;
    let total = lateral + 2.0 * cap;
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = rng.gen_range(0.0..total);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        if pick < lateral {
            let z = rng.gen_range(-h..h);
            points.push([r * phi.cos(), r * phi.sin(), z]);
            normals.push([phi.cos(), phi.sin(), 0.0]);
        } else {
            let rho = r * rng.gen::<f64>().sqrt();
            let sign = if pick < lateral + cap { 1.0 } else { -1.0 };
            points.push([rho * phi.cos(), rho * phi.sin(), sign * h]);
            normals.push([0.0, 0.0, sign]);
        }
    }
    (points, normals)
}

/// Uniform sampling of a closed cone (base radius `r` at z = −h/2, apex at
/// z = +h/2). Slant normals follow the lateral surface gradient; the base
/// normal is −z.
pub fn sample_cone(rng: &mut ChaCha8Rng, n: usize, r: f64, h: f64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let slant = (r * r + h * h).sqrt();
    let lateral = std::f64::consts::PI * r * slant;
    let base = std::f64::consts::PI * r * r;
    let total = lateral + base;
    let inv = 1.0 / (h * h + r * r).sqrt();
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = rng.gen_range(0.0..total);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        if pick < lateral {
            // Distance from the apex along the slant grows as sqrt(u) for
            // uniform area density.
            let f = rng.gen::<f64>().sqrt();
            let rho = f * r;
            let z = h / 2.0 - f * h;
            points.push([rho * phi.cos(), rho * phi.sin(), z]);
            normals.push([h * phi.cos() * inv, h * phi.sin() * inv, r * inv]);
        } else {
            let rho = r * rng.gen::<f64>().sqrt();
            points.push([rho * phi.cos(), rho * phi.sin(), -h / 2.0]);
            normals.push([0.0, 0.0, -1.0]);
        }
    }
    (points, normals)
}

/// Uniform sampling of a torus (ring radius `ring`, tube radius `tube`,
/// axis z) by rejection on the tube angle. Every emitted point satisfies
/// (√(x²+y²) − ring)² + z² = tube² to rounding error.
pub fn sample_torus(
    rng: &mut ChaCha8Rng,
    n: usize,
    ring: f64,
    tube: f64,
) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    while points.len() < n {
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let psi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        // Surface density is proportional to ring + tube·cos ψ.
        let accept = (ring + tube * psi.cos()) / (ring + tube);
        if rng.gen::<f64>() >= accept {
            continue;
        }
        let rho = ring + tube * psi.cos();
        points.push([rho * theta.cos(), rho * theta.sin(), tube * psi.sin()]);
        normals.push([
            psi.cos() * theta.cos(),
            psi.cos() * theta.sin(),
            psi.sin(),
        ]);
    }
    (points, normals)
}

fn rotate_z(rows: &mut [[f64; 3]], theta: f64) {
    let (s, c) = theta.sin_cos();
    for p in rows {
        let (x, y) = (p[0], p[1]);
        p[0] = c * x - s * y;
        p[1] = s * x + c * y;
    }
}

/// Parses OFF-family text: an "OFF" header, V F E counts (tolerating the
/// dataset malformation where the counts share the header line), V vertex
/// lines, then F triangle lines with a leading vertex count of 3.
/// Comments (`#` to end of line) and blank lines are skipped anywhere.
pub fn parse_off(bytes: &[u8]) -> Result<Mesh> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::Format(format!("OFF input is not UTF-8: {e}")))?;
    // (1-based line number, significant content) with comments stripped.
    let mut lines = text.lines().enumerate().filter_map(|(i, raw)| {
        let content = raw.split('#').next().unwrap_or("").trim();
        (!content.is_empty()).then_some((i + 1, content))
    });

    let (header_line, header) = lines
        .next()
        .ok_or_else(|| Error::Truncated("empty OFF input".into()))?;
    if !header.starts_with("OFF") {
        return Err(Error::Parse {
            line: header_line,
            msg: format!("expected OFF header, got {header:?}"),
        });
    }
    let rest = header["OFF".len()..].trim();
    let (counts_line, counts_text) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| Error::Truncated("OFF header without counts".into()))?
    } else {
        (header_line, rest)
    };
    let counts: Vec<usize> = parse_fields(counts_text, counts_line)?;
    if counts.len() != 3 {
        return Err(Error::Parse {
            line: counts_line,
            msg: format!("expected 'V F E' counts, got {} fields", counts.len()),
        });
    }
    let (n_vertices, n_faces) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let (line, text) = lines.next().ok_or_else(|| {
            Error::Truncated(format!(
                "expected {n_vertices} vertices, input ended after {}",
                vertices.len()
            ))
        })?;
        let coords: Vec<f64> = parse_fields(text, line)?;
        if coords.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 coordinates, got {}", coords.len()),
            });
        }
        vertices.push([coords[0], coords[1], coords[2]]);
    }

    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let (line, text) = lines.next().ok_or_else(|| {
            Error::Truncated(format!(
                "expected {n_faces} faces, input ended after {}",
                faces.len()
            ))
        })?;
        let fields: Vec<usize> = parse_fields(text, line)?;
        let Some((&count, idx)) = fields.split_first() else {
            return Err(Error::Parse {
                line,
                msg: "empty face line".into(),
            });
        };
        if count != 3 || idx.len() != 3 {
            return Err(Error::UnsupportedFace {
                line,
                vertices: count,
            });
        }
        for &v in idx {
            if v >= n_vertices {
                return Err(Error::Parse {
                    line,
                    msg: format!("vertex index {v} out of range {n_vertices}"),
                });
            }
        }
        faces.push([idx[0], idx[1], idx[2]]);
    }

    if let Some((line, text)) = lines.next() {
        return Err(Error::Parse {
            line,
            msg: format!("unexpected trailing content {text:?}"),
        });
    }
    Ok(Mesh { vertices, faces })
}

fn parse_fields<T: FromStr>(text: &str, line: usize) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<T>().map_err(|e| Error::Parse {
                line,
                msg: format!("bad field {tok:?}: {e}"),
            })
        })
        .collect()
}

/// Serializes a mesh in the canonical OFF layout parsed by [`parse_off`].
/// Coordinates use shortest round-trip formatting, so parse ∘ serialize is
/// the identity.
pub fn write_off(mesh: &Mesh) -> String {
    let mut out = String::new();
    out.push_str("OFF\n");
    out.push_str(&format!("{} {} 0\n", mesh.vertices.len(), mesh.faces.len()));
    for v in &mesh.vertices {
        out.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    out
}

/// Samples `n_points` from the mesh surface, faces weighted by area, with
/// uniform barycentric placement inside each face. The normal is the
/// normalized cross product of the face edges in stored winding order.
/// Zero-area faces never receive samples.
pub fn sample_mesh(
    mesh: &Mesh,
    n_points: usize,
    seed: u64,
    id: &str,
    label: u32,
) -> Result<PointCloudSample> {
    if n_points == 0 {
        return Err(Error::Contract("sample_mesh: n_points is 0".into()));
    }
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut kept = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for (fi, f) in mesh.faces.iter().enumerate() {
        let [a, b, c] = face_vertices(mesh, f);
        let area = 0.5 * norm(&cross(&sub3(&b, &a), &sub3(&c, &a)));
        if area > 0.0 {
            total += area;
            cdf.push(total);
            kept.push(fi);
        }
    }
    if kept.is_empty() {
        return Err(Error::Degenerate(
            "sample_mesh: every face has zero area".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_points);
    let mut normals = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let pick = rng.gen_range(0.0..total);
        let slot = cdf.partition_point(|&acc| acc <= pick).min(kept.len() - 1);
        let [a, b, c] = face_vertices(mesh, &mesh.faces[kept[slot]]);
        let (r1, r2) = (rng.gen::<f64>(), rng.gen::<f64>());
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        points.push([
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ]);
        let n = cross(&sub3(&b, &a), &sub3(&c, &a));
        let len = norm(&n);
        normals.push([n[0] / len, n[1] / len, n[2] / len]);
    }
    Ok(PointCloudSample {
        id: id.to_string(),
        label,
        points,
        normals,
    })
}

fn face_vertices(mesh: &Mesh, f: &[usize; 3]) -> [[f64; 3]; 3] {
    [mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]]
}

/// Centers the cloud on its centroid and scales by the maximum point norm,
/// leaving normals untouched (similarity transforms preserve directions).
pub fn normalize_unit_sphere(mut sample: PointCloudSample) -> Result<PointCloudSample> {
    if sample.points.is_empty() {
        return Err(Error::Contract("normalize_unit_sphere: empty cloud".into()));
    }
    let n = sample.points.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &sample.points {
        centroid[0] += p[0];
        centroid[1] += p[1];
        centroid[2] += p[2];
    }
    centroid = [centroid[0] / n, centroid[1] / n, centroid[2] / n];
    let mut max_norm = 0.0f64;
    for p in &mut sample.points {
        p[0] -= centroid[0];
        p[1] -= centroid[1];
        p[2] -= centroid[2];
        max_norm = max_norm.max(norm(p));
    }
    if max_norm == 0.0 {
        return Err(Error::Degenerate(
            "normalize_unit_sphere: all points identical".into(),
        ));
    }
    for p in &mut sample.points {
        p[0] /= max_norm;
        p[1] /= max_norm;
        p[2] /= max_norm;
    }
    Ok(sample)
}

/// Train-time augmentation: one isotropic scale from U[0.8, 1.25] and a
/// per-axis translation from U[−0.1, 0.1]. Normals are unchanged. Draw
/// order: scale, then x, y, z offsets.
pub fn augment(sample: &PointCloudSample, seed: u64) -> PointCloudSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = rng.gen_range(0.8..1.25);
    let t = [
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
    ];
    PointCloudSample {
        id: sample.id.clone(),
        label: sample.label,
        points: sample
            .points
            .iter()
            .map(|p| [scale * p[0] + t[0], scale * p[1] + t[1], scale * p[2] + t[2]])
            .collect(),
        normals: sample.normals.clone(),
    }
}

/// Uniform subset of `m` (point, normal) pairs without replacement, by
/// partial Fisher–Yates. Id and label are preserved; order is the shuffle
/// order.
pub fn subsample(sample: &PointCloudSample, m: usize, seed: u64) -> Result<PointCloudSample> {
    let n = sample.points.len();
    if m > n {
        return Err(Error::Contract(format!("subsample: m {m} > N {n}")));
    }
    if m == 0 {
        return Err(Error::Contract("subsample: m is 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    Ok(PointCloudSample {
        id: sample.id.clone(),
        label: sample.label,
        points: idx[..m].iter().map(|&i| sample.points[i]).collect(),
        normals: idx[..m].iter().map(|&i| sample.normals[i]).collect(),
    })
}

const CACHE_MAGIC: [u8; 4] = *b"GLRP";
const CACHE_VERSION: u32 = 1;

/// Writes one sample in the binary cache layout: magic "GLRP", u32
/// version, u32 N, u32 label, then N×3 point f64s and N×3 normal f64s,
/// all little-endian. The id is carried by the file name and manifest.
pub fn write_sample_cache(path: &Path, sample: &PointCloudSample) -> Result<()> {
    sample.validate()?;
    let n = sample.points.len();
    let mut buf = Vec::with_capacity(16 + n * 48);
    buf.extend_from_slice(&CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&sample.label.to_le_bytes());
    for p in sample.points.iter().chain(&sample.normals) {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads one cached sample; `id` comes from the manifest. Rejects bad
/// magic or version as format errors, short files as truncation, and
/// non-finite or out-of-sphere payloads as integrity errors.
pub fn read_sample_cache(path: &Path, id: &str) -> Result<PointCloudSample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Truncated(format!(
            "{}: {} bytes is too short for a sample header",
            path.display(),
            bytes.len()
        )));
    }
    if bytes[..4] != CACHE_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let label = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let want = 16 + n * 48;
    if bytes.len() < want {
        return Err(Error::Truncated(format!(
            "{}: expected {want} bytes for {n} points, found {}",
            path.display(),
            bytes.len()
        )));
    }
    if bytes.len() > want {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - want
        )));
    }
    let mut rows = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take_rows = |count: usize| -> Vec<[f64; 3]> {
        (0..count)
            .map(|_| {
                [
                    rows.next().unwrap(),
                    rows.next().unwrap(),
                    rows.next().unwrap(),
                ]
            })
            .collect()
    };
    let sample = PointCloudSample {
        id: id.to_string(),
        label,
        points: take_rows(n),
        normals: take_rows(n),
    };
    sample.validate()?;
    Ok(sample)
}

/// JSON manifest listing split membership. Labels are duplicated here so
/// the split can be inspected without touching the binary files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub class_names: Vec<String>,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: u32,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn entries(samples: &[PointCloudSample]) -> Vec<ManifestEntry> {
    samples
        .iter()
        .map(|s| ManifestEntry {
            id: s.id.clone(),
            label: s.label,
        })
        .collect()
}

/// Writes every sample as `<id>.glrp` plus `manifest.json` under `dir`.
pub fn write_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    split.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in split.train.iter().chain(&split.test) {
        write_sample_cache(&sample_path(dir, &s.id), s)?;
    }
    let manifest = SplitManifest {
        class_names: split.class_names.clone(),
        train: entries(&split.train),
        test: entries(&split.test),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Loads a cached split written by [`write_split`], checking that each
/// file's label agrees with the manifest.
pub fn load_split(dir: &Path) -> Result<DatasetSplit> {
    let path = dir.join(MANIFEST_NAME);
    let json = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SplitManifest = serde_json::from_str(&json)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let load = |list: &[ManifestEntry]| -> Result<Vec<PointCloudSample>> {
        list.iter()
            .map(|entry| {
                let sample = read_sample_cache(&sample_path(dir, &entry.id), &entry.id)?;
                if sample.label != entry.label {
                    return Err(Error::Integrity(format!(
                        "sample {}: cached label {} but manifest says {}",
                        entry.id, sample.label, entry.label
                    )));
                }
                Ok(sample)
            })
            .collect()
    };
    let split = DatasetSplit {
        class_names: manifest.class_names,
        train: load(&manifest.train)?,
        test: load(&manifest.test)?,
    };
    split.validate()?;
    Ok(split)
}

pub fn sample_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.glrp"))
}

/// Turns an ingest-relative path into a filesystem-safe stable id.
pub fn sanitize_id(raw: &str) -> String {
    raw.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy_sample() -> PointCloudSample {
        let split = gen_synthetic(
            &[SyntheticClass::Cylinder],
            PerClassCounts { train: 1, test: 0 },
            64,
            7,
        )
        .unwrap();
        split.train[0].clone()
    }

    #[test]
    fn unit_sphere_normals_equal_positions() {
        let (points, normals) = sample_sphere(&mut rng(1), 128, 1.0);
        assert_eq!(points, normals);
    }

    #[test]
    fn cuboid_normals_take_exactly_six_values() {
        let (_, normals) = sample_cuboid(&mut rng(2), 4096, [0.9, 0.5, 0.35]);
        let mut distinct: Vec<[f64; 3]> = Vec::new();
        for n in normals {
            if !distinct.contains(&n) {
                distinct.push(n);
            }
        }
        assert_eq!(distinct.len(), 6);
        for n in &distinct {
            assert_eq!(n.iter().map(|v| v.abs()).sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn torus_points_satisfy_the_implicit_surface() {
        let (points, _) = sample_torus(&mut rng(3), 512, 1.0, 0.3);
        for p in points {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let residual = (rho - 1.0).powi(2) + p[2] * p[2];
            assert!((residual - 0.09).abs() < 1e-9, "residual {residual}");
        }
    }

    #[test]
    fn synthetic_normals_match_implicit_surface_gradients() {
        // Gradient directions of each class's implicit surface, checked on
        // the raw samplers (rotation and normalization preserve them).
        let (points, normals) = sample_sphere(&mut rng(4), 200, 0.7);
        for (p, n) in points.iter().zip(&normals) {
            let len = norm(p);
            for k in 0..3 {
                assert!((p[k] / len - n[k]).abs() < 1e-6);
            }
        }

        let (r, h) = (0.5, 0.8);
        let (points, normals) = sample_cylinder(&mut rng(5), 200, r, h);
        for (p, n) in points.iter().zip(&normals) {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if n[2] == 0.0 {
                assert!((rho - r).abs() < 1e-12);
                assert!((p[0] / rho - n[0]).abs() < 1e-6);
                assert!((p[1] / rho - n[1]).abs() < 1e-6);
            } else {
                assert!((p[2].abs() - h).abs() < 1e-12);
                assert_eq!(n[2], p[2].signum());
            }
        }

        let (r, h) = (0.6, 1.4);
        let (points, normals) = sample_cone(&mut rng(6), 200, r, h);
        let inv = 1.0 / (h * h + r * r).sqrt();
        for (p, n) in points.iter().zip(&normals) {
            if n[2] < 0.0 {
                assert!((p[2] + h / 2.0).abs() < 1e-12);
                continue;
            }
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!(rho > 1e-9, "apex sample has an ill-defined azimuth");
            assert!((n[0] - h * p[0] / rho * inv).abs() < 1e-6);
            assert!((n[1] - h * p[1] / rho * inv).abs() < 1e-6);
            assert!((n[2] - r * inv).abs() < 1e-6);
        }

        let (points, normals) = sample_torus(&mut rng(7), 200, 1.0, 0.3);
        for (p, n) in points.iter().zip(&normals) {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let g = [
                2.0 * (rho - 1.0) * p[0] / rho,
                2.0 * (rho - 1.0) * p[1] / rho,
                2.0 * p[2],
            ];
            let len = norm(&g);
            for k in 0..3 {
                assert!((g[k] / len - n[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gen_synthetic_is_seed_deterministic_with_exact_counts() {
        let counts = PerClassCounts { train: 3, test: 2 };
        let a = gen_synthetic(&SyntheticClass::ALL, counts, 32, 42).unwrap();
        let b = gen_synthetic(&SyntheticClass::ALL, counts, 32, 42).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&SyntheticClass::ALL, counts, 32, 43).unwrap();
        assert_ne!(a, c);
        for split in [&a, &c] {
            assert_eq!(split.train.len(), 15);
            assert_eq!(split.test.len(), 10);
            for label in 0..5u32 {
                assert_eq!(split.train.iter().filter(|s| s.label == label).count(), 3);
                assert_eq!(split.test.iter().filter(|s| s.label == label).count(), 2);
            }
            for s in split.train.iter().chain(&split.test) {
                s.validate().unwrap();
                assert_eq!(s.points.len(), 32);
            }
        }
    }

    #[test]
    fn gen_synthetic_rejects_bad_inputs() {
        assert!(matches!(
            "pyramid".parse::<SyntheticClass>(),
            Err(Error::Config(_))
        ));
        let counts = PerClassCounts { train: 1, test: 0 };
        assert!(gen_synthetic(&SyntheticClass::ALL, counts, 8, 0).is_err());
        assert!(gen_synthetic(&[], counts, 32, 0).is_err());
        assert!(gen_synthetic(
            &[SyntheticClass::Sphere, SyntheticClass::Sphere],
            counts,
            32,
            0
        )
        .is_err());
    }

    #[test]
    fn parse_off_minimal_and_merged_header_agree() {
        let plain = b"OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        let mesh = parse_off(plain).unwrap();
        assert_eq!(mesh.vertices.len(), 3);
        assert_eq!(mesh.faces, vec![[0, 1, 2]]);

        let merged = b"OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        assert_eq!(parse_off(merged).unwrap(), mesh);

        let commented = b"# header comment\nOFF\n\n3 1 0 # counts\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        assert_eq!(parse_off(commented).unwrap(), mesh);
    }

    #[test]
    fn parse_off_error_paths_carry_line_numbers() {
        let quad = b"OFF\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n4 0 1 2 3\n";
        match parse_off(quad) {
            Err(Error::UnsupportedFace { line, vertices }) => {
                assert_eq!((line, vertices), (7, 4));
            }
            other => panic!("expected unsupported face, got {other:?}"),
        }

        let short = b"OFF\n3 1 0\n0 0 0\n1 0 0\n";
        assert!(matches!(parse_off(short), Err(Error::Truncated(_))));

        let garbled = b"OFF\n3 1 0\n0 0 zero\n1 0 0\n0 1 0\n3 0 1 2\n";
        match parse_off(garbled) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        let out_of_range = b"OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 9\n";
        assert!(matches!(parse_off(out_of_range), Err(Error::Parse { line: 6, .. })));
    }

    #[test]
    fn off_round_trips_through_serialization() {
        let mesh = Mesh {
            vertices: vec![
                [0.125, -3.5, 0.1],
                [1.0, 2.0e-7, -0.333333333333],
                [9.25, 0.0, 4.75],
                [-0.875, 1.5, 2.25],
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
        };
        assert_eq!(parse_off(write_off(&mesh).as_bytes()).unwrap(), mesh);
    }

    #[test]
    fn sample_mesh_single_triangle_lies_in_plane_with_one_normal() {
        let mesh = Mesh {
            vertices: vec![[0.0, 0.0, 1.0], [2.0, 0.0, 1.0], [0.0, 2.0, 1.0]],
            faces: vec![[0, 1, 2]],
        };
        let s = sample_mesh(&mesh, 256, 11, "tri", 0).unwrap();
        for n in &s.normals {
            assert_eq!(*n, [0.0, 0.0, 1.0]);
        }
        for p in &s.points {
            assert!((p[2] - 1.0).abs() < 1e-9);
            assert!(p[0] >= -1e-12 && p[1] >= -1e-12 && p[0] + p[1] <= 2.0 + 1e-9);
        }
        assert_eq!(sample_mesh(&mesh, 256, 11, "tri", 0).unwrap(), s);
    }

    #[test]
    fn sample_mesh_weights_faces_by_area() {
        // Areas 1 and 3: the second face should absorb 75% of draws.
        let mesh = Mesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 5.0],
                [2.0, 0.0, 5.0],
                [0.0, 3.0, 5.0],
            ],
            faces: vec![[0, 1, 2], [3, 4, 5]],
        };
        let s = sample_mesh(&mesh, 100_000, 13, "two", 0).unwrap();
        let on_second = s.points.iter().filter(|p| p[2] > 2.5).count() as f64;
        let fraction = on_second / 100_000.0;
        assert!((fraction - 0.75).abs() < 0.03, "fraction {fraction}");
    }

    #[test]
    fn sample_mesh_rejects_all_degenerate_faces() {
        let mesh = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]],
            faces: vec![[0, 1, 2]],
        };
        assert!(matches!(
            sample_mesh(&mesh, 16, 0, "bad", 0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn normalization_is_idempotent_scale_invariant_and_tight() {
        let sample = toy_sample();
        let again = normalize_unit_sphere(sample.clone()).unwrap();
        for (p, q) in sample.points.iter().zip(&again.points) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-12);
            }
        }

        // Power-of-two scaling is exactly invertible in binary floating
        // point, so the normalized outputs agree bitwise.
        let mut scaled = sample.clone();
        for p in &mut scaled.points {
            for v in p.iter_mut() {
                *v *= 8.0;
            }
        }
        assert_eq!(normalize_unit_sphere(scaled).unwrap(), again);

        let mut decimal = sample.clone();
        for p in &mut decimal.points {
            for v in p.iter_mut() {
                *v *= 10.0;
            }
        }
        let renorm = normalize_unit_sphere(decimal).unwrap();
        for (p, q) in renorm.points.iter().zip(&again.points) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-12);
            }
        }

        let max = again.points.iter().map(|p| norm(p)).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12, "max radius {max}");
        assert!(max <= 1.0 + 1e-9);

        let flat = PointCloudSample {
            id: "flat".into(),
            label: 0,
            points: vec![[0.3, 0.3, 0.3]; 4],
            normals: vec![[1.0, 0.0, 0.0]; 4],
        };
        assert!(matches!(
            normalize_unit_sphere(flat),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn augment_is_a_seeded_similarity_transform() {
        let sample = toy_sample();
        let a = augment(&sample, 99);
        let b = augment(&sample, 99);
        assert_eq!(a, b);
        assert_eq!(a.normals, sample.normals);

        let d = |pts: &[[f64; 3]], i: usize, j: usize| {
            norm(&sub3(&pts[i], &pts[j]))
        };
        let before = d(&sample.points, 0, 1) / d(&sample.points, 1, 2);
        let after = d(&a.points, 0, 1) / d(&a.points, 1, 2);
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn subsample_contract() {
        let sample = toy_sample();
        let n = sample.points.len();

        let full = subsample(&sample, n, 5).unwrap();
        let mut orig = sample.points.clone();
        let mut got = full.points.clone();
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(orig, got);

        let one = subsample(&sample, 1, 5).unwrap();
        let pos = sample.points.iter().position(|p| *p == one.points[0]);
        assert_eq!(sample.normals[pos.unwrap()], one.normals[0]);

        let small = subsample(&sample, 16, 5).unwrap();
        assert_eq!(small.id, sample.id);
        assert_eq!(small.label, sample.label);
        assert_eq!(small.points.len(), 16);
        assert!(subsample(&sample, n + 1, 5).is_err());
    }

    #[test]
    fn cache_round_trips_and_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let sample = toy_sample();
        let path = sample_path(dir.path(), &sample.id);
        write_sample_cache(&path, &sample).unwrap();
        let back = read_sample_cache(&path, &sample.id).unwrap();
        assert_eq!(back, sample);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad_magic = dir.path().join("bad_magic.glrp");
        std::fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(
            read_sample_cache(&bad_magic, "x"),
            Err(Error::Format(_))
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        let bad_version = dir.path().join("bad_version.glrp");
        std::fs::write(&bad_version, &bytes).unwrap();
        assert!(matches!(
            read_sample_cache(&bad_version, "x"),
            Err(Error::Format(_))
        ));

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.glrp");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            read_sample_cache(&cut, "x"),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn split_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let split = gen_synthetic(
            &[SyntheticClass::Sphere, SyntheticClass::Torus],
            PerClassCounts { train: 2, test: 1 },
            32,
            21,
        )
        .unwrap();
        write_split(dir.path(), &split).unwrap();
        assert_eq!(load_split(dir.path()).unwrap(), split);

        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        let parsed: SplitManifest = serde_json::from_str(&manifest).unwrap();
        assert_eq!(parsed.class_names, vec!["sphere", "torus"]);
        assert_eq!(parsed.train.len(), 4);
        assert_eq!(parsed.test.len(), 2);
    }

    #[test]
    fn sanitize_id_keeps_safe_characters_only() {
        assert_eq!(sanitize_id("chair/train/chair_0001.off"), "chair_train_chair_0001.off");
        assert_eq!(sanitize_id("a b:c"), "a_b_c");
    }

    #[test]
    fn rotation_in_generation_keeps_cuboid_normal_count() {
        let split = gen_synthetic(
            &[SyntheticClass::Cuboid],
            PerClassCounts { train: 1, test: 0 },
            512,
            3,
        )
        .unwrap();
        let mut distinct: Vec<[f64; 3]> = Vec::new();
        for n in &split.train[0].normals {
            if !distinct.contains(n) {
                distinct.push(*n);
            }
        }
        assert_eq!(distinct.len(), 6);
    }
}
