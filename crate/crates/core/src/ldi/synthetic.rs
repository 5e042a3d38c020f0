//! Synthetic sparse/dense patch pairs from analytic surfaces, plus loading
//! of externally supplied pairs, feeding indicator training without any
//! benchmark dataset.
//!
//! A pair is sampled on a local section of a plane, sphere, or torus; the
//! sparse side is normalized to its own unit-ball frame, the dense side is
//! expressed in that same frame, the sparse side is midpoint-interpolated
//! up to the configured patch size, and queries are jittered around the
//! interpolated points.

use super::{build_training_samples, patch_interpolate, LdiSample};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::{normalize_unit, Patch, PointCloud, Vec3};
use crate::io::{read_point_cloud, PointFormat};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

/// Analytic surface family for a patch section.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    Plane,
    Sphere,
    Torus,
}

impl SurfaceKind {
    fn parse(tok: &str) -> Option<Self> {
        match tok {
            "plane" => Some(Self::Plane),
            "sphere" => Some(Self::Sphere),
            "torus" => Some(Self::Torus),
            _ => None,
        }
    }
}

/// Parameters of a synthetic training set, parsed from strings like
/// `plane+sphere,patches=48,sparse=64,dense=1024,noise=0.0,seed=7`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub shapes: Vec<SurfaceKind>,
    pub patches: usize,
    pub sparse_points: usize,
    pub dense_points: usize,
    /// Gaussian noise std added to the sparse side, in world units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shapes: vec![SurfaceKind::Plane, SurfaceKind::Sphere, SurfaceKind::Torus],
            patches: 48,
            sparse_points: 64,
            dense_points: 1024,
            noise: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Parses the comma-separated spec; the first field may be a
    /// `+`-joined shape list, the rest are `key=value`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (i, field) in text.split(',').enumerate() {
            let field = field.trim();
            if field.is_empty() {
                continue;
            }
            if i == 0 && !field.contains('=') {
                let mut shapes = Vec::new();
                for tok in field.split('+') {
                    let kind = SurfaceKind::parse(tok.trim()).ok_or_else(|| {
                        Error::Config(format!("unknown synthetic shape `{tok}`"))
                    })?;
                    shapes.push(kind);
                }
                if shapes.is_empty() {
                    return Err(Error::Config("empty shape list".to_string()));
                }
                spec.shapes = shapes;
                continue;
            }
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{field}`")))?;
            match key.trim() {
                "patches" => spec.patches = parse_num(value)?,
                "sparse" => spec.sparse_points = parse_num(value)?,
                "dense" => spec.dense_points = parse_num(value)?,
                "noise" => {
                    spec.noise = value
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("noise: {e}")))?
                }
                "seed" => {
                    spec.seed = value
                        .trim()
                        .parse::<u64>()
                        .map_err(|e| Error::Config(format!("seed: {e}")))?
                }
                other => return Err(Error::Config(format!("unknown synthetic key `{other}`"))),
            }
        }
        if spec.patches == 0 || spec.sparse_points < 4 || spec.dense_points < spec.sparse_points {
            return Err(Error::Config(
                "synthetic spec needs patches >= 1, sparse >= 4, dense >= sparse".to_string(),
            ));
        }
        if !(spec.noise.is_finite() && spec.noise >= 0.0) {
            return Err(Error::Config("noise must be finite and non-negative".to_string()));
        }
        Ok(spec)
    }
}

fn parse_num(value: &str) -> Result<usize> {
    value
        .trim()
        .parse::<usize>()
        .map_err(|e| Error::Config(e.to_string()))
}

fn random_rotation(rng: &mut impl Rng) -> nalgebra::Rotation3<f64> {
    let q = nalgebra::Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    nalgebra::UnitQuaternion::new_normalize(q).to_rotation_matrix()
}

/// Samples one world-space sparse/dense pair on a surface section. Both
/// sides come from the same section so the dense side is a valid
/// ground-truth for the sparse one.
pub fn sample_patch_pair(
    kind: SurfaceKind,
    sparse_n: usize,
    dense_n: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> (Vec<Vec3>, Vec<Vec3>) {
    let rot = random_rotation(rng);
    let sample_section = |count: usize, rng: &mut dyn RngCore| -> Vec<Vec3> {
        (0..count)
            .map(|_| {
                let p = match kind {
                    SurfaceKind::Plane => {
                        // Uniform unit disk in the xy plane.
                        let r = rng.random_range(0.0f64..1.0).sqrt();
                        let t = rng.random_range(0.0..std::f64::consts::TAU);
                        Vec3::new(r * t.cos(), r * t.sin(), 0.0)
                    }
                    SurfaceKind::Sphere => {
                        // Cap of angular radius 0.6 rad on a radius-2 sphere.
                        let radius = 2.0;
                        let cos_max = 0.6f64.cos();
                        let z = rng.random_range(cos_max..1.0);
                        let phi = rng.random_range(0.0..std::f64::consts::TAU);
                        let s = (1.0 - z * z).sqrt();
                        Vec3::new(radius * s * phi.cos(), radius * s * phi.sin(), radius * z)
                    }
                    SurfaceKind::Torus => {
                        // Ring window of half-width 0.5 rad; full tube angle,
                        // area-weighted by rejection.
                        let (big_r, r) = (2.0, 0.6);
                        let u = loop {
                            let u = rng.random_range(0.0..std::f64::consts::TAU);
                            if rng.random_range(0.0..1.0) < (big_r + r * u.cos()) / (big_r + r) {
                                break u;
                            }
                        };
                        let v = rng.random_range(-0.5f64..0.5);
                        let ring = big_r + r * u.cos();
                        Vec3::new(ring * v.cos(), ring * v.sin(), r * u.sin())
                    }
                };
                rot * p
            })
            .collect()
    };
    let dense = sample_section(dense_n, rng);
    let mut sparse = sample_section(sparse_n, rng);
    if noise > 0.0 {
        for p in &mut sparse {
            *p += Vec3::new(
                noise * rng.sample::<f64, _>(StandardNormal),
                noise * rng.sample::<f64, _>(StandardNormal),
                noise * rng.sample::<f64, _>(StandardNormal),
            );
        }
    }
    (sparse, dense)
}

/// Normalizes a world pair into a shared local frame, interpolates the
/// sparse side up to the configured patch size, applies augmentation, and
/// builds the labeled query samples.
pub fn samples_from_world_pair(
    sparse_world: &[Vec3],
    dense_world: &[Vec3],
    config: &RunConfig,
    rng: &mut impl Rng,
) -> Result<Vec<LdiSample>> {
    if sparse_world.len() > config.patch_size {
        return Err(Error::InvalidArgument(format!(
            "sparse patch has {} points, above the interpolation target {}",
            sparse_world.len(),
            config.patch_size
        )));
    }
    let sparse_cloud = PointCloud::new(sparse_world.to_vec())?;
    let (sparse_norm, center, scale) = normalize_unit(&sparse_cloud)?;
    let mut sparse_local = sparse_norm.points().to_vec();
    let mut dense_local: Vec<Vec3> = dense_world.iter().map(|p| (p - center) / scale).collect();

    if config.augment_rotate {
        let rot = random_rotation(rng);
        for p in &mut sparse_local {
            *p = rot * *p;
        }
        for p in &mut dense_local {
            *p = rot * *p;
        }
    }
    if config.augment_scale {
        // Shrink-only jitter keeps everything inside the unit ball.
        let s = rng.random_range(0.7..1.0);
        for p in &mut sparse_local {
            *p *= s;
        }
        for p in &mut dense_local {
            *p *= s;
        }
    }

    let sparse_patch = Patch::from_local_parts(
        sparse_local,
        center,
        scale,
        (0..sparse_world.len()).collect(),
    )?;
    let interpolated = patch_interpolate(&sparse_patch, config.patch_size)?;
    let dense_patch = Patch::from_local_parts(dense_local, center, scale, vec![])?;
    build_training_samples(
        &interpolated,
        &dense_patch,
        config.ldi_queries_per_point,
        config.ldi_sigma,
        rng,
    )
}

/// Generates the full synthetic training set.
pub fn generate_samples(spec: &SyntheticSpec, config: &RunConfig) -> Result<Vec<LdiSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::new();
    for i in 0..spec.patches {
        let kind = spec.shapes[i % spec.shapes.len()];
        let (sparse, dense) =
            sample_patch_pair(kind, spec.sparse_points, spec.dense_points, spec.noise, &mut rng);
        samples.extend(samples_from_world_pair(&sparse, &dense, config, &mut rng)?);
    }
    Ok(samples)
}

/// Loads `<name>_sparse.(xyz|ply)` / `<name>_dense.(xyz|ply)` pairs from a
/// directory, sorted by name for determinism.
pub fn load_patch_pairs(dir: &Path) -> Result<Vec<(PointCloud, PointCloud)>> {
    let mut sparse_files: Vec<(String, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(name) = stem.strip_suffix("_sparse") {
            sparse_files.push((name.to_string(), path.clone()));
        }
    }
    sparse_files.sort();
    if sparse_files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no `*_sparse.(xyz|ply)` files in {}",
            dir.display()
        )));
    }
    let mut pairs = Vec::with_capacity(sparse_files.len());
    for (name, sparse_path) in sparse_files {
        let ext = sparse_path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("xyz");
        let dense_path = dir.join(format!("{name}_dense.{ext}"));
        if !dense_path.exists() {
            return Err(Error::InvalidArgument(format!(
                "missing dense counterpart for {}",
                sparse_path.display()
            )));
        }
        let sparse = read_point_cloud(&sparse_path, PointFormat::from_path(&sparse_path))?;
        let dense = read_point_cloud(&dense_path, PointFormat::from_path(&dense_path))?;
        pairs.push((sparse, dense));
    }
    Ok(pairs)
}

/// Builds training samples from externally supplied world-space pairs.
pub fn samples_from_pairs(
    pairs: &[(PointCloud, PointCloud)],
    config: &RunConfig,
) -> Result<Vec<LdiSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xa11));
    let mut samples = Vec::new();
    for (sparse, dense) in pairs {
        samples.extend(samples_from_world_pair(
            sparse.points(),
            dense.points(),
            config,
            &mut rng,
        )?);
    }
    Ok(samples)
}
