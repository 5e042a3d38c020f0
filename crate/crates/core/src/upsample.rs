//! Arbitrary-scale inference: sample queries around the sparse cloud,
//! pull them onto the field's zero-level set, oversample, and farthest
//! point sample down to the exact target count.
//!
//! The field is continuous, so the same fitted checkpoint serves any
//! scale factor; only the number of queries changes.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::field::{pull_query, DistanceField, FittedField, QueryBatch, QuerySource};
use crate::geom::{fps_indices, PointCloud, SpatialIndex, Vec3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::UnitSphere;
use rayon::prelude::*;

/// Target size and sampling knobs for one upsampling run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpsampleRequest {
    pub target: Target,
    /// Queries generated per output point before downsampling (>= 1).
    pub oversample_ratio: f64,
    pub rng_seed: u64,
    /// First point selected by the final farthest point sampling.
    pub fps_seed_index: usize,
    /// Pull iterations per query; 1 is the single projection.
    pub pull_iterations: usize,
    pub eps_grad: f64,
}

/// Output size: a scale factor over the input count or an absolute count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Scale(f64),
    Count(usize),
}

impl UpsampleRequest {
    pub fn from_config(target: Target, config: &RunConfig) -> Self {
        Self {
            target,
            oversample_ratio: config.oversample_ratio,
            rng_seed: config.seed,
            fps_seed_index: config.fps_seed_index,
            pull_iterations: config.pull_iterations,
            eps_grad: config.eps_grad,
        }
    }

    /// Resolves the absolute output count for an input of `n` points.
    pub fn output_count(&self, n: usize) -> Result<usize> {
        let m = match self.target {
            Target::Count(m) => m,
            Target::Scale(r) => {
                if !(r.is_finite() && r > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "scale factor must be positive, got {r}"
                    )));
                }
                (r * n as f64).round() as usize
            }
        };
        if m == 0 {
            return Err(Error::InvalidArgument(
                "target count must be positive".to_string(),
            ));
        }
        Ok(m)
    }
}

/// Per-point query sampling: each query is its source point plus a
/// uniform-direction offset with radius uniform in `[0, d_nn)`, where
/// `d_nn` is the source's distance to its nearest other point. Queries are
/// distributed round-robin over the points.
pub fn generate_inference_queries(
    cloud: &PointCloud,
    index: &SpatialIndex<'_>,
    count: usize,
    rng: &mut impl Rng,
) -> Result<QueryBatch> {
    if cloud.len() < 2 {
        return Err(Error::InsufficientPoints {
            needed: 2,
            available: cloud.len(),
        });
    }
    // Nearest-other-point distance per source; the first knn entry is the
    // point itself.
    let mut nn_dist = Vec::with_capacity(cloud.len());
    for p in cloud.points() {
        let nn = index.knn(p, 2)?;
        nn_dist.push(nn[1].1);
    }
    let mut queries = Vec::with_capacity(count);
    for i in 0..count {
        let src = i % cloud.len();
        let r_max = nn_dist[src];
        if r_max == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "point {src} duplicates another point; its query radius bound is zero"
            )));
        }
        let dir: [f64; 3] = UnitSphere.sample(rng);
        let radius = rng.random_range(0.0..r_max);
        let q = cloud.points()[src] + Vec3::new(dir[0], dir[1], dir[2]) * radius;
        debug_assert!((q - cloud.points()[src]).norm() < r_max);
        queries.push(q);
    }
    let sources = vec![QuerySource::GaussianNearSurface; queries.len()];
    Ok(QueryBatch { queries, sources })
}

/// Pulls every query onto the zero-level set; queries with degenerate
/// gradients are dropped and counted. Errors if the field is untrained or
/// every query degenerates.
pub fn project_batch<F: DistanceField + ?Sized>(
    field: &F,
    batch: &QueryBatch,
    eps_grad: f64,
    pull_iterations: usize,
) -> Result<(PointCloud, usize)> {
    if !field.is_ready() {
        return Err(Error::InvalidArgument(
            "field model is not trained".to_string(),
        ));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty query batch".to_string()));
    }
    let results: Vec<Result<Option<Vec3>>> = batch
        .queries
        .par_iter()
        .map(|q| {
            let mut p = *q;
            for _ in 0..pull_iterations.max(1) {
                match pull_query(field, &p, eps_grad) {
                    Ok(out) => p = out.q_prime,
                    Err(Error::DegenerateGradient { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
            Ok(Some(p))
        })
        .collect();
    let mut points = Vec::with_capacity(batch.len());
    let mut dropped = 0usize;
    for r in results {
        match r? {
            Some(p) => points.push(p),
            None => dropped += 1,
        }
    }
    if points.is_empty() {
        return Err(Error::DegenerateGradient { eps: eps_grad });
    }
    Ok((PointCloud::new(points)?, dropped))
}

/// Upsamples a world-space cloud through a distance field expressed in the
/// normalized frame `(center, scale)`: generates `ceil(oversample × M)`
/// queries, projects them, farthest-point-samples down to exactly `M`, and
/// returns world coordinates. Queries dropped for degenerate gradients are
/// replaced by resampling (up to 3 rounds).
pub fn upsample_with<F: DistanceField + ?Sized>(
    cloud: &PointCloud,
    field: &F,
    center: Vec3,
    scale: f64,
    request: &UpsampleRequest,
) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(request.oversample_ratio >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "oversample ratio must be at least 1, got {}",
            request.oversample_ratio
        )));
    }
    let m = request.output_count(cloud.len())?;
    let normalized = PointCloud::new(
        cloud
            .points()
            .iter()
            .map(|p| (p - center) / scale)
            .collect(),
    )?;
    let index = SpatialIndex::build(&normalized)?;
    let want = (request.oversample_ratio * m as f64).ceil() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(request.rng_seed);
    let mut projected: Vec<Vec3> = Vec::with_capacity(want);
    let mut round = 0;
    while projected.len() < want {
        let missing = want - projected.len();
        let batch = generate_inference_queries(&normalized, &index, missing, &mut rng)?;
        let (points, dropped) =
            project_batch(field, &batch, request.eps_grad, request.pull_iterations)?;
        projected.extend_from_slice(points.points());
        if dropped == 0 {
            continue;
        }
        round += 1;
        if round > 3 {
            break;
        }
    }
    if projected.len() < m {
        return Err(Error::InsufficientPoints {
            needed: m,
            available: projected.len(),
        });
    }
    if request.fps_seed_index >= projected.len() {
        return Err(Error::InvalidArgument(format!(
            "fps seed index {} out of range for {} projected points",
            request.fps_seed_index,
            projected.len()
        )));
    }
    let keep = fps_indices(&projected, m, request.fps_seed_index)?;
    PointCloud::new(
        keep.into_iter()
            .map(|i| projected[i] * scale + center)
            .collect(),
    )
}

/// Upsamples through a fitted checkpoint (its stored normalization must be
/// the one the field was fitted with).
pub fn upsample(
    cloud: &PointCloud,
    fitted: &FittedField,
    request: &UpsampleRequest,
) -> Result<PointCloud> {
    upsample_with(cloud, &fitted.field, fitted.center, fitted.scale, request)
}
