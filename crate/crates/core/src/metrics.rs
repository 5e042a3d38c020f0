//! Evaluation metrics and analytic oracle surfaces.
//!
//! Chamfer distance uses the squared-L2 symmetric-mean convention,
//! Hausdorff the unsquared L2 max; both are pinned here and in the tests
//! because conventions differ across the literature. Point-to-surface
//! distance requires a true surface: an analytic oracle or a triangle
//! mesh. The oracles also provide exact unsigned distances and foot points
//! for ground-truth checks.

use crate::error::{Error, Result};
use crate::geom::{PointCloud, SpatialIndex, Vec3};
use rand::prelude::*;
use rand_distr::UnitSphere;

/// Exact unsigned-distance evaluation against an oracle surface.
#[derive(Debug, Clone, Copy)]
pub struct UdfEval {
    pub distance: f64,
    /// A nearest surface point.
    pub foot: Vec3,
    /// True when the query sits on the medial axis and the foot point is
    /// one of several equally valid choices.
    pub on_medial_axis: bool,
}

/// An exactly-evaluable reference surface.
#[derive(Debug, Clone)]
pub enum OracleSurface {
    Sphere { center: Vec3, radius: f64 },
    /// Plane `normal · x = offset` with a unit normal.
    Plane { normal: Vec3, offset: f64 },
    /// Ring torus around the z axis, centered at the origin.
    Torus { major_radius: f64, tube_radius: f64 },
    Mesh { triangles: Vec<[Vec3; 3]> },
}

impl OracleSurface {
    pub fn sphere(center: Vec3, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sphere radius must be positive, got {radius}"
            )));
        }
        Ok(Self::Sphere { center, radius })
    }

    /// Plane `normal · x = offset`; the normal is normalized (and the
    /// offset rescaled accordingly).
    pub fn plane(normal: Vec3, offset: f64) -> Result<Self> {
        let n = normal.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidArgument(
                "plane normal must be non-zero and finite".to_string(),
            ));
        }
        Ok(Self::Plane {
            normal: normal / n,
            offset: offset / n,
        })
    }

    pub fn torus(major_radius: f64, tube_radius: f64) -> Result<Self> {
        if !(major_radius > 0.0 && tube_radius > 0.0 && tube_radius < major_radius) {
            return Err(Error::InvalidArgument(format!(
                "torus needs 0 < tube radius < major radius, got ({major_radius}, {tube_radius})"
            )));
        }
        Ok(Self::Torus {
            major_radius,
            tube_radius,
        })
    }

    pub fn mesh(triangles: Vec<[Vec3; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::InvalidArgument("mesh has no triangles".to_string()));
        }
        Ok(Self::Mesh { triangles })
    }

    /// Exact unsigned distance and a nearest surface point.
    pub fn udf(&self, q: &Vec3) -> UdfEval {
        match self {
            Self::Sphere { center, radius } => {
                let d = q - center;
                let r0 = d.norm();
                if r0 == 0.0 {
                    UdfEval {
                        distance: *radius,
                        foot: center + Vec3::new(*radius, 0.0, 0.0),
                        on_medial_axis: true,
                    }
                } else {
                    UdfEval {
                        distance: (r0 - radius).abs(),
                        foot: center + d * (radius / r0),
                        on_medial_axis: false,
                    }
                }
            }
            Self::Plane { normal, offset } => {
                let signed = normal.dot(q) - offset;
                UdfEval {
                    distance: signed.abs(),
                    foot: q - normal * signed,
                    on_medial_axis: false,
                }
            }
            Self::Torus {
                major_radius: big_r,
                tube_radius: r,
            } => {
                let rho = (q.x * q.x + q.y * q.y).sqrt();
                let ring = if rho == 0.0 {
                    Vec3::new(*big_r, 0.0, 0.0)
                } else {
                    Vec3::new(q.x * big_r / rho, q.y * big_r / rho, 0.0)
                };
                let w = q - ring;
                let wn = w.norm();
                if wn == 0.0 {
                    // On the tube-center ring: any tube direction is nearest.
                    let outward = Vec3::new(ring.x / big_r, ring.y / big_r, 0.0);
                    UdfEval {
                        distance: *r,
                        foot: ring + outward * *r,
                        on_medial_axis: true,
                    }
                } else {
                    UdfEval {
                        distance: (wn - r).abs(),
                        foot: ring + w * (r / wn),
                        on_medial_axis: rho == 0.0,
                    }
                }
            }
            Self::Mesh { triangles } => {
                let mut best = f64::INFINITY;
                let mut foot = triangles[0][0];
                for t in triangles {
                    let c = closest_point_on_triangle(q, &t[0], &t[1], &t[2]);
                    let d = (q - c).norm_squared();
                    if d < best {
                        best = d;
                        foot = c;
                    }
                }
                UdfEval {
                    distance: best.sqrt(),
                    foot,
                    on_medial_axis: false,
                }
            }
        }
    }

    /// Uniform surface samples (sphere and torus only).
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
        match self {
            Self::Sphere { center, radius } => Ok((0..n)
                .map(|_| {
                    let dir: [f64; 3] = UnitSphere.sample(rng);
                    center + Vec3::new(dir[0], dir[1], dir[2]) * *radius
                })
                .collect()),
            Self::Torus {
                major_radius: big_r,
                tube_radius: r,
            } => {
                // Area-uniform via rejection on the tube angle.
                let mut out = Vec::with_capacity(n);
                while out.len() < n {
                    let u = rng.random_range(0.0..std::f64::consts::TAU);
                    let accept = (big_r + r * u.cos()) / (big_r + r);
                    if rng.random_range(0.0..1.0) < accept {
                        let v = rng.random_range(0.0..std::f64::consts::TAU);
                        let ring = big_r + r * u.cos();
                        out.push(Vec3::new(ring * v.cos(), ring * v.sin(), r * u.sin()));
                    }
                }
                Ok(out)
            }
            Self::Plane { .. } | Self::Mesh { .. } => Err(Error::Unsupported(
                "surface sampling is only implemented for sphere and torus".to_string(),
            )),
        }
    }
}

fn closest_point_on_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> Vec3 {
    let ab = b - a;
    let len_sq = ab.norm_squared();
    if len_sq == 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len_sq).clamp(0.0, 1.0);
    a + ab * t
}

/// Closest point on a triangle (Ericson's region test), with an edge
/// fallback for degenerate triangles.
fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = va + vb + vc;
    if denom.abs() < f64::MIN_POSITIVE || !denom.is_finite() {
        // Degenerate triangle: closest point lies on an edge.
        let candidates = [
            closest_point_on_segment(p, a, b),
            closest_point_on_segment(p, a, c),
            closest_point_on_segment(p, b, c),
        ];
        return candidates
            .into_iter()
            .min_by(|x, y| {
                (p - x)
                    .norm_squared()
                    .partial_cmp(&(p - y).norm_squared())
                    .unwrap()
            })
            .unwrap();
    }
    let v = vb / denom;
    let w = vc / denom;
    a + ab * v + ac * w
}

/// Symmetric squared-L2 Chamfer distance:
/// `½ (meanₐ min_b ‖a−b‖² + mean_b minₐ ‖a−b‖²)`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ia = SpatialIndex::build(a)?;
    let ib = SpatialIndex::build(b)?;
    let mean_sq = |from: &PointCloud, to: &SpatialIndex<'_>| -> Result<f64> {
        let mut sum = 0.0;
        for p in from.points() {
            let (_, d) = to.nearest(p)?;
            sum += d * d;
        }
        Ok(sum / from.len() as f64)
    };
    Ok(0.5 * (mean_sq(a, &ib)? + mean_sq(b, &ia)?))
}

/// Hausdorff distance: the larger directed max of unsquared L2
/// nearest-neighbor distances.
pub fn hausdorff(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ia = SpatialIndex::build(a)?;
    let ib = SpatialIndex::build(b)?;
    let directed_max = |from: &PointCloud, to: &SpatialIndex<'_>| -> Result<f64> {
        let mut best = 0.0f64;
        for p in from.points() {
            let (_, d) = to.nearest(p)?;
            best = best.max(d);
        }
        Ok(best)
    };
    Ok(directed_max(a, &ib)?.max(directed_max(b, &ia)?))
}

/// Mean exact unsigned distance from each point to the surface.
pub fn p2f(a: &PointCloud, surface: &OracleSurface) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let sum: f64 = a.points().iter().map(|p| surface.udf(p).distance).sum();
    Ok(sum / a.len() as f64)
}

/// See [`OracleSurface::udf`].
pub fn oracle_udf(surface: &OracleSurface, q: &Vec3) -> UdfEval {
    surface.udf(q)
}

/// One evaluation row: Chamfer, Hausdorff, and (when a surface is
/// available) point-to-surface distance.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cd: f64,
    pub hd: f64,
    pub p2f_mean: f64,
    pub p2f_computed: bool,
    pub pred_count: usize,
    pub ref_count: usize,
}

impl MetricsReport {
    /// Compares a prediction against a reference cloud, plus an optional
    /// true surface for P2F. Without a surface, `p2f_computed` stays false
    /// rather than approximating.
    pub fn compute(
        pred: &PointCloud,
        reference: &PointCloud,
        surface: Option<&OracleSurface>,
    ) -> Result<Self> {
        let cd = chamfer(pred, reference)?;
        let hd = hausdorff(pred, reference)?;
        let (p2f_mean, p2f_computed) = match surface {
            Some(s) => (p2f(pred, s)?, true),
            None => (0.0, false),
        };
        Ok(Self {
            cd,
            hd,
            p2f_mean,
            p2f_computed,
            pred_count: pred.len(),
            ref_count: reference.len(),
        })
    }

    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "cd={}\nhd={}\np2f_mean={}\np2f_computed={}\npred_count={}\nref_count={}\n",
            self.cd, self.hd, self.p2f_mean, self.p2f_computed, self.pred_count, self.ref_count
        )
    }

    pub fn csv_header() -> &'static str {
        "cd,hd,p2f_mean,p2f_computed,pred_count,ref_count"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.cd, self.hd, self.p2f_mean, self.p2f_computed, self.pred_count, self.ref_count
        )
    }
}
