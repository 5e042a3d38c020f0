//! Geometric primitives: point cloud container, kd-tree spatial index,
//! k-nearest-neighbor queries, farthest point sampling, unit-ball
//! normalization, and local patch extraction.
//!
//! All distances are Euclidean and double precision. Queries and sampling
//! are fully deterministic: ties on distance are broken by the lower point
//! index everywhere.

use crate::error::{Error, Result};

/// 3D point / vector in double precision.
pub type Vec3 = nalgebra::Vector3<f64>;

/// An ordered set of finite 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    /// Builds a cloud, rejecting any non-finite coordinate.
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::NonFinitePoint { index: i });
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box, or `None` for an empty cloud.
    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.points.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.points[1..] {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }

    /// Mean of all points. Errors on an empty cloud.
    pub fn centroid(&self) -> Result<Vec3> {
        if self.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let sum: Vec3 = self.points.iter().sum();
        Ok(sum / self.points.len() as f64)
    }
}

fn check_query_finite(q: &Vec3) -> Result<()> {
    if q.x.is_finite() && q.y.is_finite() && q.z.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: "query point".to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    /// Index into the cloud of the splitting point.
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

const NO_CHILD: i32 = -1;

/// Immutable kd-tree over a borrowed point cloud.
///
/// Construction is `O(n log n)`; the tree is never updated in place — the
/// clouds it indexes are immutable per pipeline stage. Shared references to
/// a built index may be queried concurrently.
#[derive(Debug)]
pub struct SpatialIndex<'a> {
    cloud: &'a PointCloud,
    nodes: Vec<Node>,
    root: i32,
}

/// Candidate ordered by (distance², index); the lexicographic order is what
/// makes every query deterministic under ties.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist_sq: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // dist_sq is always finite here
        self.dist_sq
            .partial_cmp(&other.dist_sq)
            .unwrap()
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<'a> SpatialIndex<'a> {
    /// Builds the index. Errors on an empty cloud.
    pub fn build(cloud: &'a PointCloud) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut indices: Vec<u32> = (0..cloud.len() as u32).collect();
        let mut nodes = Vec::with_capacity(cloud.len());
        let root = Self::build_rec(cloud.points(), &mut indices, &mut nodes);
        Ok(Self { cloud, nodes, root })
    }

    pub fn cloud(&self) -> &PointCloud {
        self.cloud
    }

    fn build_rec(points: &[Vec3], indices: &mut [u32], nodes: &mut Vec<Node>) -> i32 {
        if indices.is_empty() {
            return NO_CHILD;
        }
        // Split along the axis of largest extent for balanced cells.
        let mut lo = points[indices[0] as usize];
        let mut hi = lo;
        for &i in indices.iter() {
            let p = points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut axis = 0usize;
        for a in 1..3 {
            if hi[a] - lo[a] > hi[axis] - lo[axis] {
                axis = a;
            }
        }
        let mid = indices.len() / 2;
        indices.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis]
                .partial_cmp(&points[b as usize][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let point = indices[mid];
        let node_slot = nodes.len();
        nodes.push(Node {
            point,
            axis: axis as u8,
            left: NO_CHILD,
            right: NO_CHILD,
        });
        let (left_part, rest) = indices.split_at_mut(mid);
        let right_part = &mut rest[1..];
        let left = Self::build_rec(points, left_part, nodes);
        let right = Self::build_rec(points, right_part, nodes);
        nodes[node_slot].left = left;
        nodes[node_slot].right = right;
        node_slot as i32
    }

    fn knn_rec(&self, node: i32, query: &Vec3, k: usize, heap: &mut std::collections::BinaryHeap<Candidate>) {
        if node == NO_CHILD {
            return;
        }
        let n = self.nodes[node as usize];
        let p = self.cloud.points()[n.point as usize];
        let cand = Candidate {
            dist_sq: (p - query).norm_squared(),
            index: n.point as usize,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().unwrap() {
            heap.pop();
            heap.push(cand);
        }
        let axis = n.axis as usize;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.knn_rec(near, query, k, heap);
        // Non-strict bound so equal-distance candidates across the plane are
        // still visited; ties then resolve by index in the heap order.
        if heap.len() < k || delta * delta <= heap.peek().unwrap().dist_sq {
            self.knn_rec(far, query, k, heap);
        }
    }

    /// The k nearest points to `query`, ascending by distance, ties broken
    /// by lower point index.
    pub fn knn(&self, query: &Vec3, k: usize) -> Result<Vec<(usize, f64)>> {
        check_query_finite(query)?;
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".to_string()));
        }
        if k > self.cloud.len() {
            return Err(Error::InsufficientPoints {
                needed: k,
                available: self.cloud.len(),
            });
        }
        let mut heap = std::collections::BinaryHeap::with_capacity(k + 1);
        self.knn_rec(self.root, query, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort_unstable();
        Ok(out
            .into_iter()
            .map(|c| (c.index, c.dist_sq.sqrt()))
            .collect())
    }

    /// Nearest point to `query` and its distance.
    pub fn nearest(&self, query: &Vec3) -> Result<(Vec3, f64)> {
        let nn = self.knn(query, 1)?;
        let (idx, dist) = nn[0];
        Ok((self.cloud.points()[idx], dist))
    }

    /// Index of the nearest point to `query`.
    pub fn nearest_index(&self, query: &Vec3) -> Result<(usize, f64)> {
        let nn = self.knn(query, 1)?;
        Ok(nn[0])
    }
}

/// See [`SpatialIndex::knn`].
pub fn knn_search(index: &SpatialIndex<'_>, query: &Vec3, k: usize) -> Result<Vec<(usize, f64)>> {
    index.knn(query, k)
}

/// See [`SpatialIndex::nearest`].
pub fn nearest_point(index: &SpatialIndex<'_>, query: &Vec3) -> Result<(Vec3, f64)> {
    index.nearest(query)
}

/// Greedy farthest point sampling over raw points; returns the selected
/// indices in selection order, starting at `seed_index`.
///
/// Each step selects the point maximizing the minimum distance to the
/// already-selected set; ties are broken by the lowest index.
pub fn fps_indices(points: &[Vec3], m: usize, seed_index: usize) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if m == 0 {
        return Err(Error::InvalidArgument("m must be positive".to_string()));
    }
    if m > points.len() {
        return Err(Error::InsufficientPoints {
            needed: m,
            available: points.len(),
        });
    }
    if seed_index >= points.len() {
        return Err(Error::InvalidArgument(format!(
            "seed index {} out of range for {} points",
            seed_index,
            points.len()
        )));
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_dist_sq = vec![f64::INFINITY; points.len()];
    let mut last = seed_index;
    selected.push(seed_index);
    while selected.len() < m {
        let lp = points[last];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = (p - lp).norm_squared();
            if d < min_dist_sq[i] {
                min_dist_sq[i] = d;
            }
            // Strict > keeps the lowest index on ties; selected points have
            // min_dist_sq 0 and never win while unselected ones remain.
            if min_dist_sq[i] > best_d {
                best_d = min_dist_sq[i];
                best = i;
            }
        }
        selected.push(best);
        min_dist_sq[best] = 0.0;
        last = best;
    }
    Ok(selected)
}

/// Farthest point sampling of a cloud down to `m` points.
pub fn fps_downsample(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<PointCloud> {
    let idx = fps_indices(cloud.points(), m, seed_index)?;
    PointCloud::new(idx.into_iter().map(|i| cloud.points()[i]).collect())
}

/// Translates the centroid to the origin and scales so the farthest point
/// has norm 1. Returns `(normalized, center, scale)`; the inverse map is
/// `x * scale + center`.
///
/// If all points coincide the scale is forced to 1.
pub fn normalize_unit(cloud: &PointCloud) -> Result<(PointCloud, Vec3, f64)> {
    let center = cloud.centroid()?;
    let mut scale: f64 = 0.0;
    for p in cloud.points() {
        scale = scale.max((p - center).norm());
    }
    if scale == 0.0 {
        scale = 1.0;
    }
    let normalized = PointCloud::new(
        cloud
            .points()
            .iter()
            .map(|p| (p - center) / scale)
            .collect(),
    )?;
    Ok((normalized, center, scale))
}

/// A local neighborhood expressed in a normalized frame.
///
/// Local coordinates relate to world coordinates by
/// `world = local * scale + center`. Patches produced by [`extract_patch`]
/// have all local points inside the unit ball; patches assembled from
/// externally transformed points (e.g. a dense ground-truth neighborhood
/// expressed in a sparse patch's frame) may exceed it.
#[derive(Debug, Clone)]
pub struct Patch {
    points: Vec<Vec3>,
    center: Vec3,
    scale: f64,
    source_indices: Vec<usize>,
}

impl Patch {
    /// Assembles a patch from already-local points and a frame.
    pub fn from_local_parts(
        points: Vec<Vec3>,
        center: Vec3,
        scale: f64,
        source_indices: Vec<usize>,
    ) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "patch scale must be positive, got {scale}"
            )));
        }
        Ok(Self {
            points,
            center,
            scale,
            source_indices,
        })
    }

    /// Local-frame points.
    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Indices of the original points in the parent cloud. Interpolated
    /// points appended by midpoint insertion carry no source index, so this
    /// can be shorter than `points()`.
    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    pub fn local_from_world(&self, world: &Vec3) -> Vec3 {
        (world - self.center) / self.scale
    }

    pub fn world_from_local(&self, local: &Vec3) -> Vec3 {
        local * self.scale + self.center
    }

    /// All patch points mapped back to world coordinates.
    pub fn world_points(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| self.world_from_local(p)).collect()
    }
}

/// Extracts the `patch_size` nearest neighbors of `center_point` as a patch
/// in its own normalized frame (centroid at the origin, farthest point at
/// norm 1).
pub fn extract_patch(
    index: &SpatialIndex<'_>,
    center_point: &Vec3,
    patch_size: usize,
) -> Result<Patch> {
    let nn = index.knn(center_point, patch_size)?;
    let world: Vec<Vec3> = nn.iter().map(|&(i, _)| index.cloud().points()[i]).collect();
    let source_indices: Vec<usize> = nn.iter().map(|&(i, _)| i).collect();
    let world_cloud = PointCloud::new(world)?;
    let (normalized, center, scale) = normalize_unit(&world_cloud)?;
    Patch::from_local_parts(
        normalized.points().to_vec(),
        center,
        scale,
        source_indices,
    )
}
