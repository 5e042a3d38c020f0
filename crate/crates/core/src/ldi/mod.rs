//! Local distance indicator (LDI): an attention-based network that
//! predicts the unsigned distance from a query point to the surface
//! described by a local patch, trained on sparse/dense patch pairs.
//!
//! Forward contract for a query `q` in the patch's local frame:
//!
//! 1. per-point features `F = {f_h}` from the feature extractor;
//! 2. the k nearest patch points to `q` form the inner region;
//! 3. relative features `F' = {f'_d}` from the centered offsets `p_d − q`;
//! 4. a pooled relative feature by coordinatewise max over `F'`;
//! 5. attention weights `w_d = σ(weight_head([f'_d ‖ pooled]))`;
//! 6. `f_q = Σ_d w_d·f'_d + (1−w_d)·f_d` over the k neighbors;
//! 7. `d = |distance_head([f_q ‖ maxpool(F) ‖ q])|`.
//!
//! The backward pass is hand-derived over this structure (max-pool
//! subgradients scatter to the argmax entries; ties pick the lowest
//! index) and finite-difference checked in the tests.

pub mod synthetic;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::{extract_patch, Patch, SpatialIndex, Vec3};
use crate::io::ckpt;
use crate::nn::{LayerSpec, Link, LinkKind, MlpModel, MlpSpec, OptimizerState, Tape};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The indicator: four small networks plus the neighborhood sizes they
/// were trained with.
#[derive(Debug, Clone)]
pub struct LdiModel {
    /// Per-point patch features, 3 -> feature_dim.
    pub feature_extractor: MlpModel,
    /// Query-centered offsets to relative features, 3 -> feature_dim.
    pub relative_encoder: MlpModel,
    /// [relative ‖ pooled relative] -> attention logit, 2·feature_dim -> 1.
    pub weight_head: MlpModel,
    /// [f_q ‖ pooled patch ‖ query] -> distance, 2·feature_dim + 3 -> 1.
    pub distance_head: MlpModel,
    /// Inner region size k (< patch size).
    pub k_neighbors: usize,
    /// Patch size n the indicator expects at inference.
    pub patch_size: usize,
}

/// Feature width `f` expands into a two-layer block with the raw input
/// concatenated back in, a small dense-block.
fn point_encoder_spec(feature_dim: usize) -> MlpSpec {
    let half = (feature_dim / 2).max(4);
    MlpSpec {
        layers: vec![
            LayerSpec {
                in_dim: 3,
                out_dim: half,
                activation: crate::nn::Activation::Relu,
            },
            LayerSpec {
                in_dim: half + 3,
                out_dim: feature_dim,
                activation: crate::nn::Activation::Relu,
            },
            LayerSpec {
                in_dim: feature_dim,
                out_dim: feature_dim,
                activation: crate::nn::Activation::Linear,
            },
        ],
        links: vec![Link {
            from: 0,
            to: 2,
            kind: LinkKind::Concat,
        }],
    }
}

impl LdiModel {
    /// Fresh indicator with fan-in-scaled random weights.
    pub fn init(feature_dim: usize, k_neighbors: usize, patch_size: usize, seed: u64) -> Result<Self> {
        if k_neighbors == 0 || k_neighbors >= patch_size {
            return Err(Error::InvalidArgument(format!(
                "need 0 < k_neighbors < patch_size, got k={k_neighbors}, n={patch_size}"
            )));
        }
        let f = feature_dim;
        Ok(Self {
            feature_extractor: MlpModel::init(point_encoder_spec(f), seed)?,
            relative_encoder: MlpModel::init(point_encoder_spec(f), seed.wrapping_add(1))?,
            weight_head: MlpModel::init(MlpSpec::chain(&[2 * f, f, 1]), seed.wrapping_add(2))?,
            distance_head: MlpModel::init(
                MlpSpec::chain(&[2 * f + 3, 2 * f, f, 1]),
                seed.wrapping_add(3),
            )?,
            k_neighbors,
            patch_size,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_extractor.output_dim()
    }

    fn validate_dims(&self) -> Result<()> {
        let f = self.feature_dim();
        if self.relative_encoder.output_dim() != f
            || self.weight_head.input_dim() != 2 * f
            || self.weight_head.output_dim() != 1
            || self.distance_head.input_dim() != 2 * f + 3
            || self.distance_head.output_dim() != 1
        {
            return Err(Error::InvalidSpec(
                "indicator sub-network dimensions are inconsistent".to_string(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        ckpt::write_header(&mut w, ckpt::Kind::Ldi)?;
        ckpt::write_mlp(&mut w, &self.feature_extractor)?;
        ckpt::write_mlp(&mut w, &self.relative_encoder)?;
        ckpt::write_mlp(&mut w, &self.weight_head)?;
        ckpt::write_mlp(&mut w, &self.distance_head)?;
        ckpt::write_u32(&mut w, self.k_neighbors as u32)?;
        ckpt::write_u32(&mut w, self.patch_size as u32)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        ckpt::expect_kind(&mut r, ckpt::Kind::Ldi)?;
        let model = Self {
            feature_extractor: ckpt::read_mlp(&mut r)?,
            relative_encoder: ckpt::read_mlp(&mut r)?,
            weight_head: ckpt::read_mlp(&mut r)?,
            distance_head: ckpt::read_mlp(&mut r)?,
            k_neighbors: ckpt::read_u32(&mut r)? as usize,
            patch_size: ckpt::read_u32(&mut r)? as usize,
        };
        model.validate_dims()?;
        Ok(model)
    }
}

/// One supervised example: a query in the patch's local frame and its
/// distance to the nearest point of the dense ground-truth patch.
#[derive(Debug, Clone)]
pub struct LdiSample {
    pub query: Vec3,
    /// Shared interpolated sparse patch (the indicator's conditioning input).
    pub patch: Arc<Patch>,
    pub gt_distance: f64,
}

/// What the forward pass records, controlling backward availability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordMode {
    /// Values only; no backward.
    None,
    /// Enough for the query gradient (frozen indicator under a moving query).
    QueryGrad,
    /// Everything, including per-point feature tapes for training.
    Full,
}

/// Recorded forward evaluation of the indicator.
pub struct LdiEval<'m> {
    pub distance: f64,
    /// Attention weights for the k selected neighbors, each in [0, 1].
    pub weights: Vec<f64>,
    /// Patch-local indices of the selected neighbors, ascending by
    /// (distance, index).
    pub neighbor_indices: Vec<usize>,
    /// Blended query feature, exposed for diagnostics.
    pub f_q: Vec<f64>,
    raw: f64,
    feats: Vec<Vec<f64>>,
    pool_feat_argmax: Vec<usize>,
    rel_feats: Vec<Vec<f64>>,
    pooled_rel_argmax: Vec<usize>,
    feat_tapes: Option<Vec<Tape<'m>>>,
    rel_tapes: Option<Vec<Tape<'m>>>,
    wh_tapes: Option<Vec<Tape<'m>>>,
    dh_tape: Option<Tape<'m>>,
}

/// Gradients of a scalar loss through the indicator.
#[derive(Debug, Clone)]
pub struct LdiGrads {
    pub feature_extractor: Vec<f64>,
    pub relative_encoder: Vec<f64>,
    pub weight_head: Vec<f64>,
    pub distance_head: Vec<f64>,
    pub query: Vec3,
}

/// Coordinatewise max over feature vectors, tracking the argmax row
/// (ties keep the lowest index so the subgradient is deterministic).
fn max_pool(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<usize>) {
    let dim = rows[0].len();
    let mut pooled = rows[0].clone();
    let mut argmax = vec![0usize; dim];
    for (r, row) in rows.iter().enumerate().skip(1) {
        for c in 0..dim {
            if row[c] > pooled[c] {
                pooled[c] = row[c];
                argmax[c] = r;
            }
        }
    }
    (pooled, argmax)
}

/// The attention blend `f_q = Σ_d w_d·f'_d + (1−w_d)·f_d`.
fn blend_features(weights: &[f64], rel_feats: &[Vec<f64>], sel_feats: &[&Vec<f64>]) -> Vec<f64> {
    let dim = rel_feats[0].len();
    let mut f_q = vec![0.0; dim];
    for d in 0..weights.len() {
        let w = weights[d];
        for c in 0..dim {
            f_q[c] += w * rel_feats[d][c] + (1.0 - w) * sel_feats[d][c];
        }
    }
    f_q
}

/// Evaluates the indicator for a query in the patch's local frame.
pub fn ldi_forward<'m>(
    model: &'m LdiModel,
    query: &Vec3,
    patch: &Patch,
    mode: RecordMode,
) -> Result<LdiEval<'m>> {
    if patch.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if patch.len() < model.k_neighbors {
        return Err(Error::InsufficientPoints {
            needed: model.k_neighbors,
            available: patch.len(),
        });
    }
    let n = patch.len();
    let k = model.k_neighbors;
    let record_full = mode == RecordMode::Full;
    let record_any = mode != RecordMode::None;

    // Per-point patch features.
    let mut feats = Vec::with_capacity(n);
    let mut feat_tapes = record_full.then(|| Vec::with_capacity(n));
    for p in patch.points() {
        let input = [p.x, p.y, p.z];
        if let Some(tapes) = feat_tapes.as_mut() {
            let (out, tape) = model.feature_extractor.forward(&input)?;
            feats.push(out);
            tapes.push(tape);
        } else {
            feats.push(model.feature_extractor.eval(&input)?);
        }
    }
    let (pool_feat, pool_feat_argmax) = max_pool(&feats);

    // Inner region: k nearest patch points to the query.
    let mut order: Vec<(f64, usize)> = patch
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - query).norm_squared(), i))
        .collect();
    order.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let neighbor_indices: Vec<usize> = order[..k].iter().map(|&(_, i)| i).collect();

    // Relative features of the centered offsets.
    let mut rel_feats = Vec::with_capacity(k);
    let mut rel_tapes = record_any.then(|| Vec::with_capacity(k));
    for &i in &neighbor_indices {
        let off = patch.points()[i] - query;
        let input = [off.x, off.y, off.z];
        if let Some(tapes) = rel_tapes.as_mut() {
            let (out, tape) = model.relative_encoder.forward(&input)?;
            rel_feats.push(out);
            tapes.push(tape);
        } else {
            rel_feats.push(model.relative_encoder.eval(&input)?);
        }
    }
    let (pooled_rel, pooled_rel_argmax) = max_pool(&rel_feats);

    // Attention weights.
    let mut weights = Vec::with_capacity(k);
    let mut wh_tapes = record_any.then(|| Vec::with_capacity(k));
    for rel in &rel_feats {
        let mut input = Vec::with_capacity(2 * rel.len());
        input.extend_from_slice(rel);
        input.extend_from_slice(&pooled_rel);
        let logit = if let Some(tapes) = wh_tapes.as_mut() {
            let (out, tape) = model.weight_head.forward(&input)?;
            tapes.push(tape);
            out[0]
        } else {
            model.weight_head.eval(&input)?[0]
        };
        weights.push(sigmoid(logit));
    }

    let sel_feats: Vec<&Vec<f64>> = neighbor_indices.iter().map(|&i| &feats[i]).collect();
    let f_q = blend_features(&weights, &rel_feats, &sel_feats);

    // Distance head over [f_q ‖ pooled patch feature ‖ query].
    let mut dh_input = Vec::with_capacity(f_q.len() + pool_feat.len() + 3);
    dh_input.extend_from_slice(&f_q);
    dh_input.extend_from_slice(&pool_feat);
    dh_input.extend_from_slice(&[query.x, query.y, query.z]);
    let (raw, dh_tape) = if record_any {
        let (out, tape) = model.distance_head.forward(&dh_input)?;
        (out[0], Some(tape))
    } else {
        (model.distance_head.eval(&dh_input)?[0], None)
    };

    Ok(LdiEval {
        distance: raw.abs(),
        weights,
        neighbor_indices,
        f_q,
        raw,
        feats,
        pool_feat_argmax,
        rel_feats,
        pooled_rel_argmax,
        feat_tapes,
        rel_tapes,
        wh_tapes,
        dh_tape,
    })
}

impl LdiEval<'_> {
    /// Backward pass for `distance_cot · d`. Parameter gradients are filled
    /// only in `Full` mode; the query gradient is always available (in
    /// `QueryGrad` or `Full` mode).
    pub fn backward(&self, model: &LdiModel, distance_cot: f64) -> Result<LdiGrads> {
        let (rel_tapes, wh_tapes, dh_tape) = match (&self.rel_tapes, &self.wh_tapes, &self.dh_tape)
        {
            (Some(r), Some(w), Some(d)) => (r, w, d),
            _ => {
                return Err(Error::InvalidArgument(
                    "indicator forward was not recorded for backward".to_string(),
                ))
            }
        };
        let want_params = self.feat_tapes.is_some();
        let f = model.feature_dim();
        let k = self.neighbor_indices.len();
        let craw = distance_cot * sign(self.raw);

        let mut grads = LdiGrads {
            feature_extractor: vec![0.0; if want_params { model.feature_extractor.params().len() } else { 0 }],
            relative_encoder: vec![0.0; if want_params { model.relative_encoder.params().len() } else { 0 }],
            weight_head: vec![0.0; if want_params { model.weight_head.params().len() } else { 0 }],
            distance_head: vec![0.0; if want_params { model.distance_head.params().len() } else { 0 }],
            query: Vec3::zeros(),
        };

        // Distance head.
        let (din_dh, gp_dh) = if want_params {
            dh_tape.grads(&[craw])?
        } else {
            (dh_tape.grad_input(&[craw])?, Vec::new())
        };
        if want_params {
            grads.distance_head = gp_dh;
        }
        let df_q = &din_dh[..f];
        let dpool_feat = &din_dh[f..2 * f];
        let mut dquery = Vec3::new(din_dh[2 * f], din_dh[2 * f + 1], din_dh[2 * f + 2]);

        // Patch feature cotangents (selected blend terms + pooled scatter).
        let mut dfeats: Vec<Vec<f64>> = if want_params {
            vec![Vec::new(); self.feats.len()]
        } else {
            Vec::new()
        };
        let add_feat_cot = |idx: usize, c: usize, v: f64, dfeats: &mut Vec<Vec<f64>>| {
            if dfeats[idx].is_empty() {
                dfeats[idx] = vec![0.0; f];
            }
            dfeats[idx][c] += v;
        };

        // Blend: f_q = Σ w_d f'_d + (1−w_d) f_d.
        let mut drel: Vec<Vec<f64>> = vec![vec![0.0; f]; k];
        let mut dpooled_rel = vec![0.0; f];
        for d in 0..k {
            let w = self.weights[d];
            let sel = self.neighbor_indices[d];
            let mut dw = 0.0;
            for c in 0..f {
                dw += (self.rel_feats[d][c] - self.feats[sel][c]) * df_q[c];
                drel[d][c] += w * df_q[c];
                if want_params {
                    add_feat_cot(sel, c, (1.0 - w) * df_q[c], &mut dfeats);
                }
            }
            // Through the logistic squash into the weight head.
            let dlogit = dw * w * (1.0 - w);
            let (din_wh, gp_wh) = if want_params {
                wh_tapes[d].grads(&[dlogit])?
            } else {
                (wh_tapes[d].grad_input(&[dlogit])?, Vec::new())
            };
            if want_params {
                for (g, v) in grads.weight_head.iter_mut().zip(&gp_wh) {
                    *g += v;
                }
            }
            for c in 0..f {
                drel[d][c] += din_wh[c];
                dpooled_rel[c] += din_wh[f + c];
            }
        }

        // Pooled relative feature scatters to its argmax rows.
        for c in 0..f {
            drel[self.pooled_rel_argmax[c]][c] += dpooled_rel[c];
        }

        // Relative encoder: input is (p_d − q), so the query gradient picks
        // up the negated input gradients.
        for d in 0..k {
            let (din_rel, gp_rel) = if want_params {
                rel_tapes[d].grads(&drel[d])?
            } else {
                (rel_tapes[d].grad_input(&drel[d])?, Vec::new())
            };
            if want_params {
                for (g, v) in grads.relative_encoder.iter_mut().zip(&gp_rel) {
                    *g += v;
                }
            }
            dquery.x -= din_rel[0];
            dquery.y -= din_rel[1];
            dquery.z -= din_rel[2];
        }

        // Pooled patch feature scatters to its argmax rows; feature
        // extractor parameters only matter in Full mode (patch points are
        // data, not trainables).
        if want_params {
            for c in 0..f {
                add_feat_cot(self.pool_feat_argmax[c], c, dpool_feat[c], &mut dfeats);
            }
            let feat_tapes = self.feat_tapes.as_ref().unwrap();
            for (idx, cot) in dfeats.iter().enumerate() {
                if cot.is_empty() {
                    continue;
                }
                let gp = feat_tapes[idx].grad_params(cot)?;
                for (g, v) in grads.feature_extractor.iter_mut().zip(&gp) {
                    *g += v;
                }
            }
        }

        grads.query = dquery;
        Ok(grads)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Builds training samples by jittering the sparse patch points with
/// Gaussian offsets of std `sigma` and labeling each query with the
/// distance to its nearest point in the dense patch (both patches must be
/// expressed in the same local frame).
pub fn build_training_samples(
    sparse_patch: &Patch,
    dense_patch: &Patch,
    queries_per_point: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Vec<LdiSample>> {
    if sparse_patch.is_empty() || dense_patch.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if sparse_patch.center() != dense_patch.center() || sparse_patch.scale() != dense_patch.scale()
    {
        return Err(Error::InvalidArgument(
            "sparse and dense patches must share one local frame".to_string(),
        ));
    }
    let dense_cloud = crate::geom::PointCloud::new(dense_patch.points().to_vec())?;
    let dense_index = SpatialIndex::build(&dense_cloud)?;
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|e| {
        Error::InvalidArgument(format!("bad sigma {sigma}: {e}"))
    })?;
    let shared = Arc::new(sparse_patch.clone());
    let mut samples = Vec::with_capacity(sparse_patch.len() * queries_per_point);
    for p in sparse_patch.points() {
        for _ in 0..queries_per_point {
            let query = if sigma == 0.0 {
                *p
            } else {
                p + Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
            };
            let (_, gt_distance) = dense_index.nearest(&query)?;
            samples.push(LdiSample {
                query,
                patch: Arc::clone(&shared),
                gt_distance,
            });
        }
    }
    Ok(samples)
}

/// Densifies a patch to `target_count` points by inserting midpoints of
/// each point and its nearest neighbors (rank by rank), deduplicating by
/// exact coordinates.
pub fn patch_interpolate(patch: &Patch, target_count: usize) -> Result<Patch> {
    if target_count < patch.len() {
        return Err(Error::InvalidArgument(format!(
            "interpolation target {} below patch size {}",
            target_count,
            patch.len()
        )));
    }
    if patch.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if target_count == patch.len() {
        return Ok(patch.clone());
    }
    let key = |p: &Vec3| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits());
    let mut seen: std::collections::HashSet<(u64, u64, u64)> =
        patch.points().iter().map(key).collect();
    let mut points = patch.points().to_vec();
    // Midpoints of base-set pairs, nearest ranks first; the base set only
    // grows to include inserted points when a pass over all ranks of the
    // current base cannot reach the target.
    let mut base_len = points.len();
    loop {
        let base_cloud = crate::geom::PointCloud::new(points[..base_len].to_vec())?;
        let index = SpatialIndex::build(&base_cloud)?;
        let mut added_any = false;
        'ranks: for rank in 1..base_len {
            for i in 0..base_len {
                let nn = index.knn(&points[i], rank + 1)?;
                let (j, _) = nn[rank];
                let mid = (points[i] + points[j]) / 2.0;
                if seen.insert(key(&mid)) {
                    points.push(mid);
                    added_any = true;
                    if points.len() == target_count {
                        break 'ranks;
                    }
                }
            }
        }
        if points.len() == target_count {
            break;
        }
        if !added_any && base_len == points.len() {
            return Err(Error::InsufficientPoints {
                needed: target_count,
                available: points.len(),
            });
        }
        base_len = points.len();
    }
    Patch::from_local_parts(
        points,
        patch.center(),
        patch.scale(),
        patch.source_indices().to_vec(),
    )
}

/// Mean L1 training step over a batch; returns the batch loss.
pub fn ldi_train_step(
    model: &mut LdiModel,
    batch: &[LdiSample],
    optimizer: &mut LdiOptimizer,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".to_string()));
    }
    // Fixed-size chunks keep the reduction order independent of thread
    // scheduling, so training is bit-reproducible.
    const CHUNK: usize = 8;
    let snapshot = &*model;
    let results: Vec<Result<(f64, LdiGrads)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss_sum = 0.0;
            let mut acc: Option<LdiGrads> = None;
            for sample in chunk {
                let eval = ldi_forward(snapshot, &sample.query, &sample.patch, RecordMode::Full)?;
                let err = eval.distance - sample.gt_distance;
                loss_sum += err.abs();
                let g = eval.backward(snapshot, sign(err))?;
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        add_assign(&mut a.feature_extractor, &g.feature_extractor);
                        add_assign(&mut a.relative_encoder, &g.relative_encoder);
                        add_assign(&mut a.weight_head, &g.weight_head);
                        add_assign(&mut a.distance_head, &g.distance_head);
                    }
                }
            }
            Ok((loss_sum, acc.unwrap()))
        })
        .collect();

    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut total: Option<LdiGrads> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match total.as_mut() {
            None => total = Some(g),
            Some(a) => {
                add_assign(&mut a.feature_extractor, &g.feature_extractor);
                add_assign(&mut a.relative_encoder, &g.relative_encoder);
                add_assign(&mut a.weight_head, &g.weight_head);
                add_assign(&mut a.distance_head, &g.distance_head);
            }
        }
    }
    loss *= inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "indicator training loss".to_string(),
        });
    }
    let mut total = total.unwrap();
    scale(&mut total.feature_extractor, inv);
    scale(&mut total.relative_encoder, inv);
    scale(&mut total.weight_head, inv);
    scale(&mut total.distance_head, inv);
    optimizer
        .feature_extractor
        .step(model.feature_extractor.params_mut(), &total.feature_extractor)?;
    optimizer
        .relative_encoder
        .step(model.relative_encoder.params_mut(), &total.relative_encoder)?;
    optimizer
        .weight_head
        .step(model.weight_head.params_mut(), &total.weight_head)?;
    optimizer
        .distance_head
        .step(model.distance_head.params_mut(), &total.distance_head)?;
    Ok(loss)
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn scale(a: &mut [f64], s: f64) {
    for x in a.iter_mut() {
        *x *= s;
    }
}

/// Adam state for the four indicator networks.
#[derive(Debug, Clone)]
pub struct LdiOptimizer {
    pub feature_extractor: OptimizerState,
    pub relative_encoder: OptimizerState,
    pub weight_head: OptimizerState,
    pub distance_head: OptimizerState,
}

impl LdiOptimizer {
    pub fn new(model: &LdiModel, learning_rate: f64) -> Self {
        Self {
            feature_extractor: OptimizerState::new(
                model.feature_extractor.params().len(),
                learning_rate,
            ),
            relative_encoder: OptimizerState::new(
                model.relative_encoder.params().len(),
                learning_rate,
            ),
            weight_head: OptimizerState::new(model.weight_head.params().len(), learning_rate),
            distance_head: OptimizerState::new(model.distance_head.params().len(), learning_rate),
        }
    }
}

/// Predicts the unsigned distance from a world-space query to the surface
/// described by the cloud, in world units: extract a patch around the
/// query, evaluate in its local frame, rescale back.
pub fn ldi_infer(
    model: &LdiModel,
    world_query: &Vec3,
    index: &SpatialIndex<'_>,
    patch_size: usize,
) -> Result<f64> {
    let patch = extract_patch(index, world_query, patch_size)?;
    let local = patch.local_from_world(world_query);
    let eval = ldi_forward(model, &local, &patch, RecordMode::None)?;
    Ok(eval.distance * patch.scale())
}

/// As [`ldi_infer`], additionally returning the gradient of the world-unit
/// distance with respect to the world query position. The patch selection
/// and its frame are locally constant, so the chain rule reduces to the
/// local query gradient (the 1/scale of the frame map cancels against the
/// scale of the output).
pub fn ldi_infer_grad(
    model: &LdiModel,
    world_query: &Vec3,
    index: &SpatialIndex<'_>,
    patch_size: usize,
) -> Result<(f64, Vec3)> {
    let patch = extract_patch(index, world_query, patch_size)?;
    let local = patch.local_from_world(world_query);
    let eval = ldi_forward(model, &local, &patch, RecordMode::QueryGrad)?;
    let grads = eval.backward(model, 1.0)?;
    Ok((eval.distance * patch.scale(), grads.query))
}

/// Outcome of a full training run.
pub struct LdiTrainOutcome {
    pub model: LdiModel,
    /// Mean absolute error on the held-out split, in local units.
    pub holdout_mae: f64,
    /// Per-step training losses.
    pub losses: Vec<f64>,
}

/// Trains a fresh indicator on the given samples with a 5% hold-out split.
pub fn train_ldi(samples: &[LdiSample], config: &RunConfig) -> Result<LdiTrainOutcome> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x1d1));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let holdout_len = (samples.len() / 20).max(1).min(samples.len() - 1);
    let (holdout_idx, train_idx) = order.split_at(holdout_len);

    let mut model = LdiModel::init(
        config.ldi_feature_dim,
        config.k_neighbors,
        config.patch_size,
        config.seed,
    )?;
    let mut optimizer = LdiOptimizer::new(&model, config.ldi_lr);
    let mut losses = Vec::with_capacity(config.ldi_steps);
    let mut batch = Vec::with_capacity(config.ldi_batch);
    for _ in 0..config.ldi_steps {
        batch.clear();
        for _ in 0..config.ldi_batch {
            let i = train_idx[rng.random_range(0..train_idx.len())];
            batch.push(samples[i].clone());
        }
        let loss = ldi_train_step(&mut model, &batch, &mut optimizer)?;
        losses.push(loss);
    }

    let holdout: Vec<LdiSample> = holdout_idx.iter().map(|&i| samples[i].clone()).collect();
    let holdout_mae = evaluate_mae(&model, &holdout)?;
    Ok(LdiTrainOutcome {
        model,
        holdout_mae,
        losses,
    })
}

/// Mean absolute prediction error over samples.
pub fn evaluate_mae(model: &LdiModel, samples: &[LdiSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".to_string()));
    }
    let errs: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let eval = ldi_forward(model, &s.query, &s.patch, RecordMode::None)?;
            Ok((eval.distance - s.gt_distance).abs())
        })
        .collect();
    let mut sum = 0.0;
    for e in errs {
        sum += e?;
    }
    Ok(sum / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::PointCloud;

    fn unit_patch(points: Vec<Vec3>) -> Patch {
        let cloud = PointCloud::new(points).unwrap();
        let (norm, c, s) = crate::geom::normalize_unit(&cloud).unwrap();
        Patch::from_local_parts(norm.points().to_vec(), c, s, (0..cloud.len()).collect()).unwrap()
    }

    fn random_patch(n: usize, seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        unit_patch(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn blend_arithmetic() {
        // k=2, w=(0.5, 0.5), f'=((2,0),(0,2)), f=((0,0),(0,0)) -> (1,1)
        let rel = vec![vec![2.0, 0.0], vec![0.0, 2.0]];
        let zeros = vec![0.0, 0.0];
        let sel = vec![&zeros, &zeros];
        let f_q = blend_features(&[0.5, 0.5], &rel, &sel);
        assert_eq!(f_q, vec![1.0, 1.0]);
    }

    #[test]
    fn weight_head_saturation_limits() {
        // Saturating the weight head isolates the two Eq-limits of the
        // blend: all-relative vs all-patch features.
        let mut model = LdiModel::init(8, 4, 16, 3).unwrap();
        let patch = random_patch(16, 1);
        let query = Vec3::new(0.1, 0.0, -0.05);

        let set_bias = |m: &mut MlpModel, v: f64| {
            let n = m.params().len();
            m.params_mut()[n - 1] = v; // final layer bias
        };

        // Zero all weight-head weights, huge positive bias -> w = 1.
        for p in model.weight_head.params_mut() {
            *p = 0.0;
        }
        set_bias(&mut model.weight_head, 1e3);
        let eval = ldi_forward(&model, &query, &patch, RecordMode::None).unwrap();
        assert!(eval.weights.iter().all(|&w| w == 1.0));
        let expect: Vec<f64> = (0..model.feature_dim())
            .map(|c| eval.rel_feats.iter().map(|r| r[c]).sum())
            .collect();
        for (a, b) in eval.f_q.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }

        // Huge negative bias -> w ~= 0 -> f_q ~= sum of selected patch features.
        set_bias(&mut model.weight_head, -1e3);
        let eval = ldi_forward(&model, &query, &patch, RecordMode::None).unwrap();
        assert!(eval.weights.iter().all(|&w| w < 1e-300));
        let expect: Vec<f64> = (0..model.feature_dim())
            .map(|c| {
                eval.neighbor_indices
                    .iter()
                    .map(|&i| eval.feats[i][c])
                    .sum()
            })
            .collect();
        for (a, b) in eval.f_q.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_invariants() {
        let model = LdiModel::init(16, 8, 32, 7).unwrap();
        for seed in 0..5 {
            let patch = random_patch(32, seed);
            let query = Vec3::new(0.2, -0.1, 0.3);
            let eval = ldi_forward(&model, &query, &patch, RecordMode::None).unwrap();
            assert!(eval.distance >= 0.0);
            assert!(eval.distance.is_finite());
            assert_eq!(eval.weights.len(), 8);
            assert!(eval.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn forward_errors_on_small_patch() {
        let model = LdiModel::init(8, 8, 16, 0).unwrap();
        let patch = random_patch(4, 0);
        assert!(matches!(
            ldi_forward(&model, &Vec3::zeros(), &patch, RecordMode::None),
            Err(Error::InsufficientPoints { .. })
        ));
    }

    #[test]
    fn permutation_invariance() {
        let model = LdiModel::init(16, 6, 24, 11).unwrap();
        let patch = random_patch(24, 5);
        let query = Vec3::new(0.05, 0.15, -0.2);
        let base = ldi_forward(&model, &query, &patch, RecordMode::None).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut perm: Vec<usize> = (0..patch.len()).collect();
        perm.shuffle(&mut rng);
        let permuted = Patch::from_local_parts(
            perm.iter().map(|&i| patch.points()[i]).collect(),
            patch.center(),
            patch.scale(),
            perm.clone(),
        )
        .unwrap();
        let shuffled = ldi_forward(&model, &query, &permuted, RecordMode::None).unwrap();
        assert!(
            (base.distance - shuffled.distance).abs() < 1e-12,
            "{} vs {}",
            base.distance,
            shuffled.distance
        );
    }

    #[test]
    fn build_samples_zero_sigma() {
        let sparse = random_patch(12, 3);
        // Dense patch: the sparse points plus extras, same frame.
        let mut dense_pts = sparse.points().to_vec();
        dense_pts.push(Vec3::new(0.9, 0.0, 0.0));
        let dense = Patch::from_local_parts(
            dense_pts,
            sparse.center(),
            sparse.scale(),
            vec![],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = build_training_samples(&sparse, &dense, 2, 0.0, &mut rng).unwrap();
        assert_eq!(samples.len(), 24);
        // Dense contains every sparse point, so every gt distance is 0.
        for s in &samples {
            assert_eq!(s.gt_distance, 0.0);
            assert!(sparse.points().contains(&s.query));
        }
    }

    #[test]
    fn build_samples_gt_is_nearest_dense_distance() {
        let sparse = unit_patch(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ]);
        let dense = Patch::from_local_parts(
            vec![Vec3::new(0.25, 0.0, 0.0)],
            sparse.center(),
            sparse.scale(),
            vec![],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = build_training_samples(&sparse, &dense, 1, 0.0, &mut rng).unwrap();
        for s in &samples {
            let want = (s.query - Vec3::new(0.25, 0.0, 0.0)).norm();
            assert!((s.gt_distance - want).abs() < 1e-15);
        }
    }

    #[test]
    fn build_samples_offset_std_matches_sigma() {
        let sparse = random_patch(16, 9);
        let dense = Patch::from_local_parts(
            sparse.points().to_vec(),
            sparse.center(),
            sparse.scale(),
            vec![],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sigma = 0.05;
        let samples = build_training_samples(&sparse, &dense, 240, sigma, &mut rng).unwrap();
        // Offsets relative to each sample's own source point.
        let mut sq_sum = 0.0;
        let mut count = 0usize;
        for (i, s) in samples.iter().enumerate() {
            let src = sparse.points()[i / 240];
            let off = s.query - src;
            sq_sum += off.norm_squared();
            count += 3;
        }
        let emp_std = (sq_sum / count as f64).sqrt();
        assert!(
            (emp_std - sigma).abs() < 0.1 * sigma,
            "empirical std {emp_std} vs sigma {sigma}"
        );
    }

    #[test]
    fn build_samples_frame_mismatch_errors() {
        let sparse = random_patch(8, 2);
        let dense = Patch::from_local_parts(
            sparse.points().to_vec(),
            sparse.center() + Vec3::new(1.0, 0.0, 0.0),
            sparse.scale(),
            vec![],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_training_samples(&sparse, &dense, 1, 0.0, &mut rng).is_err());
    }

    #[test]
    fn interpolate_midpoint_pair() {
        let patch = Patch::from_local_parts(
            vec![Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)],
            Vec3::zeros(),
            1.0,
            vec![0, 1],
        )
        .unwrap();
        let out = patch_interpolate(&patch, 3).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.points()[2], Vec3::zeros());
    }

    #[test]
    fn interpolate_identity_and_error() {
        let patch = random_patch(8, 1);
        let same = patch_interpolate(&patch, 8).unwrap();
        assert_eq!(same.points(), patch.points());
        assert!(patch_interpolate(&patch, 4).is_err());
    }

    #[test]
    fn interpolate_inserts_midpoints_of_original_pairs() {
        let patch = random_patch(16, 6);
        let out = patch_interpolate(&patch, 64).unwrap();
        assert_eq!(out.len(), 64);
        let originals = patch.points();
        for p in &out.points()[16..] {
            let is_midpoint = originals.iter().enumerate().any(|(i, a)| {
                originals
                    .iter()
                    .skip(i + 1)
                    .any(|b| ((a + b) / 2.0 - p).norm() < 1e-15)
            });
            assert!(is_midpoint, "{p:?} is not a midpoint of an original pair");
        }
        // Convexity keeps interpolated points inside the unit ball.
        for p in out.points() {
            assert!(p.norm() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let model = LdiModel::init(6, 3, 10, 21).unwrap();
        let patch = random_patch(10, 13);
        let query = Vec3::new(0.12, -0.2, 0.31);
        let eval = ldi_forward(&model, &query, &patch, RecordMode::Full).unwrap();
        // Keep the abs kink well away from the finite-difference step.
        assert!(eval.raw.abs() > 1e-3, "raw output too close to zero for FD");
        let grads = eval.backward(&model, 1.0).unwrap();

        let h = 1e-6;
        let eval_at = |m: &LdiModel, q: &Vec3| -> f64 {
            ldi_forward(m, q, &patch, RecordMode::None)
                .unwrap()
                .distance
        };

        let rel_err = |a: &[f64], b: &[f64]| -> f64 {
            let num = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let den = a
                .iter()
                .chain(b)
                .map(|x| x.abs())
                .fold(1e-9_f64, f64::max);
            num / den
        };

        // Parameter gradients of each sub-network.
        for part in 0..4 {
            let analytic = match part {
                0 => &grads.feature_extractor,
                1 => &grads.relative_encoder,
                2 => &grads.weight_head,
                _ => &grads.distance_head,
            };
            let mut fd = vec![0.0; analytic.len()];
            for i in 0..fd.len() {
                let bump = |delta: f64| -> f64 {
                    let mut m = model.clone();
                    let params = match part {
                        0 => m.feature_extractor.params_mut(),
                        1 => m.relative_encoder.params_mut(),
                        2 => m.weight_head.params_mut(),
                        _ => m.distance_head.params_mut(),
                    };
                    params[i] += delta;
                    eval_at(&m, &query)
                };
                fd[i] = (bump(h) - bump(-h)) / (2.0 * h);
            }
            let err = rel_err(analytic, &fd);
            assert!(err < 1e-5, "sub-network {part} param grad rel err {err}");
        }

        // Query gradient.
        let mut fd_q = [0.0; 3];
        for c in 0..3 {
            let mut qp = query;
            qp[c] += h;
            let mut qm = query;
            qm[c] -= h;
            fd_q[c] = (eval_at(&model, &qp) - eval_at(&model, &qm)) / (2.0 * h);
        }
        let analytic_q = [grads.query.x, grads.query.y, grads.query.z];
        let err = rel_err(&analytic_q, &fd_q);
        assert!(err < 1e-5, "query grad rel err {err}");
    }

    #[test]
    fn query_grad_mode_matches_full_mode() {
        let model = LdiModel::init(8, 4, 12, 5).unwrap();
        let patch = random_patch(12, 8);
        let query = Vec3::new(-0.15, 0.22, 0.07);
        let full = ldi_forward(&model, &query, &patch, RecordMode::Full)
            .unwrap()
            .backward(&model, 1.0)
            .unwrap();
        let lean = ldi_forward(&model, &query, &patch, RecordMode::QueryGrad)
            .unwrap()
            .backward(&model, 1.0)
            .unwrap();
        assert!((full.query - lean.query).norm() < 1e-15);
        assert!(lean.feature_extractor.is_empty());
    }

    #[test]
    fn train_step_on_perfect_model_keeps_loss_zero() {
        // Samples labeled with the model's own predictions: loss 0, and the
        // subgradient of |0| is 0, so parameters stay put.
        let mut model = LdiModel::init(8, 4, 12, 2).unwrap();
        let patch = Arc::new(random_patch(12, 3));
        let mut samples = Vec::new();
        for i in 0..4 {
            let query = Vec3::new(0.1 * i as f64, -0.05, 0.02);
            let d = ldi_forward(&model, &query, &patch, RecordMode::None)
                .unwrap()
                .distance;
            samples.push(LdiSample {
                query,
                patch: Arc::clone(&patch),
                gt_distance: d,
            });
        }
        let before = model.distance_head.params().to_vec();
        let mut opt = LdiOptimizer::new(&model, 1e-3);
        let loss = ldi_train_step(&mut model, &samples, &mut opt).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(model.distance_head.params(), before.as_slice());
    }

    #[test]
    fn constant_zero_model_loss_equals_gt() {
        // Zeroed distance head predicts 0 everywhere; L1 loss equals the
        // mean ground-truth distance.
        let mut model = LdiModel::init(8, 4, 12, 2).unwrap();
        for p in model.distance_head.params_mut() {
            *p = 0.0;
        }
        let patch = Arc::new(random_patch(12, 3));
        let c = 0.37;
        let samples: Vec<LdiSample> = (0..6)
            .map(|i| LdiSample {
                query: Vec3::new(0.05 * i as f64, 0.0, 0.0),
                patch: Arc::clone(&patch),
                gt_distance: c,
            })
            .collect();
        let mut opt = LdiOptimizer::new(&model, 0.0);
        let loss = ldi_train_step(&mut model, &samples, &mut opt).unwrap();
        assert!((loss - c).abs() < 1e-15);
    }

    #[test]
    fn train_step_determinism() {
        let patch = Arc::new(random_patch(16, 4));
        let samples: Vec<LdiSample> = (0..16)
            .map(|i| LdiSample {
                query: Vec3::new(0.03 * i as f64, -0.01 * i as f64, 0.0),
                patch: Arc::clone(&patch),
                gt_distance: 0.1,
            })
            .collect();
        let run = || -> Vec<f64> {
            let mut model = LdiModel::init(8, 4, 16, 9).unwrap();
            let mut opt = LdiOptimizer::new(&model, 1e-3);
            for _ in 0..3 {
                ldi_train_step(&mut model, &samples, &mut opt).unwrap();
            }
            model.distance_head.params().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn infer_translation_invariance() {
        let model = LdiModel::init(8, 4, 8, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<Vec3> = (0..32)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let q = Vec3::new(0.3, 0.1, -0.2);
        let t = Vec3::new(17.0, -4.0, 2.5);

        let cloud = PointCloud::new(pts.clone()).unwrap();
        let index = SpatialIndex::build(&cloud).unwrap();
        let d0 = ldi_infer(&model, &q, &index, 8).unwrap();

        let moved = PointCloud::new(pts.iter().map(|p| p + t).collect()).unwrap();
        let index_t = SpatialIndex::build(&moved).unwrap();
        let d1 = ldi_infer(&model, &(q + t), &index_t, 8).unwrap();
        assert!(
            (d0 - d1).abs() < 1e-12,
            "translation changed prediction: {d0} vs {d1}"
        );
    }

    #[test]
    fn infer_scale_equivariance() {
        let model = LdiModel::init(8, 4, 8, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pts: Vec<Vec3> = (0..32)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let q = Vec3::new(0.25, -0.3, 0.12);
        let s = 3.5;

        let cloud = PointCloud::new(pts.clone()).unwrap();
        let index = SpatialIndex::build(&cloud).unwrap();
        let d0 = ldi_infer(&model, &q, &index, 8).unwrap();

        let scaled = PointCloud::new(pts.iter().map(|p| p * s).collect()).unwrap();
        let index_s = SpatialIndex::build(&scaled).unwrap();
        let d1 = ldi_infer(&model, &(q * s), &index_s, 8).unwrap();
        assert!(
            (d1 - s * d0).abs() < 1e-12 * s,
            "scaling broke equivariance: {d1} vs {}",
            s * d0
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = LdiModel::init(16, 8, 64, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ldi.ckpt");
        model.save(&path).unwrap();
        let back = LdiModel::load(&path).unwrap();
        assert_eq!(back.k_neighbors, 8);
        assert_eq!(back.patch_size, 64);
        for (a, b) in [
            (&model.feature_extractor, &back.feature_extractor),
            (&model.relative_encoder, &back.relative_encoder),
            (&model.weight_head, &back.weight_head),
            (&model.distance_head, &back.distance_head),
        ] {
            assert_eq!(a.spec(), b.spec());
            assert!(a
                .params()
                .iter()
                .zip(b.params())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
