//! Per-shape global unsigned distance field: query sampling, the pulling
//! projection, the combined loss, and the fitting loop guided by a frozen
//! local distance indicator.
//!
//! The field network maps a point in the normalized cloud frame to a raw
//! scalar whose absolute value is the predicted unsigned distance, so the
//! field is non-negative by construction. A query `q` is projected to
//! `q' = q − g(q)·∇g(q)/‖∇g(q)‖`. The per-step loss is
//!
//! `L = L_local + α·L_np + β(t)·L_surf + γ·L_sp`
//!
//! with `L_local = |indicator(q')|`, `L_np = ‖q' − q_s‖` anchored at the
//! nearest input point of the original query, `L_surf = mean |g(s_i)|`
//! over an input minibatch, `L_sp = |g(q)|`, and β decaying linearly over
//! the step budget. Training differentiates through the projection,
//! including the dependence on ∇g, via the network's second-order pass.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::{normalize_unit, PointCloud, SpatialIndex, Vec3};
use crate::io::ckpt;
use crate::ldi::{ldi_infer, ldi_infer_grad, LdiModel};
use crate::metrics::OracleSurface;
use crate::nn::{Link, LinkKind, MlpModel, MlpSpec, OptimizerState};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Anything that evaluates an unsigned distance and its spatial gradient.
pub trait DistanceField: Sync {
    fn distance(&self, q: &Vec3) -> Result<f64>;
    fn distance_and_gradient(&self, q: &Vec3) -> Result<(f64, Vec3)>;
    /// Whether the field is usable for projection (e.g. has been fitted).
    fn is_ready(&self) -> bool {
        true
    }
}

/// The global unsigned distance network: 8 fully connected layers with a
/// residual connection, absolute-valued output.
#[derive(Debug, Clone)]
pub struct FieldModel {
    pub net: MlpModel,
    pub trained: bool,
}

impl FieldModel {
    /// Residual connection from the first hidden layer into the sixth.
    fn spec(hidden: usize) -> MlpSpec {
        let mut spec = MlpSpec::chain(&[3, hidden, hidden, hidden, hidden, hidden, hidden, hidden, 1]);
        spec.links.push(Link {
            from: 1,
            to: 6,
            kind: LinkKind::Add,
        });
        spec
    }

    pub fn init(hidden: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            net: MlpModel::init(Self::spec(hidden), seed)?,
            trained: false,
        })
    }

    /// Raw (signed) network output.
    pub fn raw(&self, q: &Vec3) -> Result<f64> {
        Ok(self.net.eval(&[q.x, q.y, q.z])?[0])
    }
}

impl DistanceField for FieldModel {
    fn distance(&self, q: &Vec3) -> Result<f64> {
        Ok(self.raw(q)?.abs())
    }

    fn distance_and_gradient(&self, q: &Vec3) -> Result<(f64, Vec3)> {
        let (y, tape) = self.net.forward(&[q.x, q.y, q.z])?;
        let gi = tape.grad_input(&[1.0])?;
        let s = sign(y[0]);
        Ok((
            y[0].abs(),
            Vec3::new(s * gi[0], s * gi[1], s * gi[2]),
        ))
    }

    fn is_ready(&self) -> bool {
        self.trained
    }
}

/// Closed-form field backed by an oracle surface; the gradient follows
/// from the exact foot point, so a single pull lands on the surface.
#[derive(Debug, Clone)]
pub struct AnalyticField(pub OracleSurface);

impl DistanceField for AnalyticField {
    fn distance(&self, q: &Vec3) -> Result<f64> {
        Ok(self.0.udf(q).distance)
    }

    fn distance_and_gradient(&self, q: &Vec3) -> Result<(f64, Vec3)> {
        let eval = self.0.udf(q);
        if eval.distance == 0.0 {
            return Ok((0.0, Vec3::zeros()));
        }
        Ok((eval.distance, (q - eval.foot) / eval.distance))
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

/// Loss term weights with the linear β schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub gamma: f64,
    pub total_steps: usize,
}

impl LossWeights {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            alpha: config.alpha,
            beta_start: config.beta_start,
            beta_end: config.beta_end,
            gamma: config.gamma,
            total_steps: config.field_steps,
        }
    }

    /// β at step `t`: linear from `beta_start` to `beta_end` over the
    /// budget (clamped past the end).
    pub fn beta_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.beta_start;
        }
        let frac = (step as f64 / self.total_steps as f64).min(1.0);
        self.beta_start + (self.beta_end - self.beta_start) * frac
    }
}

/// Where a training query came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    GaussianNearSurface,
    GlobalUniform,
}

/// A batch of field queries with per-query provenance.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub queries: Vec<Vec3>,
    pub sources: Vec<QuerySource>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Samples the training query pool: `per_point` Gaussian offsets around
/// each input point with per-point std `sigma_fraction ×` (distance to its
/// `nn_rank`-th neighbor), plus `global_count` uniform samples over the
/// bounding box expanded by 10% per axis.
pub fn sample_training_queries(
    cloud: &PointCloud,
    index: &SpatialIndex<'_>,
    per_point: usize,
    sigma_fraction: f64,
    nn_rank: usize,
    global_count: usize,
    seed: u64,
) -> Result<QueryBatch> {
    if cloud.len() <= nn_rank {
        return Err(Error::InsufficientPoints {
            needed: nn_rank + 1,
            available: cloud.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::with_capacity(cloud.len() * per_point + global_count);
    let mut sources = Vec::with_capacity(queries.capacity());
    let unit_normal = Normal::new(0.0, 1.0).unwrap();
    for p in cloud.points() {
        // knn includes the query point itself at distance 0; the entry at
        // position nn_rank is therefore its nn_rank-th neighbor.
        let nn = index.knn(p, nn_rank + 1)?;
        let sigma = sigma_fraction * nn[nn_rank].1;
        for _ in 0..per_point {
            let q = if sigma == 0.0 {
                *p
            } else {
                p + Vec3::new(
                    sigma * unit_normal.sample(&mut rng),
                    sigma * unit_normal.sample(&mut rng),
                    sigma * unit_normal.sample(&mut rng),
                )
            };
            queries.push(q);
            sources.push(QuerySource::GaussianNearSurface);
        }
    }
    if global_count > 0 {
        let (lo, hi) = cloud.bounding_box().ok_or(Error::EmptyCloud)?;
        let mut lo_pad = lo;
        let mut hi_pad = hi;
        for a in 0..3 {
            let pad = 0.05 * (hi[a] - lo[a]);
            lo_pad[a] -= pad;
            hi_pad[a] += pad;
        }
        for _ in 0..global_count {
            let q = Vec3::new(
                sample_range(&mut rng, lo_pad.x, hi_pad.x),
                sample_range(&mut rng, lo_pad.y, hi_pad.y),
                sample_range(&mut rng, lo_pad.z, hi_pad.z),
            );
            queries.push(q);
            sources.push(QuerySource::GlobalUniform);
        }
    }
    Ok(QueryBatch { queries, sources })
}

fn sample_range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// One projection step.
#[derive(Debug, Clone, Copy)]
pub struct PullResult {
    pub q_prime: Vec3,
    pub distance: f64,
    pub gradient: Vec3,
}

/// Projects `q` onto the zero-level set: `q' = q − g(q)·∇g(q)/‖∇g(q)‖`.
///
/// A zero predicted distance is a fixed point regardless of the gradient;
/// otherwise a gradient norm at or below `eps_grad` is an error the caller
/// should skip.
pub fn pull_query<F: DistanceField + ?Sized>(
    field: &F,
    q: &Vec3,
    eps_grad: f64,
) -> Result<PullResult> {
    let (g, grad) = field.distance_and_gradient(q)?;
    let norm = grad.norm();
    if g == 0.0 {
        return Ok(PullResult {
            q_prime: *q,
            distance: g,
            gradient: grad,
        });
    }
    if norm <= eps_grad {
        return Err(Error::DegenerateGradient { eps: eps_grad });
    }
    Ok(PullResult {
        q_prime: q - grad * (g / norm),
        distance: g,
        gradient: grad,
    })
}

/// Per-query loss terms at one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub l_local: f64,
    pub l_np: f64,
    pub l_surf: f64,
    pub l_sp: f64,
    pub total: f64,
}

/// Diagnostic evaluation of every loss term for a single query.
///
/// `L_surf` is evaluated over the full cloud here; the fitting loop uses a
/// per-step minibatch instead.
pub fn compute_losses(
    model: &FieldModel,
    ldi: &LdiModel,
    cloud: &PointCloud,
    index: &SpatialIndex<'_>,
    query: &Vec3,
    weights: &LossWeights,
    step: usize,
    eps_grad: f64,
) -> Result<LossBreakdown> {
    let pull = pull_query(model, query, eps_grad)?;
    let l_local = ldi_infer(ldi, &pull.q_prime, index, ldi.patch_size)?;
    let (q_s, _) = index.nearest(query)?;
    let l_np = (pull.q_prime - q_s).norm();
    let mut surf_sum = 0.0;
    for s in cloud.points() {
        surf_sum += model.distance(s)?;
    }
    let l_surf = surf_sum / cloud.len() as f64;
    let l_sp = pull.distance;
    let beta = weights.beta_at(step);
    Ok(LossBreakdown {
        l_local,
        l_np,
        l_surf,
        l_sp,
        total: l_local + weights.alpha * l_np + beta * l_surf + weights.gamma * l_sp,
    })
}

/// Field fitting outcome status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Completed,
    EarlyStopped { step: usize },
    /// Loss went non-finite; the returned model is the last snapshot taken
    /// before the divergence.
    Diverged { step: usize },
}

/// One line of the training log.
#[derive(Debug, Clone, Copy)]
pub struct TrainingRecord {
    pub step: usize,
    pub l_local: f64,
    pub l_np: f64,
    pub l_surf: f64,
    pub l_sp: f64,
    pub beta: f64,
    pub skipped: usize,
    pub total: f64,
}

/// Line-delimited training report.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub seed: u64,
    pub records: Vec<TrainingRecord>,
    pub skipped_total: usize,
}

impl TrainingReport {
    pub fn to_lines(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 96 + 64);
        out.push_str(&format!("# seed={}\n", self.seed));
        for r in &self.records {
            out.push_str(&format!(
                "step={} l_local={:.6e} l_np={:.6e} l_surf={:.6e} l_sp={:.6e} beta={:.6} skipped={} total={:.6e}\n",
                r.step, r.l_local, r.l_np, r.l_surf, r.l_sp, r.beta, r.skipped, r.total
            ));
        }
        out
    }
}

/// Result of [`fit_field`].
pub struct FitOutcome {
    pub model: FieldModel,
    pub report: TrainingReport,
    pub status: FitStatus,
}

struct QueryTerm {
    grads: Vec<f64>,
    l_local: f64,
    l_np: f64,
    l_sp: f64,
}

/// Gradient contribution of one query, differentiating through the pull.
///
/// With `u = v/‖v‖` and `q' = q − g·u`, the loss cotangent on `q'` maps to
/// `∂ℓ/∂g = −dq'·u + γ` and `∂ℓ/∂v = −(g/‖v‖)(I − uuᵀ)·dq'`, which the
/// network's second-order pass turns into parameter gradients.
fn query_gradient(
    model: &FieldModel,
    ldi: &LdiModel,
    index: &SpatialIndex<'_>,
    query: &Vec3,
    alpha: f64,
    gamma: f64,
    eps_grad: f64,
    patch_size: usize,
) -> Result<Option<QueryTerm>> {
    let (y, tape) = model.net.forward(&[query.x, query.y, query.z])?;
    let y = y[0];
    let s = sign(y);
    let g = y.abs();
    let gi = tape.grad_input(&[1.0])?;
    let v = Vec3::new(s * gi[0], s * gi[1], s * gi[2]);
    let vn = v.norm();
    if g != 0.0 && vn <= eps_grad {
        return Ok(None); // degenerate pull, skip this query
    }
    let (q_prime, u) = if g == 0.0 {
        (*query, Vec3::zeros())
    } else {
        let u = v / vn;
        (query - u * g, u)
    };

    let (l_local, dldi) = ldi_infer_grad(ldi, &q_prime, index, patch_size)?;
    let (q_s, _) = index.nearest(query)?;
    let np_vec = q_prime - q_s;
    let l_np = np_vec.norm();
    let dnp = if l_np > 0.0 {
        np_vec / l_np
    } else {
        Vec3::zeros()
    };
    // Cotangent on the projected point.
    let dq_prime = dldi + dnp * alpha;
    // Cotangents on g and v through q' = q − g·u, plus the direct γ·g term.
    let dg = -dq_prime.dot(&u) + gamma;
    let dv = if g == 0.0 || vn == 0.0 {
        Vec3::zeros()
    } else {
        let proj = dq_prime - u * u.dot(&dq_prime);
        -proj * (g / vn)
    };
    // Map onto the raw output: g = s·y, v = s·∇y.
    let a = [s * dg];
    let c = [s * dv.x, s * dv.y, s * dv.z];
    let grads =
        model
            .net
            .grad_params_value_and_jvp(&[query.x, query.y, query.z], &a, &c, &[1.0])?;
    Ok(Some(QueryTerm {
        grads,
        l_local,
        l_np,
        l_sp: g,
    }))
}

fn is_numeric_blowup(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. } | Error::NonFiniteLayer { .. } | Error::NonFinitePoint { .. }
    )
}

/// Fits the field to a normalized cloud under a frozen indicator.
///
/// Deterministic for a given config seed. On divergence the last snapshot
/// is returned with `FitStatus::Diverged`. `field_steps == 0` returns the
/// freshly initialized model with the trained flag unset.
pub fn fit_field(cloud: &PointCloud, ldi: &LdiModel, config: &RunConfig) -> Result<FitOutcome> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let max_norm = cloud.points().iter().map(|p| p.norm()).fold(0.0, f64::max);
    if max_norm > 1.0 + 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "cloud must be normalized to the unit ball (max norm {max_norm})"
        )));
    }
    if cloud.len() < ldi.patch_size {
        return Err(Error::InsufficientPoints {
            needed: ldi.patch_size,
            available: cloud.len(),
        });
    }
    let index = SpatialIndex::build(cloud)?;
    let mut model = FieldModel::init(config.field_hidden, config.seed)?;
    let weights = LossWeights::from_config(config);
    let mut report = TrainingReport {
        seed: config.seed,
        records: Vec::with_capacity(config.field_steps),
        skipped_total: 0,
    };
    if config.field_steps == 0 {
        return Ok(FitOutcome {
            model,
            report,
            status: FitStatus::Completed,
        });
    }

    let near_count = cloud.len() * config.queries_per_point;
    let global_count = (near_count as f64 * config.global_query_fraction).round() as usize;
    let pool = sample_training_queries(
        cloud,
        &index,
        config.queries_per_point,
        config.sigma_fraction,
        config.nn_rank,
        global_count,
        config.seed.wrapping_add(0xf1e1d),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xba7c4));
    let mut optimizer = OptimizerState::new(model.net.params().len(), config.field_lr);
    // Exponential decay to 5% of the initial rate over the budget; a fixed
    // rate leaves the fit jittering at an optimizer-noise plateau well
    // above what the indicator supports.
    const LR_FLOOR_RATIO: f64 = 0.05;
    let mut snapshot = model.net.params().to_vec();
    let mut status = FitStatus::Completed;
    let mut totals: Vec<f64> = Vec::with_capacity(config.field_steps);

    const CHUNK: usize = 8;
    for step in 0..config.field_steps {
        if step > 0 && step % 100 == 0 {
            snapshot.copy_from_slice(model.net.params());
        }
        let beta = weights.beta_at(step);
        optimizer.learning_rate =
            config.field_lr * LR_FLOOR_RATIO.powf(step as f64 / config.field_steps as f64);

        let query_batch: Vec<Vec3> = (0..config.field_query_batch)
            .map(|_| pool.queries[rng.random_range(0..pool.queries.len())])
            .collect();
        let surf_batch: Vec<Vec3> = (0..config.field_surf_batch.min(cloud.len()))
            .map(|_| cloud.points()[rng.random_range(0..cloud.len())])
            .collect();

        let step_result: Result<(Vec<f64>, f64, f64, f64, f64, usize)> = (|| {
            let model_ref = &model;
            let index_ref = &index;
            let chunk_results: Vec<Result<(Vec<f64>, f64, f64, f64, usize, usize)>> = query_batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut grads: Option<Vec<f64>> = None;
                    let (mut ll, mut ln, mut ls) = (0.0, 0.0, 0.0);
                    let mut used = 0usize;
                    let mut skipped = 0usize;
                    for q in chunk {
                        match query_gradient(
                            model_ref,
                            ldi,
                            index_ref,
                            q,
                            weights.alpha,
                            weights.gamma,
                            config.eps_grad,
                            ldi.patch_size,
                        )? {
                            Some(term) => {
                                ll += term.l_local;
                                ln += term.l_np;
                                ls += term.l_sp;
                                used += 1;
                                match grads.as_mut() {
                                    None => grads = Some(term.grads),
                                    Some(acc) => {
                                        for (a, b) in acc.iter_mut().zip(&term.grads) {
                                            *a += b;
                                        }
                                    }
                                }
                            }
                            None => skipped += 1,
                        }
                    }
                    Ok((
                        grads.unwrap_or_else(|| vec![0.0; model_ref.net.params().len()]),
                        ll,
                        ln,
                        ls,
                        used,
                        skipped,
                    ))
                })
                .collect();

            let mut grad_total = vec![0.0; model.net.params().len()];
            let (mut ll, mut ln, mut ls) = (0.0, 0.0, 0.0);
            let mut used = 0usize;
            let mut skipped = 0usize;
            for r in chunk_results {
                let (g, a, b, c, u, s) = r?;
                for (x, y) in grad_total.iter_mut().zip(&g) {
                    *x += y;
                }
                ll += a;
                ln += b;
                ls += c;
                used += u;
                skipped += s;
            }
            if used == 0 {
                return Err(Error::DegenerateGradient {
                    eps: config.eps_grad,
                });
            }
            let inv_q = 1.0 / used as f64;
            for x in grad_total.iter_mut() {
                *x *= inv_q;
            }

            // Surface term over the minibatch.
            let surf_results: Vec<Result<(Vec<f64>, f64)>> = surf_batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut grads: Option<Vec<f64>> = None;
                    let mut sum = 0.0;
                    for p in chunk {
                        let (y, tape) = model_ref.net.forward(&[p.x, p.y, p.z])?;
                        sum += y[0].abs();
                        let gp = tape.grad_params(&[sign(y[0])])?;
                        match grads.as_mut() {
                            None => grads = Some(gp),
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&gp) {
                                    *a += b;
                                }
                            }
                        }
                    }
                    Ok((grads.unwrap_or_else(|| vec![0.0; model_ref.net.params().len()]), sum))
                })
                .collect();
            let mut surf_sum = 0.0;
            let inv_s = 1.0 / surf_batch.len() as f64;
            for r in surf_results {
                let (g, s) = r?;
                surf_sum += s;
                for (x, y) in grad_total.iter_mut().zip(&g) {
                    *x += beta * inv_s * y;
                }
            }
            Ok((
                grad_total,
                ll * inv_q,
                ln * inv_q,
                surf_sum * inv_s,
                ls * inv_q,
                skipped,
            ))
        })();

        let (grad_total, l_local, l_np, l_surf, l_sp, skipped) = match step_result {
            Ok(v) => v,
            Err(e) if is_numeric_blowup(&e) => {
                model.net.params_mut().copy_from_slice(&snapshot);
                status = FitStatus::Diverged { step };
                report.records.push(TrainingRecord {
                    step,
                    l_local: f64::NAN,
                    l_np: f64::NAN,
                    l_surf: f64::NAN,
                    l_sp: f64::NAN,
                    beta,
                    skipped: 0,
                    total: f64::NAN,
                });
                break;
            }
            Err(e) => return Err(e),
        };
        let total = l_local + weights.alpha * l_np + beta * l_surf + weights.gamma * l_sp;
        if !total.is_finite() || grad_total.iter().any(|g| !g.is_finite()) {
            model.net.params_mut().copy_from_slice(&snapshot);
            status = FitStatus::Diverged { step };
            report.records.push(TrainingRecord {
                step,
                l_local,
                l_np,
                l_surf,
                l_sp,
                beta,
                skipped,
                total,
            });
            break;
        }

        optimizer.step(model.net.params_mut(), &grad_total)?;
        report.skipped_total += skipped;
        report.records.push(TrainingRecord {
            step,
            l_local,
            l_np,
            l_surf,
            l_sp,
            beta,
            skipped,
            total,
        });
        totals.push(total);

        // Early stop on stalled windowed improvement.
        let w = config.early_stop_window;
        if w > 0 && totals.len() >= 2 * w && totals.len() % w == 0 {
            let cur: f64 = totals[totals.len() - w..].iter().sum::<f64>() / w as f64;
            let prev: f64 =
                totals[totals.len() - 2 * w..totals.len() - w].iter().sum::<f64>() / w as f64;
            if prev.abs() > 0.0 && (prev - cur) / prev.abs() < config.early_stop_rel_improvement {
                status = FitStatus::EarlyStopped { step };
                break;
            }
        }
    }

    if !matches!(status, FitStatus::Diverged { .. }) {
        model.trained = true;
    }
    Ok(FitOutcome {
        model,
        report,
        status,
    })
}

/// A fitted field bundled with the normalization transform of the cloud it
/// was fitted to; this is the on-disk checkpoint unit.
#[derive(Debug, Clone)]
pub struct FittedField {
    pub field: FieldModel,
    pub center: Vec3,
    pub scale: f64,
}

impl FittedField {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        ckpt::write_header(&mut w, ckpt::Kind::Field)?;
        ckpt::write_mlp(&mut w, &self.field.net)?;
        ckpt::write_u8(&mut w, self.field.trained as u8)?;
        ckpt::write_vec3(&mut w, &self.center)?;
        ckpt::write_f64(&mut w, self.scale)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        ckpt::expect_kind(&mut r, ckpt::Kind::Field)?;
        let net = ckpt::read_mlp(&mut r)?;
        let trained = ckpt::read_u8(&mut r)? != 0;
        let center = ckpt::read_vec3(&mut r)?;
        let scale = ckpt::read_f64(&mut r)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has invalid scale {scale}"
            )));
        }
        Ok(Self {
            field: FieldModel { net, trained },
            center,
            scale,
        })
    }
}

/// Convenience driver: normalizes a world-space cloud, fits the field, and
/// bundles the transform into the checkpoint struct.
pub fn fit_to_cloud(
    cloud_world: &PointCloud,
    ldi: &LdiModel,
    config: &RunConfig,
) -> Result<(FittedField, TrainingReport, FitStatus)> {
    let (normalized, center, scale) = normalize_unit(cloud_world)?;
    let outcome = fit_field(&normalized, ldi, config)?;
    Ok((
        FittedField {
            field: outcome.model,
            center,
            scale,
        },
        outcome.report,
        outcome.status,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::PointCloud;

    fn sphere_cloud(n: usize, seed: u64) -> PointCloud {
        let sphere = OracleSurface::sphere(Vec3::zeros(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(sphere.sample(n, &mut rng).unwrap()).unwrap()
    }

    #[test]
    fn beta_schedule_endpoints_and_midpoint() {
        let w = LossWeights {
            alpha: 1.0,
            beta_start: 0.5,
            beta_end: 0.0,
            gamma: 0.1,
            total_steps: 1000,
        };
        assert_eq!(w.beta_at(0), 0.5);
        assert!((w.beta_at(500) - 0.25).abs() < 1e-15);
        assert_eq!(w.beta_at(1000), 0.0);
        assert_eq!(w.beta_at(2000), 0.0);
    }

    #[test]
    fn pull_on_analytic_sphere() {
        let field = AnalyticField(OracleSurface::sphere(Vec3::zeros(), 1.0).unwrap());
        let out = pull_query(&field, &Vec3::new(2.0, 0.0, 0.0), 1e-8).unwrap();
        assert!((out.q_prime - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        // Interior points get pushed outward onto the surface.
        let inner = pull_query(&field, &Vec3::new(0.5, 0.0, 0.0), 1e-8).unwrap();
        assert!((inner.q_prime - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        // On-surface points are fixed points.
        let on = pull_query(&field, &Vec3::new(0.0, 1.0, 0.0), 1e-8).unwrap();
        assert_eq!(on.q_prime, Vec3::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn pull_idempotent_on_analytic_field() {
        let field = AnalyticField(OracleSurface::sphere(Vec3::zeros(), 1.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let q = Vec3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            );
            if q.norm() < 1e-6 {
                continue;
            }
            let once = pull_query(&field, &q, 1e-12).unwrap().q_prime;
            assert!((once.norm() - 1.0).abs() < 1e-12);
            let twice = pull_query(&field, &once, 1e-12).unwrap().q_prime;
            assert!((twice - once).norm() < 1e-12);
        }
    }

    #[test]
    fn degenerate_gradient_detected() {
        // Constant non-zero field: zero weights, non-zero final bias.
        let mut model = FieldModel::init(8, 0).unwrap();
        for p in model.net.params_mut() {
            *p = 0.0;
        }
        let n = model.net.params().len();
        model.net.params_mut()[n - 1] = 0.5;
        assert!(matches!(
            pull_query(&model, &Vec3::new(0.1, 0.2, 0.3), 1e-8),
            Err(Error::DegenerateGradient { .. })
        ));
        // All-zero field: distance 0 everywhere, every point is fixed.
        model.net.params_mut()[n - 1] = 0.0;
        let out = pull_query(&model, &Vec3::new(0.1, 0.2, 0.3), 1e-8).unwrap();
        assert_eq!(out.q_prime, Vec3::new(0.1, 0.2, 0.3));
    }

    #[test]
    fn query_sampling_sigma_and_counts() {
        // Grid cloud with known neighbor distances: 0, 1, 2, ... along x.
        let cloud = PointCloud::new((0..8).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect()).unwrap();
        let index = SpatialIndex::build(&cloud).unwrap();
        let batch =
            sample_training_queries(&cloud, &index, 100, 0.2, 2, 40, 11).unwrap();
        assert_eq!(batch.len(), 8 * 100 + 40);
        assert_eq!(
            batch.sources.iter().filter(|s| **s == QuerySource::GlobalUniform).count(),
            40
        );
        // Point 0's 2nd neighbor is (2,0,0): sigma = 0.2 * 2 = 0.4.
        let first: Vec<_> = batch.queries[..100].to_vec();
        let mut sq = 0.0;
        for q in &first {
            sq += (q - Vec3::zeros()).norm_squared();
        }
        let emp = (sq / (3.0 * first.len() as f64)).sqrt();
        assert!((emp - 0.4).abs() < 0.08, "empirical sigma {emp}");
        // Global queries stay in the padded bounding box.
        for (q, s) in batch.queries.iter().zip(&batch.sources) {
            if *s == QuerySource::GlobalUniform {
                assert!(q.x >= -0.35 - 1e-12 && q.x <= 7.35 + 1e-12);
            }
        }
    }

    #[test]
    fn query_sampling_zero_sigma_and_size_errors() {
        let cloud = sphere_cloud(20, 1);
        let index = SpatialIndex::build(&cloud).unwrap();
        let batch = sample_training_queries(&cloud, &index, 3, 0.0, 5, 0, 2).unwrap();
        for (i, q) in batch.queries.iter().enumerate() {
            assert_eq!(*q, cloud.points()[i / 3]);
        }
        assert!(matches!(
            sample_training_queries(&cloud, &index, 1, 0.2, 20, 0, 2),
            Err(Error::InsufficientPoints { .. })
        ));
    }

    #[test]
    fn compute_losses_on_zero_field() {
        // Zeroed net: g == 0 everywhere, so q' = q, L_sp = L_surf = 0 and
        // L_np is the distance to the nearest input point.
        let cloud = sphere_cloud(48, 5);
        let index = SpatialIndex::build(&cloud).unwrap();
        let ldi = LdiModel::init(8, 4, 16, 3).unwrap();
        let mut model = FieldModel::init(16, 0).unwrap();
        for p in model.net.params_mut() {
            *p = 0.0;
        }
        let weights = LossWeights {
            alpha: 1.0,
            beta_start: 0.5,
            beta_end: 0.0,
            gamma: 0.1,
            total_steps: 100,
        };
        let q = Vec3::new(0.3, 0.2, 0.1);
        let out = compute_losses(&model, &ldi, &cloud, &index, &q, &weights, 0, 1e-8).unwrap();
        assert_eq!(out.l_surf, 0.0);
        assert_eq!(out.l_sp, 0.0);
        let (q_s, _) = index.nearest(&q).unwrap();
        assert!((out.l_np - (q - q_s).norm()).abs() < 1e-15);
        assert!(out.l_local >= 0.0);
        assert!(
            (out.total - (out.l_local + out.l_np + 0.5 * out.l_surf + 0.1 * out.l_sp)).abs()
                < 1e-15
        );
    }

    #[test]
    fn query_gradient_matches_finite_differences() {
        // Full per-query objective l = d_ldi(q') + α‖q'−q_s‖ + γ·g(q),
        // differentiated in the field parameters through the pull.
        let cloud = sphere_cloud(32, 9);
        let index = SpatialIndex::build(&cloud).unwrap();
        let ldi = LdiModel::init(6, 3, 10, 17).unwrap();
        let model = FieldModel::init(10, 4).unwrap();
        let (alpha, gamma, eps) = (1.0, 0.1, 1e-10);
        let q = Vec3::new(0.4, -0.3, 0.55);

        let term = query_gradient(&model, &ldi, &index, &q, alpha, gamma, eps, ldi.patch_size)
            .unwrap()
            .expect("pull should not be degenerate");

        let eval_loss = |m: &FieldModel| -> f64 {
            let pull = pull_query(m, &q, eps).unwrap();
            let l_local = ldi_infer(&ldi, &pull.q_prime, &index, ldi.patch_size).unwrap();
            let (q_s, _) = index.nearest(&q).unwrap();
            l_local + alpha * (pull.q_prime - q_s).norm() + gamma * pull.distance
        };

        let h = 1e-6;
        let mut fd = vec![0.0; term.grads.len()];
        for i in 0..fd.len() {
            let mut plus = model.clone();
            plus.net.params_mut()[i] += h;
            let mut minus = model.clone();
            minus.net.params_mut()[i] -= h;
            fd[i] = (eval_loss(&plus) - eval_loss(&minus)) / (2.0 * h);
        }
        let num = term
            .grads
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let den = term
            .grads
            .iter()
            .chain(&fd)
            .map(|x| x.abs())
            .fold(1e-9_f64, f64::max);
        assert!(num / den < 1e-5, "pull-through gradient rel err {}", num / den);
    }

    #[test]
    fn fit_zero_steps_returns_untrained_model() {
        let cloud = sphere_cloud(64, 2);
        let (normalized, _, _) = normalize_unit(&cloud).unwrap();
        let ldi = LdiModel::init(8, 4, 16, 3).unwrap();
        let mut config = RunConfig::default();
        config.field_steps = 0;
        config.field_hidden = 16;
        let out = fit_field(&normalized, &ldi, &config).unwrap();
        assert!(!out.model.trained);
        assert!(out.report.records.is_empty());
        assert_eq!(out.status, FitStatus::Completed);
    }

    #[test]
    fn fit_is_deterministic_and_reduces_loss() {
        let cloud = sphere_cloud(40, 6);
        let (normalized, _, _) = normalize_unit(&cloud).unwrap();
        let ldi = LdiModel::init(6, 3, 10, 3).unwrap();
        let mut config = RunConfig::default();
        config.patch_size = 10;
        config.k_neighbors = 3;
        config.field_steps = 40;
        config.field_hidden = 16;
        config.field_query_batch = 8;
        config.field_surf_batch = 16;
        config.queries_per_point = 4;
        config.nn_rank = 5;
        config.early_stop_window = 0;
        let a = fit_field(&normalized, &ldi, &config).unwrap();
        let b = fit_field(&normalized, &ldi, &config).unwrap();
        assert!(a
            .model
            .net
            .params()
            .iter()
            .zip(b.model.net.params())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.model.trained);
        assert_eq!(a.report.records.len(), 40);
        // Loss trends down over the short run.
        let first = a.report.records[..5].iter().map(|r| r.total).sum::<f64>();
        let last = a.report.records[35..].iter().map(|r| r.total).sum::<f64>();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        let lines = a.report.to_lines();
        assert!(lines.starts_with("# seed="));
        assert_eq!(lines.lines().count(), 41);
    }

    #[test]
    fn fitted_field_checkpoint_round_trip() {
        let fitted = FittedField {
            field: FieldModel {
                net: FieldModel::init(12, 7).unwrap().net,
                trained: true,
            },
            center: Vec3::new(1.0, -2.0, 0.5),
            scale: 3.25,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.ckpt");
        fitted.save(&path).unwrap();
        let back = FittedField::load(&path).unwrap();
        assert!(back.field.trained);
        assert_eq!(back.center, fitted.center);
        assert_eq!(back.scale, fitted.scale);
        assert!(fitted
            .field
            .net
            .params()
            .iter()
            .zip(back.field.net.params())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
