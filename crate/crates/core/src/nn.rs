//! Minimal differentiable feed-forward networks.
//!
//! Supports exactly what the pipeline needs and nothing more: dense layers
//! with ReLU or linear activations, additive residual links, concatenative
//! skip links, reverse-mode gradients with respect to inputs and
//! parameters, a second-order pass for objectives that involve the input
//! gradient itself, and an Adam optimizer.
//!
//! Parameters live in one flat `Vec<f64>` (per layer: row-major weights,
//! then biases), so optimizer state, checkpoints, and finite-difference
//! checks all share a single layout.

use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Per-layer nonlinearity. The second-order pass relies on these being
/// piecewise linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    /// Combined input width (base input plus any concatenated links).
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    /// Elementwise addition into the target layer's input; widths must match.
    Add,
    /// Appended to the target layer's input.
    Concat,
}

/// Skip connection from the output of layer `from` (0 = the network input)
/// into the input of layer `to` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub from: usize,
    pub to: usize,
    pub kind: LinkKind,
}

/// Architecture description: a layer stack plus skip links.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layers: Vec<LayerSpec>,
    pub links: Vec<Link>,
}

impl MlpSpec {
    /// Plain chain: ReLU on hidden layers, linear output.
    /// `dims` lists the widths, e.g. `[3, 64, 64, 1]`.
    pub fn chain(dims: &[usize]) -> Self {
        let n = dims.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| LayerSpec {
                in_dim: dims[i],
                out_dim: dims[i + 1],
                activation: if i + 1 == n {
                    Activation::Linear
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Self {
            layers,
            links: Vec::new(),
        }
    }

    /// Width of activation slot `idx` (0 = network input, `l` = output of
    /// layer `l`).
    fn width(&self, idx: usize) -> usize {
        if idx == 0 {
            self.layers[0].in_dim
        } else {
            self.layers[idx - 1].out_dim
        }
    }

    fn links_to(&self, layer: usize) -> impl Iterator<Item = &Link> {
        self.links.iter().filter(move |l| l.to == layer)
    }

    /// Base (pre-link) input width of layer `l`. For layer 1 this is the
    /// network input width minus nothing — links into layer 1 are rejected
    /// by validation when they change the width.
    fn base_in(&self, l: usize) -> usize {
        if l == 1 {
            let concat_extra: usize = self
                .links_to(1)
                .filter(|k| k.kind == LinkKind::Concat)
                .map(|k| self.width(k.from))
                .sum();
            self.layers[0].in_dim - concat_extra
        } else {
            self.layers[l - 2].out_dim
        }
    }

    pub fn input_dim(&self) -> usize {
        self.base_in(1)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("no layers".to_string()));
        }
        for l in &self.layers {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::InvalidSpec("zero layer dimension".to_string()));
            }
        }
        let n = self.layers.len();
        for link in &self.links {
            if link.to == 0 || link.to > n {
                return Err(Error::InvalidSpec(format!(
                    "link target {} out of range",
                    link.to
                )));
            }
            if link.from >= link.to {
                return Err(Error::InvalidSpec(format!(
                    "link must go forward, got {} -> {}",
                    link.from, link.to
                )));
            }
            if link.to == 1 {
                return Err(Error::InvalidSpec(
                    "links into the first layer are not supported".to_string(),
                ));
            }
            if link.kind == LinkKind::Add && self.width(link.from) != self.base_in(link.to) {
                return Err(Error::InvalidSpec(format!(
                    "additive link {} -> {} joins widths {} and {}",
                    link.from,
                    link.to,
                    self.width(link.from),
                    self.base_in(link.to)
                )));
            }
        }
        // Combined widths must match the declared in_dims.
        for l in 2..=n {
            let mut w = self.base_in(l);
            for link in self.links_to(l) {
                if link.kind == LinkKind::Concat {
                    w += self.width(link.from);
                }
            }
            if w != self.layers[l - 1].in_dim {
                return Err(Error::InvalidSpec(format!(
                    "layer {} declares in_dim {} but receives {}",
                    l,
                    self.layers[l - 1].in_dim,
                    w
                )));
            }
        }
        Ok(())
    }
}

fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
        Activation::Linear => z,
    }
}

fn dact(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Linear => 1.0,
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], b: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(x.iter()) {
            acc += wi * xi;
        }
        out.push(acc);
    }
}

/// out += Wᵀ d
fn matvec_t_accum(w: &[f64], rows: usize, cols: usize, d: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let dr = d[r];
        if dr != 0.0 {
            let row = &w[r * cols..(r + 1) * cols];
            for c in 0..cols {
                out[c] += row[c] * dr;
            }
        }
    }
}

/// gw += d ⊗ x
fn outer_accum(gw: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &dr) in d.iter().enumerate() {
        if dr != 0.0 {
            let row = &mut gw[r * cols..(r + 1) * cols];
            for (g, xi) in row.iter_mut().zip(x.iter()) {
                *g += dr * xi;
            }
        }
    }
}

/// A feed-forward network with a flat parameter buffer.
#[derive(Debug, Clone)]
pub struct MlpModel {
    spec: MlpSpec,
    params: Vec<f64>,
    /// (weight offset, bias offset) per layer into `params`.
    offsets: Vec<(usize, usize)>,
}

impl MlpModel {
    fn offsets_for(spec: &MlpSpec) -> Vec<(usize, usize)> {
        let mut offsets = Vec::with_capacity(spec.layers.len());
        let mut cursor = 0;
        for l in &spec.layers {
            let w_off = cursor;
            cursor += l.in_dim * l.out_dim;
            let b_off = cursor;
            cursor += l.out_dim;
            offsets.push((w_off, b_off));
        }
        offsets
    }

    /// Fan-in-scaled uniform weight init (bound `sqrt(6 / fan_in)`), zero
    /// biases. Deterministic for a given seed.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; spec.param_count()];
        let offsets = Self::offsets_for(&spec);
        for (l, &(w_off, _)) in spec.layers.iter().zip(&offsets) {
            let bound = (6.0 / l.in_dim as f64).sqrt();
            for w in &mut params[w_off..w_off + l.in_dim * l.out_dim] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            spec,
            params,
            offsets,
        })
    }

    /// Builds a model from an existing flat parameter buffer.
    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("parameter {i}"),
            });
        }
        let offsets = Self::offsets_for(&spec);
        Ok(Self {
            spec,
            params,
            offsets,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn weights(&self, l: usize) -> &[f64] {
        let (w_off, b_off) = self.offsets[l];
        &self.params[w_off..b_off]
    }

    fn biases(&self, l: usize) -> &[f64] {
        let (_, b_off) = self.offsets[l];
        let n = self.spec.layers[l].out_dim;
        &self.params[b_off..b_off + n]
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "network input".to_string(),
            });
        }
        Ok(())
    }

    /// Assembles the combined input of layer `l` (1-based) from the
    /// activation slots `hs`.
    fn combine(&self, l: usize, hs: &[Vec<f64>]) -> Vec<f64> {
        let mut inp = hs[l - 1].clone();
        for link in self.spec.links_to(l) {
            match link.kind {
                LinkKind::Add => {
                    for (a, b) in inp.iter_mut().zip(&hs[link.from]) {
                        *a += b;
                    }
                }
                LinkKind::Concat => inp.extend_from_slice(&hs[link.from]),
            }
        }
        inp
    }

    /// Routes a combined-input cotangent back to the activation slots.
    fn route_back(&self, l: usize, din: &[f64], dhs: &mut [Vec<f64>]) {
        let base_w = self.spec.base_in(l);
        for (a, b) in dhs[l - 1].iter_mut().zip(&din[..base_w]) {
            *a += b;
        }
        let mut cursor = base_w;
        for link in self.spec.links_to(l) {
            match link.kind {
                LinkKind::Add => {
                    for (a, b) in dhs[link.from].iter_mut().zip(&din[..base_w]) {
                        *a += b;
                    }
                }
                LinkKind::Concat => {
                    let w = self.spec.width(link.from);
                    for (a, b) in dhs[link.from].iter_mut().zip(&din[cursor..cursor + w]) {
                        *a += b;
                    }
                    cursor += w;
                }
            }
        }
    }

    /// Forward pass recording everything needed for reverse sweeps.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape<'_>)> {
        self.check_input(input)?;
        let n = self.spec.layers.len();
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        hs.push(input.to_vec());
        let mut ins: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(n);
        for l in 1..=n {
            let spec = self.spec.layers[l - 1];
            let inp = self.combine(l, &hs);
            let mut z = Vec::new();
            matvec(
                self.weights(l - 1),
                spec.out_dim,
                spec.in_dim,
                &inp,
                self.biases(l - 1),
                &mut z,
            );
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: l });
            }
            let h = z.iter().map(|&v| act(spec.activation, v)).collect();
            ins.push(inp);
            zs.push(z);
            hs.push(h);
        }
        let output = hs[n].clone();
        Ok((output, Tape { model: self, hs, ins, zs }))
    }

    /// Value-only evaluation without recording.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let n = self.spec.layers.len();
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        hs.push(input.to_vec());
        let mut z = Vec::new();
        for l in 1..=n {
            let spec = self.spec.layers[l - 1];
            let inp = self.combine(l, &hs);
            matvec(
                self.weights(l - 1),
                spec.out_dim,
                spec.in_dim,
                &inp,
                self.biases(l - 1),
                &mut z,
            );
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: l });
            }
            hs.push(z.iter().map(|&v| act(spec.activation, v)).collect());
        }
        Ok(hs.pop().unwrap())
    }

    /// Parameter gradient of the mixed objective
    /// `s = ⟨value_cot, y(x)⟩ + ⟨tangent_cot, (∂y/∂x)(x) · tangent⟩`.
    ///
    /// This is the piece that lets a training loss depend on the network's
    /// input gradient (as the pulling projection does): for a scalar
    /// output, `tangent_cot = [1]` makes the second term `⟨tangent, ∇ₓy⟩`.
    /// It is exact almost everywhere for the piecewise-linear activations
    /// used here: a forward pass carries tangents seeded with `tangent`,
    /// and a reverse sweep over both streams (seeded independently with
    /// `value_cot` and `tangent_cot`) accumulates the parameter gradient.
    pub fn grad_params_value_and_jvp(
        &self,
        input: &[f64],
        value_cot: &[f64],
        tangent: &[f64],
        tangent_cot: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_input(input)?;
        if value_cot.len() != self.output_dim() || tangent_cot.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: if value_cot.len() != self.output_dim() {
                    value_cot.len()
                } else {
                    tangent_cot.len()
                },
            });
        }
        if tangent.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: tangent.len(),
            });
        }
        let n = self.spec.layers.len();
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        let mut ths: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        hs.push(input.to_vec());
        ths.push(tangent.to_vec());
        let mut ins: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut tins: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(n);
        for l in 1..=n {
            let spec = self.spec.layers[l - 1];
            let inp = self.combine(l, &hs);
            let tinp = self.combine(l, &ths);
            let mut z = Vec::new();
            matvec(
                self.weights(l - 1),
                spec.out_dim,
                spec.in_dim,
                &inp,
                self.biases(l - 1),
                &mut z,
            );
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: l });
            }
            let zero_bias = vec![0.0; spec.out_dim];
            let mut tz = Vec::new();
            matvec(
                self.weights(l - 1),
                spec.out_dim,
                spec.in_dim,
                &tinp,
                &zero_bias,
                &mut tz,
            );
            let h = z.iter().map(|&v| act(spec.activation, v)).collect();
            let th = z
                .iter()
                .zip(&tz)
                .map(|(&zv, &tv)| dact(spec.activation, zv) * tv)
                .collect();
            ins.push(inp);
            tins.push(tinp);
            zs.push(z);
            hs.push(h);
            ths.push(th);
        }
        // Reverse sweep over both streams. The output tangent is
        // ẏ = (∂y/∂x)·tangent, so s = ⟨value_cot, y⟩ + ⟨tangent_cot, ẏ⟩.
        let mut grads = vec![0.0; self.params.len()];
        let mut dhs: Vec<Vec<f64>> = hs.iter().map(|h| vec![0.0; h.len()]).collect();
        let mut dths: Vec<Vec<f64>> = dhs.clone();
        dhs[n].copy_from_slice(value_cot);
        dths[n].copy_from_slice(tangent_cot);
        for l in (1..=n).rev() {
            let spec = self.spec.layers[l - 1];
            let (w_off, b_off) = self.offsets[l - 1];
            let dz: Vec<f64> = zs[l - 1]
                .iter()
                .zip(&dhs[l])
                .map(|(&z, &d)| dact(spec.activation, z) * d)
                .collect();
            let dtz: Vec<f64> = zs[l - 1]
                .iter()
                .zip(&dths[l])
                .map(|(&z, &d)| dact(spec.activation, z) * d)
                .collect();
            outer_accum(&mut grads[w_off..b_off], &dz, &ins[l - 1]);
            outer_accum(&mut grads[w_off..b_off], &dtz, &tins[l - 1]);
            for (g, d) in grads[b_off..b_off + spec.out_dim].iter_mut().zip(&dz) {
                *g += d;
            }
            let mut din = vec![0.0; spec.in_dim];
            matvec_t_accum(self.weights(l - 1), spec.out_dim, spec.in_dim, &dz, &mut din);
            let mut dtin = vec![0.0; spec.in_dim];
            matvec_t_accum(self.weights(l - 1), spec.out_dim, spec.in_dim, &dtz, &mut dtin);
            self.route_back(l, &din, &mut dhs);
            self.route_back(l, &dtin, &mut dths);
        }
        Ok(grads)
    }
}

/// Recorded forward pass. Borrows the model, so parameters cannot change
/// while a tape is alive — stale tapes are ruled out at compile time.
#[derive(Debug)]
pub struct Tape<'m> {
    model: &'m MlpModel,
    /// Activation slots, `hs[0]` is the input.
    hs: Vec<Vec<f64>>,
    /// Combined (post-link) input per layer.
    ins: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    zs: Vec<Vec<f64>>,
}

impl Tape<'_> {
    pub fn output(&self) -> &[f64] {
        self.hs.last().unwrap()
    }

    pub fn input(&self) -> &[f64] {
        &self.hs[0]
    }

    fn check_cotangent(&self, cot: &[f64]) -> Result<()> {
        let d = self.model.output_dim();
        if cot.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cot.len(),
            });
        }
        Ok(())
    }

    fn grads_impl(&self, cotangent: &[f64], want_params: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_cotangent(cotangent)?;
        let model = self.model;
        let n = model.spec.layers.len();
        let mut grads = vec![0.0; if want_params { model.params.len() } else { 0 }];
        let mut dhs: Vec<Vec<f64>> = self.hs.iter().map(|h| vec![0.0; h.len()]).collect();
        dhs[n].copy_from_slice(cotangent);
        for l in (1..=n).rev() {
            let spec = model.spec.layers[l - 1];
            let (w_off, b_off) = model.offsets[l - 1];
            let dz: Vec<f64> = self.zs[l - 1]
                .iter()
                .zip(&dhs[l])
                .map(|(&z, &d)| dact(spec.activation, z) * d)
                .collect();
            if want_params {
                outer_accum(&mut grads[w_off..b_off], &dz, &self.ins[l - 1]);
                for (g, d) in grads[b_off..b_off + spec.out_dim].iter_mut().zip(&dz) {
                    *g += d;
                }
            }
            let mut din = vec![0.0; spec.in_dim];
            matvec_t_accum(model.weights(l - 1), spec.out_dim, spec.in_dim, &dz, &mut din);
            model.route_back(l, &din, &mut dhs);
        }
        let input_grad = std::mem::take(&mut dhs[0]);
        Ok((input_grad, grads))
    }

    /// Reverse sweep producing `(input gradient, parameter gradient)` of
    /// `cotangent · output`.
    pub fn grads(&self, cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.grads_impl(cotangent, true)
    }

    /// Gradient of `cotangent · output` with respect to the input. Skips
    /// the parameter-gradient accumulation entirely.
    pub fn grad_input(&self, cotangent: &[f64]) -> Result<Vec<f64>> {
        Ok(self.grads_impl(cotangent, false)?.0)
    }

    /// Gradient of `cotangent · output` with respect to the parameters,
    /// flat in the model's parameter layout.
    pub fn grad_params(&self, cotangent: &[f64]) -> Result<Vec<f64>> {
        Ok(self.grads_impl(cotangent, true)?.1)
    }
}

/// Adam optimizer state over a flat parameter buffer.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected adaptive-moment update.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != self.first_moment.len() {
            return Err(Error::DimensionMismatch {
                expected: self.first_moment.len(),
                got: if params.len() != self.first_moment.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / bc1;
            let v_hat = self.second_moment[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}
