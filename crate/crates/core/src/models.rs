//! Small parameterized maps with exact forward passes and per-sample
//! Jacobians with respect to the parameters.
//!
//! All architectures are built from two pieces: a single sigmoid unit and a
//! two-layer perceptron with sigmoid hidden units. Gradients are computed by
//! hand-written reverse passes; a Jacobian is one reverse pass per output.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Dense `rows x cols` matrix stored row-major. Row `k` is the gradient of
/// output `k` with respect to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Jacobian {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("jacobian rows must have equal length"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.cols..(k + 1) * self.cols]
    }

    /// `v^T J`, a vector of length `cols`.
    pub fn vec_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (k, &w) in v.iter().enumerate().take(self.rows) {
            if w != 0.0 {
                for (o, j) in out.iter_mut().zip(self.row(k)) {
                    *o += w * j;
                }
            }
        }
        out
    }
}

/// A map `x -> g_θ(x)` that can report its Jacobian in `θ`.
pub trait ParametricMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn num_params(&self) -> usize;
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn jacobian(&self, x: &[f64]) -> Result<Jacobian>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    /// `sigmoid(z) - 1/2`, values in `(-1/2, 1/2)`.
    CenteredSigmoid,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Identity {
        dim: usize,
    },
    /// `sigmoid(w . x + b)`.
    AffineSigmoid {
        input_dim: usize,
    },
    /// `W x + b`, parameters laid out as `W` row-major then `b`.
    Affine {
        input_dim: usize,
        output_dim: usize,
    },
    /// `act(W2 sigmoid(W1 x + b1) + b2)`.
    Mlp2 {
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        output: OutputActivation,
    },
    /// Encoder and decoder are both two-layer perceptrons with linear outputs.
    /// The model's output is the latent code.
    Autoencoder {
        input_dim: usize,
        hidden: usize,
        latent: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct Block {
    input: usize,
    hidden: usize,
    output: usize,
    act: OutputActivation,
}

struct BlockCache {
    hidden: Vec<f64>,
    out: Vec<f64>,
    dact: Vec<f64>,
}

impl Block {
    fn len(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output * self.hidden;
        (b1, w2, b2)
    }

    fn forward(&self, p: &[f64], x: &[f64]) -> BlockCache {
        let (b1, w2, b2) = self.offsets();
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let row = &p[h * self.input..(h + 1) * self.input];
                sigmoid(dot(row, x) + p[b1 + h])
            })
            .collect();
        let mut out = Vec::with_capacity(self.output);
        let mut dact = Vec::with_capacity(self.output);
        for k in 0..self.output {
            let row = &p[w2 + k * self.hidden..w2 + (k + 1) * self.hidden];
            let z = dot(row, &hidden) + p[b2 + k];
            let (y, dy) = match self.act {
                OutputActivation::Linear => (z, 1.0),
                OutputActivation::Sigmoid => {
                    let s = sigmoid(z);
                    (s, s * (1.0 - s))
                }
                OutputActivation::CenteredSigmoid => {
                    let s = sigmoid(z);
                    (s - 0.5, s * (1.0 - s))
                }
            };
            out.push(y);
            dact.push(dy);
        }
        BlockCache { hidden, out, dact }
    }

    /// Accumulates `upstream^T dy/dp` into `grad` and returns `upstream^T dy/dx`.
    fn backward(&self, p: &[f64], x: &[f64], cache: &BlockCache, upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (b1, w2, b2) = self.offsets();
        let mut delta_h = vec![0.0; self.hidden];
        for k in 0..self.output {
            let delta = upstream[k] * cache.dact[k];
            if delta == 0.0 {
                continue;
            }
            grad[b2 + k] += delta;
            let base = w2 + k * self.hidden;
            for h in 0..self.hidden {
                grad[base + h] += delta * cache.hidden[h];
                delta_h[h] += delta * p[base + h];
            }
        }
        let mut grad_x = vec![0.0; self.input];
        for h in 0..self.hidden {
            let s = cache.hidden[h];
            let d = delta_h[h] * s * (1.0 - s);
            if d == 0.0 {
                continue;
            }
            grad[b1 + h] += d;
            let base = h * self.input;
            for i in 0..self.input {
                grad[base + i] += d * x[i];
                grad_x[i] += d * p[base + i];
            }
        }
        grad_x
    }

    fn init(&self, rng: &mut impl Rng, out: &mut Vec<f64>) {
        let a1 = 1.0 / (self.input as f64).sqrt();
        for _ in 0..self.hidden * self.input + self.hidden {
            out.push(rng.random_range(-a1..=a1));
        }
        let a2 = 1.0 / (self.hidden as f64).sqrt();
        for _ in 0..self.output * self.hidden + self.output {
            out.push(rng.random_range(-a2..=a2));
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        match *self {
            Self::Identity { dim } => dim,
            Self::AffineSigmoid { input_dim }
            | Self::Affine { input_dim, .. }
            | Self::Mlp2 { input_dim, .. }
            | Self::Autoencoder { input_dim, .. } => input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            Self::Identity { dim } => dim,
            Self::AffineSigmoid { .. } => 1,
            Self::Affine { output_dim, .. } | Self::Mlp2 { output_dim, .. } => output_dim,
            Self::Autoencoder { latent, .. } => latent,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Self::Identity { .. } => 0,
            Self::AffineSigmoid { input_dim } => input_dim + 1,
            Self::Affine { input_dim, output_dim } => (input_dim + 1) * output_dim,
            Self::Mlp2 { .. } => self.blocks().0.len(),
            Self::Autoencoder { .. } => {
                let (enc, dec) = self.blocks();
                enc.len() + dec.map_or(0, |d| d.len())
            }
        }
    }

    fn blocks(&self) -> (Block, Option<Block>) {
        match *self {
            Self::Mlp2 {
                input_dim,
                hidden,
                output_dim,
                output,
            } => (
                Block {
                    input: input_dim,
                    hidden,
                    output: output_dim,
                    act: output,
                },
                None,
            ),
            Self::Autoencoder {
                input_dim,
                hidden,
                latent,
            } => (
                Block {
                    input: input_dim,
                    hidden,
                    output: latent,
                    act: OutputActivation::Linear,
                },
                Some(Block {
                    input: latent,
                    hidden,
                    output: input_dim,
                    act: OutputActivation::Linear,
                }),
            ),
            _ => unreachable!("blocks() called on a block-free architecture"),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = match *self {
            Self::Identity { dim } => dim == 0,
            Self::AffineSigmoid { input_dim } => input_dim == 0,
            Self::Affine { input_dim, output_dim } => input_dim == 0 || output_dim == 0,
            Self::Mlp2 {
                input_dim,
                hidden,
                output_dim,
                ..
            } => input_dim == 0 || hidden == 0 || output_dim == 0,
            Self::Autoencoder {
                input_dim,
                hidden,
                latent,
            } => input_dim == 0 || hidden == 0 || latent == 0,
        };
        if bad {
            return Err(invalid(format!("architecture has a zero dimension: {self:?}")));
        }
        Ok(())
    }
}

/// Loss attached to a single sample in the empirical-risk term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Binary cross-entropy of a sigmoid classifier against a `{0, 1}` label.
    Bce,
    /// `||g(x) - target||^2`.
    SquaredError,
    /// `||decode(encode(x)) - x||^2`; the target is ignored.
    Reconstruction,
}

/// Architecture plus a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHandle {
    architecture: Architecture,
    theta: Vec<f64>,
}

impl ModelHandle {
    pub fn new(architecture: Architecture, theta: Vec<f64>) -> Result<Self> {
        architecture.validate()?;
        if theta.len() != architecture.num_params() {
            return Err(invalid(format!(
                "parameter vector has length {}, architecture needs {}",
                theta.len(),
                architecture.num_params()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(invalid("parameters must be finite"));
        }
        Ok(Self { architecture, theta })
    }

    /// Uniform `[-a, a]` initialization with `a = 1/sqrt(fan_in)` per layer.
    pub fn init(architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = rng::stream(seed, rng::streams::INIT);
        let mut theta = Vec::with_capacity(architecture.num_params());
        match architecture {
            Architecture::Identity { .. } => {}
            Architecture::AffineSigmoid { input_dim } => {
                let a = 1.0 / (input_dim as f64).sqrt();
                for _ in 0..=input_dim {
                    theta.push(rng.random_range(-a..=a));
                }
            }
            Architecture::Affine { input_dim, output_dim } => {
                let a = 1.0 / (input_dim as f64).sqrt();
                for _ in 0..(input_dim + 1) * output_dim {
                    theta.push(rng.random_range(-a..=a));
                }
            }
            Architecture::Mlp2 { .. } | Architecture::Autoencoder { .. } => {
                let (first, second) = architecture.blocks();
                first.init(&mut rng, &mut theta);
                if let Some(b) = second {
                    b.init(&mut rng, &mut theta);
                }
            }
        }
        Self::new(architecture, theta)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(invalid("parameter vector length changed"));
        }
        self.theta = theta;
        Ok(())
    }

    /// `θ <- θ - lr * step`.
    pub fn descend(&mut self, lr: f64, step: &[f64]) {
        for (t, s) in self.theta.iter_mut().zip(step) {
            *t -= lr * s;
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.architecture.input_dim() {
            return Err(invalid(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.architecture.input_dim()
            )));
        }
        Ok(())
    }

    fn encoder_len(&self) -> usize {
        self.architecture.blocks().0.len()
    }

    /// Reconstruction `decode(encode(x))` of an autoencoder.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let Architecture::Autoencoder { .. } = self.architecture else {
            return Err(invalid("reconstruct requires an autoencoder"));
        };
        let (enc, dec) = self.architecture.blocks();
        let dec = dec.expect("autoencoder has a decoder");
        let split = enc.len();
        let latent = enc.forward(&self.theta[..split], x).out;
        Ok(dec.forward(&self.theta[split..], &latent).out)
    }

    /// Reverse pass: `upstream^T J(x)`.
    fn pullback(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.theta.len()];
        match self.architecture {
            Architecture::Identity { .. } => {}
            Architecture::AffineSigmoid { input_dim } => {
                let z = dot(&self.theta[..input_dim], x) + self.theta[input_dim];
                let s = sigmoid(z);
                let d = upstream[0] * s * (1.0 - s);
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g = d * xi;
                }
                grad[input_dim] = d;
            }
            Architecture::Affine { input_dim, output_dim } => {
                let bias = input_dim * output_dim;
                for k in 0..output_dim {
                    for i in 0..input_dim {
                        grad[k * input_dim + i] = upstream[k] * x[i];
                    }
                    grad[bias + k] = upstream[k];
                }
            }
            Architecture::Mlp2 { .. } | Architecture::Autoencoder { .. } => {
                let (block, _) = self.architecture.blocks();
                let p = &self.theta[..block.len()];
                let cache = block.forward(p, x);
                block.backward(p, x, &cache, upstream, &mut grad[..block.len()]);
            }
        }
        grad
    }

    pub fn loss(&self, x: &[f64], target: &[f64], kind: LossKind) -> Result<f64> {
        self.check_input(x)?;
        match kind {
            LossKind::Bce => {
                let (z, y) = self.bce_logit(x, target)?;
                Ok(softplus(z) - y * z)
            }
            LossKind::SquaredError => {
                let out = self.forward(x)?;
                check_target(&out, target)?;
                Ok(out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum())
            }
            LossKind::Reconstruction => {
                let r = self.reconstruct(x)?;
                Ok(r.iter().zip(x).map(|(o, t)| (o - t) * (o - t)).sum())
            }
        }
    }

    fn bce_logit(&self, x: &[f64], target: &[f64]) -> Result<(f64, f64)> {
        let Architecture::AffineSigmoid { input_dim } = self.architecture else {
            return Err(invalid("binary cross-entropy requires the affine-sigmoid classifier"));
        };
        let y = match target {
            [y] if *y == 0.0 || *y == 1.0 => *y,
            _ => return Err(invalid(format!("bce target must be a single 0/1 label, got {target:?}"))),
        };
        Ok((dot(&self.theta[..input_dim], x) + self.theta[input_dim], y))
    }

    /// Exact gradient in `θ` of the per-sample loss.
    pub fn loss_grad(&self, x: &[f64], target: &[f64], kind: LossKind) -> Result<Vec<f64>> {
        self.check_input(x)?;
        match kind {
            LossKind::Bce => {
                let (z, y) = self.bce_logit(x, target)?;
                let r = sigmoid(z) - y;
                let mut grad: Vec<f64> = x.iter().map(|xi| r * xi).collect();
                grad.push(r);
                Ok(grad)
            }
            LossKind::SquaredError => {
                let out = self.forward(x)?;
                check_target(&out, target)?;
                let upstream: Vec<f64> = out.iter().zip(target).map(|(o, t)| 2.0 * (o - t)).collect();
                Ok(self.pullback(x, &upstream))
            }
            LossKind::Reconstruction => {
                let Architecture::Autoencoder { .. } = self.architecture else {
                    return Err(invalid("reconstruction loss requires an autoencoder"));
                };
                let (enc, dec) = self.architecture.blocks();
                let dec = dec.expect("autoencoder has a decoder");
                let split = enc.len();
                let (pe, pd) = self.theta.split_at(split);
                let enc_cache = enc.forward(pe, x);
                let dec_cache = dec.forward(pd, &enc_cache.out);
                let upstream: Vec<f64> = dec_cache.out.iter().zip(x).map(|(o, t)| 2.0 * (o - t)).collect();
                let mut grad = vec![0.0; self.theta.len()];
                let (ge, gd) = grad.split_at_mut(split);
                let through_latent = dec.backward(pd, &enc_cache.out, &dec_cache, &upstream, gd);
                enc.backward(pe, x, &enc_cache, &through_latent, ge);
                Ok(grad)
            }
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let raw: ModelHandle = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::new(raw.architecture, raw.theta)
    }
}

fn check_target(out: &[f64], target: &[f64]) -> Result<()> {
    if out.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "target has dimension {}, model output has {}",
            target.len(),
            out.len()
        )));
    }
    Ok(())
}

impl ParametricMap for ModelHandle {
    fn input_dim(&self) -> usize {
        self.architecture.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.architecture.output_dim()
    }

    fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(match self.architecture {
            Architecture::Identity { .. } => x.to_vec(),
            Architecture::AffineSigmoid { input_dim } => {
                vec![sigmoid(dot(&self.theta[..input_dim], x) + self.theta[input_dim])]
            }
            Architecture::Affine { input_dim, output_dim } => {
                let bias = input_dim * output_dim;
                (0..output_dim)
                    .map(|k| dot(&self.theta[k * input_dim..(k + 1) * input_dim], x) + self.theta[bias + k])
                    .collect()
            }
            Architecture::Mlp2 { .. } | Architecture::Autoencoder { .. } => {
                let (block, _) = self.architecture.blocks();
                block.forward(&self.theta[..block.len()], x).out
            }
        })
    }

    fn jacobian(&self, x: &[f64]) -> Result<Jacobian> {
        self.check_input(x)?;
        let d = self.output_dim();
        let mut jac = Jacobian::zeros(d, self.theta.len());
        if self.theta.is_empty() {
            return Ok(jac);
        }
        let mut unit = vec![0.0; d];
        for k in 0..d {
            unit[k] = 1.0;
            let row = self.pullback(x, &unit);
            jac.row_mut(k).copy_from_slice(&row);
            unit[k] = 0.0;
        }
        if matches!(self.architecture, Architecture::Autoencoder { .. }) {
            // decoder parameters do not affect the latent code
            debug_assert!((0..d).all(|k| jac.row(k)[self.encoder_len()..].iter().all(|v| *v == 0.0)));
        }
        Ok(jac)
    }
}
