//! The sequence encoder: two stacked LSTM layers whose last hidden state is the embedding.

#[doc(hidden)]
pub mod activation;
mod adam;
mod gradcheck;
mod loss;
pub mod lstm;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::order::WINDOW_LEN;
use crate::rng::seeded;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use lstm::LstmLayer;
pub use loss::{backward, batch_gradient, triplet_loss, BatchGradient};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_width: usize,
    pub hidden1: usize,
    /// Embedding dimension.
    pub hidden2: usize,
    pub margin: f64,
}

impl EncoderConfig {
    pub fn new(input_width: usize) -> Self {
        EncoderConfig { input_width, hidden1: 100, hidden2: 40, margin: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// A learned vector representation of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn sq_dist(&self, other: &Embedding) -> f64 {
        sq_dist(&self.0, &other.0)
    }

    pub fn dist(&self, other: &Embedding) -> f64 {
        self.sq_dist(other).sqrt()
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Weights of both layers. The same type carries gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub layers: [LstmLayer; 2],
}

impl EncoderParams {
    pub fn zeros(config: EncoderConfig) -> Self {
        EncoderParams {
            config,
            layers: [
                LstmLayer::zeros(config.input_width, config.hidden1),
                LstmLayer::zeros(config.hidden1, config.hidden2),
            ],
        }
    }

    /// Uniform(-1/sqrt(h), 1/sqrt(h)) per layer, forget-gate biases shifted by +1.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng: ChaCha8Rng = seeded(seed, &[0x1417]);
        let mut p = Self::zeros(config);
        for layer in &mut p.layers {
            let bound = 1.0 / (layer.hidden as f64).sqrt();
            for v in layer.w.iter_mut().chain(layer.u.iter_mut()).chain(layer.b.iter_mut()) {
                *v = rng.gen_range(-bound..bound);
            }
            let h = layer.hidden;
            for v in &mut layer.b[h..2 * h] {
                *v += 1.0;
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        let [a, b] = &self.layers;
        [&a.w, &a.u, &a.b, &b.w, &b.u, &b.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        let [a, b] = &mut self.layers;
        [&mut a.w, &mut a.u, &mut a.b, &mut b.w, &mut b.u, &mut b.b]
    }

    pub const TENSOR_NAMES: [&'static str; 6] = ["W1", "U1", "b1", "W2", "U2", "b2"];

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn shape_matches(&self, other: &EncoderParams) -> bool {
        self.layers[0].shape_matches(&other.layers[0]) && self.layers[1].shape_matches(&other.layers[1])
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let [a, b] = &self.layers;
        let ok = a.shapes_consistent()
            && b.shapes_consistent()
            && a.input == self.config.input_width
            && a.hidden == self.config.hidden1
            && b.input == self.config.hidden1
            && b.hidden == self.config.hidden2;
        if !ok {
            return Err(Error::Shape("encoder parameter shapes disagree with config".into()));
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        Ok(())
    }
}

/// Stacks matrices time-major: slab `t` holds row `t` of every sequence.
pub(crate) fn stack_time_major(xs: &[&FeatureMatrix], width: usize) -> Result<Vec<f64>> {
    for x in xs {
        if x.width() != width || x.rows() != WINDOW_LEN {
            return Err(Error::Shape(format!(
                "encoder expects {WINDOW_LEN}x{width} input, got {}x{}",
                x.rows(),
                x.width()
            )));
        }
    }
    let mut out = Vec::with_capacity(WINDOW_LEN * xs.len() * width);
    for t in 0..WINDOW_LEN {
        for x in xs {
            out.extend_from_slice(x.row(t));
        }
    }
    Ok(out)
}

pub(crate) struct ForwardTrace {
    pub input: Vec<f64>,
    pub first: lstm::LayerTrace,
    pub second: lstm::LayerTrace,
}

pub(crate) fn forward_batch(params: &EncoderParams, xs: &[&FeatureMatrix]) -> Result<ForwardTrace> {
    let input = stack_time_major(xs, params.config.input_width)?;
    let first = lstm::forward(&params.layers[0], &input, WINDOW_LEN, xs.len());
    let second = lstm::forward(&params.layers[1], first.outputs(), WINDOW_LEN, xs.len());
    Ok(ForwardTrace { input, first, second })
}

pub fn encode(params: &EncoderParams, x: &FeatureMatrix) -> Result<Embedding> {
    Ok(encode_batch(params, &[x])?.pop().expect("one embedding"))
}

/// Sequences per forward call when embedding a corpus.
const ENCODE_CHUNK: usize = 64;

pub fn encode_batch(params: &EncoderParams, xs: &[&FeatureMatrix]) -> Result<Vec<Embedding>> {
    let d = params.config.hidden2;
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(ENCODE_CHUNK) {
        let trace = forward_batch(params, chunk)?;
        out.extend(trace.second.last_output().chunks_exact(d).map(|e| Embedding(e.to_vec())));
    }
    Ok(out)
}

/// Embeds a corpus in parallel; output order follows `xs`.
pub fn encode_all(params: &EncoderParams, xs: &[FeatureMatrix]) -> Result<Vec<Embedding>> {
    use rayon::prelude::*;
    let refs: Vec<&FeatureMatrix> = xs.iter().collect();
    let parts: Vec<Result<Vec<Embedding>>> =
        refs.par_chunks(ENCODE_CHUNK).map(|c| encode_batch(params, c)).collect();
    let mut out = Vec::with_capacity(xs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
