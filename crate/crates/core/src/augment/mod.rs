//! Adversarial augmentation: FGSM on small image tensors, a logistic toy
//! model that supplies input gradients, and DomainMix mosaics.

mod image_io;
mod mosaic;

pub use image_io::{read_raw, write_pnm, write_raw, RawSidecar};
pub use mosaic::{domain_mix, draw_layout, MixedLabel, MixedSample, MosaicConfig, MosaicLayout, Tile};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense image with values in `[0, 1]`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::validation(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::validation(format!(
                "image data has {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("image values must be finite"));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// A tensor of unbounded values with the same shape, e.g. a gradient.
    /// Not clamped to `[0, 1]`.
    pub fn gradient_like(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::validation("gradient length does not match image"));
        }
        Ok(Self { width: self.width, height: self.height, channels: self.channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fast gradient sign step: `clip(x + eps * sign(grad))`, with `sign(0) = 0`.
pub fn fgsm_perturb(x: &ImageTensor, grad: &ImageTensor, eps: f64) -> Result<ImageTensor> {
    if !x.same_shape(grad) {
        return Err(Error::validation(format!(
            "gradient shape {}x{}x{} does not match image {}x{}x{}",
            grad.width, grad.height, grad.channels, x.width, x.height, x.channels
        )));
    }
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::validation(format!("epsilon must be finite and >= 0, got {eps}")));
    }
    if grad.data.iter().any(|g| g.is_nan()) {
        return Err(Error::validation("gradient contains NaN"));
    }
    let data = x.data.iter().zip(&grad.data).map(|(v, g)| (v + eps * sign(*g)).clamp(0.0, 1.0)).collect();
    Ok(ImageTensor { data, ..x.clone() })
}

/// Logistic-regression "objectness" model over raw pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Label `y` of the sample being attacked.
    pub target: bool,
}

impl ToyModelParams {
    /// Gaussian weights with standard deviation `scale`.
    pub fn random<R: Rng>(len: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, scale).map_err(|e| Error::validation(e.to_string()))?;
        Ok(Self { weights: (0..len).map(|_| normal.sample(rng)).collect(), bias: 0.0, target: true })
    }

    pub fn with_target(mut self, target: bool) -> Self {
        self.target = target;
        self
    }
}

fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Logistic loss `-[y ln σ(s) + (1-y) ln(1-σ(s))]`, `s = <w, x> + b`, and its
/// input gradient `(σ(s) - y) w`.
pub fn toy_model_loss_grad(x: &ImageTensor, params: &ToyModelParams) -> Result<(f64, ImageTensor)> {
    if params.weights.len() != x.len() {
        return Err(Error::validation(format!(
            "toy model has {} weights for {} inputs",
            params.weights.len(),
            x.len()
        )));
    }
    if !params.bias.is_finite() || params.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::validation("toy model parameters must be finite"));
    }
    let s = params.weights.iter().zip(&x.data).map(|(w, v)| w * v).sum::<f64>() + params.bias;
    let y = if params.target { 1.0 } else { 0.0 };
    // softplus(s) - y*s == -[y ln σ + (1-y) ln(1-σ)]
    let loss = softplus(s) - y * s;
    let coeff = sigmoid(s) - y;
    let grad = x.gradient_like(params.weights.iter().map(|w| coeff * w).collect())?;
    Ok((loss, grad))
}

/// Toy-model loss alone.
pub fn toy_model_loss(x: &ImageTensor, params: &ToyModelParams) -> Result<f64> {
    toy_model_loss_grad(x, params).map(|(l, _)| l)
}
