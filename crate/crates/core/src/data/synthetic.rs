//! Oriented sinusoidal gratings, one orientation and frequency per class.
//!
//! Class `k` of `K` draws
//!
//! ```text
//! pixel(i, j) = 0.5 + 0.5 * sin(2 pi f_k (i cos t_k + j sin t_k) / H) + N(0, s^2)
//! t_k = pi k / K,   f_k = 2 + (k mod 4)
//! ```
//!
//! Samples are laid out class by class. The first `floor(0.8 n)` samples of
//! each class form the train split and the remaining ones the test split.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

use super::Dataset;

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub const MIN_IMAGE_SIZE: usize = 8;

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("synthetic classes must be at least 2, got {}", self.classes)));
        }
        if self.image_size < Self::MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "synthetic image size must be at least {}, got {}",
                Self::MIN_IMAGE_SIZE,
                self.image_size
            )));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Config(format!(
                "synthetic samples per class must be at least 2 so both splits are populated, got {}",
                self.samples_per_class
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("synthetic noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    /// Train samples per class; the rest of each class goes to test.
    pub fn train_per_class(&self) -> usize {
        ((self.samples_per_class as f64 * TRAIN_FRACTION).floor() as usize).clamp(1, self.samples_per_class - 1)
    }

    /// Noise-free image of class `k`, `[H, W]` row-major.
    pub fn grating(&self, k: usize) -> Vec<f64> {
        let h = self.image_size;
        let theta = PI * k as f64 / self.classes as f64;
        let freq = 2.0 + (k % 4) as f64;
        let (s, c) = theta.sin_cos();
        let mut out = Vec::with_capacity(h * h);
        for i in 0..h {
            for j in 0..h {
                let phase = 2.0 * PI * freq * (i as f64 * c + j as f64 * s) / h as f64;
                out.push(0.5 + 0.5 * phase.sin());
            }
        }
        out
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.samples_per_class;
    let plane = spec.image_size * spec.image_size;
    let total = spec.classes * n;
    let mut rng = Rng::new(spec.seed);
    let mut data = Vec::with_capacity(total * plane);
    let mut labels = Vec::with_capacity(total);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_train = spec.train_per_class();
    for k in 0..spec.classes {
        let base = spec.grating(k);
        for s in 0..n {
            let idx = labels.len();
            if spec.noise > 0.0 {
                data.extend(base.iter().map(|v| v + spec.noise * rng.normal()));
            } else {
                data.extend_from_slice(&base);
            }
            labels.push(k);
            if s < n_train {
                train.push(idx);
            } else {
                test.push(idx);
            }
        }
    }
    let inputs = Tensor::new(&[total, 1, spec.image_size, spec.image_size], data)?;
    Dataset::new(inputs, labels, spec.classes, train, test)
}
