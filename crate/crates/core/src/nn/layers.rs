//! Dense, convolutional, dropout and variance layers.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// `U(-a, a)` with `a = sqrt(1 / fan_in)`, for weights and biases alike.
    UniformFanIn,
}

impl InitScheme {
    pub fn bound(self, fan_in: usize) -> f64 {
        match self {
            InitScheme::UniformFanIn => (1.0 / fan_in.max(1) as f64).sqrt(),
        }
    }

    pub fn fill(self, t: &mut Tensor, fan_in: usize, rng: &mut Rng) {
        let a = self.bound(fan_in);
        for v in t.data_mut() {
            *v = rng.uniform_range(-a, a);
        }
    }
}

/// Fully connected layer, `y = x W^T + b` with `W: [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn init(inputs: usize, outputs: usize, scheme: InitScheme, rng: &mut Rng) -> Self {
        let mut layer = Self::zeros(inputs, outputs);
        layer.reinit(scheme, rng);
        layer
    }

    pub fn reinit(&mut self, scheme: InitScheme, rng: &mut Rng) {
        let fan_in = self.inputs();
        scheme.fill(&mut self.weight, fan_in, rng);
        scheme.fill(&mut self.bias, fan_in, rng);
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Stacks the output rows of `self` above those of `other`.
    pub fn stack(&self, other: &DenseLayer) -> Result<DenseLayer> {
        if self.inputs() != other.inputs() {
            return Err(Error::Dimension(format!(
                "cannot stack dense layers with {} and {} inputs",
                self.inputs(),
                other.inputs()
            )));
        }
        let outputs = self.outputs() + other.outputs();
        let mut w = self.weight.data().to_vec();
        w.extend_from_slice(other.weight.data());
        let mut b = self.bias.data().to_vec();
        b.extend_from_slice(other.bias.data());
        Ok(DenseLayer {
            weight: Tensor::new(&[outputs, self.inputs()], w)?,
            bias: Tensor::new(&[outputs], b)?,
        })
    }

    pub(crate) fn apply(tape: &mut Tape, weight: Var, bias: Var, x: Var) -> Result<Var> {
        let wt = tape.transpose(weight)?;
        let y = tape.matmul(x, wt)?;
        tape.add(y, bias)
    }
}

/// How dropout behaves on a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    /// Masks drawn, as during optimization.
    Train,
    /// Masks drawn at inference time for Monte-Carlo sampling.
    McEval,
    /// Identity.
    Off,
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutLayer {
    rate: f64,
}

impl DropoutLayer {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(DropoutLayer { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Mask values for `numel` units, one uniform draw per unit.
    pub fn draw_mask(&self, shape: &[usize], rng: &mut Rng) -> Tensor {
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        Tensor::from_fn(shape, |_| if rng.uniform() < rate { 0.0 } else { keep })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: DropoutMode, rng: &mut Rng) -> Result<Var> {
        if mode == DropoutMode::Off || self.rate == 0.0 {
            return Ok(x);
        }
        let mask = self.draw_mask(tape.shape(x), rng);
        let mask = tape.constant(mask);
        tape.mul(x, mask)
    }
}

/// 3x3 same-padded convolution with a per-filter bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvBlock {
    pub const KERNEL: usize = 3;

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        ConvBlock {
            weight: Tensor::zeros(&[out_channels, in_channels, Self::KERNEL, Self::KERNEL]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1..].iter().product()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub(crate) fn apply(tape: &mut Tape, weight: Var, bias: Var, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, weight, 1, 1)?;
        let f = tape.shape(bias)[0];
        let b = tape.reshape(bias, &[f, 1, 1])?;
        tape.add(y, b)
    }
}

/// Smallest variance a head can report.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Linear map to one raw value per logit, passed through softplus so the
/// output is a variance.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceHead {
    pub linear: DenseLayer,
}

impl VarianceHead {
    pub fn outputs(&self) -> usize {
        self.linear.outputs()
    }

    pub(crate) fn apply(tape: &mut Tape, weight: Var, bias: Var, x: Var) -> Result<Var> {
        let raw = DenseLayer::apply(tape, weight, bias, x)?;
        let sp = tape.softplus(raw);
        Ok(tape.add_scalar(sp, VARIANCE_FLOOR))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_off_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3], 1.5));
        let d = DropoutLayer::new(0.5).unwrap();
        let y = d.forward(&mut tape, x, DropoutMode::Off, &mut Rng::new(0)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_rate_bounds() {
        assert!(DropoutLayer::new(1.0).is_err());
        assert!(DropoutLayer::new(-0.1).is_err());
        assert!(DropoutLayer::new(0.0).is_ok());
    }

    #[test]
    fn dropout_masks_scale_survivors() {
        let d = DropoutLayer::new(0.25).unwrap();
        let mask = d.draw_mask(&[10_000], &mut Rng::new(4));
        let kept = mask.data().iter().filter(|&&m| m != 0.0).count();
        assert!(mask
            .data()
            .iter()
            .all(|&m| m == 0.0 || m == 1.0 / 0.75));
        let frac = kept as f64 / 10_000.0;
        assert!((frac - 0.75).abs() < 0.02, "{frac}");
    }

    #[test]
    fn fan_in_bound() {
        let mut rng = Rng::new(8);
        let layer = DenseLayer::init(100, 30, InitScheme::UniformFanIn, &mut rng);
        assert!(layer.weight.data().iter().all(|w| w.abs() < 0.1));
        assert!(layer.bias.data().iter().all(|w| w.abs() < 0.1));
    }

    #[test]
    fn variance_head_is_positive_for_extreme_inputs() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(&[2, 1], vec![1.0, -1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::new(&[3, 1], vec![-1e6, 0.0, 1e6]).unwrap());
        let v = VarianceHead::apply(&mut tape, w, b, x).unwrap();
        assert!(tape.data(v).iter().all(|&s| s > 0.0 && s.is_finite()));
    }
}
