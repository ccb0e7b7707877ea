//! Spatial self-attention over convolutional feature maps.
//!
//! For an input `x: [N, C, H, W]` with `P = H * W` positions, 1x1
//! convolutions produce queries and keys with `C'` channels and values with
//! `Cv` channels. Attention weights are
//!
//! ```text
//! beta[i, j] = softmax_j( q_i . k_j / sqrt(C') )
//! ```
//!
//! and the attended map is `o = W_out * (sum_j beta[i, j] v_j)`, back at `C`
//! channels. The stage emits `x + gamma * o`; `o` itself is what gets
//! distilled.

use crate::error::{dim_err, Result};
use crate::tensor::{Rng, Tape, Tensor, Var};

use super::layers::InitScheme;

/// Query/key channel count for a stage over `channels` inputs.
pub fn reduced_channels(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttentionStage {
    /// `[C', C, 1, 1]`
    pub query: Tensor,
    /// `[C', C, 1, 1]`
    pub key: Tensor,
    /// `[Cv, C, 1, 1]`
    pub value: Tensor,
    /// `[C, Cv, 1, 1]`
    pub output: Tensor,
    /// Residual gain, shape `[1]`.
    pub gamma: Tensor,
}

impl SelfAttentionStage {
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let inner = reduced_channels(channels, reduction);
        SelfAttentionStage {
            query: Tensor::zeros(&[inner, channels, 1, 1]),
            key: Tensor::zeros(&[inner, channels, 1, 1]),
            value: Tensor::zeros(&[inner, channels, 1, 1]),
            output: Tensor::zeros(&[channels, inner, 1, 1]),
            gamma: Tensor::zeros(&[1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.query.shape()[1]
    }

    /// Random projections; `gamma` starts at zero.
    pub fn reinit(&mut self, scheme: InitScheme, rng: &mut Rng) {
        let c = self.channels();
        let inner = self.output.shape()[1];
        scheme.fill(&mut self.query, c, rng);
        scheme.fill(&mut self.key, c, rng);
        scheme.fill(&mut self.value, c, rng);
        scheme.fill(&mut self.output, inner, rng);
        self.gamma.data_mut().fill(0.0);
    }
}

/// Tape handles for one stage's parameters.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
    pub gamma: Var,
}

impl StageVars {
    pub fn bind(tape: &mut Tape, stage: &SelfAttentionStage, trainable: bool) -> Self {
        let mut b = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        };
        StageVars {
            query: b(&stage.query),
            key: b(&stage.key),
            value: b(&stage.value),
            output: b(&stage.output),
            gamma: b(&stage.gamma),
        }
    }
}

/// Result of one attention stage.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// Attended map `o`, `[N, C, H, W]`.
    pub map: Var,
    /// Attention weights `beta`, `[N, P, P]`, rows indexed by query position.
    pub weights: Var,
    /// Residual output `x + gamma * o`.
    pub output: Var,
}

pub fn attend(tape: &mut Tape, stage: &StageVars, x: Var) -> Result<Attended> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(dim_err!("attention expects N x C x H x W, got {:?}", shape));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if tape.shape(stage.query)[1] != c {
        return Err(dim_err!(
            "attention stage expects {} channels, input {:?} has {}",
            tape.shape(stage.query)[1],
            shape,
            c
        ));
    }
    let p = h * w;
    let inner = tape.shape(stage.query)[0];
    let value_ch = tape.shape(stage.value)[0];

    let q = tape.conv2d(x, stage.query, 1, 0)?;
    let q = tape.reshape(q, &[n, inner, p])?;
    let q = tape.transpose(q)?;
    let k = tape.conv2d(x, stage.key, 1, 0)?;
    let k = tape.reshape(k, &[n, inner, p])?;
    let scores = tape.bmm(q, k)?;
    let scores = tape.scale(scores, 1.0 / (inner as f64).sqrt());
    let weights = tape.softmax(scores, 1.0)?;

    let v = tape.conv2d(x, stage.value, 1, 0)?;
    let v = tape.reshape(v, &[n, value_ch, p])?;
    let wt = tape.transpose(weights)?;
    let mixed = tape.bmm(v, wt)?;
    let mixed = tape.reshape(mixed, &[n, value_ch, h, w])?;
    let map = tape.conv2d(mixed, stage.output, 1, 0)?;

    let gated = tape.mul(map, stage.gamma)?;
    let output = tape.add(x, gated)?;
    Ok(Attended {
        map,
        weights,
        output,
    })
}

/// The attended map `o` of `stage` applied to a fixed input, without gradients.
pub fn attention_map(stage: &SelfAttentionStage, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let vars = StageVars::bind(&mut tape, stage, false);
    let xv = tape.constant(x.clone());
    let att = attend(&mut tape, &vars, xv)?;
    Ok(tape.value(att.map).clone())
}
