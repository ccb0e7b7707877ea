//! Predictive uncertainty from Monte-Carlo dropout.

use crate::error::{Error, Result};
use crate::nn::{DropoutMode, IncrementalModel};
use crate::tensor::{kernels, Rng, Tape, Tensor};

/// Stochastic passes evaluated together in one batch, at most.
const MC_CHUNK_ROWS: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveUncertainty {
    /// Mean softmax over the passes, `[N, C]`.
    pub mean_probs: Tensor,
    /// Per input, the class-averaged variance of the softmax across passes.
    pub epistemic: Tensor,
    /// Per input, the class-averaged variance-head output across passes.
    pub aleatoric: Tensor,
}

/// Runs `n_samples` dropout-active passes over each input of `x` and
/// summarizes them. Variances are population variances (divided by
/// `n_samples`), accumulated with Welford's update.
pub fn predictive_uncertainty(
    model: &IncrementalModel,
    x: &Tensor,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<PredictiveUncertainty> {
    if n_samples < 2 {
        return Err(Error::Parameter(format!("need at least 2 MC samples, got {n_samples}")));
    }
    if x.rank() != 4 {
        return Err(Error::Dimension(format!("inputs must be N x C x H x W, got {:?}", x.shape())));
    }
    let n = x.shape()[0];
    let c = model.num_classes();
    let per_image = x.len() / n.max(1);
    let reps = (MC_CHUNK_ROWS / n.max(1)).max(1);

    let mut mean = vec![0.0; n * c];
    let mut m2 = vec![0.0; n * c];
    let mut var_sum = vec![0.0; n * c];
    let mut done = 0usize;
    while done < n_samples {
        let r = reps.min(n_samples - done);
        let mut shape = x.shape().to_vec();
        shape[0] = n * r;
        let mut data = Vec::with_capacity(n * r * per_image);
        for _ in 0..r {
            data.extend_from_slice(x.data());
        }
        let xr = Tensor::new(&shape, data)?;
        let mut tape = Tape::inference();
        let xv = tape.constant(xr);
        let vars = model.bind(&mut tape, false);
        let out = IncrementalModel::forward_vars(model.config(), &mut tape, &vars, xv, DropoutMode::McEval, rng)?;
        let logits = out.unified_logits(&mut tape)?;
        let variance = out.unified_variance(&mut tape)?;
        let probs = kernels::softmax_rows(tape.data(logits), c, 1.0);
        let var = tape.data(variance);
        for s in 0..r {
            let k = (done + s + 1) as f64;
            for j in 0..n * c {
                let p = probs[s * n * c + j];
                let delta = p - mean[j];
                mean[j] += delta / k;
                m2[j] += delta * (p - mean[j]);
                var_sum[j] += var[s * n * c + j];
            }
        }
        done += r;
    }
    let total = n_samples as f64;
    let class_mean = |v: &[f64], scale: f64| -> Vec<f64> {
        v.chunks(c.max(1)).map(|row| row.iter().sum::<f64>() * scale / c as f64).collect()
    };
    Ok(PredictiveUncertainty {
        epistemic: Tensor::new(&[n], class_mean(&m2, 1.0 / total))?,
        aleatoric: Tensor::new(&[n], class_mean(&var_sum, 1.0 / total))?,
        mean_probs: Tensor::new(&[n, c], mean)?,
    })
}
