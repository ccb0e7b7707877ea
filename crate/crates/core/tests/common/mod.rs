//! Scalar oracles shared by the integration tests, written from the
//! definitions with plain loops.

#![allow(dead_code)]

use evln::losses::AleatoricForm;
use evln::nn::SelfAttentionStage;
use evln::tensor::{Rng, Tensor};

pub fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.uniform_range(-1.0, 1.0))
}

pub fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(0.05, 2.0))
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c.max(1)).map(|r| r.to_vec()).collect()
}

pub fn oracle_softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn oracle_distill(student: &Tensor, teacher: &Tensor, tau: f64) -> f64 {
    let s = rows(student);
    let t = rows(teacher);
    let mut acc = 0.0;
    for (sr, tr) in s.iter().zip(&t) {
        let p = oracle_softmax(tr, tau);
        let q = oracle_softmax(sr, tau);
        for c in 0..p.len() {
            acc -= p[c] * q[c].ln();
        }
    }
    acc / s.len() as f64
}

pub fn oracle_ce_row(x: &[f64], label: usize) -> f64 {
    -oracle_softmax(x, 1.0)[label].ln()
}

pub fn oracle_soft_ce_row(x: &[f64], p: &[f64]) -> f64 {
    let q = oracle_softmax(x, 1.0);
    -(0..p.len()).map(|c| p[c] * q[c].ln()).sum::<f64>()
}

/// Per-example aleatoric loss with replayed noise `[N, T, C]`.
pub fn oracle_aleatoric(
    logits: &Tensor,
    sigma2: &Tensor,
    noise: &Tensor,
    target: &dyn Fn(usize, &[f64]) -> f64,
    form: AleatoricForm,
) -> f64 {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let t = noise.shape()[1];
    let mut total = 0.0;
    for i in 0..n {
        let mut acc = 0.0;
        for s in 0..t {
            let corrupted: Vec<f64> = (0..c)
                .map(|k| logits.at(&[i, k]) + sigma2.at(&[i, k]).sqrt() * noise.at(&[i, s, k]))
                .collect();
            let loss = target(i, &corrupted);
            acc += match form {
                AleatoricForm::Likelihood => (-loss).exp(),
                AleatoricForm::Literal => loss,
            };
        }
        total -= (acc / t as f64).ln();
    }
    total / n as f64
}

pub fn oracle_attention(teacher: &[Tensor], student: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        let n = t.shape()[0];
        let d = t.len() / n;
        for i in 0..n {
            let tr = &t.data()[i * d..(i + 1) * d];
            let sr = &s.data()[i * d..(i + 1) * d];
            let tn = (tr.iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt();
            let sn = (sr.iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt();
            for k in 0..d {
                total += (tr[k] / tn - sr[k] / sn).powi(2) / n as f64;
            }
        }
    }
    total
}

/// Direct O(P^2) evaluation of the attended map for one image.
pub fn brute_force_attention(stage: &SelfAttentionStage, x: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let p = h * w;
    let inner = stage.query.shape()[0];
    let vch = stage.value.shape()[0];
    let px = |ch: usize, pos: usize| x.at(&[0, ch, pos / w, pos % w]);
    let proj = |wt: &Tensor, out: usize, pos: usize| -> f64 {
        (0..c).map(|ch| wt.at(&[out, ch, 0, 0]) * px(ch, pos)).sum()
    };
    let mut o = vec![0.0; c * p];
    for i in 0..p {
        let scores: Vec<f64> = (0..p)
            .map(|j| {
                (0..inner)
                    .map(|d| proj(&stage.query, d, i) * proj(&stage.key, d, j))
                    .sum::<f64>()
                    / (inner as f64).sqrt()
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let beta: Vec<f64> = scores.iter().map(|s| (s - max).exp() / z).collect();
        for out_c in 0..c {
            let mut acc = 0.0;
            for v in 0..vch {
                let mixed: f64 = (0..p).map(|j| beta[j] * proj(&stage.value, v, j)).sum();
                acc += stage.output.at(&[out_c, v, 0, 0]) * mixed;
            }
            o[out_c * p + i] = acc;
        }
    }
    o
}
