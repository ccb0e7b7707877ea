//! Training objectives.
//!
//! Every loss is built on a [`Tape`] so its gradient reaches the student's
//! parameters. Teacher quantities always arrive as plain [`Tensor`]s, which
//! makes them constants on the tape: nothing can flow back into a snapshot.
//!
//! The objective at step `t` is
//!
//! ```text
//! total = lambda * (l_m + l_a + l_ale) + l_c + l_d,   l_ale = l_ca + l_pa
//! ```
//!
//! * `l_c`: cross-entropy on the true labels.
//! * `l_d`: temperature distillation of the teacher's old-class scores.
//! * `l_ca`, `l_pa`: Monte-Carlo aleatoric losses with logits corrupted by
//!   `sqrt(sigma2) * eps`, against hard labels and teacher soft targets.
//! * `l_a`: squared distance between teacher and student old-class variances.
//! * `l_m`: squared distance between normalized attention maps, summed
//!   over the stages.

use std::fmt;

use crate::error::{dim_err, Error, Result};
use crate::nn::STAGES;
use crate::tensor::kernels;
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Added under the square root when normalizing attention maps.
pub const ATTENTION_NORM_EPS: f64 = 1e-24;

/// Per-example reduction used by the aleatoric losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AleatoricForm {
    /// `-log( mean_s likelihood_s )`.
    #[default]
    Likelihood,
    /// `-log( mean_s loss_s )`, the reduction applied to the losses rather
    /// than the likelihoods. Not a proper attenuation; kept for comparison.
    Literal,
}

impl AleatoricForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "likelihood" => Ok(AleatoricForm::Likelihood),
            "literal" => Ok(AleatoricForm::Literal),
            other => Err(Error::Config(format!(
                "aleatoric_form must be likelihood or literal, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for AleatoricForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AleatoricForm::Likelihood => "likelihood",
            AleatoricForm::Literal => "literal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    tau: f64,
    lambda: f64,
    t_a: usize,
    aleatoric_form: AleatoricForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 2.0,
            lambda: 0.5,
            t_a: 10,
            aleatoric_form: AleatoricForm::Likelihood,
        }
    }
}

impl LossConfig {
    pub fn new(tau: f64, lambda: f64, t_a: usize, aleatoric_form: AleatoricForm) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Parameter(format!("tau must be positive, got {tau}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Parameter(format!("lambda must be non-negative, got {lambda}")));
        }
        if t_a == 0 {
            return Err(Error::Parameter("t_a must be at least 1".into()));
        }
        Ok(LossConfig {
            tau,
            lambda,
            t_a,
            aleatoric_form,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn t_a(&self) -> usize {
        self.t_a
    }

    pub fn aleatoric_form(&self) -> AleatoricForm {
        self.aleatoric_form
    }

    pub fn with_lambda(self, lambda: f64) -> Result<Self> {
        Self::new(self.tau, lambda, self.t_a, self.aleatoric_form)
    }
}

/// Scalar values of every loss component of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_d: f64,
    pub l_ca: f64,
    pub l_pa: f64,
    pub l_ale: f64,
    pub l_a: f64,
    pub l_m: f64,
    pub total: f64,
}

/// Component values before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_c: f64,
    pub l_d: f64,
    pub l_ca: f64,
    pub l_pa: f64,
    pub l_a: f64,
    pub l_m: f64,
}

/// Weights the components into a [`LossBreakdown`].
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<LossBreakdown> {
    let named = [
        ("l_c", parts.l_c),
        ("l_d", parts.l_d),
        ("l_ca", parts.l_ca),
        ("l_pa", parts.l_pa),
        ("l_a", parts.l_a),
        ("l_m", parts.l_m),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss component {name} is {v}")));
        }
    }
    let l_ale = parts.l_ca + parts.l_pa;
    let total = cfg.lambda * (parts.l_m + parts.l_a + l_ale) + parts.l_c + parts.l_d;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("total loss is {total}")));
    }
    Ok(LossBreakdown {
        l_c: parts.l_c,
        l_d: parts.l_d,
        l_ca: parts.l_ca,
        l_pa: parts.l_pa,
        l_ale,
        l_a: parts.l_a,
        l_m: parts.l_m,
        total,
    })
}

/// Loss components as tape handles. Absent terms were not computed and
/// count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub l_c: Option<Var>,
    pub l_d: Option<Var>,
    pub l_ca: Option<Var>,
    pub l_pa: Option<Var>,
    pub l_a: Option<Var>,
    pub l_m: Option<Var>,
}

impl LossTerms {
    /// The weighted objective as a single tape scalar.
    pub fn objective(&self, tape: &mut Tape, lambda: f64) -> Result<Var> {
        let mut total: Option<Var> = None;
        let mut push = |tape: &mut Tape, v: Var| -> Result<()> {
            total = Some(match total {
                Some(t) => tape.add(t, v)?,
                None => v,
            });
            Ok(())
        };
        let weighted: Vec<Var> = [self.l_m, self.l_a, self.l_ca, self.l_pa]
            .into_iter()
            .flatten()
            .collect();
        if !weighted.is_empty() && lambda != 0.0 {
            let mut w = weighted[0];
            for &v in &weighted[1..] {
                w = tape.add(w, v)?;
            }
            let w = tape.scale(w, lambda);
            push(tape, w)?;
        }
        for v in [self.l_c, self.l_d].into_iter().flatten() {
            push(tape, v)?;
        }
        Ok(match total {
            Some(t) => t,
            None => tape.constant(Tensor::scalar(0.0)),
        })
    }

    pub fn parts(&self, tape: &Tape) -> Result<LossParts> {
        let get = |v: Option<Var>| -> Result<f64> {
            match v {
                Some(v) => tape.scalar(v),
                None => Ok(0.0),
            }
        };
        Ok(LossParts {
            l_c: get(self.l_c)?,
            l_d: get(self.l_d)?,
            l_ca: get(self.l_ca)?,
            l_pa: get(self.l_pa)?,
            l_a: get(self.l_a)?,
            l_m: get(self.l_m)?,
        })
    }

    pub fn breakdown(&self, tape: &Tape, cfg: &LossConfig) -> Result<LossBreakdown> {
        total_loss(&self.parts(tape)?, cfg)
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c)),
        _ => Err(dim_err!("{what} must be N x C, got {:?}", shape)),
    }
}

/// Temperature distillation:
/// `-(1/N) sum_n sum_c softmax(teacher/tau)[n,c] * log softmax(student/tau)[n,c]`.
/// Zero when there are no columns.
pub fn distillation_loss(tape: &mut Tape, student: Var, teacher: &Tensor, tau: f64) -> Result<Var> {
    let (n, c) = matrix_dims(tape.shape(student), "student logits")?;
    if teacher.shape() != tape.shape(student) {
        return Err(dim_err!(
            "teacher logits {:?} do not match student logits {:?}",
            teacher.shape(),
            tape.shape(student)
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("tau must be positive, got {tau}")));
    }
    if c == 0 || n == 0 {
        return Ok(zero(tape));
    }
    let p = Tensor::new(&[n, c], kernels::softmax_rows(teacher.data(), c, tau))?;
    let p = tape.constant(p);
    let log_s = tape.log_softmax(student, tau)?;
    let prod = tape.mul(p, log_s)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / n as f64))
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(dim_err!("{} labels for a batch of {}", labels.len(), n));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Data(format!(
            "label {l} of sample {i} is outside [0, {classes})"
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of the labels under `softmax(logits)`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = matrix_dims(tape.shape(logits), "logits")?;
    check_labels(labels, n, c)?;
    if n == 0 {
        return Ok(zero(tape));
    }
    let ls = tape.log_softmax(logits, 1.0)?;
    let picked = tape.pick(ls, labels)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Target of an aleatoric loss.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    /// Class index per sample.
    Hard(&'a [usize]),
    /// Probability row per sample, `[N, C]`.
    Soft(&'a Tensor),
}

/// Standard normal draws of shape `[n, t_a, c]`, filled in row-major order.
pub fn draw_noise(rng: &mut Rng, n: usize, t_a: usize, c: usize) -> Tensor {
    rng.sample_standard_normal(&[n, t_a, c])
}

/// Monte-Carlo aleatoric loss with the corruption noise supplied.
///
/// `noise` is `[N, T, C]`; sample `s` of example `n` scores the corrupted
/// logits `logits[n] + sqrt(sigma2[n]) * noise[n, s]`. The log-likelihood of
/// a sample is `log softmax(.)[label]` for hard targets and `-CE(., p)` for
/// soft targets `p`.
pub fn aleatoric_loss_with_noise(
    tape: &mut Tape,
    logits: Var,
    sigma2: Var,
    targets: Targets<'_>,
    noise: &Tensor,
    form: AleatoricForm,
) -> Result<Var> {
    let (n, c) = matrix_dims(tape.shape(logits), "logits")?;
    if tape.shape(sigma2) != tape.shape(logits) {
        return Err(dim_err!(
            "variances {:?} do not match logits {:?}",
            tape.shape(sigma2),
            tape.shape(logits)
        ));
    }
    if noise.rank() != 3 || noise.shape()[0] != n || noise.shape()[2] != c {
        return Err(dim_err!(
            "noise {:?} does not fit logits {:?}",
            noise.shape(),
            tape.shape(logits)
        ));
    }
    let t = noise.shape()[1];
    if t == 0 {
        return Err(Error::Parameter("t_a must be at least 1".into()));
    }
    if let Some(bad) = tape.data(sigma2).iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("variance must be positive, got {bad}")));
    }
    match targets {
        Targets::Hard(labels) => check_labels(labels, n, c)?,
        Targets::Soft(p) => {
            if p.shape() != [n, c] {
                return Err(dim_err!("soft targets {:?} do not match logits [{n}, {c}]", p.shape()));
            }
        }
    }
    if n == 0 || c == 0 {
        return Ok(zero(tape));
    }

    let mu = tape.reshape(logits, &[n, 1, c])?;
    let sd = tape.sqrt(sigma2)?;
    let sd = tape.reshape(sd, &[n, 1, c])?;
    let eps = tape.constant(noise.clone());
    let spread = tape.mul(sd, eps)?;
    let corrupted = tape.add(mu, spread)?;
    let ls = tape.log_softmax(corrupted, 1.0)?;
    // log-likelihood per (example, sample): [N, T]
    let ll = match targets {
        Targets::Hard(labels) => {
            let idx: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, t)).collect();
            tape.pick(ls, &idx)?
        }
        Targets::Soft(p) => {
            let p = tape.constant(p.reshape(&[n, 1, c])?);
            let weighted = tape.mul(ls, p)?;
            tape.sum_axis(weighted, 2)?
        }
    };
    let ln_t = (t as f64).ln();
    let per_example = match form {
        AleatoricForm::Likelihood => {
            let lse = tape.logsumexp(ll)?;
            let neg = tape.neg(lse);
            tape.add_scalar(neg, ln_t)
        }
        AleatoricForm::Literal => {
            let losses = tape.neg(ll);
            let total = tape.sum_axis(losses, 1)?;
            let log = tape.log(total)?;
            let neg = tape.neg(log);
            tape.add_scalar(neg, ln_t)
        }
    };
    let s = tape.sum(per_example);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// [`aleatoric_loss_with_noise`] with `t_a` fresh draws per example.
pub fn aleatoric_loss(
    tape: &mut Tape,
    logits: Var,
    sigma2: Var,
    targets: Targets<'_>,
    t_a: usize,
    form: AleatoricForm,
    rng: &mut Rng,
) -> Result<Var> {
    let (n, c) = matrix_dims(tape.shape(logits), "logits")?;
    if t_a == 0 {
        return Err(Error::Parameter("t_a must be at least 1".into()));
    }
    let noise = draw_noise(rng, n, t_a, c);
    aleatoric_loss_with_noise(tape, logits, sigma2, targets, &noise, form)
}

/// Old-class inputs to the aleatoric loss: student logits and variances on
/// the old classes, and the teacher's soft targets.
#[derive(Clone, Copy, Debug)]
pub struct PreviousClasses<'a> {
    pub logits: Var,
    pub sigma2: Var,
    pub teacher_probs: &'a Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AleatoricTerms {
    pub l_ca: Var,
    /// Absent when there are no previous classes.
    pub l_pa: Option<Var>,
    pub l_ale: Var,
}

/// `l_ale = l_ca + l_pa`. Noise for `l_ca` is drawn before noise for `l_pa`.
pub fn l_ale(
    tape: &mut Tape,
    logits: Var,
    sigma2: Var,
    labels: &[usize],
    previous: Option<PreviousClasses<'_>>,
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<AleatoricTerms> {
    let form = cfg.aleatoric_form();
    let l_ca = aleatoric_loss(tape, logits, sigma2, Targets::Hard(labels), cfg.t_a(), form, rng)?;
    let l_pa = match previous {
        Some(prev) if tape.shape(prev.logits).get(1).copied().unwrap_or(0) > 0 => Some(aleatoric_loss(
            tape,
            prev.logits,
            prev.sigma2,
            Targets::Soft(prev.teacher_probs),
            cfg.t_a(),
            form,
            rng,
        )?),
        _ => None,
    };
    let l_ale = match l_pa {
        Some(p) => tape.add(l_ca, p)?,
        None => l_ca,
    };
    Ok(AleatoricTerms { l_ca, l_pa, l_ale })
}

/// `(1/N) sum_n ||teacher[n] - student[n]||^2`.
pub fn uncertainty_distillation(tape: &mut Tape, teacher: &Tensor, student: Var) -> Result<Var> {
    let (n, c) = matrix_dims(tape.shape(student), "student variances")?;
    if teacher.shape() != tape.shape(student) {
        return Err(dim_err!(
            "teacher variances {:?} do not match student variances {:?}",
            teacher.shape(),
            tape.shape(student)
        ));
    }
    if n == 0 || c == 0 {
        return Ok(zero(tape));
    }
    let t = tape.constant(teacher.clone());
    let d = tape.sub(student, t)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// Each sample's map flattened and scaled to unit length.
pub fn normalize_per_sample(t: &Tensor) -> Result<Tensor> {
    let n = *t.shape().first().ok_or_else(|| dim_err!("cannot normalize a scalar"))?;
    let d = t.len().checked_div(n).unwrap_or(0);
    let mut out = t.data().to_vec();
    if d > 0 {
        for row in out.chunks_mut(d) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + ATTENTION_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Tensor::new(&[n, d], out)
}

fn normalize_var(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = shape[0];
    let d: usize = shape[1..].iter().product();
    let flat = tape.reshape(x, &[n, d])?;
    let sq = tape.square(flat);
    let ss = tape.sum_axis(sq, 1)?;
    let ss = tape.add_scalar(ss, ATTENTION_NORM_EPS);
    let norm = tape.sqrt(ss)?;
    let norm = tape.reshape(norm, &[n, 1])?;
    tape.div(flat, norm)
}

/// `sum_stages (1/N) sum_n ||a_t[n] - a_s[n]||^2` over per-sample
/// L2-normalized maps.
pub fn attention_distillation(tape: &mut Tape, teacher: &[Tensor], student: &[Var]) -> Result<Var> {
    if teacher.len() != STAGES || student.len() != STAGES {
        return Err(dim_err!(
            "attention distillation needs {STAGES} stages, got {} teacher and {} student",
            teacher.len(),
            student.len()
        ));
    }
    let mut total: Option<Var> = None;
    for (s, (t, &v)) in teacher.iter().zip(student).enumerate() {
        if t.shape() != tape.shape(v) {
            return Err(dim_err!(
                "stage {s}: teacher map {:?} does not match student map {:?}",
                t.shape(),
                tape.shape(v)
            ));
        }
        let n = t.shape().first().copied().unwrap_or(0);
        if n == 0 || t.is_empty() {
            continue;
        }
        let tn = tape.constant(normalize_per_sample(t)?);
        let sn = normalize_var(tape, v)?;
        let d = tape.sub(sn, tn)?;
        let sq = tape.square(d);
        let sum = tape.sum(sq);
        let stage = tape.scale(sum, 1.0 / n as f64);
        total = Some(match total {
            Some(acc) => tape.add(acc, stage)?,
            None => stage,
        });
    }
    Ok(total.unwrap_or_else(|| zero(tape)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_bounds() {
        assert!(LossConfig::new(0.0, 0.5, 10, AleatoricForm::Likelihood).is_err());
        assert!(LossConfig::new(2.0, -0.1, 10, AleatoricForm::Likelihood).is_err());
        assert!(LossConfig::new(2.0, 0.5, 0, AleatoricForm::Likelihood).is_err());
        assert!(LossConfig::new(2.0, f64::NAN, 1, AleatoricForm::Literal).is_err());
        let d = LossConfig::default();
        assert_eq!((d.tau(), d.lambda(), d.t_a()), (2.0, 0.5, 10));
    }

    #[test]
    fn form_names_round_trip() {
        for f in [AleatoricForm::Likelihood, AleatoricForm::Literal] {
            assert_eq!(AleatoricForm::parse(&f.to_string()).unwrap(), f);
        }
        assert!(AleatoricForm::parse("other").is_err());
    }

    #[test]
    fn absent_terms_give_zero_objective() {
        let mut tape = Tape::new();
        let obj = LossTerms::default().objective(&mut tape, 0.5).unwrap();
        assert_eq!(tape.scalar(obj).unwrap(), 0.0);
    }
}
