//! One optimization step: teacher targets, the weighted objective, the
//! backward pass and the SGD-with-momentum update.

use crate::error::{Error, Result};
use crate::losses::{
    aleatoric_loss, attention_distillation, cross_entropy, distillation_loss, l_ale,
    uncertainty_distillation, LossBreakdown, LossTerms, PreviousClasses, Targets,
};
use crate::nn::{DropoutMode, IncrementalModel, ModelConfig, ModelSnapshot, ModelVars};
use crate::tensor::{kernels, Rng, Tape, Tensor, Var};

use super::config::{CeScope, LossFlags, OptimizerConfig, TrainConfig};

/// Images and their output slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub slots: Vec<usize>,
}

/// What the teacher contributes to one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets {
    /// Scores over every class the teacher knows, `[N, C_prev]`.
    pub logits: Tensor,
    /// `softmax(logits / tau)`, the soft targets of the old-class aleatoric loss.
    pub probs: Tensor,
    pub variance: Tensor,
    pub attn: Vec<Tensor>,
}

impl TeacherTargets {
    pub fn compute(teacher: &ModelSnapshot, x: &Tensor, tau: f64) -> Result<Self> {
        let out = teacher.infer(x)?;
        let logits = out.unified_logits()?;
        let c = logits.shape()[1];
        let probs = Tensor::new(logits.shape(), kernels::softmax_rows(logits.data(), c, tau))?;
        Ok(TeacherTargets {
            probs,
            variance: out.unified_variance()?,
            attn: out.attn,
            logits,
        })
    }
}

/// Whether any enabled term reads the teacher.
pub fn needs_teacher(flags: &LossFlags, lambda: f64) -> bool {
    flags.use_distillation
        || (lambda != 0.0 && (flags.use_aleatoric || flags.use_uncertainty_distill || flags.use_attention_distill))
}

/// Assembles the objective for one batch over already-bound parameters.
///
/// Terms that are switched off, or weighted by a zero `lambda`, are not built
/// at all, so they consume no noise draws. The student pass draws its
/// dropout masks from `dropout_rng` and the aleatoric terms their noise from
/// `noise_rng`; cloned generators replay the same randomness.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    tape: &mut Tape,
    model_config: &ModelConfig,
    vars: &ModelVars,
    batch: &Batch,
    teacher: Option<&TeacherTargets>,
    cfg: &TrainConfig,
    mode: DropoutMode,
    dropout_rng: &mut Rng,
    noise_rng: &mut Rng,
) -> Result<(Var, LossTerms)> {
    let loss = &cfg.loss;
    let flags = &cfg.flags;
    let weighted = loss.lambda() != 0.0;
    let x = tape.constant(batch.x.clone());
    let out = IncrementalModel::forward_vars(model_config, tape, vars, x, mode, dropout_rng)?;
    let old = tape.shape(out.logits_p)[1];
    let classes = old + tape.shape(out.logits_c)[1];
    if let Some((i, &s)) = batch.slots.iter().enumerate().find(|(_, &s)| s >= classes) {
        return Err(Error::Data(format!(
            "sample {i} has class slot {s}, model scores {classes} classes"
        )));
    }

    // Logits, variances and labels the current-class terms are computed on.
    let (cur_logits, cur_var, cur_labels) = match cfg.ce_scope {
        CeScope::Unified => (
            Some(out.unified_logits(tape)?),
            Some(out.unified_variance(tape)?),
            batch.slots.clone(),
        ),
        CeScope::New => {
            let rows: Vec<usize> = (0..batch.slots.len()).filter(|&i| batch.slots[i] >= old).collect();
            if rows.is_empty() {
                (None, None, Vec::new())
            } else {
                let labels = rows.iter().map(|&i| batch.slots[i] - old).collect();
                (
                    Some(tape.select_rows(out.logits_c, &rows)?),
                    Some(tape.select_rows(out.var_c, &rows)?),
                    labels,
                )
            }
        }
    };

    let mut terms = LossTerms::default();
    if let Some(logits) = cur_logits {
        terms.l_c = Some(cross_entropy(tape, logits, &cur_labels)?);
    }
    let teacher = match teacher {
        Some(t) if old > 0 => {
            if t.logits.shape() != tape.shape(out.logits_p) {
                return Err(Error::Contract(format!(
                    "teacher scores {:?}, student old head {:?}",
                    t.logits.shape(),
                    tape.shape(out.logits_p)
                )));
            }
            Some(t)
        }
        _ => None,
    };
    if let (Some(t), true) = (teacher, flags.use_distillation) {
        terms.l_d = Some(distillation_loss(tape, out.logits_p, &t.logits, loss.tau())?);
    }
    if weighted && flags.use_aleatoric {
        let previous = teacher.map(|t| PreviousClasses {
            logits: out.logits_p,
            sigma2: out.var_p,
            teacher_probs: &t.probs,
        });
        match (cur_logits, cur_var) {
            (Some(logits), Some(var)) => {
                let ale = l_ale(tape, logits, var, &cur_labels, previous, loss, noise_rng)?;
                terms.l_ca = Some(ale.l_ca);
                terms.l_pa = ale.l_pa;
            }
            _ => {
                if let Some(p) = previous {
                    terms.l_pa = Some(aleatoric_loss(
                        tape,
                        p.logits,
                        p.sigma2,
                        Targets::Soft(p.teacher_probs),
                        loss.t_a(),
                        loss.aleatoric_form(),
                        noise_rng,
                    )?);
                }
            }
        }
    }
    if let Some(t) = teacher {
        if weighted && flags.use_uncertainty_distill {
            terms.l_a = Some(uncertainty_distillation(tape, &t.variance, out.var_p)?);
        }
        if weighted && flags.use_attention_distill {
            terms.l_m = Some(attention_distillation(tape, &t.attn, &out.attn)?);
        }
    }
    let objective = terms.objective(tape, loss.lambda())?;
    Ok((objective, terms))
}

/// Everything that evolves while training one task sequence.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Zero-based index of the task being trained.
    pub task: usize,
    pub model: IncrementalModel,
    /// Frozen model of the previous step; absent on the first task.
    pub teacher: Option<ModelSnapshot>,
    velocity: Vec<Tensor>,
    pub config: TrainConfig,
    pub optimizer: OptimizerConfig,
    pub dropout_rng: Rng,
    pub noise_rng: Rng,
    pub step: usize,
}

impl TrainState {
    pub fn new(
        task: usize,
        model: IncrementalModel,
        teacher: Option<ModelSnapshot>,
        config: TrainConfig,
        optimizer: OptimizerConfig,
        dropout_rng: Rng,
        noise_rng: Rng,
    ) -> Result<Self> {
        if (task > 0) != teacher.is_some() {
            return Err(Error::Contract(format!(
                "task {task} {} a teacher",
                if teacher.is_some() { "cannot have" } else { "needs" }
            )));
        }
        if let Some(t) = &teacher {
            if t.classes() != model.old_classes() {
                return Err(Error::Contract(format!(
                    "teacher scores {} classes, student old head has {}",
                    t.classes(),
                    model.old_classes()
                )));
            }
        }
        let velocity = model.param_tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(TrainState {
            task,
            model,
            teacher,
            velocity,
            config,
            optimizer,
            dropout_rng,
            noise_rng,
            step: 0,
        })
    }

    /// Teacher targets for `x`, when an enabled term needs them.
    pub fn teacher_targets(&self, x: &Tensor) -> Result<Option<TeacherTargets>> {
        match &self.teacher {
            Some(t) if needs_teacher(&self.config.flags, self.config.loss.lambda()) => {
                Ok(Some(TeacherTargets::compute(t, x, self.config.loss.tau())?))
            }
            _ => Ok(None),
        }
    }

    /// Loss components of `batch` without touching parameters or the
    /// generators.
    pub fn evaluate_batch(&self, batch: &Batch, mode: DropoutMode) -> Result<LossBreakdown> {
        let teacher = self.teacher_targets(&batch.x)?;
        let mut tape = Tape::inference();
        let vars = self.model.bind(&mut tape, false);
        let (_, terms) = build_objective(
            &mut tape,
            self.model.config(),
            &vars,
            batch,
            teacher.as_ref(),
            &self.config,
            mode,
            &mut self.dropout_rng.clone(),
            &mut self.noise_rng.clone(),
        )?;
        terms.breakdown(&tape, &self.config.loss)
    }
}

/// Forward, backward and one SGD-with-momentum step on `batch`.
pub fn train_one_batch(state: &mut TrainState, batch: &Batch) -> Result<LossBreakdown> {
    let teacher = state.teacher_targets(&batch.x)?;
    let mut tape = Tape::new();
    let vars = state.model.bind(&mut tape, true);
    let (objective, terms) = build_objective(
        &mut tape,
        state.model.config(),
        &vars,
        batch,
        teacher.as_ref(),
        &state.config,
        DropoutMode::Train,
        &mut state.dropout_rng,
        &mut state.noise_rng,
    )?;
    let breakdown = terms.breakdown(&tape, &state.config.loss)?;
    let value = tape.scalar(objective)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective is {value} at step {}", state.step)));
    }
    tape.backward(objective)?;
    let opt = state.optimizer;
    for ((param, velocity), var) in state
        .model
        .params_mut()
        .into_iter()
        .zip(state.velocity.iter_mut())
        .zip(vars.all())
    {
        let grad = tape.grad(*var);
        let theta = param.data_mut();
        let v = velocity.data_mut();
        for k in 0..theta.len() {
            let g = grad.map_or(0.0, |g| g[k]);
            v[k] = opt.momentum * v[k] + g + opt.weight_decay * theta[k];
            theta[k] -= opt.lr * v[k];
        }
    }
    state.step += 1;
    Ok(breakdown)
}
