//! Finite-difference check of every differentiable op, every loss and the
//! full training objective, as run by the `gradcheck` command.

use crate::engine::{build_objective, Batch, LossFlags, TeacherTargets, TrainConfig};
use crate::error::Result;
use crate::losses::{
    aleatoric_loss_with_noise, attention_distillation, cross_entropy, distillation_loss, draw_noise,
    uncertainty_distillation, AleatoricForm, LossConfig, Targets,
};
use crate::nn::{DropoutMode, IncrementalModel, ModelConfig, ModelVars};
use crate::tensor::{grad_check_many, kernels, Rng, Tape, Tensor, Var, DEFAULT_EPS};

/// Largest relative error the suite accepts.
pub const SUITE_TOLERANCE: f64 = 1e-4;

const IMAGE_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

/// Values with magnitude in `[0.1, 1)`, clear of the kink at zero.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.1, 1.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

/// `sum(out * w)` with fixed random weights `w`.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = uniform(&mut Rng::new(seed), tape.shape(out), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: OpFn,
}

fn op_cases(rng: &mut Rng) -> Vec<Case> {
    let r = |rng: &mut Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);
    let pos = |rng: &mut Rng, s: &[usize]| uniform(rng, s, 0.2, 2.0);
    vec![
        Case { name: "add", inputs: vec![r(rng, &[3, 4]), r(rng, &[4])], f: |t, v| { let y = t.add(v[0], v[1])?; weighted_sum(t, y, 1) } },
        Case { name: "sub", inputs: vec![r(rng, &[3, 4]), r(rng, &[3, 1])], f: |t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y, 2) } },
        Case { name: "mul", inputs: vec![r(rng, &[2, 3, 4]), r(rng, &[3, 1])], f: |t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y, 3) } },
        Case { name: "div", inputs: vec![r(rng, &[3, 4]), pos(rng, &[4])], f: |t, v| { let y = t.div(v[0], v[1])?; weighted_sum(t, y, 4) } },
        Case { name: "scale", inputs: vec![r(rng, &[5])], f: |t, v| { let y = t.scale(v[0], -2.5); weighted_sum(t, y, 5) } },
        Case { name: "add_scalar", inputs: vec![r(rng, &[5])], f: |t, v| { let y = t.add_scalar(v[0], 0.7); weighted_sum(t, y, 6) } },
        Case { name: "neg", inputs: vec![r(rng, &[5])], f: |t, v| { let y = t.neg(v[0]); weighted_sum(t, y, 7) } },
        Case { name: "relu", inputs: vec![away_from_zero(rng, &[3, 4])], f: |t, v| { let y = t.relu(v[0]); weighted_sum(t, y, 8) } },
        Case { name: "exp", inputs: vec![r(rng, &[3, 4])], f: |t, v| { let y = t.exp(v[0]); weighted_sum(t, y, 9) } },
        Case { name: "log", inputs: vec![pos(rng, &[3, 4])], f: |t, v| { let y = t.log(v[0])?; weighted_sum(t, y, 10) } },
        Case { name: "sqrt", inputs: vec![pos(rng, &[3, 4])], f: |t, v| { let y = t.sqrt(v[0])?; weighted_sum(t, y, 11) } },
        Case { name: "softplus", inputs: vec![uniform(rng, &[3, 4], -3.0, 3.0)], f: |t, v| { let y = t.softplus(v[0]); weighted_sum(t, y, 12) } },
        Case { name: "square", inputs: vec![r(rng, &[3, 4])], f: |t, v| { let y = t.square(v[0]); weighted_sum(t, y, 13) } },
        Case { name: "sum_axis", inputs: vec![r(rng, &[2, 3, 4])], f: |t, v| { let y = t.sum_axis(v[0], 1)?; weighted_sum(t, y, 14) } },
        Case { name: "sum", inputs: vec![r(rng, &[2, 3])], f: |t, v| { let y = t.square(v[0]); Ok(t.sum(y)) } },
        Case { name: "mean", inputs: vec![r(rng, &[2, 3])], f: |t, v| { let y = t.square(v[0]); t.mean(y) } },
        Case { name: "matmul", inputs: vec![r(rng, &[3, 4]), r(rng, &[4, 2])], f: |t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, 15) } },
        Case { name: "bmm", inputs: vec![r(rng, &[2, 3, 4]), r(rng, &[2, 4, 5])], f: |t, v| { let y = t.bmm(v[0], v[1])?; weighted_sum(t, y, 16) } },
        Case { name: "transpose", inputs: vec![r(rng, &[2, 3, 4])], f: |t, v| { let y = t.transpose(v[0])?; weighted_sum(t, y, 17) } },
        Case { name: "reshape", inputs: vec![r(rng, &[2, 3, 4])], f: |t, v| { let y = t.reshape(v[0], &[6, 4])?; weighted_sum(t, y, 18) } },
        Case { name: "conv2d", inputs: vec![r(rng, &[2, 3, 5, 5]), r(rng, &[4, 3, 3, 3])], f: |t, v| { let y = t.conv2d(v[0], v[1], 1, 1)?; weighted_sum(t, y, 19) } },
        Case { name: "conv2d_strided", inputs: vec![r(rng, &[2, 3, 6, 6]), r(rng, &[4, 3, 3, 3])], f: |t, v| { let y = t.conv2d(v[0], v[1], 2, 1)?; weighted_sum(t, y, 20) } },
        Case { name: "avg_pool2", inputs: vec![r(rng, &[2, 3, 4, 5])], f: |t, v| { let y = t.avg_pool2(v[0])?; weighted_sum(t, y, 21) } },
        Case { name: "softmax", inputs: vec![r(rng, &[3, 5])], f: |t, v| { let y = t.softmax(v[0], 1.7)?; weighted_sum(t, y, 22) } },
        Case { name: "log_softmax", inputs: vec![r(rng, &[3, 5])], f: |t, v| { let y = t.log_softmax(v[0], 0.8)?; weighted_sum(t, y, 23) } },
        Case { name: "logsumexp", inputs: vec![r(rng, &[3, 5])], f: |t, v| { let y = t.logsumexp(v[0])?; weighted_sum(t, y, 24) } },
        Case { name: "pick", inputs: vec![r(rng, &[4, 3])], f: |t, v| { let y = t.pick(v[0], &[2, 0, 1, 2])?; weighted_sum(t, y, 25) } },
        Case { name: "select_rows", inputs: vec![r(rng, &[4, 3])], f: |t, v| { let y = t.select_rows(v[0], &[3, 1, 3])?; weighted_sum(t, y, 26) } },
        Case { name: "concat_last", inputs: vec![r(rng, &[2, 3]), r(rng, &[2, 2])], f: |t, v| { let y = t.concat_last(&[v[0], v[1]])?; weighted_sum(t, y, 27) } },
        Case {
            name: "distillation_loss",
            inputs: vec![uniform(rng, &[3, 4], -2.0, 2.0)],
            f: |t, v| distillation_loss(t, v[0], &uniform(&mut Rng::new(30), &[3, 4], -2.0, 2.0), 2.0),
        },
        Case { name: "cross_entropy", inputs: vec![uniform(rng, &[3, 4], -2.0, 2.0)], f: |t, v| cross_entropy(t, v[0], &[1, 3, 0]) },
        Case {
            name: "aleatoric_likelihood",
            inputs: vec![uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[3, 4], 0.1, 1.5)],
            f: |t, v| {
                let noise = draw_noise(&mut Rng::new(31), 3, 5, 4);
                aleatoric_loss_with_noise(t, v[0], v[1], Targets::Hard(&[0, 2, 3]), &noise, AleatoricForm::Likelihood)
            },
        },
        Case {
            name: "aleatoric_literal_soft",
            inputs: vec![uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[3, 4], 0.1, 1.5)],
            f: |t, v| {
                let noise = draw_noise(&mut Rng::new(32), 3, 5, 4);
                let q = uniform(&mut Rng::new(33), &[3, 4], -1.0, 1.0);
                let p = Tensor::new(&[3, 4], kernels::softmax_rows(q.data(), 4, 2.0))?;
                aleatoric_loss_with_noise(t, v[0], v[1], Targets::Soft(&p), &noise, AleatoricForm::Literal)
            },
        },
        Case {
            name: "uncertainty_distillation",
            inputs: vec![uniform(rng, &[3, 4], 0.1, 2.0)],
            f: |t, v| uncertainty_distillation(t, &uniform(&mut Rng::new(34), &[3, 4], 0.1, 2.0), v[0]),
        },
        Case {
            name: "attention_distillation",
            inputs: vec![uniform(rng, &[2, 3, 4, 4], -1.0, 1.0), uniform(rng, &[2, 4, 2, 2], -1.0, 1.0), uniform(rng, &[2, 5, 1, 1], -1.0, 1.0)],
            f: |t, v| {
                let mut g = Rng::new(35);
                let teacher = [
                    uniform(&mut g, &[2, 3, 4, 4], -1.0, 1.0),
                    uniform(&mut g, &[2, 4, 2, 2], -1.0, 1.0),
                    uniform(&mut g, &[2, 5, 1, 1], -1.0, 1.0),
                ];
                attention_distillation(t, &teacher, v)
            },
        },
    ]
}

/// A second-task instance of the full objective: a random teacher, an
/// expanded student moved away from it with strong attention and active
/// units, and one random image for an old and a new class.
struct ObjectiveCase {
    model: IncrementalModel,
    batch: Batch,
    teacher: TeacherTargets,
    config: TrainConfig,
    dropout: Rng,
    noise: Rng,
}

fn objective_case(seed: u64) -> Result<ObjectiveCase> {
    let config = TrainConfig {
        model: ModelConfig {
            in_channels: 1,
            widths: [4, 6, 8],
            attention_reduction: 2,
            dropout: 0.1,
        },
        loss: LossConfig::new(2.0, 0.5, 4, AleatoricForm::Likelihood)?,
        flags: LossFlags::all(),
        ..TrainConfig::default()
    };
    let mut rng = Rng::new(seed);
    let teacher_model = IncrementalModel::new(config.model.clone(), 2, &mut rng)?;
    let snapshot = teacher_model.snapshot();
    let mut model = teacher_model.expand_heads(2, &mut rng)?;
    for b in &mut model.blocks {
        b.bias.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(0.2, 0.5));
    }
    for st in &mut model.stages {
        st.gamma.data_mut()[0] = rng.uniform_range(0.5, 1.5) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        for w in st.query.data_mut().iter_mut().chain(st.key.data_mut()) {
            *w *= 8.0;
        }
    }
    let batch = Batch {
        x: uniform(&mut rng, &[2, 1, IMAGE_SIDE, IMAGE_SIDE], -1.0, 1.0),
        slots: vec![3, 0],
    };
    let teacher = TeacherTargets::compute(&snapshot, &batch.x, config.loss.tau())?;
    Ok(ObjectiveCase {
        model,
        batch,
        teacher,
        config,
        dropout: rng.fork(),
        noise: rng.fork(),
    })
}

/// Checks the full weighted objective with respect to every model parameter,
/// replaying the same dropout masks and aleatoric noise on every evaluation.
pub fn check_full_objective(seed: u64) -> Result<GradCheckEntry> {
    let case = objective_case(seed)?;
    let report = grad_check_many(
        |tape, vars| {
            let vars = ModelVars::from_vars(vars)?;
            let (objective, _) = build_objective(
                tape,
                case.model.config(),
                &vars,
                &case.batch,
                Some(&case.teacher),
                &case.config,
                DropoutMode::Train,
                &mut case.dropout.clone(),
                &mut case.noise.clone(),
            )?;
            Ok(objective)
        },
        &case.model.param_tensors(),
        DEFAULT_EPS,
    )?;
    Ok(GradCheckEntry {
        name: "full_objective".into(),
        max_rel_error: report.max_rel_error,
        checked: report.checked,
    })
}

/// Runs every check. Inputs are drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for case in op_cases(&mut rng) {
        let report = grad_check_many(case.f, &case.inputs, DEFAULT_EPS)?;
        out.push(GradCheckEntry {
            name: case.name.into(),
            max_rel_error: report.max_rel_error,
            checked: report.checked,
        });
    }
    out.push(check_full_objective(seed)?);
    Ok(out)
}
