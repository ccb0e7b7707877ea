//! The task-by-task protocol and evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskSequence};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::nn::IncrementalModel;
use crate::report::AccuracyMatrix;
use crate::tensor::{Rng, Tensor};

use super::buffer::{update_buffer, ExemplarBuffer};
use super::config::{OptimizerConfig, TrainConfig};
use super::train::{train_one_batch, Batch, TrainState};

/// Rows per inference chunk during evaluation.
pub const EVAL_CHUNK: usize = 256;

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Batch {
        task: usize,
        epoch: usize,
        batch: usize,
        #[serde(flatten)]
        losses: LossBreakdown,
    },
    Task {
        task: usize,
        accuracy: Vec<f64>,
    },
}

/// Hooks into [`run_sequence_with`]. Every method defaults to doing nothing.
pub trait RunObserver {
    /// Before the first update of a task, with the samples it trains on.
    fn task_start(&mut self, _state: &TrainState, _buffer: &ExemplarBuffer, _train: &[usize]) -> Result<()> {
        Ok(())
    }

    /// After every update.
    fn after_batch(&mut self, _state: &TrainState, _losses: &LossBreakdown) -> Result<()> {
        Ok(())
    }

    /// After evaluation and the buffer update that close a task.
    fn task_end(&mut self, _state: &TrainState, _buffer: &ExemplarBuffer, _row: &[f64]) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub matrix: AccuracyMatrix,
    pub model: IncrementalModel,
    pub buffer: ExemplarBuffer,
    pub logs: Vec<LogRecord>,
}

/// Top-1 accuracy of the unified scores on `x` against output slots.
pub fn evaluate(model: &IncrementalModel, x: &Tensor, slots: &[usize]) -> Result<f64> {
    let n = x.shape().first().copied().unwrap_or(0);
    if slots.len() != n {
        return Err(Error::Data(format!("{} labels for {n} samples", slots.len())));
    }
    let classes = model.num_classes();
    if let Some((i, &s)) = slots.iter().enumerate().find(|(_, &s)| s >= classes) {
        return Err(Error::Data(format!(
            "sample {i} belongs to class slot {s}, which the model has not seen ({classes} classes)"
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let xb = x.select_rows(chunk)?;
        let logits = model.infer(&xb)?.unified_logits()?;
        for (r, &i) in chunk.iter().enumerate() {
            let row = &logits.data()[r * classes..(r + 1) * classes];
            if argmax(row) == slots[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

/// First index of the largest entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Test accuracy of tasks `0..=through`.
pub fn evaluate_tasks(model: &IncrementalModel, ds: &Dataset, tasks: &TaskSequence, through: usize) -> Result<Vec<f64>> {
    tasks.tasks()[..=through]
        .iter()
        .map(|task| {
            let (x, labels) = ds.gather(&task.test)?;
            evaluate(model, &x, &tasks.slots(&labels))
        })
        .collect()
}

/// Independent generators of one run, split off the master generator in a
/// fixed order.
#[derive(Clone, Debug)]
pub struct RunStreams {
    pub init: Rng,
    pub order: Rng,
    pub buffer: Rng,
    pub dropout: Rng,
    pub noise: Rng,
}

impl RunStreams {
    pub fn split(rng: &mut Rng) -> Self {
        RunStreams {
            init: rng.fork(),
            order: rng.fork(),
            buffer: rng.fork(),
            dropout: rng.fork(),
            noise: rng.fork(),
        }
    }
}

pub fn run_sequence(
    ds: &Dataset,
    tasks: &TaskSequence,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
    rng: &mut Rng,
) -> Result<RunOutput> {
    run_sequence_with(ds, tasks, cfg, opt, rng, &mut ())
}

/// Trains every task in order. Task `t` trains on its own train split plus
/// the exemplar buffer, then is evaluated on the test split of every task so
/// far, and the buffer is refreshed. The next task starts from a snapshot of
/// the model as teacher and a model with expanded heads.
pub fn run_sequence_with(
    ds: &Dataset,
    tasks: &TaskSequence,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
    rng: &mut Rng,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput> {
    cfg.validate()?;
    opt.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("task sequence is empty".into()));
    }
    for (t, task) in tasks.tasks().iter().enumerate() {
        if task.classes.is_empty() || task.train.is_empty() {
            return Err(Error::Config(format!("task {t} has no classes or no train samples")));
        }
    }
    if ds.image_shape()[0] != cfg.model.in_channels {
        return Err(Error::Config(format!(
            "dataset has {} channels, model expects {}",
            ds.image_shape()[0],
            cfg.model.in_channels
        )));
    }
    let mut streams = RunStreams::split(rng);
    let mut buffer = ExemplarBuffer::new(cfg.buffer_capacity);
    let mut matrix = AccuracyMatrix::new();
    let mut logs = Vec::new();

    let first = tasks.tasks()[0].classes.len();
    let mut model = IncrementalModel::new(cfg.model.clone(), first, &mut streams.init)?;
    let mut teacher = None;
    let mut dropout_rng = streams.dropout.clone();
    let mut noise_rng = streams.noise.clone();

    for (t, task) in tasks.tasks().iter().enumerate() {
        if t > 0 {
            teacher = Some(model.snapshot());
            model = model.expand_heads(task.classes.len(), &mut streams.init)?;
        }
        let mut state = TrainState::new(t, model, teacher.take(), cfg.clone(), *opt, dropout_rng, noise_rng)?;
        let mut train: Vec<usize> = task.train.clone();
        train.extend(buffer.indices());
        observer.task_start(&state, &buffer, &train)?;

        for epoch in 0..opt.epochs {
            let mut order = train.clone();
            streams.order.shuffle(&mut order);
            for (b, chunk) in order.chunks(opt.batch_size).enumerate() {
                let (x, labels) = ds.gather(chunk)?;
                let batch = Batch {
                    x,
                    slots: tasks.slots(&labels),
                };
                let losses = train_one_batch(&mut state, &batch)?;
                observer.after_batch(&state, &losses)?;
                logs.push(LogRecord::Batch {
                    task: t,
                    epoch,
                    batch: b,
                    losses,
                });
            }
        }

        let row = evaluate_tasks(&state.model, ds, tasks, t)?;
        matrix.push_row(row.clone())?;
        logs.push(LogRecord::Task {
            task: t,
            accuracy: row.clone(),
        });
        buffer = update_buffer(&buffer, ds, task, t, &mut streams.buffer);
        observer.task_end(&state, &buffer, &row)?;

        teacher = state.teacher.take();
        model = state.model;
        dropout_rng = state.dropout_rng;
        noise_rng = state.noise_rng;
    }
    Ok(RunOutput {
        matrix,
        model,
        buffer,
        logs,
    })
}
