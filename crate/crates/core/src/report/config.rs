//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every key is optional and falls back to [`RunConfig::default`]; unknown
//! and repeated keys are errors. [`RunConfig::to_text`] writes every key, and
//! parsing that text gives back the same configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{generate_synthetic, load_idx, make_task_sequence, normalize, Dataset, SyntheticSpec, TaskSequence};
use crate::engine::{CeScope, LossFlags, OptimizerConfig, TrainConfig};
use crate::error::{io_at, Error, Result};
use crate::losses::{AleatoricForm, LossConfig};
use crate::nn::{ModelConfig, STAGES};

/// Where the images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Seeds model initialization, batch order, buffer selection, dropout
    /// and aleatoric noise.
    pub seed: u64,
    pub data: DataSource,
    /// Standardize every channel with train-split statistics.
    pub normalize: bool,
    pub classes_per_task: usize,
    /// Seeds the class order of the task sequence.
    pub task_seed: u64,
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
    /// Test images whose attention maps are dumped after the run; 0 disables the dump.
    pub attention_dump: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSource::Synthetic(SyntheticSpec {
                classes: 10,
                samples_per_class: 250,
                image_size: 8,
                noise: 0.15,
                seed: 0,
            }),
            normalize: true,
            classes_per_task: 2,
            task_seed: 0,
            train: TrainConfig::default(),
            optimizer: OptimizerConfig::synthetic(),
            attention_dump: 0,
        }
    }
}

const SYNTHETIC_KEYS: [&str; 4] = ["classes", "samples_per_class", "image_size", "image_noise"];
const IDX_KEYS: [&str; 4] = ["train_images", "train_labels", "test_images", "test_labels"];

/// Every key [`RunConfig::parse`] accepts.
pub const KEYS: [&str; 33] = [
    "seed",
    "dataset",
    "classes",
    "samples_per_class",
    "image_size",
    "image_noise",
    "data_seed",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "normalize",
    "classes_per_task",
    "task_seed",
    "widths",
    "attention_reduction",
    "dropout",
    "tau",
    "lambda",
    "t_a",
    "aleatoric_form",
    "ce_scope",
    "buffer_capacity",
    "lr",
    "momentum",
    "epochs",
    "batch_size",
    "weight_decay",
    "use_distillation",
    "use_aleatoric",
    "use_uncertainty_distill",
    "use_attention_distill",
    "attention_dump",
];

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("bad value {raw:?} for `{key}`: {e}")))
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad value {raw:?} for `{key}`: expected true or false"))),
    }
}

fn widths(raw: &str) -> Result<[usize; STAGES]> {
    let parts: Vec<usize> = raw
        .split(',')
        .map(|p| value("widths", p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<usize>| Error::Config(format!("`widths` needs {STAGES} comma-separated values, got {}", p.len())))
}

/// Raw settings collected before they are assembled and validated.
#[derive(Default)]
struct Pending {
    dataset: Option<String>,
    synthetic: Vec<(String, String)>,
    idx: Vec<(String, String)>,
    tau: Option<f64>,
    lambda: Option<f64>,
    t_a: Option<usize>,
    form: Option<AleatoricForm>,
    data_seed: Option<u64>,
    task_seed: Option<u64>,
}

impl RunConfig {
    /// Parses configuration text. Relative IDX paths stay as written; see
    /// [`RunConfig::load`] for resolving them against the file's directory.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut pending = Pending::default();
        let mut seen: Vec<String> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown config key `{key}`", n + 1)));
            }
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: config key `{key}` given twice", n + 1)));
            }
            seen.push(key.to_string());
            cfg.apply(&mut pending, key, raw)?;
        }
        cfg.finish(pending)?;
        Ok(cfg)
    }

    /// Reads and parses a file; relative IDX paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_at(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let (DataSource::Idx { train_images, train_labels, test_images, test_labels }, Some(dir)) =
            (&mut cfg.data, path.parent())
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    fn apply(&mut self, pending: &mut Pending, key: &str, raw: &str) -> Result<()> {
        let opt = &mut self.optimizer;
        let train = &mut self.train;
        match key {
            "seed" => self.seed = value(key, raw)?,
            "dataset" => pending.dataset = Some(raw.to_string()),
            "data_seed" => pending.data_seed = Some(value(key, raw)?),
            k if SYNTHETIC_KEYS.contains(&k) => pending.synthetic.push((k.to_string(), raw.to_string())),
            k if IDX_KEYS.contains(&k) => pending.idx.push((k.to_string(), raw.to_string())),
            "normalize" => self.normalize = flag(key, raw)?,
            "classes_per_task" => self.classes_per_task = value(key, raw)?,
            "task_seed" => pending.task_seed = Some(value(key, raw)?),
            "widths" => train.model.widths = widths(raw)?,
            "attention_reduction" => train.model.attention_reduction = value(key, raw)?,
            "dropout" => train.model.dropout = value(key, raw)?,
            "tau" => pending.tau = Some(value(key, raw)?),
            "lambda" => pending.lambda = Some(value(key, raw)?),
            "t_a" => pending.t_a = Some(value(key, raw)?),
            "aleatoric_form" => pending.form = Some(AleatoricForm::parse(raw)?),
            "ce_scope" => train.ce_scope = CeScope::parse(raw)?,
            "buffer_capacity" => train.buffer_capacity = value(key, raw)?,
            "lr" => opt.lr = value(key, raw)?,
            "momentum" => opt.momentum = value(key, raw)?,
            "epochs" => opt.epochs = value(key, raw)?,
            "batch_size" => opt.batch_size = value(key, raw)?,
            "weight_decay" => opt.weight_decay = value(key, raw)?,
            "use_distillation" => train.flags.use_distillation = flag(key, raw)?,
            "use_aleatoric" => train.flags.use_aleatoric = flag(key, raw)?,
            "use_uncertainty_distill" => train.flags.use_uncertainty_distill = flag(key, raw)?,
            "use_attention_distill" => train.flags.use_attention_distill = flag(key, raw)?,
            "attention_dump" => self.attention_dump = value(key, raw)?,
            _ => unreachable!("key list and match arms disagree on `{key}`"),
        }
        Ok(())
    }

    fn finish(&mut self, p: Pending) -> Result<()> {
        self.task_seed = p.task_seed.unwrap_or(self.seed);
        match p.dataset.as_deref().unwrap_or("synthetic") {
            "synthetic" => {
                if let Some((k, _)) = p.idx.first() {
                    return Err(Error::Config(format!("`{k}` needs dataset = idx")));
                }
                let DataSource::Synthetic(mut spec) = RunConfig::default().data else {
                    unreachable!()
                };
                spec.seed = p.data_seed.unwrap_or(self.seed);
                for (k, raw) in &p.synthetic {
                    match k.as_str() {
                        "classes" => spec.classes = value(k, raw)?,
                        "samples_per_class" => spec.samples_per_class = value(k, raw)?,
                        "image_size" => spec.image_size = value(k, raw)?,
                        "image_noise" => spec.noise = value(k, raw)?,
                        _ => unreachable!(),
                    }
                }
                spec.validate()?;
                self.data = DataSource::Synthetic(spec);
            }
            "idx" => {
                if let Some((k, _)) = p.synthetic.first() {
                    return Err(Error::Config(format!("`{k}` needs dataset = synthetic")));
                }
                if p.data_seed.is_some() {
                    return Err(Error::Config("`data_seed` needs dataset = synthetic".into()));
                }
                let get = |name: &str| {
                    p.idx
                        .iter()
                        .find(|(k, _)| k == name)
                        .map(|(_, v)| PathBuf::from(v))
                        .ok_or_else(|| Error::Config(format!("dataset = idx needs `{name}`")))
                };
                self.data = DataSource::Idx {
                    train_images: get("train_images")?,
                    train_labels: get("train_labels")?,
                    test_images: get("test_images")?,
                    test_labels: get("test_labels")?,
                };
            }
            other => return Err(Error::Config(format!("`dataset` must be synthetic or idx, got {other:?}"))),
        }
        let d = LossConfig::default();
        self.train.loss = LossConfig::new(
            p.tau.unwrap_or(d.tau()),
            p.lambda.unwrap_or(d.lambda()),
            p.t_a.unwrap_or(d.t_a()),
            p.form.unwrap_or(d.aleatoric_form()),
        )?;
        self.validate()
    }

    /// Checks every bound the run depends on.
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_task == 0 {
            return Err(Error::Config("`classes_per_task` must be at least 1".into()));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        self.train.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }

    /// The configuration with a different seed. The synthetic data and the
    /// class order follow the seed as well.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.task_seed = seed;
        if let DataSource::Synthetic(spec) = &mut cfg.data {
            spec.seed = seed;
        }
        cfg
    }

    pub fn with_flags(&self, flags: LossFlags) -> Self {
        let mut cfg = self.clone();
        cfg.train.flags = flags;
        cfg
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.train.loss = cfg.train.loss.with_lambda(lambda)?;
        Ok(cfg)
    }

    /// Every key with its value, in [`KEYS`] order, skipping the keys of the
    /// other dataset kind.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let m: &ModelConfig = &t.model;
        let o = &self.optimizer;
        let mut out: Vec<(&'static str, String)> = vec![("seed", self.seed.to_string())];
        match &self.data {
            DataSource::Synthetic(s) => {
                out.push(("dataset", "synthetic".into()));
                out.push(("classes", s.classes.to_string()));
                out.push(("samples_per_class", s.samples_per_class.to_string()));
                out.push(("image_size", s.image_size.to_string()));
                out.push(("image_noise", s.noise.to_string()));
                out.push(("data_seed", s.seed.to_string()));
            }
            DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
                out.push(("dataset", "idx".into()));
                out.push(("train_images", train_images.display().to_string()));
                out.push(("train_labels", train_labels.display().to_string()));
                out.push(("test_images", test_images.display().to_string()));
                out.push(("test_labels", test_labels.display().to_string()));
            }
        }
        let widths = m.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        out.extend([
            ("normalize", self.normalize.to_string()),
            ("classes_per_task", self.classes_per_task.to_string()),
            ("task_seed", self.task_seed.to_string()),
            ("widths", widths),
            ("attention_reduction", m.attention_reduction.to_string()),
            ("dropout", m.dropout.to_string()),
            ("tau", t.loss.tau().to_string()),
            ("lambda", t.loss.lambda().to_string()),
            ("t_a", t.loss.t_a().to_string()),
            ("aleatoric_form", t.loss.aleatoric_form().to_string()),
            ("ce_scope", t.ce_scope.name().to_string()),
            ("buffer_capacity", t.buffer_capacity.to_string()),
            ("lr", o.lr.to_string()),
            ("momentum", o.momentum.to_string()),
            ("epochs", o.epochs.to_string()),
            ("batch_size", o.batch_size.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("use_distillation", t.flags.use_distillation.to_string()),
            ("use_aleatoric", t.flags.use_aleatoric.to_string()),
            ("use_uncertainty_distill", t.flags.use_uncertainty_distill.to_string()),
            ("use_attention_distill", t.flags.use_attention_distill.to_string()),
            ("attention_dump", self.attention_dump.to_string()),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Loads or generates the dataset and builds the task sequence.
    pub fn prepare(&self) -> Result<(Dataset, TaskSequence)> {
        let ds = match &self.data {
            DataSource::Synthetic(spec) => generate_synthetic(spec)?,
            DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                Dataset::from_parts(&train, &test)?
            }
        };
        let ds = if self.normalize { normalize(&ds)?.0 } else { ds };
        let tasks = make_task_sequence(&ds, self.classes_per_task, self.task_seed)?;
        Ok((ds, tasks))
    }
}
