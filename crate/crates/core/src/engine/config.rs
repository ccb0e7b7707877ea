//! Training configuration.

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nn::ModelConfig;

use super::buffer::ExemplarBuffer;

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LossFlags {
    /// Temperature distillation of the old-class scores.
    pub use_distillation: bool,
    /// Monte-Carlo aleatoric losses on current and old classes.
    pub use_aleatoric: bool,
    /// Distillation of the old-class variance heads.
    pub use_uncertainty_distill: bool,
    /// Distillation of the attention maps.
    pub use_attention_distill: bool,
}

impl LossFlags {
    pub const fn all() -> Self {
        LossFlags {
            use_distillation: true,
            use_aleatoric: true,
            use_uncertainty_distill: true,
            use_attention_distill: true,
        }
    }

    /// Plain fine-tuning: cross-entropy only.
    pub const fn none() -> Self {
        LossFlags {
            use_distillation: false,
            use_aleatoric: false,
            use_uncertainty_distill: false,
            use_attention_distill: false,
        }
    }

    pub const fn distillation_only() -> Self {
        LossFlags {
            use_distillation: true,
            ..Self::none()
        }
    }
}

impl Default for LossFlags {
    fn default() -> Self {
        Self::all()
    }
}

/// Classes the cross-entropy and current-class aleatoric terms range over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CeScope {
    /// Every class seen so far, on every sample of the batch.
    #[default]
    Unified,
    /// The current task's classes only, on the samples that belong to them.
    New,
}

impl CeScope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(CeScope::Unified),
            "new" => Ok(CeScope::New),
            other => Err(Error::Config(format!("ce_scope must be unified or new, got {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CeScope::Unified => "unified",
            CeScope::New => "new",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 128,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    /// Defaults for the small synthetic benchmarks.
    pub fn synthetic() -> Self {
        OptimizerConfig {
            batch_size: 32,
            ..Self::default()
        }
    }

    /// A zero learning rate is accepted so that frozen runs can be compared.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Parameter(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Model, loss and memory settings of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub flags: LossFlags,
    pub ce_scope: CeScope,
    pub buffer_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            flags: LossFlags::all(),
            ce_scope: CeScope::Unified,
            buffer_capacity: ExemplarBuffer::DEFAULT_CAPACITY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        LossConfig::new(
            self.loss.tau(),
            self.loss.lambda(),
            self.loss.t_a(),
            self.loss.aleatoric_form(),
        )?;
        Ok(())
    }
}
