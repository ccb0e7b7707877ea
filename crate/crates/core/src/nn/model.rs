//! The incremental classifier and its frozen snapshots.
//!
//! Backbone: three blocks of `conv 3x3 -> relu -> self-attention -> dropout
//! -> 2x2 average pool`, then global average pooling to a feature vector.
//! Four heads read that feature: `head_p` scores the classes of earlier
//! tasks, `head_c` the classes introduced by the current task, and `var_p` /
//! `var_c` predict one aleatoric variance per logit of the matching head.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Rng, Tape, Tensor, Var};

use super::attention::{attend, SelfAttentionStage, StageVars};
use super::layers::{ConvBlock, DenseLayer, DropoutLayer, DropoutMode, InitScheme, VarianceHead};

pub const STAGES: usize = 3;

/// Smallest input side length the three pooling steps can handle.
pub const MIN_INPUT_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub widths: [usize; STAGES],
    /// Query/key/value channels are `max(1, C / attention_reduction)`.
    pub attention_reduction: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            widths: [16, 32, 64],
            attention_reduction: 2,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Parameter(format!(
                "channel counts must be positive: in {} widths {:?}",
                self.in_channels, self.widths
            )));
        }
        if self.attention_reduction == 0 {
            return Err(Error::Parameter("attention_reduction must be >= 1".into()));
        }
        DropoutLayer::new(self.dropout)?;
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[STAGES - 1]
    }
}

/// Tape handles for every model parameter, in [`IncrementalModel::params`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    vars: Vec<Var>,
}

const BLOCK_BASE: usize = 0;
const STAGE_BASE: usize = 2 * STAGES;
const HEAD_BASE: usize = STAGE_BASE + 5 * STAGES;
pub const PARAM_COUNT: usize = HEAD_BASE + 8;

impl ModelVars {
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        if vars.len() != PARAM_COUNT {
            return Err(Error::Contract(format!(
                "model needs {PARAM_COUNT} parameter handles, got {}",
                vars.len()
            )));
        }
        Ok(ModelVars {
            vars: vars.to_vec(),
        })
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    fn block(&self, s: usize) -> (Var, Var) {
        let i = BLOCK_BASE + 2 * s;
        (self.vars[i], self.vars[i + 1])
    }

    fn stage(&self, s: usize) -> StageVars {
        let i = STAGE_BASE + 5 * s;
        StageVars {
            query: self.vars[i],
            key: self.vars[i + 1],
            value: self.vars[i + 2],
            output: self.vars[i + 3],
            gamma: self.vars[i + 4],
        }
    }

    fn head(&self, h: usize) -> (Var, Var) {
        let i = HEAD_BASE + 2 * h;
        (self.vars[i], self.vars[i + 1])
    }
}

/// Everything one forward pass produces, as handles on the tape it ran on.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits_p: Var,
    pub logits_c: Var,
    pub var_p: Var,
    pub var_c: Var,
    /// Pre-residual attended map of each stage.
    pub attn: [Var; STAGES],
    /// Attention weights of each stage.
    pub attn_weights: [Var; STAGES],
    pub feature: Var,
}

impl ForwardOutput {
    /// `logits_p || logits_c`, the scores over every class seen so far.
    pub fn unified_logits(&self, tape: &mut Tape) -> Result<Var> {
        tape.concat_last(&[self.logits_p, self.logits_c])
    }

    pub fn unified_variance(&self, tape: &mut Tape) -> Result<Var> {
        tape.concat_last(&[self.var_p, self.var_c])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IncrementalModel {
    config: ModelConfig,
    pub blocks: [ConvBlock; STAGES],
    pub stages: [SelfAttentionStage; STAGES],
    pub head_p: DenseLayer,
    pub head_c: DenseLayer,
    pub var_p: VarianceHead,
    pub var_c: VarianceHead,
}

impl IncrementalModel {
    /// All-zero parameters with the given head sizes.
    pub fn zeros(config: ModelConfig, old_classes: usize, new_classes: usize) -> Result<Self> {
        config.validate()?;
        let w = config.widths;
        let inputs = [config.in_channels, w[0], w[1]];
        let blocks = std::array::from_fn(|s| ConvBlock::zeros(inputs[s], w[s]));
        let stages =
            std::array::from_fn(|s| SelfAttentionStage::zeros(w[s], config.attention_reduction));
        let d = config.feature_dim();
        Ok(IncrementalModel {
            blocks,
            stages,
            head_p: DenseLayer::zeros(d, old_classes),
            head_c: DenseLayer::zeros(d, new_classes),
            var_p: VarianceHead {
                linear: DenseLayer::zeros(d, old_classes),
            },
            var_c: VarianceHead {
                linear: DenseLayer::zeros(d, new_classes),
            },
            config,
        })
    }

    /// A first-task model: no old-class head, `classes` new classes.
    pub fn new(config: ModelConfig, classes: usize, rng: &mut Rng) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Parameter("a model needs at least one class".into()));
        }
        let mut model = Self::zeros(config, 0, classes)?;
        model.init_parameters(rng, InitScheme::UniformFanIn);
        Ok(model)
    }

    /// Redraws every parameter in [`params`](Self::params) order; every
    /// attention gain is reset to zero.
    pub fn init_parameters(&mut self, rng: &mut Rng, scheme: InitScheme) {
        for s in 0..STAGES {
            let fan_in = self.blocks[s].fan_in();
            scheme.fill(&mut self.blocks[s].weight, fan_in, rng);
            scheme.fill(&mut self.blocks[s].bias, fan_in, rng);
        }
        for stage in &mut self.stages {
            stage.reinit(scheme, rng);
        }
        self.head_p.reinit(scheme, rng);
        self.head_c.reinit(scheme, rng);
        self.var_p.linear.reinit(scheme, rng);
        self.var_c.linear.reinit(scheme, rng);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn old_classes(&self) -> usize {
        self.head_p.outputs()
    }

    pub fn new_classes(&self) -> usize {
        self.head_c.outputs()
    }

    pub fn num_classes(&self) -> usize {
        self.old_classes() + self.new_classes()
    }

    pub fn dropout(&self) -> DropoutLayer {
        DropoutLayer::new(self.config.dropout).expect("validated at construction")
    }

    /// Changes the dropout rate used by later forward passes.
    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        DropoutLayer::new(rate)?;
        self.config.dropout = rate;
        Ok(())
    }

    /// Named parameters in their canonical order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(PARAM_COUNT);
        for (s, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{s}.weight"), &b.weight));
            out.push((format!("blocks.{s}.bias"), &b.bias));
        }
        for (s, st) in self.stages.iter().enumerate() {
            out.push((format!("stages.{s}.query"), &st.query));
            out.push((format!("stages.{s}.key"), &st.key));
            out.push((format!("stages.{s}.value"), &st.value));
            out.push((format!("stages.{s}.output"), &st.output));
            out.push((format!("stages.{s}.gamma"), &st.gamma));
        }
        out.push(("head_p.weight".into(), &self.head_p.weight));
        out.push(("head_p.bias".into(), &self.head_p.bias));
        out.push(("head_c.weight".into(), &self.head_c.weight));
        out.push(("head_c.bias".into(), &self.head_c.bias));
        out.push(("var_p.weight".into(), &self.var_p.linear.weight));
        out.push(("var_p.bias".into(), &self.var_p.linear.bias));
        out.push(("var_c.weight".into(), &self.var_c.linear.weight));
        out.push(("var_c.bias".into(), &self.var_c.linear.bias));
        out
    }

    /// Mutable parameters in the same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(PARAM_COUNT);
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        for st in &mut self.stages {
            out.push(&mut st.query);
            out.push(&mut st.key);
            out.push(&mut st.value);
            out.push(&mut st.output);
            out.push(&mut st.gamma);
        }
        out.push(&mut self.head_p.weight);
        out.push(&mut self.head_p.bias);
        out.push(&mut self.head_c.weight);
        out.push(&mut self.head_c.bias);
        out.push(&mut self.var_p.linear.weight);
        out.push(&mut self.var_p.linear.bias);
        out.push(&mut self.var_c.linear.weight);
        out.push(&mut self.var_c.linear.bias);
        out
    }

    /// Owned copies of the parameters, for checkers and serialization.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers the parameters on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let vars = self
            .params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ModelVars { vars }
    }

    /// Trainable forward pass.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: DropoutMode,
        rng: &mut Rng,
    ) -> Result<(ForwardOutput, ModelVars)> {
        let vars = self.bind(tape, true);
        let out = Self::forward_vars(&self.config, tape, &vars, x, mode, rng)?;
        Ok((out, vars))
    }

    /// Forward pass over already-bound parameters.
    pub fn forward_vars(
        config: &ModelConfig,
        tape: &mut Tape,
        vars: &ModelVars,
        x: Var,
        mode: DropoutMode,
        rng: &mut Rng,
    ) -> Result<ForwardOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(dim_err!("model input must be N x C x H x W, got {:?}", shape));
        }
        if shape[1] != config.in_channels {
            return Err(dim_err!(
                "model expects {} input channels, got {:?}",
                config.in_channels,
                shape
            ));
        }
        if shape[2] < MIN_INPUT_SIDE || shape[3] < MIN_INPUT_SIDE {
            return Err(dim_err!(
                "model input {:?} is smaller than {}x{}",
                shape,
                MIN_INPUT_SIDE,
                MIN_INPUT_SIDE
            ));
        }
        let dropout = DropoutLayer::new(config.dropout)?;
        let mut h = x;
        let mut attn = [x; STAGES];
        let mut attn_weights = [x; STAGES];
        for s in 0..STAGES {
            let (w, b) = vars.block(s);
            h = ConvBlock::apply(tape, w, b, h)?;
            h = tape.relu(h);
            let att = attend(tape, &vars.stage(s), h)?;
            attn[s] = att.map;
            attn_weights[s] = att.weights;
            h = dropout.forward(tape, att.output, mode, rng)?;
            h = tape.avg_pool2(h)?;
        }
        let fshape = tape.shape(h).to_vec();
        let positions = fshape[2] * fshape[3];
        let flat = tape.reshape(h, &[fshape[0], fshape[1], positions])?;
        let summed = tape.sum_axis(flat, 2)?;
        let feature = tape.scale(summed, 1.0 / positions as f64);

        let (wp, bp) = vars.head(0);
        let (wc, bc) = vars.head(1);
        let (vpw, vpb) = vars.head(2);
        let (vcw, vcb) = vars.head(3);
        Ok(ForwardOutput {
            logits_p: DenseLayer::apply(tape, wp, bp, feature)?,
            logits_c: DenseLayer::apply(tape, wc, bc, feature)?,
            var_p: VarianceHead::apply(tape, vpw, vpb, feature)?,
            var_c: VarianceHead::apply(tape, vcw, vcb, feature)?,
            attn,
            attn_weights,
            feature,
        })
    }

    /// Model for the next task: the old head absorbs the new-class rows,
    /// fresh heads are drawn for `new_classes`, the backbone is carried over.
    pub fn expand_heads(&self, new_classes: usize, rng: &mut Rng) -> Result<IncrementalModel> {
        if new_classes == 0 {
            return Err(Error::Parameter(
                "head expansion needs at least one new class".into(),
            ));
        }
        let d = self.config.feature_dim();
        let scheme = InitScheme::UniformFanIn;
        let mut next = self.clone();
        next.head_p = self.head_p.stack(&self.head_c)?;
        next.var_p = VarianceHead {
            linear: self.var_p.linear.stack(&self.var_c.linear)?,
        };
        next.head_c = DenseLayer::init(d, new_classes, scheme, rng);
        next.var_c = VarianceHead {
            linear: DenseLayer::init(d, new_classes, scheme, rng),
        };
        Ok(next)
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        let mut model = self.clone();
        for p in model.params_mut() {
            p.set_requires_grad(false);
        }
        ModelSnapshot { model }
    }

    /// Deterministic forward with dropout off and no recording.
    pub fn infer(&self, x: &Tensor) -> Result<InferenceOutput> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let vars = self.bind(&mut tape, false);
        let out = Self::forward_vars(
            &self.config,
            &mut tape,
            &vars,
            xv,
            DropoutMode::Off,
            &mut Rng::new(0),
        )?;
        InferenceOutput::collect(&mut tape, &out)
    }
}

/// Plain tensors copied out of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    pub logits_p: Tensor,
    pub logits_c: Tensor,
    pub var_p: Tensor,
    pub var_c: Tensor,
    pub attn: Vec<Tensor>,
}

impl InferenceOutput {
    pub fn collect(tape: &mut Tape, out: &ForwardOutput) -> Result<Self> {
        Ok(InferenceOutput {
            logits_p: tape.value(out.logits_p).clone(),
            logits_c: tape.value(out.logits_c).clone(),
            var_p: tape.value(out.var_p).clone(),
            var_c: tape.value(out.var_c).clone(),
            attn: out.attn.iter().map(|&a| tape.value(a).clone()).collect(),
        })
    }

    pub fn unified_logits(&self) -> Result<Tensor> {
        Tensor::concat_last(&[&self.logits_p, &self.logits_c])
    }

    pub fn unified_variance(&self) -> Result<Tensor> {
        Tensor::concat_last(&[&self.var_p, &self.var_c])
    }
}

/// Frozen copy of a model, used as the distillation teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    model: IncrementalModel,
}

impl ModelSnapshot {
    pub fn model(&self) -> &IncrementalModel {
        &self.model
    }

    /// Number of classes the snapshot scores, i.e. all of its heads.
    pub fn classes(&self) -> usize {
        self.model.num_classes()
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        self.clone()
    }

    /// Teacher pass on `tape` with recording off and dropout disabled; the
    /// outputs never carry gradients.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<ForwardOutput> {
        tape.without_recording(|tape| {
            let vars = self.model.bind(tape, false);
            IncrementalModel::forward_vars(
                &self.model.config,
                tape,
                &vars,
                x,
                DropoutMode::Off,
                &mut Rng::new(0),
            )
        })
    }

    pub fn infer(&self, x: &Tensor) -> Result<InferenceOutput> {
        self.model.infer(x)
    }
}
