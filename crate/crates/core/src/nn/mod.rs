//! Layers, self-attention stages and the incremental model.

mod attention;
mod container;
mod layers;
mod model;

pub use attention::{attend, attention_map, reduced_channels, Attended, SelfAttentionStage, StageVars};
pub use container::{decode, encode, read_container, write_container, FORMAT_VERSION, MAGIC};
pub use layers::{
    ConvBlock, DenseLayer, DropoutLayer, DropoutMode, InitScheme, VarianceHead, VARIANCE_FLOOR,
};
pub use model::{
    ForwardOutput, IncrementalModel, InferenceOutput, ModelConfig, ModelSnapshot, ModelVars,
    MIN_INPUT_SIDE, PARAM_COUNT, STAGES,
};
