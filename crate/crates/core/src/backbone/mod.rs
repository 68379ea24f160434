//! The four-stage pyramid backbone and classification head.

mod checkpoint;
mod model;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorEntry, MANIFEST_FILE};
pub use model::{
    backbone_forward, build_variant, classify, count_params, cross_entropy, ForwardCache,
    HeadCache, Model, ModelParams, StageCache, StageParams,
};
pub use spec::{ModelSpec, PatchMode, StageSpec, VariantSpec, STAGE_CHANNELS, STAGE_HEADS, STAGE_PATCH};
