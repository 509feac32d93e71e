//! Toy diffusion transformer: patch tokens, absolute sinusoidal positions,
//! adaLN-modulated blocks with full space-time attention, token-level pose
//! injection and LoRA adapters.

mod config;
mod lora;
mod model;
mod position;

pub use config::{LoraConfig, ModelConfig, LORA_TARGETS};
pub use lora::{is_adapter, is_wrapped, lora_apply, lora_merge, AdapterEntry, LoraReport, NEW_MODULE_PREFIXES};
pub use model::{
    dit_forward, encode_condition, inject_pose_tokens, patchify, patchify_tensor, predict_velocity, unpatchify,
    unpatchify_tensor, CheckpointHeader, Condition, ConditionVars, Model,
};
pub use position::{axis_block, position_encoding, position_table, position_table_from, timestep_embedding};
