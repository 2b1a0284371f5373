//! U-ViT denoiser with configurable text fusion and conditioning.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod model;
pub mod params;
pub mod record;
pub mod text;

pub use config::{Conditioning, Fusion, ModelConfig};
pub use denoiser::Denoiser;
pub use model::{build_model, param_specs, patchify, timestep_embedding, Branch, Model, NamedParam, ParamSpec};
pub use params::{block_params, param_count, ParamCount};
pub use record::{AttentionKind, AttentionRecord, TokenPartition};
pub use text::{TextEmbedder, NULL_TOKEN, PAD_TOKEN};
