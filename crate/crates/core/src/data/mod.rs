//! Synthetic captioned-shapes data: scene generation, tokenizer, on-disk
//! format and image export.

pub mod format;
pub mod image;
pub mod scene;
pub mod vocab;

pub use format::{load_dataset, save_dataset};
pub use scene::{
    generate_dataset, parse_caption, render, CaptionedImage, Color, GroundTruth, SceneObject,
    SceneSpec, ShapeKind,
};
pub use vocab::{caption, detokenize, tokenize, VOCAB_SIZE};
