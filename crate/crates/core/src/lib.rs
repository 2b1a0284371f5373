pub mod analysis;
pub mod backbone;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod error;
pub mod numerics;

pub use error::{Error, Result};
