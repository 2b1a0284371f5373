//! Dense tensors, reverse-mode differentiation, seeded randomness and the
//! small linear-algebra routines the analysis code needs.

mod attention;
mod real;
mod rng;
mod svd;
mod tape;
mod tensor;

pub use attention::{multi_head_attention, AttentionParams};
pub use real::{gemm, Real, Strided};
pub use rng::{normal_draw, RngState};
pub use svd::{singular_values, svd_singular_values};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{softmax_rows, Tensor};
