use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttn,
    Cross,
}

/// Which positions of one attention axis hold time, text and image tokens.
///
/// Image tokens are stored row-major over a `grid_side x grid_side` patch
/// grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPartition {
    pub time: Option<Range<usize>>,
    pub text: Option<Range<usize>>,
    pub image: Option<Range<usize>>,
    pub grid_side: usize,
}

impl TokenPartition {
    /// `[time, image]`.
    pub fn time_image(grid_side: usize) -> Self {
        TokenPartition {
            time: Some(0..1),
            text: None,
            image: Some(1..1 + grid_side * grid_side),
            grid_side,
        }
    }

    /// `[time, text, image]`.
    pub fn time_text_image(text_len: usize, grid_side: usize) -> Self {
        TokenPartition {
            time: Some(0..1),
            text: Some(1..1 + text_len),
            image: Some(1 + text_len..1 + text_len + grid_side * grid_side),
            grid_side,
        }
    }

    /// Text only, as seen by the keys of a cross-attention site.
    pub fn text_only(text_len: usize) -> Self {
        TokenPartition {
            time: None,
            text: Some(0..text_len),
            image: None,
            grid_side: 0,
        }
    }

    pub fn len(&self) -> usize {
        [&self.time, &self.text, &self.image]
            .iter()
            .filter_map(|r| r.as_ref().map(|r| r.end))
            .max()
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Attention weights captured at one site, `[heads, queries, keys]`.
///
/// `timesteps` counts how many forward passes were averaged into `matrix`.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    /// 1-based image-branch block index.
    pub layer_index: usize,
    pub kind: AttentionKind,
    pub matrix: Tensor<f64>,
    pub queries: TokenPartition,
    pub keys: TokenPartition,
    pub timesteps: usize,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.matrix.shape()[2]
    }

    /// Largest deviation of any row sum from one.
    pub fn row_sum_error(&self) -> f64 {
        let cols = self.cols();
        if cols == 0 {
            return 0.0;
        }
        self.matrix
            .data()
            .chunks(cols)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}
