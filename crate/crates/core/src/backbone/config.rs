use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Text joins the token stream at the input and rides through every block.
    Early,
    /// Image-only blocks at both ends, text-only blocks before fusion, and
    /// joint blocks in the middle.
    Intermediate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Text tokens appended to the sequence and mixed by self-attention.
    Concat,
    /// Image-to-text attention added to the self-attention output.
    #[serde(rename = "crossattn")]
    CrossAttn,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Early => "early",
            Fusion::Intermediate => "intermediate",
        })
    }
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conditioning::Concat => "concat",
            Conditioning::CrossAttn => "crossattn",
        })
    }
}

/// Full architecture description. Model, parameter count and FLOPs are all
/// derived from this.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub fusion: Fusion,
    pub conditioning: Conditioning,
    /// Image-branch transformer blocks (odd).
    pub depth: usize,
    /// Image-only blocks at each end (intermediate fusion only).
    pub n_image: usize,
    /// Text-only blocks ahead of fusion (intermediate fusion only).
    pub n_text: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub img_channels: usize,
    pub img_size: usize,
    pub text_len: usize,
    pub text_in_dim: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// U-ViT-Small at 32x32x4 latents with 77x768 text features.
    pub fn reference(fusion: Fusion, conditioning: Conditioning) -> Self {
        let (n_image, n_text) = match fusion {
            Fusion::Early => (0, 0),
            Fusion::Intermediate => (4, 1),
        };
        ModelConfig {
            fusion,
            conditioning,
            depth: 13,
            n_image,
            n_text,
            embed_dim: 512,
            heads: 8,
            mlp_ratio: 4,
            patch_size: 2,
            img_channels: 4,
            img_size: 32,
            text_len: 77,
            text_in_dim: 768,
            vocab_size: crate::data::VOCAB_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("patch_size", self.patch_size),
            ("img_channels", self.img_channels),
            ("img_size", self.img_size),
            ("text_len", self.text_len),
            ("text_in_dim", self.text_in_dim),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.depth % 2 == 0 {
            return fail(format!("depth must be odd, got {}", self.depth));
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.img_size % self.patch_size != 0 {
            return fail(format!(
                "img_size {} is not divisible by patch_size {}",
                self.img_size, self.patch_size
            ));
        }
        if self.vocab_size < 3 {
            return fail(format!(
                "vocab_size {} leaves no room for content tokens",
                self.vocab_size
            ));
        }
        match self.fusion {
            Fusion::Early if self.n_image != 0 || self.n_text != 0 => fail(format!(
                "early fusion requires n_image = 0 and n_text = 0, got {} and {}",
                self.n_image, self.n_text
            )),
            Fusion::Intermediate if self.depth < 2 * self.n_image + 1 => fail(format!(
                "intermediate fusion requires depth - 2*n_image >= 1, got depth {} and n_image {}",
                self.depth, self.n_image
            )),
            _ => Ok(()),
        }
    }

    pub fn grid_side(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Values per patch: `p * p * C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.img_channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn n_joint(&self) -> usize {
        self.depth - 2 * self.n_image
    }

    pub fn n_skips(&self) -> usize {
        self.depth / 2
    }

    /// Whether 1-based image-branch block `index` sees text.
    pub fn is_joint(&self, index: usize) -> bool {
        index > self.n_image && index <= self.depth - self.n_image
    }

    /// Tokens carried by the image stream: patches plus the time token.
    pub fn image_stream_len(&self) -> usize {
        self.n_patches() + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_configs_are_valid() {
        for f in [Fusion::Early, Fusion::Intermediate] {
            for c in [Conditioning::Concat, Conditioning::CrossAttn] {
                ModelConfig::reference(f, c).validate().unwrap();
            }
        }
        let c = ModelConfig::reference(Fusion::Intermediate, Conditioning::Concat);
        assert_eq!(c.n_joint(), 5);
        assert_eq!(c.n_patches(), 256);
        assert!(!c.is_joint(4) && c.is_joint(5) && c.is_joint(9) && !c.is_joint(10));
    }

    #[test]
    fn violations_are_named() {
        let mut c = ModelConfig::reference(Fusion::Early, Conditioning::Concat);
        c.n_image = 1;
        assert!(c.validate().unwrap_err().to_string().contains("n_image"));

        let mut c = ModelConfig::reference(Fusion::Intermediate, Conditioning::Concat);
        c.n_image = 7;
        assert!(c.validate().unwrap_err().to_string().contains("depth - 2*n_image"));

        let mut c = ModelConfig::reference(Fusion::Early, Conditioning::Concat);
        c.heads = 7;
        assert!(c.validate().unwrap_err().to_string().contains("divisible by heads"));

        let mut c = ModelConfig::reference(Fusion::Early, Conditioning::Concat);
        c.depth = 12;
        assert!(c.validate().unwrap_err().to_string().contains("odd"));

        let mut c = ModelConfig::reference(Fusion::Early, Conditioning::Concat);
        c.img_size = 33;
        assert!(c.validate().unwrap_err().to_string().contains("patch_size"));
    }

    #[test]
    fn early_fusion_is_all_joint() {
        let c = ModelConfig::reference(Fusion::Early, Conditioning::CrossAttn);
        assert!((1..=13).all(|i| c.is_joint(i)));
        assert_eq!(c.n_joint(), 13);
    }
}
