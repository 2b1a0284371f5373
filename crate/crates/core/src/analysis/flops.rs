//! Closed-form forward-pass FLOP accounting, 2 FLOPs per multiply-accumulate.

use std::fmt;

use serde::Serialize;

use crate::backbone::{Branch, Conditioning, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum OpClass {
    #[serde(rename = "qkvo-projection")]
    QkvoProjection,
    #[serde(rename = "attention-matmul")]
    AttentionMatmul,
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "patch-embed")]
    PatchEmbed,
    #[serde(rename = "skip-merge")]
    SkipMerge,
    #[serde(rename = "text-projection")]
    TextProjection,
    #[serde(rename = "output-head")]
    OutputHead,
    #[serde(rename = "time-mlp")]
    TimeMlp,
}

impl OpClass {
    pub fn name(self) -> &'static str {
        match self {
            OpClass::QkvoProjection => "qkvo-projection",
            OpClass::AttentionMatmul => "attention-matmul",
            OpClass::Mlp => "mlp",
            OpClass::PatchEmbed => "patch-embed",
            OpClass::SkipMerge => "skip-merge",
            OpClass::TextProjection => "text-projection",
            OpClass::OutputHead => "output-head",
            OpClass::TimeMlp => "time-mlp",
        }
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which operations enter the total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum FlopConvention {
    /// Linear layers only.
    #[default]
    LinearOnly,
    /// Linear layers plus the score and value matmuls of every attention.
    WithAttentionMatmuls,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopEntry {
    pub site: String,
    /// 1-based block index within its stack; 0 for sites outside blocks.
    pub block: usize,
    pub op_class: OpClass,
    pub branch: Branch,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub convention: FlopConvention,
    pub entries: Vec<FlopEntry>,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn branch_total(&self, branch: Branch) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.branch == branch)
            .map(|e| e.flops)
            .sum()
    }

    pub fn class_total(&self, class: OpClass) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.op_class == class)
            .map(|e| e.flops)
            .sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total() as f64 / 1e9
    }
}

struct Builder {
    convention: FlopConvention,
    entries: Vec<FlopEntry>,
}

impl Builder {
    fn push(&mut self, site: String, block: usize, op_class: OpClass, branch: Branch, flops: u64) {
        if op_class == OpClass::AttentionMatmul && self.convention == FlopConvention::LinearOnly {
            return;
        }
        self.entries.push(FlopEntry {
            site,
            block,
            op_class,
            branch,
            flops,
        });
    }

    /// `tokens` rows through a `din x dout` linear layer.
    fn linear(&mut self, site: String, block: usize, class: OpClass, branch: Branch, tokens: usize, din: usize, dout: usize) {
        self.push(site, block, class, branch, 2 * (tokens * din * dout) as u64);
    }

    /// Score and value matmuls of one attention: `2 * Lq * Lk * d` each.
    fn attention(&mut self, site: String, block: usize, branch: Branch, lq: usize, lk: usize, d: usize) {
        self.push(site, block, OpClass::AttentionMatmul, branch, 2 * 2 * (lq * lk * d) as u64);
    }
}

/// Per-site FLOPs of one forward pass at one timestep, batch size 1.
pub fn count_flops(config: &ModelConfig, convention: FlopConvention) -> FlopsReport {
    let c = config;
    let d = c.embed_dim;
    let hidden = c.mlp_hidden();
    let n = c.n_patches();
    let img = c.image_stream_len();
    let lt = c.text_len;
    let half = c.n_skips();
    let mut b = Builder {
        convention,
        entries: Vec::new(),
    };

    b.linear("patch_embed".into(), 0, OpClass::PatchEmbed, Branch::Image, n, c.patch_dim(), d);
    b.linear("time_mlp.0".into(), 0, OpClass::TimeMlp, Branch::Shared, 1, d, d);
    b.linear("time_mlp.2".into(), 0, OpClass::TimeMlp, Branch::Shared, 1, d, d);
    b.linear("text_proj".into(), 0, OpClass::TextProjection, Branch::Text, lt, c.text_in_dim, d);

    for i in 1..=c.n_text {
        let p = format!("text_blocks.{}", i - 1);
        b.linear(format!("{p}.attn.qkvo"), i, OpClass::QkvoProjection, Branch::Text, lt, d, 4 * d);
        b.attention(format!("{p}.attn.self"), i, Branch::Text, lt, lt, d);
        b.linear(format!("{p}.mlp.fc1"), i, OpClass::Mlp, Branch::Text, lt, d, hidden);
        b.linear(format!("{p}.mlp.fc2"), i, OpClass::Mlp, Branch::Text, lt, hidden, d);
    }

    for i in 1..=c.depth {
        let p = format!("blocks.{i}");
        if i > c.depth - half {
            b.linear(format!("skips.{}", i - (c.depth - half) - 1), i, OpClass::SkipMerge, Branch::Image, img, 2 * d, d);
        }
        let joint = c.is_joint(i);
        let seq = if joint && c.conditioning == Conditioning::Concat { img + lt } else { img };
        b.linear(format!("{p}.attn.qkvo"), i, OpClass::QkvoProjection, Branch::Image, seq, d, 4 * d);
        b.attention(format!("{p}.attn.self"), i, Branch::Image, seq, seq, d);
        if joint && c.conditioning == Conditioning::CrossAttn {
            b.linear(format!("{p}.attn.text_kv"), i, OpClass::QkvoProjection, Branch::Image, lt, d, 2 * d);
            b.attention(format!("{p}.attn.cross"), i, Branch::Image, img, lt, d);
        }
        b.linear(format!("{p}.mlp.fc1"), i, OpClass::Mlp, Branch::Image, seq, d, hidden);
        b.linear(format!("{p}.mlp.fc2"), i, OpClass::Mlp, Branch::Image, seq, hidden, d);
    }

    b.linear("head".into(), 0, OpClass::OutputHead, Branch::Image, n, d, c.patch_dim());
    FlopsReport {
        convention,
        entries: b.entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Fusion;

    #[test]
    fn total_is_sum_of_entries_and_nonnegative() {
        for conv in [FlopConvention::LinearOnly, FlopConvention::WithAttentionMatmuls] {
            let r = count_flops(&ModelConfig::reference(Fusion::Intermediate, Conditioning::CrossAttn), conv);
            let by_branch: u64 = [Branch::Image, Branch::Text, Branch::Shared]
                .iter()
                .map(|&b| r.branch_total(b))
                .sum();
            assert_eq!(by_branch, r.total());
        }
    }

    #[test]
    fn linear_only_drops_attention_matmuls() {
        let cfg = ModelConfig::reference(Fusion::Early, Conditioning::Concat);
        let lin = count_flops(&cfg, FlopConvention::LinearOnly);
        let full = count_flops(&cfg, FlopConvention::WithAttentionMatmuls);
        assert_eq!(lin.class_total(OpClass::AttentionMatmul), 0);
        assert_eq!(
            full.total() - lin.total(),
            full.class_total(OpClass::AttentionMatmul)
        );
    }

    #[test]
    fn hand_count_of_a_small_config() {
        let cfg = ModelConfig {
            fusion: Fusion::Early,
            conditioning: Conditioning::Concat,
            depth: 1,
            n_image: 0,
            n_text: 0,
            embed_dim: 4,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 2,
            img_channels: 1,
            img_size: 4,
            text_len: 3,
            text_in_dim: 5,
            vocab_size: 17,
        };
        // 4 patches of 4 values, 1 time token, 3 text tokens -> 8 tokens
        let patch = 2 * 4 * 4 * 4;
        let time = 2 * 2 * 4 * 4;
        let text = 2 * 3 * 5 * 4;
        let qkvo = 2 * 8 * 4 * 16;
        let mlp = 2 * 2 * 8 * 4 * 8;
        let head = 2 * 4 * 4 * 4;
        let r = count_flops(&cfg, FlopConvention::LinearOnly);
        assert_eq!(r.total(), (patch + time + text + qkvo + mlp + head) as u64);
        let full = count_flops(&cfg, FlopConvention::WithAttentionMatmuls);
        assert_eq!(full.total() - r.total(), 4 * 8 * 8 * 4);
    }
}
