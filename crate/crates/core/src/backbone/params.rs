use serde::Serialize;

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub image: usize,
    pub text: usize,
    pub shared: usize,
    pub total: usize,
}

/// Parameters of one pre-norm transformer block of width `d`.
pub fn block_params(d: usize, mlp_ratio: usize) -> usize {
    let hidden = d * mlp_ratio;
    let norms = 4 * d;
    let attn = 4 * (d * d + d);
    let mlp = d * hidden + hidden + hidden * d + d;
    norms + attn + mlp
}

/// Closed-form parameter count per branch.
///
/// The image branch depends only on depth, width, MLP ratio, patch size,
/// channels and image size, so early and intermediate fusion agree on it.
pub fn param_count(config: &ModelConfig) -> ParamCount {
    let d = config.embed_dim;
    let pd = config.patch_dim();
    let block = block_params(d, config.mlp_ratio);

    let patch_embed = pd * d + d;
    let pos_embed = config.image_stream_len() * d;
    let skips = config.n_skips() * (2 * d * d + d);
    let final_norm = 2 * d;
    let head = d * pd + pd;
    let image = patch_embed + pos_embed + config.depth * block + skips + final_norm + head;

    let text = config.text_in_dim * d + d + config.n_text * block;
    let shared = 2 * (d * d + d);

    ParamCount {
        image,
        text,
        shared,
        total: image + text + shared,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::config::{Conditioning, Fusion};
    use crate::backbone::model::{param_specs, Branch};

    fn from_specs(config: &ModelConfig) -> ParamCount {
        let specs = param_specs(config);
        let sum = |b: Branch| specs.iter().filter(|s| s.branch == b).map(|s| s.numel()).sum();
        let (image, text, shared) = (sum(Branch::Image), sum(Branch::Text), sum(Branch::Shared));
        ParamCount {
            image,
            text,
            shared,
            total: image + text + shared,
        }
    }

    #[test]
    fn closed_form_matches_manifest_at_reference_scale() {
        for f in [Fusion::Early, Fusion::Intermediate] {
            for c in [Conditioning::Concat, Conditioning::CrossAttn] {
                let cfg = ModelConfig::reference(f, c);
                assert_eq!(param_count(&cfg), from_specs(&cfg), "{f}/{c}");
            }
        }
    }

    #[test]
    fn early_text_branch_is_only_the_projection() {
        let cfg = ModelConfig::reference(Fusion::Early, Conditioning::Concat);
        assert_eq!(param_count(&cfg).text, 768 * 512 + 512);
    }

    #[test]
    fn image_branch_parity_between_fusions() {
        let early = ModelConfig::reference(Fusion::Early, Conditioning::CrossAttn);
        let inter = ModelConfig::reference(Fusion::Intermediate, Conditioning::CrossAttn);
        assert_eq!(param_count(&early).image, param_count(&inter).image);
        assert_eq!(
            param_count(&inter).total - param_count(&early).total,
            block_params(512, 4)
        );
    }
}
