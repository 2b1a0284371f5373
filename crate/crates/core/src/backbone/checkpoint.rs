//! Named-tensor checkpoint container.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   "UVFCKPT\0"
//! version    u32 LE
//! header_len u64 LE
//! header     header_len bytes of UTF-8 TOML: format_version, [config], [[tensor]]
//!            entries with name, branch, shape and byte offset into the payload
//! payload    little-endian f32 values, tensors back to back in manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::config::ModelConfig;
use super::denoiser::Denoiser;
use super::model::{Branch, Model, NamedParam};
use super::text::TextEmbedder;

pub const MAGIC: &[u8; 8] = b"UVFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// `image`, `text`, `shared`, or `embedder` for the token embedder.
    pub branch: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensor: Vec<ManifestEntry>,
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Image => "image",
        Branch::Text => "text",
        Branch::Shared => "shared",
    }
}

fn parse_branch(s: &str) -> Option<Branch> {
    match s {
        "image" => Some(Branch::Image),
        "text" => Some(Branch::Text),
        "shared" => Some(Branch::Shared),
        _ => None,
    }
}

/// Serializes a denoiser to checkpoint bytes.
pub fn to_bytes(denoiser: &Denoiser<f32>) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: &str, branch: &str, t: &Tensor<f32>| {
        entries.push(ManifestEntry {
            name: name.to_string(),
            branch: branch.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in denoiser.model.params() {
        push(&p.name, branch_name(p.branch), &p.value);
    }
    push(TextEmbedder::<f32>::TABLE, "embedder", denoiser.embedder.table());
    push(TextEmbedder::<f32>::POS, "embedder", denoiser.embedder.pos());

    let header = Header {
        format_version: FORMAT_VERSION,
        config: denoiser.config().clone(),
        tensor: entries,
    };
    let text = toml::to_string(&header)
        .map_err(|e| Error::Data(format!("cannot encode checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(20 + text.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Reads the model config stored in checkpoint bytes without decoding tensors.
pub fn peek_config(bytes: &[u8]) -> Result<ModelConfig> {
    Ok(parse_header(bytes)?.0.config)
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let fmt = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 20 {
        return Err(fmt(bytes.len(), "file shorter than the fixed preamble".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(fmt(0, "bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fmt(8, format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let start = 20usize;
    let end = start
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt(bytes.len(), format!("header of {header_len} bytes is truncated")))?;
    let text = std::str::from_utf8(&bytes[start..end])
        .map_err(|e| fmt(start + e.valid_up_to(), "header is not UTF-8".into()))?;
    let header: Header =
        toml::from_str(text).map_err(|e| fmt(start, format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(fmt(start, "header version disagrees with preamble".into()));
    }
    Ok((header, end))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Denoiser<f32>> {
    let (header, payload_start) = parse_header(bytes)?;
    let payload = &bytes[payload_start..];
    let mut params = Vec::new();
    let mut table = None;
    let mut pos = None;
    let mut expected_offset = 0u64;
    for entry in &header.tensor {
        let numel: usize = entry.shape.iter().product();
        let at = payload_start as u64 + entry.offset;
        if entry.offset != expected_offset {
            return Err(Error::Format {
                offset: at,
                message: format!("tensor {} is not contiguous with its predecessor", entry.name),
            });
        }
        let begin = entry.offset as usize;
        let end = begin + numel * 4;
        if end > payload.len() {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!("payload truncated inside tensor {}", entry.name),
            });
        }
        let data: Vec<f32> = payload[begin..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        expected_offset = end as u64;
        match entry.branch.as_str() {
            "embedder" if entry.name == TextEmbedder::<f32>::TABLE => table = Some(tensor),
            "embedder" if entry.name == TextEmbedder::<f32>::POS => pos = Some(tensor),
            other => {
                let branch = parse_branch(other).ok_or_else(|| Error::Format {
                    offset: at,
                    message: format!("unknown branch {other:?} for {}", entry.name),
                })?;
                params.push(NamedParam {
                    name: entry.name.clone(),
                    branch,
                    value: tensor,
                });
            }
        }
    }
    if expected_offset as usize != payload.len() {
        return Err(Error::Format {
            offset: (payload_start as u64) + expected_offset,
            message: "trailing bytes after the last tensor".into(),
        });
    }
    let model = Model::from_params(&header.config, params)?;
    let (table, pos) = table.zip(pos).ok_or_else(|| Error::Format {
        offset: payload_start as u64,
        message: "embedder tensors missing".into(),
    })?;
    let embedder = TextEmbedder::from_tensors(&header.config, table, pos)?;
    Ok(Denoiser { model, embedder })
}

pub fn save(path: &Path, denoiser: &Denoiser<f32>) -> Result<()> {
    let bytes = to_bytes(denoiser)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Denoiser<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::config::{Conditioning, Fusion};
    use crate::numerics::RngState;

    fn small() -> ModelConfig {
        ModelConfig {
            fusion: Fusion::Intermediate,
            conditioning: Conditioning::CrossAttn,
            depth: 3,
            n_image: 1,
            n_text: 1,
            embed_dim: 8,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 2,
            img_channels: 3,
            img_size: 4,
            text_len: 3,
            text_in_dim: 4,
            vocab_size: 17,
        }
    }

    fn perturbed() -> Denoiser<f32> {
        let mut d = Denoiser::<f32>::new(&small(), &mut RngState::new(8)).unwrap();
        // make the zero-initialized head non-trivial too
        let mut rng = RngState::new(9);
        for t in d.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.standard_normal() as f32 * 1e-3;
            }
        }
        d
    }

    #[test]
    fn bit_exact_round_trip() {
        let d = perturbed();
        let bytes = to_bytes(&d).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), d.config());
        for (a, b) in d.tensors().iter().zip(back.tensors()) {
            assert!(a.bit_eq(b));
        }
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = to_bytes(&perturbed()).unwrap();
        for cut in [4, 15, 40, bytes.len() - 3] {
            match from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= bytes.len() as u64),
                other => panic!("cut {cut}: expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = to_bytes(&perturbed()).unwrap();
        bytes[8] = 9;
        assert!(matches!(from_bytes(&bytes), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn header_carries_config_and_manifest() {
        let bytes = to_bytes(&perturbed()).unwrap();
        let cfg = peek_config(&bytes).unwrap();
        assert_eq!(cfg, small());
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[20..20 + len]).unwrap();
        assert!(text.contains("name = \"head.weight\""));
        assert!(text.contains("branch = \"embedder\""));
    }
}
