//! Run configuration: presets, TOML round trip and `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fusion_core::backbone::{Conditioning, Fusion, ModelConfig};
use fusion_core::data::{SceneSpec, VOCAB_SIZE};
use fusion_core::diffusion::{ScheduleConfig, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Desk,
    /// Reference architecture for FLOPs and parameter accounting only.
    Reference,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Tiny => "tiny",
            Preset::Desk => "desk",
            Preset::Reference => "reference",
        })
    }
}

impl Preset {
    /// `(n_image, n_text)` used when a config is switched to intermediate
    /// fusion.
    pub fn intermediate_blocks(self) -> (usize, usize) {
        match self {
            Preset::Tiny => (1, 1),
            Preset::Desk => (2, 1),
            Preset::Reference => (4, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub steps: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub n_steps: usize,
    pub omega: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Prompted counts used by `eval-count` and `cfg-sweep`.
    pub counts: Vec<usize>,
    /// Samples per `(shape, color, count)` prompt.
    pub repeats: usize,
    pub omegas: Vec<f64>,
    /// Training-distribution images used as the Fréchet reference.
    pub n_reference: usize,
    pub spectrum_k: usize,
    pub attn_prompts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub diffusion: ScheduleConfig,
    pub optim: TrainConfig,
    pub train: TrainRun,
    pub data: DataConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

fn attn_prompts() -> Vec<String> {
    ["three red circles", "two blue squares", "one green triangle", "five yellow circles"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let schedule = ScheduleConfig::default();
        let sample = SampleConfig {
            n_steps: 50,
            omega: 3.0,
            batch: 32,
        };
        match preset {
            Preset::Tiny => RunConfig {
                preset,
                seed: 0,
                out_dir: "runs/tiny".into(),
                model: ModelConfig {
                    fusion: Fusion::Intermediate,
                    conditioning: Conditioning::CrossAttn,
                    depth: 5,
                    n_image: 1,
                    n_text: 1,
                    embed_dim: 32,
                    heads: 2,
                    mlp_ratio: 2,
                    patch_size: 2,
                    img_channels: 3,
                    img_size: 16,
                    text_len: 8,
                    text_in_dim: 16,
                    vocab_size: VOCAB_SIZE,
                },
                diffusion: schedule,
                optim: TrainConfig {
                    lr: 1e-3,
                    warmup: 100,
                    batch_size: 16,
                    ..TrainConfig::default()
                },
                train: TrainRun {
                    steps: 2000,
                    checkpoint_every: 1000,
                },
                data: DataConfig {
                    n_train: 2000,
                    scene: SceneSpec::for_canvas(16, 8),
                },
                sample,
                eval: EvalConfig {
                    counts: vec![1, 2, 3, 4, 5],
                    repeats: 1,
                    omegas: vec![0.0, 1.0, 3.0],
                    n_reference: 256,
                    spectrum_k: 10,
                    attn_prompts: attn_prompts(),
                },
            },
            Preset::Desk => RunConfig {
                preset,
                seed: 0,
                out_dir: "runs/desk".into(),
                model: ModelConfig {
                    fusion: Fusion::Intermediate,
                    conditioning: Conditioning::CrossAttn,
                    depth: 7,
                    n_image: 2,
                    n_text: 1,
                    embed_dim: 64,
                    heads: 4,
                    mlp_ratio: 4,
                    patch_size: 4,
                    img_channels: 3,
                    img_size: 32,
                    text_len: 8,
                    text_in_dim: 32,
                    vocab_size: VOCAB_SIZE,
                },
                diffusion: schedule,
                optim: TrainConfig {
                    lr: 5e-4,
                    warmup: 1000,
                    batch_size: 32,
                    ..TrainConfig::default()
                },
                train: TrainRun {
                    steps: 20_000,
                    checkpoint_every: 5000,
                },
                data: DataConfig {
                    n_train: 10_000,
                    scene: SceneSpec::for_canvas(32, 8),
                },
                sample,
                eval: EvalConfig {
                    counts: vec![1, 2, 3],
                    repeats: 6,
                    omegas: vec![0.0, 1.0, 3.0],
                    n_reference: 512,
                    spectrum_k: 10,
                    attn_prompts: attn_prompts(),
                },
            },
            Preset::Reference => RunConfig {
                preset,
                seed: 0,
                out_dir: "runs/reference".into(),
                model: ModelConfig::reference(Fusion::Intermediate, Conditioning::CrossAttn),
                diffusion: schedule,
                optim: TrainConfig::default(),
                train: TrainRun {
                    steps: 0,
                    checkpoint_every: 0,
                },
                data: DataConfig {
                    n_train: 0,
                    scene: SceneSpec::for_canvas(32, 77),
                },
                sample,
                eval: EvalConfig {
                    counts: vec![1, 2, 3, 4, 5],
                    repeats: 1,
                    omegas: vec![0.0, 1.0, 3.0],
                    n_reference: 0,
                    spectrum_k: 10,
                    attn_prompts: attn_prompts(),
                },
            },
        }
    }

    /// Switches fusion mode; intermediate fusion takes the preset's block
    /// split, early fusion has none.
    pub fn set_fusion(&mut self, fusion: Fusion) {
        self.model.fusion = fusion;
        let (n_image, n_text) = match fusion {
            Fusion::Early => (0, 0),
            Fusion::Intermediate => self.preset.intermediate_blocks(),
        };
        self.model.n_image = n_image;
        self.model.n_text = n_text;
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `section.field=value`; the value is parsed as a TOML value
    /// and falls back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(&*self)
            .map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| CliError::Usage(format!("{key}: {} is not a section", parts[..i].join("."))))?;
            let slot = table
                .get_mut(*part)
                .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
            if i + 1 == parts.len() {
                *slot = value.clone();
                break;
            }
            node = slot;
        }
        let updated: RunConfig = root
            .try_into()
            .map_err(|e| CliError::Usage(format!("override {key}: {e}")))?;
        *self = updated;
        Ok(())
    }

    /// Schema checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        self.model.validate().map_err(|e| CliError::Usage(format!("model: {e}")))?;
        self.optim.validate().map_err(|e| CliError::Usage(format!("optim: {e}")))?;
        fusion_core::diffusion::make_schedule(self.diffusion.steps, self.diffusion.beta_start, self.diffusion.beta_end)
            .map_err(|e| CliError::Usage(format!("diffusion: {e}")))?;
        if self.sample.n_steps == 0 || self.sample.n_steps > self.diffusion.steps {
            return usage(format!(
                "sample.n_steps {} must lie in [1, diffusion.steps = {}]",
                self.sample.n_steps, self.diffusion.steps
            ));
        }
        if !(self.sample.omega >= 0.0) || self.eval.omegas.iter().any(|w| !(*w >= 0.0)) {
            return usage("guidance scales must be >= 0".into());
        }
        if self.sample.batch == 0 {
            return usage("sample.batch must be at least 1".into());
        }
        if self.preset == Preset::Reference {
            return Ok(());
        }
        self.data.scene.validate().map_err(|e| CliError::Usage(format!("data.scene: {e}")))?;
        if self.data.scene.canvas != self.model.img_size {
            return usage(format!(
                "data.scene.canvas {} differs from model.img_size {}",
                self.data.scene.canvas, self.model.img_size
            ));
        }
        if self.data.scene.text_len != self.model.text_len {
            return usage(format!(
                "data.scene.text_len {} differs from model.text_len {}",
                self.data.scene.text_len, self.model.text_len
            ));
        }
        if self.model.img_channels != 3 {
            return usage(format!("model.img_channels must be 3 for RGB scenes, got {}", self.model.img_channels));
        }
        if self.model.vocab_size != VOCAB_SIZE {
            return usage(format!("model.vocab_size must be {VOCAB_SIZE}, got {}", self.model.vocab_size));
        }
        if let Some(&c) = self.eval.counts.iter().find(|&&c| c == 0 || c > self.data.scene.max_count) {
            return usage(format!("eval.counts entry {c} is outside [1, {}]", self.data.scene.max_count));
        }
        Ok(())
    }

    /// Refuses presets that exist only for accounting.
    pub fn require_trainable(&self) -> Result<(), CliError> {
        if self.preset == Preset::Reference {
            return Err(CliError::Usage(
                "the reference preset is for flops and parameter accounting only".into(),
            ));
        }
        Ok(())
    }
}
