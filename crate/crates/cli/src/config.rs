//! Run configuration: a preset expanded to a full tree, a YAML file merged
//! over it, then strict deserialization so unknown or mistyped keys fail
//! with their path.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use framers::codec::Policy;
use framers::framemae::PretrainConfig;
use framers::patchcube::ModelConfig;
use framers::selector::{SelectorConfig, SelectorTrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Synthetic clips with known key slots.
    Planted,
    /// Clips sampled from the video directories in `videos`.
    Video,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub videos: Vec<PathBuf>,
    /// Clips used for autoencoder pretraining.
    pub train_clips: usize,
    /// Clips labelled by the oracle for selector training.
    pub label_clips: usize,
    /// Clips used by `compress`, `eval` and `visualize` without `--input`.
    pub eval_clips: usize,
    /// Slots carrying content in each planted clip.
    pub planted_slots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorSection {
    pub proj_dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub train: SelectorTrainConfig,
    /// `(blocks, dropout)` points for `ablate`.
    pub ablation: Vec<(usize, f64)>,
    pub ablation_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSection {
    /// Slots kept per clip.
    pub k: usize,
    pub policies: Vec<Policy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: PretrainConfig,
    pub selector: SelectorSection,
    pub codec: CodecSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train, data) = match preset {
            Preset::Toy => (
                ModelConfig::toy(),
                PretrainConfig {
                    steps: 300,
                    batch_size: 4,
                    lr: 1e-3,
                    ..PretrainConfig::default()
                },
                DataConfig {
                    source: DataSource::Planted,
                    videos: Vec::new(),
                    train_clips: 8,
                    label_clips: 400,
                    eval_clips: 50,
                    planted_slots: 2,
                },
            ),
            Preset::Paper => (
                ModelConfig::paper(),
                PretrainConfig::default(),
                DataConfig {
                    source: DataSource::Video,
                    videos: Vec::new(),
                    train_clips: 50_000,
                    label_clips: 50_000,
                    eval_clips: 10_000,
                    planted_slots: 2,
                },
            ),
        };
        Self {
            preset,
            seed: 0,
            out_dir: PathBuf::from("framers-out"),
            data,
            model,
            train,
            selector: SelectorSection {
                proj_dim: 384,
                blocks: 3,
                hidden: 512,
                dropout: 0.1,
                train: SelectorTrainConfig {
                    epochs: if preset == Preset::Toy { 20 } else { 300 },
                    ..SelectorTrainConfig::default()
                },
                ablation: vec![(3, 0.1), (3, 0.0), (4, 0.0)],
                ablation_seeds: vec![0],
            },
            codec: CodecSection {
                k: 2,
                policies: Policy::ALL.to_vec(),
            },
        }
    }

    pub fn selector_config(&self) -> SelectorConfig {
        SelectorConfig {
            proj_dim: self.selector.proj_dim,
            blocks: self.selector.blocks,
            hidden: self.selector.hidden,
            dropout: self.selector.dropout,
            ..SelectorConfig::for_encoder(self.model.embed_dim, self.model.t_tok(), self.model.s_tok(), self.codec.k)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.selector_config().validate()?;
        if self.data.source == DataSource::Video && self.data.videos.is_empty() {
            bail!("data.videos: the video source needs at least one directory");
        }
        if self.codec.policies.is_empty() {
            bail!("codec.policies: at least one policy is required");
        }
        Ok(())
    }
}

/// Recursively overlays `over` on `base`. A mapping whose `kind` tag
/// differs from the base replaces it outright, since its fields differ.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let retagged = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if retagged {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses YAML text into a config, expanding the preset it names (or
/// `fallback` when it names none).
pub fn parse(text: &str, fallback: Preset) -> Result<RunConfig> {
    let over: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_yaml::from_str(text).context("config is not valid YAML")?
    };
    if !over.is_object() {
        bail!("config must be a mapping at the top level");
    }
    let preset = match over.get("preset") {
        Some(p) => serde_json::from_value(p.clone()).context("preset: expected `toy` or `paper`")?,
        None => fallback,
    };
    let mut tree = serde_json::to_value(RunConfig::preset(preset))?;
    merge(&mut tree, over);
    serde_path_to_error::deserialize(tree).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("config key `{path}`: {}", e.into_inner())
    })
}

pub fn load(path: &Path, fallback: Preset) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text, fallback).with_context(|| format!("in {}", path.display()))
}
