use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use maskdiff::denoiser::DenoiserConfig;
use maskdiff::optim::AdamConfig;
use maskdiff::pnm::write_atomic;
use maskdiff::sampler::SamplerConfig;
use maskdiff::schedule::ScheduleConfig;
use maskdiff::seg_oracle::{SegConfig, SegTrainConfig};
use maskdiff::trainer::TrainConfig;

pub const LOCK_FILE: &str = "config.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub size: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            size: 32,
            n_train: 200,
            n_test: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Masks scored by eval-fidelity; 0 takes the whole test split.
    pub n_samples: usize,
    /// Sampling batch size.
    pub chunk: usize,
    /// Number of downstream seeds, counted up from `--seed`.
    pub downstream_seeds: usize,
    /// Training recipe of the downstream segmenter.
    pub segmenter: SegTrainConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_samples: 0,
            chunk: 16,
            downstream_seeds: 3,
            segmenter: SegTrainConfig {
                model: SegConfig { channels: 8, groups: 4 },
                epochs: 1000,
                max_steps: 1000,
                ..Default::default()
            },
        }
    }
}

/// Invocation recorded in `config.lock` next to the resolved settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommandRecord {
    pub name: String,
    pub args: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub oracle: SegTrainConfig,
    pub eval: EvalSection,
    pub command: Option<CommandRecord>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            denoiser: DenoiserConfig {
                base_channels: 8,
                levels: 3,
                time_embed_dim: 16,
                groups: 4,
                mask_hidden: 8,
                ..Default::default()
            },
            schedule: ScheduleConfig {
                beta_start: 5e-4,
                beta_end: 0.1,
                ..Default::default()
            },
            sampler: SamplerConfig::default(),
            train: TrainConfig {
                batch_size: 4,
                adam: AdamConfig {
                    lr: 3e-3,
                    ..Default::default()
                },
                refine_steps: 10,
                refine_start: 4500,
                ema_decay: 0.995,
                ..Default::default()
            },
            oracle: SegTrainConfig {
                model: SegConfig { channels: 8, groups: 4 },
                epochs: 40,
                ..Default::default()
            },
            eval: EvalSection::default(),
            command: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).map_err(|e| crate::UsageError(format!("{}: {e}", path.display())).into())
    }

    /// Overlays a TOML document on the defaults, key by key, so a partial
    /// section keeps the defaults of the keys it leaves out.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let over: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| e.to_string())?;
        if let Some(cmd) = over.get("command") {
            base.insert("command".into(), cmd.clone());
        }
        overlay(&mut base, over, "")?;
        base.try_into().map_err(|e: toml::de::Error| e.to_string())
    }

    /// Writes the resolved config with the invocation into `out/config.lock`.
    pub fn write_lock(&self, out: &Path, record: CommandRecord) -> Result<()> {
        let mut locked = self.clone();
        locked.command = Some(record);
        let text = toml::to_string(&locked).context("serializing config.lock")?;
        write_atomic(&out.join(LOCK_FILE), text.as_bytes())?;
        Ok(())
    }
}

fn overlay(base: &mut toml::Table, over: toml::Table, prefix: &str) -> std::result::Result<(), String> {
    for (key, value) in over {
        let path = format!("{prefix}{key}");
        match (base.get_mut(&key), value) {
            (None, _) => return Err(format!("unknown key `{path}`")),
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => overlay(b, o, &format!("{path}."))?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}
