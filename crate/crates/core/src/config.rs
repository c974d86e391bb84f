//! Run configuration: one TOML document, dotted `key=value` overrides and
//! an echo of the effective settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coordinator::CoordinatorConfig;
use crate::dqn_agent::DqnConfig;
use crate::error::{ConfigError, Error, Result};
use crate::iese::IeseSpec;
use crate::rewards::RewardConfig;
use crate::road_network::GridSpec;
use crate::traffic_sim::SimConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    GqrlIese,
    Gqrl,
    IeseDqn,
    Dqn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::GqrlIese, Variant::Gqrl, Variant::IeseDqn, Variant::Dqn];

    pub fn uses_iese(self) -> bool {
        matches!(self, Variant::GqrlIese | Variant::IeseDqn)
    }

    pub fn uses_coordinator(self) -> bool {
        matches!(self, Variant::GqrlIese | Variant::Gqrl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::GqrlIese => "gqrl_iese",
            Variant::Gqrl => "gqrl",
            Variant::IeseDqn => "iese_dqn",
            Variant::Dqn => "dqn",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Episodes between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// Worker threads for evaluation episodes.
    pub eval_threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            seed: 0,
            checkpoint_every: 0,
            eval_episodes: 20,
            eval_seed: 10_000,
            eval_threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    /// Also write one record per timestep.
    pub step_records: bool,
    /// Include attention weights in step records.
    pub attention_dump: bool,
    /// Write a reward-curve SVG after training.
    pub svg: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "runs/default".into(),
            step_records: false,
            attention_dump: false,
            svg: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: Variant,
    pub grid: GridSpec,
    pub sim: SimConfig,
    pub reward: RewardConfig,
    pub iese: IeseSpec,
    pub dqn: DqnConfig,
    pub coordinator: CoordinatorConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::GqrlIese,
            grid: GridSpec::default(),
            sim: SimConfig::default(),
            reward: RewardConfig::default(),
            iese: IeseSpec::default(),
            dqn: DqnConfig::default(),
            coordinator: CoordinatorConfig::default(),
            train: TrainConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn parse_error(e: toml::de::Error) -> ConfigError {
    // Unknown or mistyped keys surface here; the message names the key.
    ConfigError::invalid("config", e.message().trim().to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(parse_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str::<RunConfig>(&text)
            .map_err(|e| ConfigError::invalid(path.display().to_string(), e.message().trim().to_string()).into())
            .and_then(|c| {
                c.validate()?;
                Ok(c)
            })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let net = crate::road_network::RoadNetwork::build(&self.grid)?;
        self.sim.validate(&net)?;
        self.reward.validate()?;
        if self.variant.uses_iese() {
            self.iese.validate()?;
        } else if self.iese.output_dim == 0 {
            return Err(ConfigError::invalid("iese.output_dim", "must be positive"));
        }
        self.dqn.validate()?;
        if self.variant.uses_coordinator() {
            self.coordinator.validate()?;
        }
        if self.train.eval_threads == 0 {
            return Err(ConfigError::invalid("train.eval_threads", "must be positive"));
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides. The key must already exist in
    /// the effective configuration; values are TOML literals, and anything
    /// that does not parse as one is taken as a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> std::result::Result<Self, ConfigError> {
        let mut doc = toml::Table::try_from(self).expect("config serializes");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::invalid(item.clone(), "override must look like key=value"))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| ConfigError::invalid(key, "empty key"))?;
            let mut table = &mut doc;
            for p in parts {
                table = table
                    .get_mut(p)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| ConfigError::invalid(key, "unknown configuration key"))?;
            }
            let slot = table
                .get_mut(last)
                .ok_or_else(|| ConfigError::invalid(key, "unknown configuration key"))?;
            // Integers are accepted where floats are expected.
            *slot = match (&*slot, value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            let check: std::result::Result<RunConfig, _> = doc.clone().try_into();
            if let Err(e) = check {
                return Err(ConfigError::invalid(key, e.message().trim().to_string()));
            }
        }
        let cfg: RunConfig = doc.try_into().map_err(parse_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Network shape settings that must match between a checkpoint and the
    /// configuration used to run it.
    pub fn same_architecture(&self, other: &RunConfig) -> bool {
        self.variant == other.variant
            && self.grid.intersections_per_side == other.grid.intersections_per_side
            && self.grid.cells_per_channel == other.grid.cells_per_channel
            && self.sim.pursuers == other.sim.pursuers
            && self.sim.evaders == other.sim.evaders
            && self.sim.background == other.sim.background
            && self.iese == other.iese
            && self.dqn.head_hidden == other.dqn.head_hidden
            && (!self.variant.uses_coordinator() || self.coordinator.hidden == other.coordinator.hidden)
    }
}
