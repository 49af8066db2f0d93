use std::path::Path;

use anyhow::{Context, Result};
use gridwall_core::track::TrackConfig;
use gridwall_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a run needs: the track model and the training knobs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridwallConfig {
    pub track: TrackConfig,
    pub train: TrainConfig,
}

impl GridwallConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.track.validate().with_context(|| format!("track section of {}", path.display()))?;
        cfg.train.validate().with_context(|| format!("train section of {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
