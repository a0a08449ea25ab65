//! The run configuration. Unknown keys are rejected at every level.
//!
//! Seeds nested in `model`, `train` and `scene` are ignored: all of them are
//! derived from the top-level `seed` so one number controls a run.

use std::fs;
use std::path::Path;

use nowcast_core::intensity::BinSet;
use nowcast_core::synthdata::{SceneConfig, SplitConfig};
use nowcast_core::verify::ReportConfig;
use nowcast_model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BinSpec {
    Preset(String),
    Custom(BinSet),
}

impl BinSpec {
    pub fn resolve(&self) -> Result<BinSet> {
        match self {
            BinSpec::Preset(name) => BinSet::preset(name)
                .ok_or_else(|| CliError::Schema(format!("unknown bin preset {name:?}"))),
            BinSpec::Custom(b) => {
                b.validate()?;
                Ok(b.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timeline {
    pub days: u32,
    /// Spacing between forecast issuances.
    pub interval_h: u32,
    /// Spacing between frames inside an episode.
    pub step_min: i64,
    #[serde(default)]
    pub splits: SplitConfig,
}

fn default_ig_steps() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeConfig {
    #[serde(default = "default_ig_steps")]
    pub steps: usize,
    #[serde(default)]
    pub lead: usize,
    #[serde(default)]
    pub class: usize,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self {
            steps: default_ig_steps(),
            lead: 0,
            class: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub bins: BinSpec,
    /// Evaluation thresholds (mm/h).
    pub thresholds: Vec<f64>,
    pub neighborhoods_km: Vec<f64>,
    pub pools: Vec<usize>,
    #[serde(default)]
    pub ssim: bool,
    pub res_km: f64,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub timeline: Timeline,
    #[serde(default)]
    pub attribute: AttributeConfig,
    pub seed: u64,
}

/// SplitMix64 step: decorrelated seeds from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Schema(e.to_string()))
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        if !path.exists() {
            return Err(CliError::Missing(path.to_path_buf()));
        }
        let mut cfg = Self::parse(&fs::read_to_string(path)?)?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces nested seeds with ones derived from `seed`.
    pub fn normalize(&mut self) {
        self.model.seed = derive_seed(self.seed, 1);
        self.train.seed = derive_seed(self.seed, 2);
        self.scene.seed = derive_seed(self.seed, 3);
    }

    pub fn validate(&self) -> Result<()> {
        let bins = self.bins.resolve()?;
        let schema = |m: String| Err(CliError::Schema(m));
        if bins.len() != self.model.k {
            return schema(format!("model.k = {} but bins have {} edges", self.model.k, bins.len()));
        }
        self.model.validate().map_err(|e| CliError::Schema(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Schema(e.to_string()))?;
        self.scene.validate().map_err(|e| CliError::Schema(e.to_string()))?;
        if self.thresholds.is_empty() || !(self.res_km > 0.0) {
            return schema("thresholds must be non-empty and res_km > 0".into());
        }
        let sb = self.model.stem_block;
        if !self.scene.height.is_multiple_of(sb) || !self.scene.width.is_multiple_of(sb) {
            return schema(format!("scene size not divisible by stem_block {sb}"));
        }
        if self.timeline.days == 0 || self.timeline.interval_h == 0 || self.timeline.step_min <= 0 {
            return schema("timeline fields must be positive".into());
        }
        let a = &self.attribute;
        if a.steps == 0 || a.lead >= self.model.t_out || a.class >= self.model.maps_per_lead() {
            return schema("attribute target out of range".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canon.as_bytes()))
    }

    pub fn lead_min(&self) -> Vec<i64> {
        (1..=self.model.t_out as i64).map(|i| i * self.timeline.step_min).collect()
    }

    pub fn report_config(&self) -> ReportConfig {
        ReportConfig {
            thresholds: self.thresholds.clone(),
            neighborhoods_km: self.neighborhoods_km.clone(),
            pools: self.pools.clone(),
            res_km: self.res_km,
            lead_min: self.lead_min(),
            ssim: self.ssim,
        }
    }
}
