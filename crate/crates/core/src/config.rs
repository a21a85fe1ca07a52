//! Experiment configuration loaded from TOML.
//!
//! Only `seed` is required. Every section falls back to the benchmark
//! scenario: a 1.5 km closed serpentine road lined with 300 landmarks of 16
//! classes, driven in 3.75 m steps.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::late_opt::RefineConfig;
use crate::localization::LocalizationConfig;
use crate::mapping::MappingConfig;
use crate::metrics::{default_thresholds, EvalWindow, SuccessThreshold};
use crate::sim::{serpentine_loop, OdometryNoise, Placement, SensorModel, TrajectorySpec, WorldSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub count: usize,
    pub feature_dim: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            count: 16,
            feature_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Empty means the defaults (4 m, 3°) and (10 m, 5°).
    pub thresholds: Vec<SuccessThreshold>,
    pub window: EvalWindow,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            thresholds: default_thresholds(),
            window: EvalWindow::PostConvergence,
        }
    }
}

impl EvaluationConfig {
    pub fn effective_thresholds(&self) -> Vec<SuccessThreshold> {
        if self.thresholds.is_empty() {
            default_thresholds()
        } else {
            self.thresholds.clone()
        }
    }
}

/// File names written inside the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub map_log: String,
    pub log: String,
    pub ground_truth: String,
    pub map: String,
    pub trace: String,
    pub report: String,
    pub aligned_csv: String,
    pub bench_csv: String,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            map_log: "map_log.jsonl".into(),
            log: "detections.jsonl".into(),
            ground_truth: "ground_truth.jsonl".into(),
            map: "map.json".into(),
            trace: "trace.jsonl".into(),
            report: "metrics.json".into(),
            aligned_csv: "aligned.csv".into(),
            bench_csv: "bench.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// World and label-set seed; follows `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world_seed: Option<u64>,
    #[serde(default)]
    pub labels: LabelConfig,
    #[serde(default = "benchmark_world")]
    pub world: WorldSpec,
    /// Trajectory of the mapping pass.
    #[serde(default = "benchmark_trajectory")]
    pub trajectory: TrajectorySpec,
    /// Trajectory of the localization pass; the mapping trajectory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localization_trajectory: Option<TrajectorySpec>,
    #[serde(default)]
    pub sensor: SensorModel,
    #[serde(default)]
    pub odometry: OdometryNoise,
    #[serde(default)]
    pub mapping: MappingConfig,
    #[serde(default)]
    pub localization: LocalizationConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub outputs: OutputPaths,
}

pub const ROAD_LANES: usize = 4;
pub const ROAD_LANE_SPACING: f64 = 70.0;
pub const ROAD_HEIGHT: f64 = 290.0;
pub const ROAD_INNER_MARGIN: f64 = 40.0;
/// Clearance between the road and the world boundary (m).
pub const WORLD_MARGIN: f64 = 25.0;

pub fn benchmark_road() -> Vec<[f64; 2]> {
    serpentine_loop(ROAD_LANES, ROAD_LANE_SPACING, ROAD_HEIGHT, ROAD_INNER_MARGIN)
}

pub fn benchmark_world() -> WorldSpec {
    let width = (ROAD_LANES - 1) as f64 * ROAD_LANE_SPACING;
    WorldSpec {
        origin: [-WORLD_MARGIN, -WORLD_MARGIN],
        extent: [width + 2.0 * WORLD_MARGIN, ROAD_HEIGHT + 2.0 * WORLD_MARGIN],
        landmark_count: 300,
        placement: Placement::Roadside {
            waypoints: benchmark_road(),
            min_offset: 4.0,
            max_offset: 20.0,
        },
        min_separation: 4.0,
        ..WorldSpec::default()
    }
}

pub fn benchmark_trajectory() -> TrajectorySpec {
    TrajectorySpec {
        waypoints: benchmark_road(),
        closed: true,
        step_length: 3.75,
        ..TrajectorySpec::default()
    }
}

impl ExperimentConfig {
    /// Benchmark scenario with every section at its default.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            world_seed: None,
            labels: LabelConfig::default(),
            world: benchmark_world(),
            trajectory: benchmark_trajectory(),
            localization_trajectory: None,
            sensor: SensorModel::default(),
            odometry: OdometryNoise::default(),
            mapping: MappingConfig::default(),
            localization: LocalizationConfig::default(),
            refine: RefineConfig::default(),
            evaluation: EvaluationConfig::default(),
            outputs: OutputPaths::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section: &str, e: &dyn std::fmt::Display| ConfigError::Invalid(format!("[{section}] {e}"));
        self.sensor.validate().map_err(|e| invalid("sensor", &e))?;
        self.mapping.validate().map_err(|e| invalid("mapping", &e))?;
        self.localization.validate().map_err(|e| invalid("localization", &e))?;
        self.refine.validate().map_err(|e| invalid("refine", &e))?;
        if self.labels.count == 0 || self.labels.feature_dim < 2 {
            return Err(invalid("labels", &"need at least one label and two feature dimensions"));
        }
        for th in &self.evaluation.thresholds {
            if !(th.max_trans > 0.0 && th.max_rot > 0.0) {
                return Err(invalid("evaluation", &"thresholds must be positive"));
            }
        }
        Ok(())
    }

    pub fn world_seed(&self) -> u64 {
        self.world_seed.unwrap_or(self.seed)
    }

    pub fn localization_trajectory(&self) -> &TrajectorySpec {
        self.localization_trajectory.as_ref().unwrap_or(&self.trajectory)
    }

    /// Hex SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }
}
