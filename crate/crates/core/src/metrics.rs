//! Trajectory accuracy, success rates and map statistics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::mapping::SparseMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no frames to evaluate")]
    Empty,
    #[error("estimate/ground-truth length mismatch ({estimates} vs {truths})")]
    LengthMismatch { estimates: usize, truths: usize },
    #[error("raw point count must be positive")]
    NoRawPoints,
    #[error("map has no instances")]
    EmptyMap,
    #[error("coarse ATE must be positive, got {0}")]
    NonPositiveCoarse(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Meters.
    pub translation_error: f64,
    /// Degrees, geodesic.
    pub rotation_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessThreshold {
    pub max_trans: f64,
    /// Degrees.
    pub max_rot: f64,
}

impl SuccessThreshold {
    pub const fn new(max_trans: f64, max_rot: f64) -> Self {
        Self { max_trans, max_rot }
    }

    pub fn accepts(&self, e: &PoseError) -> bool {
        e.translation_error < self.max_trans && e.rotation_error < self.max_rot
    }
}

pub fn default_thresholds() -> Vec<SuccessThreshold> {
    vec![SuccessThreshold::new(4.0, 3.0), SuccessThreshold::new(10.0, 5.0)]
}

pub fn pose_error(estimate: &Pose, truth: &Pose) -> PoseError {
    let relative = truth.rotation.transpose() * estimate.rotation;
    let c = ((relative.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    PoseError {
        translation_error: (estimate.translation - truth.translation).norm(),
        rotation_error: c.acos().to_degrees(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalWindow {
    All,
    #[default]
    PostConvergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRate {
    pub threshold: SuccessThreshold,
    /// Percent.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub frames: usize,
    pub ate: f64,
    pub are: f64,
    pub success: Vec<SuccessRate>,
}

/// Means and success rates over paired estimate/truth poses.
pub fn run_metrics(
    estimates: &[Pose],
    truths: &[Pose],
    thresholds: &[SuccessThreshold],
) -> Result<RunMetrics, MetricsError> {
    if estimates.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            estimates: estimates.len(),
            truths: truths.len(),
        });
    }
    let errors: Vec<PoseError> = estimates.iter().zip(truths).map(|(e, t)| pose_error(e, t)).collect();
    metrics_from_errors(&errors, thresholds)
}

pub fn metrics_from_errors(
    errors: &[PoseError],
    thresholds: &[SuccessThreshold],
) -> Result<RunMetrics, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = errors.len() as f64;
    Ok(RunMetrics {
        frames: errors.len(),
        ate: errors.iter().map(|e| e.translation_error).sum::<f64>() / n,
        are: errors.iter().map(|e| e.rotation_error).sum::<f64>() / n,
        success: thresholds
            .iter()
            .map(|th| SuccessRate {
                threshold: *th,
                rate: 100.0 * errors.iter().filter(|e| th.accepts(e)).count() as f64 / n,
            })
            .collect(),
    })
}

/// Index of the first evaluated frame, or `None` when the window is empty.
pub fn window_start(converged: &[bool], window: EvalWindow) -> Option<usize> {
    match window {
        EvalWindow::All => (!converged.is_empty()).then_some(0),
        EvalWindow::PostConvergence => converged.iter().position(|&c| c),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub k: usize,
    pub raw_points: usize,
    pub sparsity_ratio: f64,
}

pub fn map_stats(map: &SparseMap, raw_point_count: usize) -> Result<MapStats, MetricsError> {
    if map.is_empty() {
        return Err(MetricsError::EmptyMap);
    }
    if raw_point_count == 0 {
        return Err(MetricsError::NoRawPoints);
    }
    Ok(MapStats {
        k: map.len(),
        raw_points: raw_point_count,
        sparsity_ratio: raw_point_count as f64 / map.len() as f64,
    })
}

/// Percent reduction of ATE from coarse to refined.
pub fn ablation_improvement(ate_coarse: f64, ate_refined: f64) -> Result<f64, MetricsError> {
    if !(ate_coarse > 0.0) {
        return Err(MetricsError::NonPositiveCoarse(ate_coarse));
    }
    Ok(100.0 * (ate_coarse - ate_refined) / ate_coarse)
}
