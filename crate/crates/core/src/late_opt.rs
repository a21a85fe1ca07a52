//! Post-convergence refinement over a short history window.
//!
//! Every detection in the window is re-expressed in the current vehicle
//! frame through the chained odometry, matched to the map under the anchor
//! pose, and a single rigid transform is fitted to all pairs.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::mapping::{semantic_affinity, SparseMap};
use crate::sim::Detection;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LateOptError {
    #[error("history index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("history window is empty")]
    EmptyHistory,
    #[error("{got} correspondences, need at least {need}")]
    TooFewPairs { got: usize, need: usize },
    #[error("correspondence geometry is degenerate (collinear or coincident sources)")]
    Degenerate,
    #[error("no consensus set found")]
    NoConsensus,
    #[error("invalid refine config: {0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub detections: Vec<Detection>,
    /// Odometry step that led into this frame.
    pub odometry_step: Pose,
}

/// Fixed-capacity chronological window of recent frames.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    capacity: usize,
    entries: VecDeque<HistoryEntry>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: HistoryEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn entries(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.entries.iter()
    }

    /// Relative transform from entry `from` to the newest entry: the product
    /// of the odometry steps of every later entry.
    pub fn chain_relative(&self, from: usize) -> Result<Pose, LateOptError> {
        if from >= self.entries.len() {
            return Err(LateOptError::IndexOutOfRange {
                index: from,
                len: self.entries.len(),
            });
        }
        Ok(self
            .entries
            .iter()
            .skip(from + 1)
            .fold(Pose::identity(), |acc, e| acc.compose(&e.odometry_step)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Observation in current-frame coordinates.
    pub source: Vector3<f64>,
    /// Matched map centroid.
    pub target: Vector3<f64>,
    pub weight: f64,
}

pub type CorrespondenceSet = Vec<Correspondence>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    ProcrustesRansac,
    HuberIrls,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairWeighting {
    #[default]
    Uniform,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub enabled: bool,
    pub history: usize,
    pub max_pair_distance: f64,
    pub ransac_iters: usize,
    pub ransac_inlier_thresh: f64,
    pub huber_delta: f64,
    pub min_pairs: usize,
    pub solver: Solver,
    /// Semantic gate used when matching window detections to the map.
    pub delta_sem: f64,
    pub pair_weighting: PairWeighting,
    /// Seed of the RANSAC sampler.
    pub ransac_seed: u64,
    /// Re-center the particle ensemble on the refined pose.
    pub recenter_particles: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            history: 10,
            max_pair_distance: 5.0,
            ransac_iters: 200,
            ransac_inlier_thresh: 1.0,
            huber_delta: 1.0,
            min_pairs: 4,
            solver: Solver::ProcrustesRansac,
            delta_sem: 0.9,
            pair_weighting: PairWeighting::Uniform,
            ransac_seed: 0x5EED,
            recenter_particles: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), LateOptError> {
        if !(self.max_pair_distance > 0.0 && self.ransac_inlier_thresh > 0.0 && self.huber_delta > 0.0) {
            return Err(LateOptError::BadConfig("thresholds must be positive"));
        }
        if self.min_pairs < 3 {
            return Err(LateOptError::BadConfig("min_pairs must be at least 3"));
        }
        if self.history == 0 {
            return Err(LateOptError::BadConfig("history must hold at least one frame"));
        }
        Ok(())
    }
}

/// Builds source/target pairs for every detection in the window that has a
/// semantically compatible map instance within `max_pair_distance` of its
/// anchored position.
pub fn gather_correspondences(
    history: &HistoryBuffer,
    anchor: &Pose,
    map: &SparseMap,
    cfg: &RefineConfig,
) -> Result<CorrespondenceSet, LateOptError> {
    if history.is_empty() {
        return Err(LateOptError::EmptyHistory);
    }
    let mut pairs = Vec::new();
    for (i, entry) in history.entries().enumerate() {
        let rel_inv = history.chain_relative(i)?.inverse();
        let frame_pose = anchor.compose(&rel_inv);
        for det in &entry.detections {
            let world = frame_pose.transform_point(&det.centroid_local);
            let mut best: Option<(f64, usize, f64)> = None;
            for (k, inst) in map.instances.iter().enumerate() {
                let d = (inst.centroid - world).norm();
                if d > cfg.max_pair_distance || best.is_some_and(|(bd, _, _)| d >= bd) {
                    continue;
                }
                let Ok(s) = semantic_affinity(&det.feature, &inst.feature) else {
                    continue;
                };
                if s > cfg.delta_sem {
                    best = Some((d, k, s));
                }
            }
            if let Some((_, k, s)) = best {
                pairs.push(Correspondence {
                    source: rel_inv.transform_point(&det.centroid_local),
                    target: map.instances[k].centroid,
                    weight: match cfg.pair_weighting {
                        PairWeighting::Uniform => 1.0,
                        PairWeighting::Semantic => s,
                    },
                });
            }
        }
    }
    Ok(pairs)
}

fn residual(pose: &Pose, c: &Correspondence) -> f64 {
    (pose.transform_point(&c.source) - c.target).norm()
}

/// Weighted sum of squared residuals.
pub fn alignment_cost(pose: &Pose, pairs: &[Correspondence]) -> f64 {
    pairs.iter().map(|c| c.weight * residual(pose, c).powi(2)).sum()
}

/// Closed-form weighted least-squares rigid fit (`T·source ≈ target`).
pub fn fit_rigid(pairs: &[Correspondence], weights: &[f64]) -> Result<Pose, LateOptError> {
    if pairs.len() < 3 {
        return Err(LateOptError::TooFewPairs {
            got: pairs.len(),
            need: 3,
        });
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(LateOptError::Degenerate);
    }
    let (mut ms, mut mt) = (Vector3::zeros(), Vector3::zeros());
    for (c, w) in pairs.iter().zip(weights) {
        ms += c.source * *w;
        mt += c.target * *w;
    }
    ms /= total;
    mt /= total;
    let mut cross = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for (c, w) in pairs.iter().zip(weights) {
        let ds = c.source - ms;
        cross += (ds * (c.target - mt).transpose()) * *w;
        scatter += (ds * ds.transpose()) * *w;
    }
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 1e-18) || ev[1] <= 1e-10 * ev[0] {
        return Err(LateOptError::Degenerate);
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.ok_or(LateOptError::Degenerate)?, svd.v_t.ok_or(LateOptError::Degenerate)?);
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok(Pose::new(rotation, mt - rotation * ms))
}

fn weights_of(pairs: &[Correspondence]) -> Vec<f64> {
    pairs.iter().map(|c| c.weight).collect()
}

fn non_collinear(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> bool {
    let (ab, ac) = (b - a, c - a);
    let area = ab.cross(&ac).norm();
    area > 1e-9 * (ab.norm_squared() + ac.norm_squared()).max(1e-12)
}

fn consensus(pose: &Pose, pairs: &[Correspondence], thresh: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut err = 0.0;
    for (i, c) in pairs.iter().enumerate() {
        let r = residual(pose, c);
        if r < thresh {
            idx.push(i);
            err += r;
        }
    }
    (idx, err)
}

fn subset(pairs: &[Correspondence], idx: &[usize]) -> Vec<Correspondence> {
    idx.iter().map(|&i| pairs[i]).collect()
}

/// RANSAC over minimal 3-pair samples followed by refits on the consensus
/// set. Returns the pose and the inlier indices.
pub fn ransac_alignment(
    pairs: &[Correspondence],
    cfg: &RefineConfig,
) -> Result<(Pose, Vec<usize>), LateOptError> {
    let n = pairs.len();
    if n < cfg.min_pairs.max(3) {
        return Err(LateOptError::TooFewPairs {
            got: n,
            need: cfg.min_pairs.max(3),
        });
    }
    // Rejects windows whose whole source set is collinear.
    fit_rigid(pairs, &vec![1.0; n])?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.ransac_seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..cfg.ransac_iters {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        if !non_collinear(&pairs[i].source, &pairs[j].source, &pairs[k].source) {
            continue;
        }
        let Ok(pose) = fit_rigid(&[pairs[i], pairs[j], pairs[k]], &[1.0; 3]) else {
            continue;
        };
        let (idx, err) = consensus(&pose, pairs, cfg.ransac_inlier_thresh);
        let better = match &best {
            None => true,
            Some((b, berr)) => idx.len() > b.len() || (idx.len() == b.len() && err < *berr),
        };
        if better {
            let all = idx.len() == n;
            best = Some((idx, err));
            if all {
                break;
            }
        }
    }
    let (mut inliers, _) = best.ok_or(LateOptError::NoConsensus)?;
    if inliers.len() < 3 {
        return Err(LateOptError::NoConsensus);
    }
    let mut pose = {
        let sub = subset(pairs, &inliers);
        fit_rigid(&sub, &weights_of(&sub))?
    };
    for _ in 0..10 {
        let (next, _) = consensus(&pose, pairs, cfg.ransac_inlier_thresh);
        if next == inliers || next.len() < inliers.len() {
            break;
        }
        let sub = subset(pairs, &next);
        match fit_rigid(&sub, &weights_of(&sub)) {
            Ok(p) => {
                pose = p;
                inliers = next;
            }
            Err(_) => break,
        }
    }
    Ok((pose, inliers))
}

/// Huber-weighted IRLS over all pairs, started from `init`.
pub fn huber_irls(pairs: &[Correspondence], init: Pose, delta: f64) -> Result<Pose, LateOptError> {
    let mut pose = init;
    for _ in 0..50 {
        let weights: Vec<f64> = pairs
            .iter()
            .map(|c| {
                let r = residual(&pose, c);
                c.weight * if r <= delta { 1.0 } else { delta / r }
            })
            .collect();
        let next = fit_rigid(pairs, &weights)?;
        let change = (next.rotation - pose.rotation).norm() + (next.translation - pose.translation).norm();
        pose = next;
        if change < 1e-9 {
            break;
        }
    }
    Ok(pose)
}

/// Rigid transform mapping sources onto targets.
pub fn solve_alignment(pairs: &[Correspondence], cfg: &RefineConfig) -> Result<Pose, LateOptError> {
    let (pose, _) = ransac_alignment(pairs, cfg)?;
    match cfg.solver {
        Solver::ProcrustesRansac => Ok(pose),
        Solver::HuberIrls => huber_irls(pairs, pose, cfg.huber_delta),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub pose: Pose,
    /// False when the anchor was returned unchanged.
    pub refined: bool,
    pub pairs: usize,
}

/// Gathers correspondences and solves; falls back to the anchor on failure.
pub fn refine(history: &HistoryBuffer, anchor: &Pose, map: &SparseMap, cfg: &RefineConfig) -> Refinement {
    let pairs = match gather_correspondences(history, anchor, map, cfg) {
        Ok(p) => p,
        Err(_) => {
            return Refinement {
                pose: *anchor,
                refined: false,
                pairs: 0,
            }
        }
    };
    match solve_alignment(&pairs, cfg) {
        Ok(pose) => Refinement {
            pose,
            refined: true,
            pairs: pairs.len(),
        },
        Err(_) => Refinement {
            pose: *anchor,
            refined: false,
            pairs: pairs.len(),
        },
    }
}
