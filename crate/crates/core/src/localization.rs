//! Monte Carlo global localization against a sparse semantic map.
//!
//! Each particle is a full SE(3) pose hypothesis. Per frame the ensemble is
//! dead-reckoned with the odometry step plus Gaussian diffusion, then every
//! particle is scored by matching the frame's detections against
//! semantically compatible map instances:
//!
//! ```text
//! φ_dist  = exp(−e_d / α_dist)
//! φ_angle = (1/3) Σ_{a∈{x,y,z}} cos Δθ_a + β/2,   β = 1 / (N λ)
//! φ_total = φ_sem · φ_dist + φ_angle
//! w_raw   = Σ_j max_k φ_total(j, k)
//! ```
//!
//! Raw scores replace the prior weights and are normalized with a softmax.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{circular_mean, rot_z, weighted_translation_mean, EulerAngles, GeometryError, Pose};
use crate::mapping::{semantic_affinity, MapInstance, SparseMap};
use crate::sim::{Detection, DetectionFrame};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizationError {
    #[error("map has no instances")]
    EmptyMap,
    #[error("particle weights are degenerate")]
    DegenerateWeights,
    #[error("empty particle set")]
    NoParticles,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid localization config: {0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub pose: Pose,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationConfig {
    pub particle_count: usize,
    /// Semantic gate δ_sem on φ_sem.
    pub delta_sem: f64,
    /// Distance decay α_dist (m).
    pub alpha_dist: f64,
    /// Viewpoint scale λ; β = 1 / (N λ).
    pub lambda_scale: f64,
    /// Softmax temperature; raw scores are divided by it.
    pub softmax_temp: f64,
    /// Weight exponent γ of the pose estimate.
    pub gamma: f64,
    /// Per-axis (x, y) diffusion added at prediction (m).
    pub pred_trans_sigma: f64,
    /// Yaw diffusion added at prediction (rad).
    pub pred_rot_sigma: f64,
    /// Resample every this many updates; 0 leaves it to the N_eff trigger.
    pub resample_period: usize,
    /// Resample when N_eff < neff_fraction · N.
    pub neff_fraction: f64,
    /// Weighted position spread (m) under which the ensemble counts as converged.
    pub convergence_dispersion: f64,
    /// Consecutive frames under the spread bound required to report convergence.
    pub convergence_frames: usize,
    /// Only map instances this close to a particle are scored (m).
    pub candidate_radius: f64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            particle_count: 1000,
            delta_sem: 0.9,
            alpha_dist: 1.0,
            lambda_scale: 1e-3,
            softmax_temp: 0.5,
            gamma: 1.0,
            pred_trans_sigma: 2.5,
            pred_rot_sigma: 8f64.to_radians(),
            resample_period: 1,
            neff_fraction: 0.5,
            convergence_dispersion: 5.0,
            convergence_frames: 3,
            candidate_radius: 50.0,
        }
    }
}

impl LocalizationConfig {
    pub fn beta(&self) -> f64 {
        1.0 / (self.particle_count as f64 * self.lambda_scale)
    }

    pub fn validate(&self) -> Result<(), LocalizationError> {
        if self.particle_count == 0 {
            return Err(LocalizationError::BadConfig("particle_count must be at least 1"));
        }
        if !(self.delta_sem > 0.0 && self.delta_sem < 1.0) {
            return Err(LocalizationError::BadConfig("delta_sem must lie in (0, 1)"));
        }
        if !(self.alpha_dist > 0.0 && self.lambda_scale > 0.0 && self.softmax_temp > 0.0) {
            return Err(LocalizationError::BadConfig("scales and temperature must be positive"));
        }
        if self.pred_trans_sigma < 0.0 || self.pred_rot_sigma < 0.0 {
            return Err(LocalizationError::BadConfig("prediction noise must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreBreakdown {
    pub phi_sem: f64,
    pub phi_dist: f64,
    pub phi_angle: f64,
    pub phi_total: f64,
    pub e_d: f64,
    pub delta_theta: [f64; 3],
}

/// Seed for an independent stream, mixed SplitMix64-style.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// N particles uniform over the map's horizontal bounding box, yaw uniform.
pub fn init_particles(
    map: &SparseMap,
    cfg: &LocalizationConfig,
    seed: u64,
) -> Result<Vec<Particle>, LocalizationError> {
    let (lo, hi) = map.bounding_box().ok_or(LocalizationError::EmptyMap)?;
    if cfg.particle_count == 0 {
        return Err(LocalizationError::NoParticles);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = 1.0 / cfg.particle_count as f64;
    Ok((0..cfg.particle_count)
        .map(|_| {
            let x = lo[0] + rng.random::<f64>() * (hi[0] - lo[0]);
            let y = lo[1] + rng.random::<f64>() * (hi[1] - lo[1]);
            // (−π, π]
            let yaw = PI - rng.random::<f64>() * 2.0 * PI;
            Particle {
                pose: Pose::from_xy_yaw(x, y, yaw),
                weight: w,
            }
        })
        .collect())
}

/// Dead-reckons every particle by `step`, then diffuses x, y and yaw.
pub fn predict(particles: &mut [Particle], step: &Pose, cfg: &LocalizationConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in particles.iter_mut() {
        let mut pose = p.pose.compose(step);
        if cfg.pred_trans_sigma > 0.0 {
            pose.translation.x += cfg.pred_trans_sigma * rng.sample::<f64, _>(StandardNormal);
            pose.translation.y += cfg.pred_trans_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        if cfg.pred_rot_sigma > 0.0 {
            let dyaw = cfg.pred_rot_sigma * rng.sample::<f64, _>(StandardNormal);
            pose.rotation *= rot_z(dyaw);
        }
        p.pose = pose;
    }
}

/// `(1/3) Σ cos Δθ_a + β/2`.
pub fn viewpoint_score(delta_theta: &[f64; 3], beta: f64) -> f64 {
    delta_theta.iter().map(|d| d.cos()).sum::<f64>() / 3.0 + beta / 2.0
}

/// Pair score from the semantic affinity and the observed/expected
/// centroids, both in the particle frame.
fn score_local(
    phi_sem: f64,
    observed: &Vector3<f64>,
    expected: &Vector3<f64>,
    cfg: &LocalizationConfig,
) -> Option<ScoreBreakdown> {
    let (no, ne) = (observed.norm(), expected.norm());
    if !(no > 1e-12 && ne > 1e-12) {
        return None;
    }
    let e_d = (expected - observed).norm();
    let phi_dist = (-e_d / cfg.alpha_dist).exp();
    let (dobs, dexp) = (observed / no, expected / ne);
    let mut delta_theta = [0.0; 3];
    for a in 0..3 {
        delta_theta[a] = dobs[a].clamp(-1.0, 1.0).acos() - dexp[a].clamp(-1.0, 1.0).acos();
    }
    let phi_angle = viewpoint_score(&delta_theta, cfg.beta());
    Some(ScoreBreakdown {
        phi_sem,
        phi_dist,
        phi_angle,
        phi_total: phi_sem * phi_dist + phi_angle,
        e_d,
        delta_theta,
    })
}

/// Scores one detection against one map instance under `particle_pose`.
/// `None` when either centroid sits at the sensor origin.
pub fn score_pair(
    detection: &Detection,
    candidate: &MapInstance,
    particle_pose: &Pose,
    cfg: &LocalizationConfig,
) -> Option<ScoreBreakdown> {
    let phi_sem = semantic_affinity(&detection.feature, &candidate.feature).ok()?;
    let expected = particle_pose.inverse().transform_point(&candidate.centroid);
    score_local(phi_sem, &detection.centroid_local, &expected, cfg)
}

/// Semantically admissible candidates `(instance, φ_sem)` for each detection.
pub fn semantic_candidates(
    detections: &[Detection],
    map: &SparseMap,
    delta_sem: f64,
) -> Vec<Vec<(usize, f64)>> {
    detections
        .iter()
        .map(|d| {
            map.instances
                .iter()
                .enumerate()
                .filter_map(|(k, inst)| {
                    let s = semantic_affinity(&d.feature, &inst.feature).ok()?;
                    (s > delta_sem).then_some((k, s))
                })
                .collect()
        })
        .collect()
}

/// `Σ_j max_k φ_total` for one particle; detections without any admissible
/// candidate contribute nothing.
pub fn raw_score(
    pose: &Pose,
    detections: &[Detection],
    candidates: &[Vec<(usize, f64)>],
    map: &SparseMap,
    cfg: &LocalizationConfig,
) -> f64 {
    let inv = pose.inverse();
    let r2 = cfg.candidate_radius * cfg.candidate_radius;
    detections
        .iter()
        .zip(candidates)
        .filter_map(|(det, cands)| {
            cands
                .iter()
                .filter_map(|&(k, phi_sem)| {
                    let c = &map.instances[k].centroid;
                    if (c - pose.translation).norm_squared() > r2 {
                        return None;
                    }
                    score_local(phi_sem, &det.centroid_local, &inv.transform_point(c), cfg)
                        .map(|s| s.phi_total)
                })
                .reduce(f64::max)
        })
        .sum()
}

/// Max-subtracted softmax of `raw / temperature`.
pub fn softmax(raw: &[f64], temperature: f64) -> Vec<f64> {
    let m = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|r| ((r - m) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Replaces the particle weights with the softmax of the current frame's
/// raw scores. Returns the raw scores. Without detections the weights are
/// reset to uniform.
pub fn update_weights(
    particles: &mut [Particle],
    detections: &[Detection],
    map: &SparseMap,
    cfg: &LocalizationConfig,
) -> Vec<f64> {
    let n = particles.len();
    if detections.is_empty() {
        particles.iter_mut().for_each(|p| p.weight = 1.0 / n as f64);
        return vec![0.0; n];
    }
    let candidates = semantic_candidates(detections, map, cfg.delta_sem);
    let raw: Vec<f64> = particles
        .par_iter()
        .map(|p| raw_score(&p.pose, detections, &candidates, map, cfg))
        .collect();
    for (p, w) in particles.iter_mut().zip(softmax(&raw, cfg.softmax_temp)) {
        p.weight = w;
    }
    raw
}

/// Effective sample size `1 / Σ w²` of normalized weights.
pub fn effective_sample_size(particles: &[Particle]) -> f64 {
    let total: f64 = particles.iter().map(|p| p.weight).sum();
    let sq: f64 = particles.iter().map(|p| (p.weight / total).powi(2)).sum();
    1.0 / sq
}

/// Whether the update numbered `update_index` (0-based) should be followed
/// by resampling.
pub fn should_resample(particles: &[Particle], update_index: usize, cfg: &LocalizationConfig) -> bool {
    let periodic = cfg.resample_period > 0 && (update_index + 1).is_multiple_of(cfg.resample_period);
    periodic || effective_sample_size(particles) < cfg.neff_fraction * particles.len() as f64
}

/// Systematic (low-variance) resampling; output weights are uniform.
pub fn resample(particles: &[Particle], seed: u64) -> Result<Vec<Particle>, LocalizationError> {
    let n = particles.len();
    if n == 0 {
        return Err(LocalizationError::NoParticles);
    }
    let total: f64 = particles.iter().map(|p| p.weight).sum();
    if !(total > 0.0) || !total.is_finite() || particles.iter().any(|p| p.weight < 0.0) {
        return Err(LocalizationError::DegenerateWeights);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1.0 / n as f64;
    let u0 = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    let mut cumulative = particles[0].weight / total;
    for m in 0..n {
        let u = u0 + m as f64 * step;
        while u > cumulative && i < n - 1 {
            i += 1;
            cumulative += particles[i].weight / total;
        }
        out.push(Particle {
            pose: particles[i].pose,
            weight: step,
        });
    }
    Ok(out)
}

/// Weighted translation mean plus per-angle circular means.
pub fn estimate_pose(particles: &[Particle], gamma: f64) -> Result<Pose, LocalizationError> {
    if particles.is_empty() {
        return Err(LocalizationError::NoParticles);
    }
    let poses: Vec<Pose> = particles.iter().map(|p| p.pose).collect();
    let weights: Vec<f64> = particles.iter().map(|p| p.weight).collect();
    let translation = weighted_translation_mean(&poses, &weights, gamma)?;
    let eulers: Vec<EulerAngles> = poses.iter().map(Pose::euler).collect();
    let angle = |f: fn(&EulerAngles) -> f64| {
        let a: Vec<f64> = eulers.iter().map(f).collect();
        circular_mean(&a, &weights, gamma)
    };
    let euler = EulerAngles::new(angle(|e| e.roll)?, angle(|e| e.pitch)?, angle(|e| e.yaw)?);
    Ok(Pose::from_euler(euler, translation))
}

/// Weighted standard deviation of particle positions (m).
pub fn dispersion(particles: &[Particle]) -> f64 {
    let total: f64 = particles.iter().map(|p| p.weight).sum();
    if !(total > 0.0) {
        return f64::INFINITY;
    }
    let mean = particles
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.pose.translation * (p.weight / total));
    particles
        .iter()
        .map(|p| p.weight / total * (p.pose.translation - mean).norm_squared())
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceStatus {
    pub converged: bool,
    pub dispersion: f64,
}

/// Tracks how many consecutive frames the ensemble stayed compact.
#[derive(Debug, Clone, Default)]
pub struct ConvergenceMonitor {
    streak: usize,
}

impl ConvergenceMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check(&mut self, particles: &[Particle], cfg: &LocalizationConfig) -> ConvergenceStatus {
        let d = dispersion(particles);
        if d < cfg.convergence_dispersion {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        ConvergenceStatus {
            converged: self.streak >= cfg.convergence_frames.max(1),
            dispersion: d,
        }
    }

    pub fn reset(&mut self) {
        self.streak = 0;
    }
}

/// Outcome of one filter step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterStep {
    pub estimate: Pose,
    pub dispersion: f64,
    pub n_eff: f64,
    pub converged: bool,
    pub updated: bool,
    pub resampled: bool,
}

/// The particle filter: prediction, weighting, estimation, resampling.
#[derive(Debug, Clone)]
pub struct ParticleFilter {
    pub cfg: LocalizationConfig,
    particles: Vec<Particle>,
    seed: u64,
    frame: u64,
    updates: usize,
    monitor: ConvergenceMonitor,
    last_estimate: Pose,
}

const STREAM_INIT: u64 = 1;
const STREAM_PREDICT: u64 = 2;
const STREAM_RESAMPLE: u64 = 3;

impl ParticleFilter {
    pub fn new(map: &SparseMap, cfg: LocalizationConfig, seed: u64) -> Result<Self, LocalizationError> {
        cfg.validate()?;
        let particles = init_particles(map, &cfg, derive_seed(seed, STREAM_INIT, 0))?;
        let last_estimate = best_particle(&particles).pose;
        Ok(Self {
            cfg,
            particles,
            seed,
            frame: 0,
            updates: 0,
            monitor: ConvergenceMonitor::new(),
            last_estimate,
        })
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    /// Replaces the ensemble, e.g. to re-center it on a refined pose.
    pub fn set_particles(&mut self, particles: Vec<Particle>) {
        self.particles = particles;
    }

    pub fn step(&mut self, frame: &DetectionFrame, map: &SparseMap) -> Result<FilterStep, LocalizationError> {
        if self.frame > 0 {
            let seed = derive_seed(self.seed, STREAM_PREDICT, self.frame);
            predict(&mut self.particles, &frame.odometry_step, &self.cfg, seed);
        }
        let updated = !frame.detections.is_empty();
        if updated {
            update_weights(&mut self.particles, &frame.detections, map, &self.cfg);
        }
        let estimate = match estimate_pose(&self.particles, self.cfg.gamma) {
            Ok(p) => p,
            // Antipodal ensembles have no circular mean; fall back to the mode.
            Err(LocalizationError::Geometry(GeometryError::UndefinedCircularMean)) => {
                best_particle(&self.particles).pose
            }
            Err(e) => return Err(e),
        };
        self.last_estimate = estimate;
        let status = self.monitor.check(&self.particles, &self.cfg);
        let n_eff = effective_sample_size(&self.particles);
        let mut resampled = false;
        if updated {
            if should_resample(&self.particles, self.updates, &self.cfg) {
                let seed = derive_seed(self.seed, STREAM_RESAMPLE, self.frame);
                self.particles = resample(&self.particles, seed)?;
                resampled = true;
            }
            self.updates += 1;
        }
        self.frame += 1;
        Ok(FilterStep {
            estimate,
            dispersion: status.dispersion,
            n_eff,
            converged: status.converged,
            updated,
            resampled,
        })
    }

    pub fn estimate(&self) -> Pose {
        self.last_estimate
    }
}

fn best_particle(particles: &[Particle]) -> &Particle {
    particles
        .iter()
        .fold(&particles[0], |b, p| if p.weight > b.weight { p } else { b })
}
