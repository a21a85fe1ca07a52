//! End-to-end experiment stages shared by the command-line tool and the
//! acceptance suite.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{EvaluationConfig, ExperimentConfig};
use crate::geometry::Pose;
use crate::io::TraceRecord;
use crate::late_opt::{refine, HistoryBuffer, HistoryEntry, RefineConfig};
use crate::localization::{derive_seed, LocalizationConfig, LocalizationError, Particle, ParticleFilter};
use crate::mapping::{self, MappingConfig, MappingError, SparseMap};
use crate::metrics::{
    ablation_improvement, metrics_from_errors, pose_error, window_start, MetricsError, PoseError, RunMetrics,
};
use crate::sim::{
    generate_trajectory, generate_world, simulate_run, DetectionFrame, LabelSet, OdometryNoise, SensorModel,
    SimError, TrajectorySpec, WorldLandmark,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Localization(#[from] LocalizationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("trace has {trace} frames but ground truth has {truth}")]
    FrameMismatch { trace: usize, truth: usize },
}

const STREAM_LABELS: u64 = 101;
const STREAM_WORLD: u64 = 102;
const STREAM_MAP_PASS: u64 = 103;
const STREAM_LOC_PASS: u64 = 104;
const STREAM_FILTER: u64 = 105;
const STREAM_TRAJECTORY: u64 = 106;

/// A generated world with its label vocabulary.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub labels: LabelSet,
    pub world: Vec<WorldLandmark>,
}

impl Scenario {
    /// The label vocabulary alone, without generating the world.
    pub fn label_set(cfg: &ExperimentConfig) -> Result<LabelSet, PipelineError> {
        Ok(LabelSet::generate(
            cfg.labels.count,
            cfg.labels.feature_dim,
            derive_seed(cfg.world_seed(), STREAM_LABELS, 0),
        )?)
    }

    pub fn generate(cfg: &ExperimentConfig) -> Result<Self, PipelineError> {
        let labels = Self::label_set(cfg)?;
        let world = generate_world(derive_seed(cfg.world_seed(), STREAM_WORLD, 0), &cfg.world, &labels)?;
        Ok(Self { labels, world })
    }
}

/// Ground-truth poses and rendered frames of one drive.
#[derive(Debug, Clone)]
pub struct SimPass {
    pub poses: Vec<Pose>,
    pub frames: Vec<DetectionFrame>,
}

pub fn simulate_pass(
    scenario: &Scenario,
    trajectory: &TrajectorySpec,
    sensor: &SensorModel,
    odom: &OdometryNoise,
    seed: u64,
) -> Result<SimPass, PipelineError> {
    sensor.validate()?;
    let poses = generate_trajectory(derive_seed(seed, STREAM_TRAJECTORY, 0), trajectory)?;
    let frames = simulate_run(&scenario.world, &scenario.labels, &poses, sensor, odom, seed);
    Ok(SimPass { poses, frames })
}

/// The mapping drive of an experiment.
pub fn mapping_pass(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<SimPass, PipelineError> {
    simulate_pass(
        scenario,
        &cfg.trajectory,
        &cfg.sensor,
        &cfg.odometry,
        derive_seed(cfg.seed, STREAM_MAP_PASS, 0),
    )
}

/// The localization drive, with detection noise independent of the mapping drive.
pub fn localization_pass(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<SimPass, PipelineError> {
    simulate_pass(
        scenario,
        cfg.localization_trajectory(),
        &cfg.sensor,
        &cfg.odometry,
        derive_seed(cfg.seed, STREAM_LOC_PASS, 0),
    )
}

pub fn build_map(
    frames: &[DetectionFrame],
    poses: &[Pose],
    labels: &LabelSet,
    cfg: &MappingConfig,
) -> Result<SparseMap, PipelineError> {
    Ok(mapping::build_map(frames, poses, labels, cfg)?)
}

/// Runs the particle filter over `frames`, refining after convergence.
pub fn localize(
    map: &SparseMap,
    frames: &[DetectionFrame],
    loc: &LocalizationConfig,
    refine_cfg: &RefineConfig,
    seed: u64,
) -> Result<Vec<TraceRecord>, PipelineError> {
    let mut filter = ParticleFilter::new(map, loc.clone(), derive_seed(seed, STREAM_FILTER, 0))?;
    let mut history = HistoryBuffer::new(refine_cfg.history);
    let mut trace = Vec::with_capacity(frames.len());
    for frame in frames {
        let step = filter.step(frame, map)?;
        history.push(HistoryEntry {
            detections: frame.detections.clone(),
            odometry_step: frame.odometry_step,
        });
        let refined = (step.converged && refine_cfg.enabled).then(|| {
            let r = refine(&history, &step.estimate, map, refine_cfg);
            if r.refined && refine_cfg.recenter_particles {
                let shift = r.pose.compose(&step.estimate.inverse());
                let moved: Vec<Particle> = filter
                    .particles()
                    .iter()
                    .map(|p| Particle {
                        pose: shift.compose(&p.pose),
                        weight: p.weight,
                    })
                    .collect();
                filter.set_particles(moved);
            }
            r.pose
        });
        trace.push(TraceRecord {
            frame: frame.frame_index,
            coarse: step.estimate,
            refined,
            dispersion: step.dispersion,
            n_eff: step.n_eff,
            converged: step.converged,
        });
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    /// First converged frame, if any.
    pub first_converged: Option<usize>,
    /// First evaluated frame, if any.
    pub window_start: Option<usize>,
    pub coarse: Option<RunMetrics>,
    pub refined: Option<RunMetrics>,
    /// Percent ATE reduction from coarse to refined.
    pub improvement: Option<f64>,
}

/// Per-frame errors of an aligned trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedFrame {
    pub frame: usize,
    pub truth: Pose,
    pub coarse: Pose,
    pub refined: Option<Pose>,
    pub coarse_error: PoseError,
    pub refined_error: Option<PoseError>,
    pub converged: bool,
}

pub fn align(trace: &[TraceRecord], truth: &[Pose]) -> Result<Vec<AlignedFrame>, PipelineError> {
    if trace.len() != truth.len() {
        return Err(PipelineError::FrameMismatch {
            trace: trace.len(),
            truth: truth.len(),
        });
    }
    Ok(trace
        .iter()
        .zip(truth)
        .map(|(r, t)| AlignedFrame {
            frame: r.frame,
            truth: *t,
            coarse: r.coarse,
            refined: r.refined,
            coarse_error: pose_error(&r.coarse, t),
            refined_error: r.refined.map(|p| pose_error(&p, t)),
            converged: r.converged,
        })
        .collect())
}

/// Scores a trace. Refined metrics use the refined pose where present and the
/// coarse pose elsewhere, over the same window as the coarse metrics.
pub fn evaluate(trace: &[TraceRecord], truth: &[Pose], cfg: &EvaluationConfig) -> Result<MetricsReport, PipelineError> {
    let aligned = align(trace, truth)?;
    if aligned.is_empty() {
        return Err(MetricsError::Empty.into());
    }
    let converged: Vec<bool> = aligned.iter().map(|a| a.converged).collect();
    let first_converged = converged.iter().position(|&c| c);
    let start = window_start(&converged, cfg.window);
    let thresholds = cfg.effective_thresholds();
    let (mut coarse, mut refined, mut improvement) = (None, None, None);
    if let Some(s) = start {
        let window = &aligned[s..];
        let ce: Vec<PoseError> = window.iter().map(|a| a.coarse_error).collect();
        let c = metrics_from_errors(&ce, &thresholds)?;
        if window.iter().any(|a| a.refined.is_some()) {
            let re: Vec<PoseError> = window
                .iter()
                .map(|a| a.refined_error.unwrap_or(a.coarse_error))
                .collect();
            let r = metrics_from_errors(&re, &thresholds)?;
            improvement = ablation_improvement(c.ate, r.ate).ok();
            refined = Some(r);
        }
        coarse = Some(c);
    }
    Ok(MetricsReport {
        frames: aligned.len(),
        first_converged,
        window_start: start,
        coarse,
        refined,
        improvement,
    })
}

pub fn aligned_csv(aligned: &[AlignedFrame]) -> String {
    let mut out = String::from(
        "frame,gt_x,gt_y,gt_z,gt_yaw,coarse_x,coarse_y,coarse_z,coarse_yaw,refined_x,refined_y,refined_z,refined_yaw,\
         coarse_trans_err,coarse_rot_err,refined_trans_err,refined_rot_err,converged\n",
    );
    let pose_cols = |p: &Pose| {
        let t = p.translation;
        format!("{},{},{},{}", t.x, t.y, t.z, p.yaw())
    };
    for a in aligned {
        let refined = a.refined.map_or_else(|| ",,,".to_string(), |p| pose_cols(&p));
        let (rt, rr) = a
            .refined_error
            .map_or((String::new(), String::new()), |e| (e.translation_error.to_string(), e.rotation_error.to_string()));
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            a.frame,
            pose_cols(&a.truth),
            pose_cols(&a.coarse),
            refined,
            a.coarse_error.translation_error,
            a.coarse_error.rotation_error,
            rt,
            rr,
            u8::from(a.converged)
        ));
    }
    out
}

/// Summary of one complete simulate → map → localize → evaluate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub seed: u64,
    pub map_instances: usize,
    pub raw_points: usize,
    pub report: MetricsReport,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, PipelineError> {
    let scenario = Scenario::generate(cfg)?;
    let mp = mapping_pass(cfg, &scenario)?;
    let mut map = build_map(&mp.frames, &mp.poses, &scenario.labels, &cfg.mapping)?;
    map.metadata.seed = Some(cfg.seed);
    map.metadata.config_hash = Some(cfg.hash());
    let lp = localization_pass(cfg, &scenario)?;
    let trace = localize(&map, &lp.frames, &cfg.localization, &cfg.refine, cfg.seed)?;
    let report = evaluate(&trace, &lp.poses, &cfg.evaluation)?;
    Ok(ExperimentOutcome {
        seed: cfg.seed,
        map_instances: map.len(),
        raw_points: mapping::raw_point_count(&mp.frames),
        report,
    })
}
