//! Synthetic worlds, trajectories and sensor streams.
//!
//! The simulator stands in for the perception front-end: instead of images and
//! LiDAR scans it emits, per frame, the landmark centroids a detector would
//! have produced (in the sensor frame, x forward, y left, z up), a unit
//! semantic feature per detection, and a noisy relative odometry step.

use std::f64::consts::PI;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rot_z, Pose};

/// Default dimension of the semantic feature vectors.
pub const DEFAULT_FEATURE_DIM: usize = 32;

const VOCABULARY: &[&str] = &[
    "tree",
    "street lamp",
    "traffic sign",
    "utility pole",
    "traffic light",
    "fire hydrant",
    "bus stop",
    "bench",
    "trash can",
    "mailbox",
    "billboard",
    "bollard",
    "parking meter",
    "utility box",
    "road barrier",
    "bicycle rack",
    "telephone booth",
    "flower pot",
    "statue",
    "fountain",
    "kiosk",
    "vending machine",
    "street clock",
    "manhole cover",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("label set is empty")]
    EmptyLabelSet,
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("prototype {index} has norm {norm}, expected 1")]
    BadPrototype { index: usize, norm: f64 },
    #[error("labels and prototypes differ in length")]
    PrototypeCount,
    #[error("landmark count must be at least 1")]
    NoLandmarks,
    #[error("world extent must be positive")]
    BadExtent,
    #[error("could not place {placed} of {requested} landmarks under the separation constraint")]
    Overcrowded { placed: usize, requested: usize },
    #[error("trajectory needs at least two waypoints")]
    TooFewWaypoints,
    #[error("waypoints {0} and {1} coincide")]
    CoincidentWaypoints(usize, usize),
    #[error("step length must be positive")]
    BadStepLength,
    #[error("invalid sensor model: {0}")]
    BadSensor(&'static str),
}

/// Vocabulary of landmark classes together with their feature prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub labels: Vec<String>,
    pub prototypes: Vec<Vec<f64>>,
}

impl LabelSet {
    pub fn new(labels: Vec<String>, prototypes: Vec<Vec<f64>>) -> Result<Self, SimError> {
        if labels.is_empty() {
            return Err(SimError::EmptyLabelSet);
        }
        if labels.len() != prototypes.len() {
            return Err(SimError::PrototypeCount);
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(SimError::DuplicateLabel(l.clone()));
            }
        }
        for (index, p) in prototypes.iter().enumerate() {
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(SimError::BadPrototype { index, norm });
            }
        }
        Ok(Self { labels, prototypes })
    }

    /// `count` classes with prototypes drawn uniformly on the unit sphere.
    pub fn generate(count: usize, dim: usize, seed: u64) -> Result<Self, SimError> {
        if count == 0 || dim == 0 {
            return Err(SimError::EmptyLabelSet);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = (0..count)
            .map(|i| match VOCABULARY.get(i) {
                Some(name) => name.to_string(),
                None => format!("landmark_{i}"),
            })
            .collect();
        let prototypes = (0..count)
            .map(|_| random_unit_vector(&mut rng, dim))
            .collect();
        Self::new(labels, prototypes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

pub(crate) fn random_unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

pub(crate) fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 && n.is_finite() {
        Some(v.iter().map(|x| x / n).collect())
    } else {
        None
    }
}

fn perturbed_unit<R: Rng>(rng: &mut R, base: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return base.to_vec();
    }
    loop {
        let v: Vec<f64> = base
            .iter()
            .map(|b| b + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldLandmark {
    pub position: Vector3<f64>,
    pub label_index: usize,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Placement {
    /// Uniform over the world rectangle.
    Uniform,
    /// Gaussian blobs around uniformly placed centers.
    Clustered { clusters: usize, spread: f64 },
    /// Along a closed polyline, offset sideways by a random distance in
    /// `[min_offset, max_offset]` on either side.
    Roadside {
        waypoints: Vec<[f64; 2]>,
        min_offset: f64,
        max_offset: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    /// Lower-left corner of the world rectangle (m).
    pub origin: [f64; 2],
    /// Width and height of the world rectangle (m).
    pub extent: [f64; 2],
    pub landmark_count: usize,
    pub placement: Placement,
    /// Minimum horizontal distance between two landmarks (m); 0 disables.
    pub min_separation: f64,
    /// Landmark heights are drawn uniformly from this range (m).
    pub z_range: [f64; 2],
    /// Per-dimension noise η added to the class prototype for each instance.
    pub instance_feature_noise: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            origin: [0.0, 0.0],
            extent: [200.0, 200.0],
            landmark_count: 100,
            placement: Placement::Uniform,
            min_separation: 0.0,
            z_range: [0.0, 5.0],
            instance_feature_noise: 0.1,
        }
    }
}

/// Places `spec.landmark_count` landmarks; deterministic in `seed`.
pub fn generate_world(
    seed: u64,
    spec: &WorldSpec,
    labels: &LabelSet,
) -> Result<Vec<WorldLandmark>, SimError> {
    if labels.is_empty() {
        return Err(SimError::EmptyLabelSet);
    }
    if spec.landmark_count == 0 {
        return Err(SimError::NoLandmarks);
    }
    if !(spec.extent[0] > 0.0 && spec.extent[1] > 0.0) {
        return Err(SimError::BadExtent);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [x0, y0] = spec.origin;
    let [w, h] = spec.extent;
    let inside = |p: &[f64; 2]| p[0] >= x0 && p[0] <= x0 + w && p[1] >= y0 && p[1] <= y0 + h;

    let centers: Vec<[f64; 2]> = match &spec.placement {
        Placement::Clustered { clusters, .. } => (0..(*clusters).max(1))
            .map(|_| [x0 + rng.random::<f64>() * w, y0 + rng.random::<f64>() * h])
            .collect(),
        _ => Vec::new(),
    };
    let road = match &spec.placement {
        Placement::Roadside { waypoints, .. } => Some(Polyline::new(waypoints, true)?),
        _ => None,
    };

    let max_attempts = 1000 * spec.landmark_count;
    let mut placed: Vec<[f64; 2]> = Vec::with_capacity(spec.landmark_count);
    let mut attempts = 0;
    while placed.len() < spec.landmark_count {
        if attempts >= max_attempts {
            return Err(SimError::Overcrowded {
                placed: placed.len(),
                requested: spec.landmark_count,
            });
        }
        attempts += 1;
        let candidate = match &spec.placement {
            Placement::Uniform => [x0 + rng.random::<f64>() * w, y0 + rng.random::<f64>() * h],
            Placement::Clustered { spread, .. } => {
                let c = centers[rng.random_range(0..centers.len())];
                let n = Normal::new(0.0, spread.max(0.0)).unwrap();
                [c[0] + n.sample(&mut rng), c[1] + n.sample(&mut rng)]
            }
            Placement::Roadside {
                min_offset,
                max_offset,
                ..
            } => {
                let road = road.as_ref().unwrap();
                let s = rng.random::<f64>() * road.length();
                let (p, dir) = road.at(s);
                let off = min_offset + rng.random::<f64>() * (max_offset - min_offset).max(0.0);
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                [p[0] - side * off * dir.sin(), p[1] + side * off * dir.cos()]
            }
        };
        if !inside(&candidate) {
            continue;
        }
        let sep2 = spec.min_separation * spec.min_separation;
        if spec.min_separation > 0.0
            && placed
                .iter()
                .any(|q| (q[0] - candidate[0]).powi(2) + (q[1] - candidate[1]).powi(2) < sep2)
        {
            continue;
        }
        placed.push(candidate);
    }

    let [z_lo, z_hi] = spec.z_range;
    Ok(placed
        .into_iter()
        .map(|[x, y]| {
            let z = z_lo + rng.random::<f64>() * (z_hi - z_lo);
            let label_index = rng.random_range(0..labels.len());
            let feature = perturbed_unit(
                &mut rng,
                &labels.prototypes[label_index],
                spec.instance_feature_noise,
            );
            WorldLandmark {
                position: Vector3::new(x, y, z),
                label_index,
                feature,
            }
        })
        .collect())
}

/// Piecewise-linear path parameterized by arc length.
#[derive(Debug, Clone)]
pub struct Polyline {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

impl Polyline {
    pub fn new(waypoints: &[[f64; 2]], closed: bool) -> Result<Self, SimError> {
        if waypoints.len() < 2 {
            return Err(SimError::TooFewWaypoints);
        }
        let mut points = waypoints.to_vec();
        if closed && points.first() != points.last() {
            points.push(points[0]);
        }
        let mut cumulative = vec![0.0];
        for i in 1..points.len() {
            let d = (points[i][0] - points[i - 1][0]).hypot(points[i][1] - points[i - 1][1]);
            if d < 1e-9 {
                return Err(SimError::CoincidentWaypoints(i - 1, i % waypoints.len()));
            }
            cumulative.push(cumulative[i - 1] + d);
        }
        Ok(Self { points, cumulative })
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn segment_at(&self, s: f64) -> usize {
        let n = self.points.len() - 1;
        match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(n - 1),
            Err(i) => (i.max(1) - 1).min(n - 1),
        }
    }

    /// Position and travel direction at arc length `s`.
    pub fn at(&self, s: f64) -> ([f64; 2], f64) {
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let len = self.cumulative[i + 1] - self.cumulative[i];
        let u = ((s - self.cumulative[i]) / len).clamp(0.0, 1.0);
        let p = [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
        (p, (b[1] - a[1]).atan2(b[0] - a[0]))
    }

    /// Segment index and fractional position within it.
    fn locate(&self, s: f64) -> (usize, f64) {
        let i = self.segment_at(s);
        let len = self.cumulative[i + 1] - self.cumulative[i];
        (i, ((s - self.cumulative[i]) / len).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub waypoints: Vec<[f64; 2]>,
    /// Return to the first waypoint at the end.
    pub closed: bool,
    pub step_length: f64,
    /// Traverse the waypoints in reverse order.
    pub reverse: bool,
    /// Heading offset (rad) applied with alternating sign at successive
    /// waypoints and interpolated linearly in between; 0 keeps the sensor
    /// aligned with the direction of travel.
    pub heading_offset: f64,
    /// Lateral position jitter (m) per pose.
    pub lateral_jitter: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            waypoints: rectangle_loop(100.0, 100.0),
            closed: true,
            step_length: 1.0,
            reverse: false,
            heading_offset: 0.0,
            lateral_jitter: 0.0,
        }
    }
}

/// Closed rectangle starting at the origin, counter-clockwise.
pub fn rectangle_loop(width: f64, height: f64) -> Vec<[f64; 2]> {
    vec![[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]]
}

/// Closed serpentine road network: `lanes` (even, ≥ 2) vertical lanes spaced
/// `lane_spacing` apart, the outer two running the full `height`, the inner
/// ones stopping `inner_margin` short of the bottom return road.
pub fn serpentine_loop(
    lanes: usize,
    lane_spacing: f64,
    height: f64,
    inner_margin: f64,
) -> Vec<[f64; 2]> {
    let lanes = lanes.max(2).next_multiple_of(2);
    let mut w = vec![[0.0, 0.0], [0.0, height]];
    for i in 1..lanes {
        let x = i as f64 * lane_spacing;
        let last = i == lanes - 1;
        if i % 2 == 1 {
            w.push([x, height]);
            w.push([x, if last { 0.0 } else { inner_margin }]);
        } else {
            w.push([x, inner_margin]);
            w.push([x, height]);
        }
    }
    w
}

/// Samples poses every `step_length` meters of arc length; each pose faces
/// the direction of travel (plus the configured heading offset).
pub fn generate_trajectory(seed: u64, spec: &TrajectorySpec) -> Result<Vec<Pose>, SimError> {
    if !(spec.step_length > 0.0) {
        return Err(SimError::BadStepLength);
    }
    let mut waypoints = spec.waypoints.clone();
    if spec.reverse {
        waypoints.reverse();
    }
    let path = Polyline::new(&waypoints, spec.closed)?;
    let length = path.length();
    let steps = if spec.closed {
        (length / spec.step_length - 1e-9).ceil().max(1.0) as usize
    } else {
        (length / spec.step_length + 1e-9).floor() as usize + 1
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, spec.lateral_jitter.max(0.0)).unwrap();
    let offset_at = |k: usize| {
        if k.is_multiple_of(2) {
            spec.heading_offset
        } else {
            -spec.heading_offset
        }
    };
    Ok((0..steps)
        .map(|k| {
            let s = (k as f64 * spec.step_length).min(length);
            let ([x, y], dir) = path.at(s);
            let (seg, u) = path.locate(s);
            let offset = offset_at(seg) * (1.0 - u) + offset_at(seg + 1) * u;
            let lateral = if spec.lateral_jitter > 0.0 {
                jitter.sample(&mut rng)
            } else {
                0.0
            };
            Pose::from_xy_yaw(
                x - lateral * dir.sin(),
                y + lateral * dir.cos(),
                dir + offset,
            )
        })
        .collect())
}

/// Detection-level sensor abstraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    /// Horizontal range limit (m).
    pub max_range: f64,
    /// Horizontal field of view (rad); ≥ 2π means omnidirectional.
    pub fov_horizontal: f64,
    pub detect_prob: f64,
    /// Isotropic per-axis noise on the observed centroid (m).
    pub centroid_sigma: f64,
    /// Per-dimension noise added to the landmark feature before renormalizing.
    pub feature_noise_sigma: f64,
    /// Probability that a detection reports another class.
    pub confusion_prob: f64,
    /// Expected number of spurious detections per frame.
    pub false_positive_rate: f64,
    /// Points emitted per detection cluster; 0 emits centroids only.
    pub cluster_points: usize,
    pub cluster_sigma: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            max_range: 40.0,
            fov_horizontal: 120f64.to_radians(),
            detect_prob: 0.9,
            centroid_sigma: 0.3,
            feature_noise_sigma: 0.03,
            confusion_prob: 0.005,
            false_positive_rate: 0.02,
            cluster_points: 0,
            cluster_sigma: 0.3,
        }
    }
}

impl SensorModel {
    /// Perfect sensor with the default range and field of view.
    pub fn noiseless() -> Self {
        Self {
            detect_prob: 1.0,
            centroid_sigma: 0.0,
            feature_noise_sigma: 0.0,
            confusion_prob: 0.0,
            false_positive_rate: 0.0,
            cluster_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.detect_prob) || !prob(self.confusion_prob) {
            return Err(SimError::BadSensor("probabilities must lie in [0, 1]"));
        }
        if self.centroid_sigma < 0.0
            || self.feature_noise_sigma < 0.0
            || self.cluster_sigma < 0.0
            || self.false_positive_rate < 0.0
        {
            return Err(SimError::BadSensor("noise levels must be nonnegative"));
        }
        if !(self.max_range > 0.0) || !(self.fov_horizontal > 0.0) {
            return Err(SimError::BadSensor("range and field of view must be positive"));
        }
        Ok(())
    }

    fn sees(&self, local: &Vector3<f64>) -> bool {
        let range = local.x.hypot(local.y);
        if range > self.max_range {
            return false;
        }
        self.fov_horizontal >= 2.0 * PI || local.y.atan2(local.x).abs() <= self.fov_horizontal / 2.0
    }
}

/// Planar odometry noise applied to each relative step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryNoise {
    /// Per-axis (x, y) translation noise per step (m).
    pub trans_sigma: f64,
    /// Yaw noise per step (rad).
    pub rot_sigma: f64,
}

impl Default for OdometryNoise {
    fn default() -> Self {
        Self {
            trans_sigma: 0.05,
            rot_sigma: 0.005,
        }
    }
}

impl OdometryNoise {
    pub fn none() -> Self {
        Self {
            trans_sigma: 0.0,
            rot_sigma: 0.0,
        }
    }
}

/// One observed landmark instance, expressed in the sensor frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "centroid")]
    pub centroid_local: Vector3<f64>,
    pub feature: Vec<f64>,
    pub label: String,
    pub confidence: f64,
    #[serde(rename = "points", default, skip_serializing_if = "Option::is_none")]
    pub points_local: Option<Vec<Vector3<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFrame {
    pub frame_index: usize,
    pub detections: Vec<Detection>,
    /// Relative motion from the previous frame; identity for the first frame.
    pub odometry_step: Pose,
    /// World-frame pose, for evaluation only.
    pub ground_truth_pose: Option<Pose>,
}

/// Renders a run: per-frame detections and odometry along `trajectory`.
pub fn simulate_run(
    world: &[WorldLandmark],
    labels: &LabelSet,
    trajectory: &[Pose],
    sensor: &SensorModel,
    odom: &OdometryNoise,
    seed: u64,
) -> Vec<DetectionFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = |rng: &mut ChaCha8Rng, sigma: f64| -> f64 {
        if sigma > 0.0 {
            sigma * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        }
    };

    let mut frames = Vec::with_capacity(trajectory.len());
    for (t, pose) in trajectory.iter().enumerate() {
        let odometry_step = if t == 0 {
            Pose::identity()
        } else {
            let truth = trajectory[t - 1].inverse().compose(pose);
            if odom.trans_sigma > 0.0 || odom.rot_sigma > 0.0 {
                let dx = std_normal(&mut rng, odom.trans_sigma);
                let dy = std_normal(&mut rng, odom.trans_sigma);
                let dyaw = std_normal(&mut rng, odom.rot_sigma);
                truth.compose(&Pose::new(rot_z(dyaw), Vector3::new(dx, dy, 0.0)))
            } else {
                truth
            }
        };

        let to_local = pose.inverse();
        let mut detections = Vec::new();
        for lm in world {
            let local = to_local.transform_point(&lm.position);
            if !sensor.sees(&local) || rng.random::<f64>() >= sensor.detect_prob {
                continue;
            }
            let confused = labels.len() > 1 && rng.random::<f64>() < sensor.confusion_prob;
            let (label_index, feature, confidence) = if confused {
                let shift = rng.random_range(1..labels.len());
                let q = (lm.label_index + shift) % labels.len();
                let f = perturbed_unit(&mut rng, &labels.prototypes[q], sensor.feature_noise_sigma);
                (q, f, rng.random_range(0.3..0.7))
            } else {
                let f = perturbed_unit(&mut rng, &lm.feature, sensor.feature_noise_sigma);
                (lm.label_index, f, rng.random_range(0.6..1.0))
            };
            let shift = Vector3::new(
                std_normal(&mut rng, sensor.centroid_sigma),
                std_normal(&mut rng, sensor.centroid_sigma),
                std_normal(&mut rng, sensor.centroid_sigma),
            );
            detections.push(emit(
                &mut rng,
                sensor,
                local + shift,
                feature,
                labels.labels[label_index].clone(),
                confidence,
            ));
        }

        if sensor.false_positive_rate > 0.0 {
            let count = Poisson::new(sensor.false_positive_rate)
                .map(|p| p.sample(&mut rng) as usize)
                .unwrap_or(0);
            for _ in 0..count {
                let half = sensor.fov_horizontal.min(2.0 * PI) / 2.0;
                let bearing = rng.random_range(-half..=half);
                let range = sensor.max_range * rng.random::<f64>().sqrt();
                let local = Vector3::new(
                    range * bearing.cos(),
                    range * bearing.sin(),
                    rng.random_range(0.0..5.0),
                );
                let q = rng.random_range(0..labels.len());
                let f = perturbed_unit(&mut rng, &labels.prototypes[q], 0.05);
                let confidence = rng.random_range(0.3..0.7);
                detections.push(emit(
                    &mut rng,
                    sensor,
                    local,
                    f,
                    labels.labels[q].clone(),
                    confidence,
                ));
            }
        }

        frames.push(DetectionFrame {
            frame_index: t,
            detections,
            odometry_step,
            ground_truth_pose: Some(*pose),
        });
    }
    frames
}

fn emit(
    rng: &mut ChaCha8Rng,
    sensor: &SensorModel,
    centroid: Vector3<f64>,
    feature: Vec<f64>,
    label: String,
    confidence: f64,
) -> Detection {
    if sensor.cluster_points == 0 {
        return Detection {
            centroid_local: centroid,
            feature,
            label,
            confidence,
            points_local: None,
        };
    }
    let points: Vec<Vector3<f64>> = (0..sensor.cluster_points)
        .map(|_| {
            let mut p = centroid;
            if sensor.cluster_sigma > 0.0 {
                for k in 0..3 {
                    p[k] += sensor.cluster_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            p
        })
        .collect();
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    Detection {
        centroid_local: mean,
        feature,
        label,
        confidence,
        points_local: Some(points),
    }
}

/// Chains odometry steps from `start`.
pub fn dead_reckon(start: &Pose, frames: &[DetectionFrame]) -> Vec<Pose> {
    let mut pose = *start;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if i > 0 {
                pose = pose.compose(&f.odometry_step);
            }
            pose
        })
        .collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    DVector::from_column_slice(a).dot(&DVector::from_column_slice(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> LabelSet {
        LabelSet::generate(8, DEFAULT_FEATURE_DIM, 7).unwrap()
    }

    #[test]
    fn label_set_validation() {
        let ls = labels();
        assert_eq!(ls.len(), 8);
        assert!(LabelSet::new(vec![], vec![]).is_err());
        assert!(matches!(
            LabelSet::new(vec!["a".into(), "a".into()], vec![vec![1.0], vec![1.0]]),
            Err(SimError::DuplicateLabel(_))
        ));
        assert!(matches!(
            LabelSet::new(vec!["a".into()], vec![vec![0.5]]),
            Err(SimError::BadPrototype { .. })
        ));
    }

    #[test]
    fn world_is_deterministic_and_bounded() {
        let spec = WorldSpec {
            extent: [300.0, 200.0],
            landmark_count: 50,
            ..Default::default()
        };
        let a = generate_world(3, &spec, &labels()).unwrap();
        let b = generate_world(3, &spec, &labels()).unwrap();
        assert_eq!(a, b);
        for lm in &a {
            assert!((0.0..=300.0).contains(&lm.position.x));
            assert!((0.0..=200.0).contains(&lm.position.y));
            assert!((0.0..=5.0).contains(&lm.position.z));
            let n = dot(&lm.feature, &lm.feature).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let one = WorldSpec {
            landmark_count: 1,
            ..spec
        };
        assert_eq!(generate_world(9, &one, &labels()).unwrap().len(), 1);
        assert_eq!(
            generate_world(9, &WorldSpec { landmark_count: 0, ..Default::default() }, &labels()),
            Err(SimError::NoLandmarks)
        );
    }

    #[test]
    fn roadside_and_clustered_placement() {
        let spec = WorldSpec {
            extent: [120.0, 120.0],
            origin: [-10.0, -10.0],
            landmark_count: 80,
            min_separation: 2.0,
            placement: Placement::Roadside {
                waypoints: rectangle_loop(100.0, 100.0),
                min_offset: 3.0,
                max_offset: 8.0,
            },
            ..Default::default()
        };
        let world = generate_world(1, &spec, &labels()).unwrap();
        assert_eq!(world.len(), 80);
        for (i, a) in world.iter().enumerate() {
            for b in &world[..i] {
                assert!((a.position - b.position).xy().norm() >= 2.0);
            }
        }
        let clustered = WorldSpec {
            placement: Placement::Clustered {
                clusters: 4,
                spread: 5.0,
            },
            ..Default::default()
        };
        assert_eq!(generate_world(2, &clustered, &labels()).unwrap().len(), 100);
    }

    #[test]
    fn trajectory_examples() {
        // 400 m perimeter at 1 m spacing
        let square = TrajectorySpec::default();
        assert_eq!(generate_trajectory(0, &square).unwrap().len(), 400);

        let line = TrajectorySpec {
            waypoints: vec![[0.0, 0.0], [10.0, 0.0]],
            closed: false,
            ..Default::default()
        };
        let poses = generate_trajectory(0, &line).unwrap();
        assert_eq!(poses.len(), 11);
        for (i, p) in poses.iter().enumerate() {
            assert!((p.translation - Vector3::new(i as f64, 0.0, 0.0)).norm() < 1e-12);
            assert!(p.yaw().abs() < 1e-12);
        }

        let jittered = TrajectorySpec {
            lateral_jitter: 0.2,
            ..Default::default()
        };
        assert_eq!(
            generate_trajectory(5, &jittered).unwrap(),
            generate_trajectory(5, &jittered).unwrap()
        );

        let bad = TrajectorySpec {
            waypoints: vec![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]],
            closed: false,
            ..Default::default()
        };
        assert_eq!(generate_trajectory(0, &bad), Err(SimError::CoincidentWaypoints(0, 1)));
        let single = TrajectorySpec {
            waypoints: vec![[0.0, 0.0]],
            ..Default::default()
        };
        assert_eq!(generate_trajectory(0, &single), Err(SimError::TooFewWaypoints));
    }

    #[test]
    fn heading_offsets_alternate() {
        let spec = TrajectorySpec {
            waypoints: vec![[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]],
            closed: false,
            heading_offset: 0.5,
            ..Default::default()
        };
        let poses = generate_trajectory(0, &spec).unwrap();
        assert!((poses[0].yaw() - 0.5).abs() < 1e-12);
        assert!(poses[5].yaw().abs() < 1e-12);
        assert!((poses[10].yaw() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn serpentine_length() {
        let w = serpentine_loop(4, 70.0, 250.0, 40.0);
        let p = Polyline::new(&w, true).unwrap();
        // 2 full lanes, 2 inner lanes, 3 connectors, bottom return
        let expected = 2.0 * 250.0 + 2.0 * 210.0 + 3.0 * 70.0 + 210.0;
        assert!((p.length() - expected).abs() < 1e-9);
    }

    fn small_world() -> (LabelSet, Vec<WorldLandmark>, Vec<Pose>) {
        let ls = labels();
        let world = generate_world(
            4,
            &WorldSpec {
                extent: [100.0, 100.0],
                landmark_count: 30,
                ..Default::default()
            },
            &ls,
        )
        .unwrap();
        let traj = generate_trajectory(
            0,
            &TrajectorySpec {
                step_length: 5.0,
                ..Default::default()
            },
        )
        .unwrap();
        (ls, world, traj)
    }

    #[test]
    fn noiseless_omniscient_sensor_sees_everything_exactly() {
        let (ls, world, traj) = small_world();
        let sensor = SensorModel {
            max_range: f64::INFINITY,
            fov_horizontal: 2.0 * PI,
            ..SensorModel::noiseless()
        };
        let frames = simulate_run(&world, &ls, &traj, &sensor, &OdometryNoise::none(), 1);
        for f in &frames {
            assert_eq!(f.detections.len(), world.len());
            let gt = f.ground_truth_pose.unwrap();
            for (d, lm) in f.detections.iter().zip(&world) {
                assert!((gt.transform_point(&d.centroid_local) - lm.position).amax() < 1e-9);
                assert_eq!(d.feature, lm.feature);
            }
        }
        let chained = dead_reckon(&traj[0], &frames);
        let last = chained.last().unwrap();
        let truth = traj.last().unwrap();
        assert!((last.translation - truth.translation).amax() < 1e-9);
        assert!((last.rotation - truth.rotation).amax() < 1e-9);
    }

    #[test]
    fn blind_sensor_emits_nothing() {
        let (ls, world, traj) = small_world();
        let sensor = SensorModel {
            detect_prob: 0.0,
            false_positive_rate: 0.0,
            ..Default::default()
        };
        let frames = simulate_run(&world, &ls, &traj, &sensor, &OdometryNoise::default(), 1);
        assert!(frames.iter().all(|f| f.detections.is_empty()));
    }

    #[test]
    fn noisy_detections_respect_fov_and_unit_features() {
        let (ls, world, traj) = small_world();
        let sensor = SensorModel {
            cluster_points: 6,
            confusion_prob: 0.2,
            false_positive_rate: 0.0,
            ..Default::default()
        };
        let frames = simulate_run(&world, &ls, &traj, &sensor, &OdometryNoise::default(), 2);
        assert_eq!(
            frames,
            simulate_run(&world, &ls, &traj, &sensor, &OdometryNoise::default(), 2)
        );
        let mut total = 0;
        for f in &frames {
            assert!(f.odometry_step.is_valid(1e-9));
            for d in &f.detections {
                total += 1;
                assert!((dot(&d.feature, &d.feature).sqrt() - 1.0).abs() < 1e-9);
                assert!((0.0..=1.0).contains(&d.confidence));
                let pts = d.points_local.as_ref().unwrap();
                assert_eq!(pts.len(), 6);
                let bearing = d.centroid_local.y.atan2(d.centroid_local.x);
                assert!(bearing.abs() < sensor.fov_horizontal / 2.0 + 0.2);
            }
        }
        assert!(total > 0);
    }

    #[test]
    fn odometry_noise_causes_drift() {
        // Mean endpoint drift over 100 seeds of a 400-step loop.
        let spec = TrajectorySpec::default();
        let traj = generate_trajectory(0, &spec).unwrap();
        let ls = labels();
        let world = vec![WorldLandmark {
            position: Vector3::new(50.0, 50.0, 1.0),
            label_index: 0,
            feature: ls.prototypes[0].clone(),
        }];
        let noise = OdometryNoise {
            trans_sigma: 0.05,
            rot_sigma: 0.5f64.to_radians(),
        };
        let sensor = SensorModel::noiseless();
        let mut drift = 0.0;
        for seed in 0..100 {
            let frames = simulate_run(&world, &ls, &traj, &sensor, &noise, seed);
            let end = dead_reckon(&traj[0], &frames);
            drift += (end.last().unwrap().translation - traj.last().unwrap().translation).norm();
        }
        assert!(drift / 100.0 > 0.0);
    }
}
