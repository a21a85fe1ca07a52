//! Sparse semantic map construction.
//!
//! Every detection is lifted into the map frame and compared against the
//! instances registered so far. The overall similarity is the sum of a
//! semantic affinity (cosine similarity rescaled to [0, 1]) and a geometric
//! similarity (nearest-neighbor overlap of the point clusters, or an
//! exponential falloff on centroid distance when no clusters are available).
//! A detection is fused into the best-scoring instance when that score clears
//! the association threshold, otherwise it seeds a new instance.

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::sim::{dot, normalized, Detection, DetectionFrame, LabelSet};

/// Above this many instances candidate search goes through a uniform grid.
pub const GRID_INDEX_THRESHOLD: usize = 5000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MappingError {
    #[error("empty point set")]
    EmptyPoints,
    #[error("feature vector has zero norm")]
    ZeroFeature,
    #[error("feature dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("detection contains non-finite coordinates")]
    NonFinite,
    #[error("{frames} frames but {poses} poses")]
    LengthMismatch { frames: usize, poses: usize },
    #[error("invalid mapping config: {0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFusion {
    /// Count- and confidence-weighted running average.
    #[default]
    ConfidenceWeighted,
    /// The feature of the most confident observation wins.
    HighestConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    /// Association threshold. It is compared against the mean of the two
    /// similarity terms, i.e. the summed score must exceed `2 * delta_sim`.
    pub delta_sim: f64,
    /// Neighbor radius of the geometric similarity (m).
    pub geo_radius: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    /// Lower bound on the semantic affinity of an association; `None`
    /// thresholds the combined score alone.
    pub min_semantic: Option<f64>,
    pub feature_fusion: FeatureFusion,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            delta_sim: 0.7,
            geo_radius: 2.0,
            dbscan_eps: 0.5,
            dbscan_min_pts: 3,
            min_semantic: Some(0.5),
            feature_fusion: FeatureFusion::ConfidenceWeighted,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<(), MappingError> {
        if !(self.delta_sim > 0.0 && self.delta_sim < 2.0) {
            return Err(MappingError::BadConfig("delta_sim must lie in (0, 2)"));
        }
        if !(self.geo_radius > 0.0) || !(self.dbscan_eps > 0.0) {
            return Err(MappingError::BadConfig("radii must be positive"));
        }
        Ok(())
    }

    /// Smallest geometric similarity that can still lead to an association
    /// (semantic affinity is at most 1).
    fn min_useful_geo(&self) -> f64 {
        2.0 * self.delta_sim - 1.0
    }
}

/// One fused landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapInstance {
    pub centroid: Vector3<f64>,
    pub feature: Vec<f64>,
    pub label: String,
    /// Highest detection confidence seen so far.
    pub confidence: f64,
    #[serde(rename = "obs_count")]
    pub observation_count: usize,
    /// Map-frame cluster, when detections carried points.
    #[serde(skip)]
    pub points: Option<Vec<Vector3<f64>>>,
    #[serde(skip)]
    radius: f64,
}

impl MapInstance {
    pub fn new(centroid: Vector3<f64>, feature: Vec<f64>, label: String, confidence: f64) -> Self {
        Self {
            centroid,
            feature,
            label,
            confidence,
            observation_count: 1,
            points: None,
            radius: 0.0,
        }
    }

    pub fn with_points(mut self, points: Vec<Vector3<f64>>) -> Self {
        self.centroid = mean(&points);
        self.radius = spread(&self.centroid, &points);
        self.points = Some(points);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MapMetadata {
    pub mapping: MappingConfig,
    pub frames: usize,
    pub detections: usize,
    pub raw_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMap {
    pub label_set: LabelSet,
    pub instances: Vec<MapInstance>,
    pub metadata: MapMetadata,
}

impl SparseMap {
    pub fn new(label_set: LabelSet, mapping: MappingConfig) -> Self {
        Self {
            label_set,
            instances: Vec::new(),
            metadata: MapMetadata {
                mapping,
                ..Default::default()
            },
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// `(min, max)` corners of the centroids' horizontal bounding box.
    pub fn bounding_box(&self) -> Option<([f64; 2], [f64; 2])> {
        let first = self.instances.first()?;
        let mut lo = [first.centroid.x, first.centroid.y];
        let mut hi = lo;
        for inst in &self.instances {
            lo[0] = lo[0].min(inst.centroid.x);
            lo[1] = lo[1].min(inst.centroid.y);
            hi[0] = hi[0].max(inst.centroid.x);
            hi[1] = hi[1].max(inst.centroid.y);
        }
        Some((lo, hi))
    }
}

fn mean(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn spread(center: &Vector3<f64>, points: &[Vector3<f64>]) -> f64 {
    points.iter().map(|p| (p - center).norm()).fold(0.0, f64::max)
}

/// Cluster labels per point; `None` marks noise. Clusters are numbered in
/// discovery order.
pub fn dbscan(points: &[Vector3<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| (points[i] - points[j]).norm_squared() <= eps2)
            .collect()
    };
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut cluster = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seeds = neighbors(i);
        if seeds.len() < min_pts {
            continue;
        }
        labels[i] = Some(cluster);
        let mut queue = seeds;
        while let Some(j) = queue.pop() {
            if labels[j].is_none() {
                labels[j] = Some(cluster);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let reach = neighbors(j);
            if reach.len() >= min_pts {
                queue.extend(reach.into_iter().filter(|&k| !visited[k] || labels[k].is_none()));
            }
        }
        cluster += 1;
    }
    labels
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedCluster {
    pub centroid: Vector3<f64>,
    pub inliers: Vec<Vector3<f64>>,
    /// False when every point was noise and the raw mean was returned.
    pub refined: bool,
}

/// Keeps the largest DBSCAN cluster of a detection's points.
pub fn refine_cluster(
    points: &[Vector3<f64>],
    eps: f64,
    min_pts: usize,
) -> Result<RefinedCluster, MappingError> {
    if points.is_empty() {
        return Err(MappingError::EmptyPoints);
    }
    let labels = dbscan(points, eps, min_pts);
    let clusters = labels.iter().flatten().copied().max().map_or(0, |m| m + 1);
    if clusters == 0 {
        return Ok(RefinedCluster {
            centroid: mean(points),
            inliers: points.to_vec(),
            refined: false,
        });
    }
    let mut sizes = vec![0usize; clusters];
    for l in labels.iter().flatten() {
        sizes[*l] += 1;
    }
    // First cluster wins ties.
    let best = (0..clusters).fold(0, |b, c| if sizes[c] > sizes[b] { c } else { b });
    let inliers: Vec<Vector3<f64>> = points
        .iter()
        .zip(&labels)
        .filter(|(_, l)| **l == Some(best))
        .map(|(p, _)| *p)
        .collect();
    Ok(RefinedCluster {
        centroid: mean(&inliers),
        inliers,
        refined: true,
    })
}

/// `f_aᵀ f_b / 2 + 1/2`, clamped to [0, 1].
pub fn semantic_affinity(f_a: &[f64], f_b: &[f64]) -> Result<f64, MappingError> {
    if f_a.len() != f_b.len() {
        return Err(MappingError::DimensionMismatch(f_a.len(), f_b.len()));
    }
    let na = dot(f_a, f_a).sqrt();
    let nb = dot(f_b, f_b).sqrt();
    if !(na > 1e-12 && nb > 1e-12) {
        return Err(MappingError::ZeroFeature);
    }
    let cos = dot(f_a, f_b) / (na * nb);
    Ok((cos / 2.0 + 0.5).clamp(0.0, 1.0))
}

/// Fraction of `new_points` whose nearest neighbor in `existing_points`
/// lies within `radius`.
pub fn geometric_similarity(
    new_points: &[Vector3<f64>],
    existing_points: &[Vector3<f64>],
    radius: f64,
) -> Result<f64, MappingError> {
    if new_points.is_empty() || existing_points.is_empty() {
        return Err(MappingError::EmptyPoints);
    }
    let r2 = radius * radius;
    let close = new_points
        .iter()
        .filter(|p| existing_points.iter().any(|q| (*p - q).norm_squared() <= r2))
        .count();
    Ok(close as f64 / new_points.len() as f64)
}

/// Geometric similarity for centroid-only observations.
pub fn centroid_similarity(a: &Vector3<f64>, b: &Vector3<f64>, radius: f64) -> f64 {
    (-(a - b).norm() / radius).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Association {
    Fused { index: usize, score: f64 },
    Created { index: usize },
}

/// A detection lifted into the map frame.
struct Observation<'a> {
    centroid: Vector3<f64>,
    points: Option<Vec<Vector3<f64>>>,
    radius: f64,
    detection: &'a Detection,
}

fn lift<'a>(
    detection: &'a Detection,
    sensor_pose: &Pose,
    cfg: &MappingConfig,
) -> Result<Observation<'a>, MappingError> {
    let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
    if !finite(&detection.centroid_local) {
        return Err(MappingError::NonFinite);
    }
    if detection.feature.is_empty() || dot(&detection.feature, &detection.feature) <= 1e-24 {
        return Err(MappingError::ZeroFeature);
    }
    match detection.points_local.as_deref() {
        Some(points) if !points.is_empty() => {
            if !points.iter().all(finite) {
                return Err(MappingError::NonFinite);
            }
            let refined = refine_cluster(points, cfg.dbscan_eps, cfg.dbscan_min_pts)?;
            let inliers: Vec<Vector3<f64>> = refined
                .inliers
                .iter()
                .map(|p| sensor_pose.transform_point(p))
                .collect();
            let centroid = sensor_pose.transform_point(&refined.centroid);
            let radius = spread(&centroid, &inliers);
            Ok(Observation {
                centroid,
                points: Some(inliers),
                radius,
                detection,
            })
        }
        _ => Ok(Observation {
            centroid: sensor_pose.transform_point(&detection.centroid_local),
            points: None,
            radius: 0.0,
            detection,
        }),
    }
}

/// Incremental map builder; switches to a grid index for large maps.
pub struct MapBuilder {
    map: SparseMap,
    cfg: MappingConfig,
    grid: Option<Grid>,
    max_radius: f64,
}

impl MapBuilder {
    pub fn new(map: SparseMap, cfg: MappingConfig) -> Self {
        let max_radius = map.instances.iter().map(|i| i.radius).fold(0.0, f64::max);
        let mut builder = Self {
            map,
            cfg,
            grid: None,
            max_radius,
        };
        builder.maybe_build_grid();
        builder
    }

    pub fn map(&self) -> &SparseMap {
        &self.map
    }

    pub fn finish(self) -> SparseMap {
        self.map
    }

    fn gate(&self, obs: &Observation, inst_radius: f64) -> Option<f64> {
        let min_geo = self.cfg.min_useful_geo();
        if min_geo <= 0.0 {
            return None;
        }
        let centroid_gate = if min_geo < 1.0 {
            -self.cfg.geo_radius * min_geo.ln()
        } else {
            0.0
        };
        let cluster_gate = obs.radius + inst_radius + self.cfg.geo_radius;
        Some(centroid_gate.max(cluster_gate))
    }

    fn maybe_build_grid(&mut self) {
        if self.grid.is_none() && self.map.instances.len() > GRID_INDEX_THRESHOLD {
            let mut grid = Grid::new(self.cfg.geo_radius.max(1.0));
            for (i, inst) in self.map.instances.iter().enumerate() {
                grid.insert(i, &inst.centroid);
            }
            self.grid = Some(grid);
        }
    }

    fn similarity(&self, obs: &Observation, inst: &MapInstance) -> Result<(f64, f64), MappingError> {
        let sem = semantic_affinity(&obs.detection.feature, &inst.feature)?;
        let geo = match (&obs.points, &inst.points) {
            (Some(a), Some(b)) => geometric_similarity(a, b, self.cfg.geo_radius)?,
            _ => centroid_similarity(&obs.centroid, &inst.centroid, self.cfg.geo_radius),
        };
        Ok((sem, geo))
    }

    pub fn insert(&mut self, detection: &Detection, sensor_pose: &Pose) -> Result<Association, MappingError> {
        let obs = lift(detection, sensor_pose, &self.cfg)?;
        let gate = self.gate(&obs, self.max_radius);

        let candidates: Vec<usize> = match (&self.grid, gate) {
            (Some(grid), Some(r)) => grid.query(&obs.centroid, r),
            _ => (0..self.map.instances.len()).collect(),
        };

        let mut best: Option<(usize, f64)> = None;
        for k in candidates {
            let inst = &self.map.instances[k];
            if let Some(r) = self.gate(&obs, inst.radius) {
                if (inst.centroid - obs.centroid).norm() >= r {
                    continue;
                }
            }
            let (sem, geo) = self.similarity(&obs, inst)?;
            if let Some(min_sem) = self.cfg.min_semantic {
                if sem <= min_sem {
                    continue;
                }
            }
            let score = sem + geo;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((k, score));
            }
        }

        match best {
            Some((index, score)) if score > 2.0 * self.cfg.delta_sim => {
                let old = self.map.instances[index].centroid;
                fuse(&mut self.map.instances[index], obs, self.cfg.feature_fusion);
                let inst = &self.map.instances[index];
                self.max_radius = self.max_radius.max(inst.radius);
                if let Some(grid) = &mut self.grid {
                    grid.moved(index, &old, &inst.centroid);
                }
                Ok(Association::Fused { index, score })
            }
            _ => {
                let mut inst = MapInstance::new(
                    obs.centroid,
                    normalized(&detection.feature).ok_or(MappingError::ZeroFeature)?,
                    detection.label.clone(),
                    detection.confidence,
                );
                if let Some(points) = obs.points {
                    inst.radius = obs.radius;
                    inst.points = Some(points);
                }
                self.max_radius = self.max_radius.max(inst.radius);
                let index = self.map.instances.len();
                if let Some(grid) = &mut self.grid {
                    grid.insert(index, &inst.centroid);
                }
                self.map.instances.push(inst);
                self.maybe_build_grid();
                Ok(Association::Created { index })
            }
        }
    }
}

fn fuse(inst: &mut MapInstance, obs: Observation, policy: FeatureFusion) {
    let det = obs.detection;
    let n = inst.observation_count as f64;
    match (inst.points.take(), obs.points) {
        (Some(mut pts), Some(new)) => {
            pts.extend(new);
            inst.centroid = mean(&pts);
            inst.radius = spread(&inst.centroid, &pts);
            inst.points = Some(pts);
        }
        _ => {
            inst.centroid = (inst.centroid * n + obs.centroid) / (n + 1.0);
            inst.radius = 0.0;
        }
    }

    let det_feature = normalized(&det.feature).unwrap_or_else(|| inst.feature.clone());
    match policy {
        FeatureFusion::ConfidenceWeighted => {
            let (wo, wd) = if inst.confidence > 0.0 || det.confidence > 0.0 {
                (inst.confidence * n, det.confidence)
            } else {
                (n, 1.0)
            };
            let blended: Vec<f64> = inst
                .feature
                .iter()
                .zip(&det_feature)
                .map(|(a, b)| wo * a + wd * b)
                .collect();
            if let Some(f) = normalized(&blended) {
                inst.feature = f;
            }
        }
        FeatureFusion::HighestConfidence => {
            if det.confidence > inst.confidence {
                inst.feature = det_feature;
            }
        }
    }
    if det.confidence > inst.confidence {
        inst.confidence = det.confidence;
        inst.label = det.label.clone();
    }
    inst.observation_count += 1;
}

/// Fuses one detection observed from `sensor_pose` into `map`.
pub fn associate_and_fuse(
    map: &mut SparseMap,
    detection: &Detection,
    sensor_pose: &Pose,
    cfg: &MappingConfig,
) -> Result<Association, MappingError> {
    let mut builder = MapBuilder::new(std::mem::replace(map, empty_like(map)), cfg.clone());
    let result = builder.insert(detection, sensor_pose);
    *map = builder.finish();
    result
}

fn empty_like(map: &SparseMap) -> SparseMap {
    SparseMap::new(map.label_set.clone(), map.metadata.mapping.clone())
}

/// Folds every detection of `frames` (observed from the matching entry of
/// `poses`) into a fresh map.
pub fn build_map(
    frames: &[DetectionFrame],
    poses: &[Pose],
    label_set: &LabelSet,
    cfg: &MappingConfig,
) -> Result<SparseMap, MappingError> {
    if frames.len() != poses.len() {
        return Err(MappingError::LengthMismatch {
            frames: frames.len(),
            poses: poses.len(),
        });
    }
    cfg.validate()?;
    let mut builder = MapBuilder::new(SparseMap::new(label_set.clone(), cfg.clone()), cfg.clone());
    let mut detections = 0;
    for (frame, pose) in frames.iter().zip(poses) {
        for det in &frame.detections {
            builder.insert(det, pose)?;
            detections += 1;
        }
    }
    let mut map = builder.finish();
    map.metadata.frames = frames.len();
    map.metadata.detections = detections;
    map.metadata.raw_points = raw_point_count(frames);
    Ok(map)
}

/// Raw 3D points a dense map would register for these frames (a
/// centroid-only detection counts as one point).
pub fn raw_point_count(frames: &[DetectionFrame]) -> usize {
    frames
        .iter()
        .flat_map(|f| &f.detections)
        .map(|d| d.points_local.as_ref().map_or(1, |p| p.len().max(1)))
        .sum()
}

struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(cell: f64) -> Self {
        Self {
            cell,
            cells: HashMap::new(),
        }
    }

    fn key(&self, p: &Vector3<f64>) -> (i64, i64) {
        ((p.x / self.cell).floor() as i64, (p.y / self.cell).floor() as i64)
    }

    fn insert(&mut self, index: usize, p: &Vector3<f64>) {
        let key = self.key(p);
        self.cells.entry(key).or_default().push(index);
    }

    fn moved(&mut self, index: usize, old: &Vector3<f64>, new: &Vector3<f64>) {
        let (ko, kn) = (self.key(old), self.key(new));
        if ko == kn {
            return;
        }
        if let Some(v) = self.cells.get_mut(&ko) {
            v.retain(|&i| i != index);
        }
        self.insert(index, new);
    }

    /// Indices in ascending order, so results match the exhaustive scan.
    fn query(&self, p: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let (cx, cy) = self.key(p);
        let reach = (radius / self.cell).ceil() as i64;
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                if let Some(v) = self.cells.get(&(cx + dx, cy + dy)) {
                    out.extend_from_slice(v);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(centroid: Vector3<f64>, feature: Vec<f64>, label: &str, confidence: f64) -> Detection {
        Detection {
            centroid_local: centroid,
            feature,
            label: label.into(),
            confidence,
            points_local: None,
        }
    }

    fn unit(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn labels() -> LabelSet {
        LabelSet::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![unit(4, 0), unit(4, 1), unit(4, 2)],
        )
        .unwrap()
    }

    #[test]
    fn refine_tight_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vector3<f64>> = (0..10)
            .map(|_| Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0))
            .collect();
        let r = refine_cluster(&pts, 0.5, 3).unwrap();
        assert!(r.refined);
        assert_eq!(r.inliers.len(), 10);
        assert!(r.centroid.norm() < 0.1);
    }

    #[test]
    fn refine_drops_far_outliers() {
        let mut pts: Vec<Vector3<f64>> = (0..20)
            .map(|i| Vector3::new(0.01 * i as f64, -0.005 * i as f64, 0.0))
            .collect();
        let expected = mean(&pts);
        pts.push(Vector3::new(50.0, 0.0, 0.0));
        pts.push(Vector3::new(0.0, 50.0, 0.0));
        let r = refine_cluster(&pts, 0.5, 3).unwrap();
        assert_eq!(r.inliers.len(), 20);
        assert_abs_diff_eq!(r.centroid, expected, epsilon = 1e-12);
    }

    #[test]
    fn refine_all_noise_falls_back_to_mean() {
        let pts = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0)];
        let r = refine_cluster(&pts, 0.5, 3).unwrap();
        assert!(!r.refined);
        assert_eq!(r.centroid, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(refine_cluster(&[], 0.5, 3), Err(MappingError::EmptyPoints));
    }

    #[test]
    fn dbscan_matches_brute_force_components() {
        // Two well-separated blobs plus isolated points: cluster membership
        // must equal the connected components of core points.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = Vec::new();
        for c in [Vector3::zeros(), Vector3::new(10.0, 0.0, 0.0)] {
            for _ in 0..15 {
                pts.push(c + Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0));
            }
        }
        pts.push(Vector3::new(30.0, 30.0, 0.0));
        let labels = dbscan(&pts, 0.5, 3);
        assert_eq!(labels[30], None);
        assert!(labels[..15].iter().all(|l| *l == labels[0] && l.is_some()));
        assert!(labels[15..30].iter().all(|l| *l == labels[15] && l.is_some()));
        assert_ne!(labels[0], labels[15]);
    }

    #[test]
    fn semantic_affinity_cases() {
        let f = vec![0.6, 0.8];
        assert_abs_diff_eq!(semantic_affinity(&f, &f).unwrap(), 1.0, epsilon = 1e-15);
        let neg: Vec<f64> = f.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(semantic_affinity(&f, &neg).unwrap(), 0.0, epsilon = 1e-15);
        assert_eq!(semantic_affinity(&unit(3, 0), &unit(3, 1)).unwrap(), 0.5);
        assert_eq!(semantic_affinity(&[0.0, 0.0], &f), Err(MappingError::ZeroFeature));
    }

    #[test]
    fn geometric_similarity_cases() {
        let a: Vec<Vector3<f64>> = (0..4).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(geometric_similarity(&a, &a, 2.0).unwrap(), 1.0);
        let far: Vec<Vector3<f64>> = a.iter().map(|p| p + Vector3::new(100.0, 0.0, 0.0)).collect();
        assert_eq!(geometric_similarity(&a, &far, 2.0).unwrap(), 0.0);
        let half: Vec<Vector3<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, p)| if i < 2 { *p } else { p + Vector3::new(0.0, 10.0, 0.0) })
            .collect();
        // points 2, 3 shifted 10 m: their nearest neighbor in `a` is 10 m away
        assert_eq!(geometric_similarity(&half, &a, 2.0).unwrap(), 0.5);
        assert_eq!(geometric_similarity(&[], &a, 2.0), Err(MappingError::EmptyPoints));
    }

    #[test]
    fn repeated_observation_fuses() {
        let cfg = MappingConfig::default();
        let mut map = SparseMap::new(labels(), cfg.clone());
        let pose = Pose::from_xy_yaw(3.0, 1.0, 0.4);
        let d = det(Vector3::new(10.0, 2.0, 1.0), unit(4, 0), "a", 0.8);
        for _ in 0..50 {
            associate_and_fuse(&mut map, &d, &pose, &cfg).unwrap();
        }
        assert_eq!(map.len(), 1);
        assert_eq!(map.instances[0].observation_count, 50);
        assert_abs_diff_eq!(
            map.instances[0].centroid,
            pose.transform_point(&d.centroid_local),
            epsilon = 1e-9
        );
    }

    #[test]
    fn distant_same_class_landmarks_stay_apart() {
        let cfg = MappingConfig::default();
        let mut map = SparseMap::new(labels(), cfg.clone());
        let id = Pose::identity();
        // φ_sem = 1, φ_geo = exp(-50) ≈ 0 ⇒ score ≈ 1 < 2·0.7
        associate_and_fuse(&mut map, &det(Vector3::zeros(), unit(4, 0), "a", 0.9), &id, &cfg).unwrap();
        let r = associate_and_fuse(
            &mut map,
            &det(Vector3::new(100.0, 0.0, 0.0), unit(4, 0), "a", 0.9),
            &id,
            &cfg,
        )
        .unwrap();
        assert_eq!(r, Association::Created { index: 1 });
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn highest_confidence_label_wins() {
        let cfg = MappingConfig::default();
        let mut map = SparseMap::new(labels(), cfg.clone());
        let id = Pose::identity();
        // Related features (cosine 0.6) for two labels of one object.
        let fa = vec![1.0, 0.0, 0.0, 0.0];
        let fb = vec![0.6, 0.8, 0.0, 0.0];
        associate_and_fuse(&mut map, &det(Vector3::zeros(), fb.clone(), "b", 0.6), &id, &cfg).unwrap();
        associate_and_fuse(&mut map, &det(Vector3::zeros(), fa.clone(), "a", 0.9), &id, &cfg).unwrap();
        associate_and_fuse(&mut map, &det(Vector3::zeros(), fb, "b", 0.6), &id, &cfg).unwrap();
        assert_eq!(map.len(), 1);
        assert_eq!(map.instances[0].label, "a");
        assert_eq!(map.instances[0].confidence, 0.9);
        let n = dot(&map.instances[0].feature, &map.instances[0].feature).sqrt();
        assert_abs_diff_eq!(n, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn semantic_floor_blocks_cross_class_merge() {
        let mut cfg = MappingConfig::default();
        let mut map = SparseMap::new(labels(), cfg.clone());
        let id = Pose::identity();
        associate_and_fuse(&mut map, &det(Vector3::zeros(), unit(4, 0), "a", 0.9), &id, &cfg).unwrap();
        // Orthogonal features, same place: φ = 0.5 + 1 > 1.4 but φ_sem = 0.5.
        associate_and_fuse(&mut map, &det(Vector3::zeros(), unit(4, 1), "b", 0.9), &id, &cfg).unwrap();
        assert_eq!(map.len(), 2);
        cfg.min_semantic = None;
        let mut map = SparseMap::new(labels(), cfg.clone());
        associate_and_fuse(&mut map, &det(Vector3::zeros(), unit(4, 0), "a", 0.9), &id, &cfg).unwrap();
        associate_and_fuse(&mut map, &det(Vector3::zeros(), unit(4, 1), "b", 0.9), &id, &cfg).unwrap();
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn cluster_detections_merge_points() {
        let cfg = MappingConfig::default();
        let mut map = SparseMap::new(labels(), cfg.clone());
        let pts: Vec<Vector3<f64>> = (0..6).map(|i| Vector3::new(5.0 + 0.05 * i as f64, 0.0, 1.0)).collect();
        let mut d = det(mean(&pts), unit(4, 2), "c", 0.7);
        d.points_local = Some(pts.clone());
        let id = Pose::identity();
        associate_and_fuse(&mut map, &d, &id, &cfg).unwrap();
        let shifted = Pose::from_translation(Vector3::new(0.2, 0.0, 0.0));
        associate_and_fuse(&mut map, &d, &shifted, &cfg).unwrap();
        assert_eq!(map.len(), 1);
        let inst = &map.instances[0];
        let pts = inst.points.as_ref().unwrap();
        assert_eq!(pts.len(), 12);
        assert_abs_diff_eq!(inst.centroid, mean(pts), epsilon = 1e-12);
    }

    #[test]
    fn non_finite_detection_rejected() {
        let cfg = MappingConfig::default();
        let mut map = SparseMap::new(labels(), cfg.clone());
        let d = det(Vector3::new(f64::NAN, 0.0, 0.0), unit(4, 0), "a", 0.5);
        assert_eq!(
            associate_and_fuse(&mut map, &d, &Pose::identity(), &cfg),
            Err(MappingError::NonFinite)
        );
    }

    #[test]
    fn build_map_edge_cases() {
        let cfg = MappingConfig::default();
        let map = build_map(&[], &[], &labels(), &cfg).unwrap();
        assert!(map.is_empty());
        let frame = DetectionFrame {
            frame_index: 0,
            detections: vec![],
            odometry_step: Pose::identity(),
            ground_truth_pose: None,
        };
        assert_eq!(
            build_map(&[frame], &[], &labels(), &cfg),
            Err(MappingError::LengthMismatch { frames: 1, poses: 0 })
        );
    }

    #[test]
    fn grid_index_agrees_with_exhaustive_scan() {
        // 6000 landmarks on a 3 m lattice, each observed twice.
        let cfg = MappingConfig::default();
        let ls = labels();
        let mut dets = Vec::new();
        for i in 0..6000 {
            let c = Vector3::new(3.0 * (i % 80) as f64, 3.0 * (i / 80) as f64, 0.0);
            dets.push(det(c, unit(4, i % 3), ["a", "b", "c"][i % 3], 0.5));
        }
        let mut builder = MapBuilder::new(SparseMap::new(ls.clone(), cfg.clone()), cfg.clone());
        for d in dets.iter().chain(dets.iter()) {
            builder.insert(d, &Pose::identity()).unwrap();
        }
        assert!(builder.grid.is_some());
        let map = builder.finish();
        assert_eq!(map.len(), 6000);
        assert!(map.instances.iter().all(|i| i.observation_count == 2));
    }
}
