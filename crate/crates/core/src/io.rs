//! On-disk formats.
//!
//! Line-oriented files (detection logs, ground truth, traces) are JSONL and
//! may start with a header object carrying the format name, version, seed
//! and config hash; readers skip it. Maps and metric reports are single JSON
//! documents. Floats use the shortest representation that parses back to
//! the identical `f64`, so save → load → save is byte-stable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::mapping::SparseMap;
use crate::sim::{Detection, DetectionFrame};

pub const FORMAT_VERSION: u32 = 1;
pub const DETECTIONS_FORMAT: &str = "sparseloc-detections";
pub const GROUND_TRUTH_FORMAT: &str = "sparseloc-ground-truth";
pub const TRACE_FORMAT: &str = "sparseloc-trace";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
}

impl Header {
    pub fn new(format: &str, seed: u64, config_hash: &str) -> Self {
        Self {
            format: format.into(),
            version: FORMAT_VERSION,
            seed,
            config_hash: config_hash.into(),
        }
    }
}

/// One line of a detection log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame: usize,
    pub odom: Pose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_pose: Option<Pose>,
    pub detections: Vec<Detection>,
}

impl From<&DetectionFrame> for FrameRecord {
    fn from(f: &DetectionFrame) -> Self {
        Self {
            frame: f.frame_index,
            odom: f.odometry_step,
            gt_pose: f.ground_truth_pose,
            detections: f.detections.clone(),
        }
    }
}

impl From<FrameRecord> for DetectionFrame {
    fn from(r: FrameRecord) -> Self {
        Self {
            frame_index: r.frame,
            detections: r.detections,
            odometry_step: r.odom,
            ground_truth_pose: r.gt_pose,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub frame: usize,
    pub pose: Pose,
}

/// One line of a localization trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub frame: usize,
    pub coarse: Pose,
    /// Present once the filter has converged.
    #[serde(default)]
    pub refined: Option<Pose>,
    pub dispersion: f64,
    pub n_eff: f64,
    pub converged: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes `header` (if any) and `records` as JSONL.
pub fn jsonl_bytes<T: Serialize>(header: Option<&Header>, records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    if let Some(h) = header {
        serde_json::to_writer(&mut out, h).expect("header serializes");
        out.push(b'\n');
    }
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: Option<&Header>, records: &[T]) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&jsonl_bytes(header, records)).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Reads a JSONL file, returning its header (if present) and records.
/// Blank lines are ignored.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<Header>, Vec<T>), IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if i == 0 && header.is_none() {
            if let Ok(h) = serde_json::from_str::<Header>(text) {
                header = Some(h);
                continue;
            }
        }
        let rec = serde_json::from_str(text).map_err(|source| IoError::Json {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        records.push(rec);
    }
    Ok((header, records))
}

pub fn write_detection_log(path: &Path, header: &Header, frames: &[DetectionFrame]) -> Result<(), IoError> {
    let records: Vec<FrameRecord> = frames.iter().map(FrameRecord::from).collect();
    write_jsonl(path, Some(header), &records)
}

pub fn read_detection_log(path: &Path) -> Result<(Option<Header>, Vec<DetectionFrame>), IoError> {
    let (h, recs) = read_jsonl::<FrameRecord>(path)?;
    Ok((h, recs.into_iter().map(DetectionFrame::from).collect()))
}

pub fn write_ground_truth(path: &Path, header: &Header, poses: &[Pose]) -> Result<(), IoError> {
    let records: Vec<GroundTruthRecord> = poses
        .iter()
        .enumerate()
        .map(|(frame, &pose)| GroundTruthRecord { frame, pose })
        .collect();
    write_jsonl(path, Some(header), &records)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthRecord>, IoError> {
    Ok(read_jsonl(path)?.1)
}

pub fn map_bytes(map: &SparseMap) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(map).expect("map serializes");
    out.push(b'\n');
    out
}

pub fn write_map(path: &Path, map: &SparseMap) -> Result<(), IoError> {
    std::fs::write(path, map_bytes(map)).map_err(io_err(path))
}

pub fn read_map(path: &Path) -> Result<SparseMap, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        line: source.line(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(io_err(path))
}
