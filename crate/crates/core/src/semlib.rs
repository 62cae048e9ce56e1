//! Semantic-element benchmark library and two-stage frame matching.
//!
//! A library frame is retrieved for the current frame when it passes the
//! distance gate (camera positions closer than `delta`) and the box gate (mean
//! deviation of associated detection boxes below `xi`). Among survivors the
//! closest frame wins; ties go to the lower frame id.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point3, Pose};
use crate::wire::{self, PoseRecord};

#[derive(Debug, Error)]
pub enum SemlibError {
    #[error("duplicate frame id {0}")]
    DuplicateFrameId(u64),
    #[error("no frames with detections to build a library from")]
    EmptyInput,
    #[error("frame {frame_id}: invalid detection: {reason}")]
    InvalidDetection { frame_id: u64, reason: &'static str },
    #[error("grid cell must be positive, got {0}")]
    InvalidCell(f64),
    #[error("invalid library record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Road semantic element classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    LaneBoundary,
    Arrow,
    Sign,
    RoadsideBarrier,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::LaneBoundary,
        Category::Arrow,
        Category::Sign,
        Category::RoadsideBarrier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::LaneBoundary => "Lane Boundary",
            Category::Arrow => "Arrow",
            Category::Sign => "Sign",
            Category::RoadsideBarrier => "Roadside Barrier",
        }
    }

    /// Long elements described by polylines rather than a single point.
    pub fn is_linear(self) -> bool {
        matches!(self, Category::LaneBoundary | Category::RoadsideBarrier)
    }
}

/// One detected element: class and top-left anchored pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticDetection {
    pub category: Category,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub track_id: Option<u64>,
}

impl SemanticDetection {
    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err("box width and height must be positive");
        }
        if !(self.x >= 0.0 && self.y >= 0.0) {
            return Err("box corner must be non-negative");
        }
        Ok(())
    }
}

/// A pose- and geo-stamped frame of detections.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub pose: Pose,
    /// ENU geographic coordinates of the camera.
    pub geo: Point3,
    pub detections: Vec<SemanticDetection>,
}

impl ElementFrame {
    /// Camera position in the world frame; this is the position compared by
    /// the distance gate and used for alignment.
    pub fn position(&self) -> Point3 {
        self.pose.center()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameRecord {
    frame_id: u64,
    timestamp: f64,
    pose: PoseRecord,
    geo: [f64; 3],
    detections: Vec<SemanticDetection>,
}

impl From<&ElementFrame> for FrameRecord {
    fn from(f: &ElementFrame) -> Self {
        Self {
            frame_id: f.frame_id,
            timestamp: f.timestamp,
            pose: PoseRecord::from(&f.pose),
            geo: wire::point_array(&f.geo),
            detections: f.detections.clone(),
        }
    }
}

impl TryFrom<FrameRecord> for ElementFrame {
    type Error = SemlibError;

    fn try_from(r: FrameRecord) -> Result<Self, SemlibError> {
        let pose = Pose::try_from(r.pose)
            .map_err(|e| SemlibError::InvalidRecord(format!("frame {}: {e}", r.frame_id)))?;
        Ok(Self {
            frame_id: r.frame_id,
            timestamp: r.timestamp,
            pose,
            geo: Point3::from(r.geo),
            detections: r.detections,
        })
    }
}

/// Uniform 3-D hash grid over frame positions.
#[derive(Debug, Clone)]
struct GridIndex {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl GridIndex {
    fn new(cell: f64, points: impl IntoIterator<Item = Point3>) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.into_iter().enumerate() {
            cells.entry(Self::key(cell, &p)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(cell: f64, p: &Point3) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// Indices of every point in cells overlapping the query ball.
    fn visit(&self, center: &Point3, radius: f64, mut f: impl FnMut(usize)) {
        let lo = Self::key(self.cell, &center.add_scalar(-radius));
        let hi = Self::key(self.cell, &center.add_scalar(radius));
        let span = (0..3).map(|i| (hi[i] - lo[i] + 1) as u128).product::<u128>();
        if span > 4 * self.cells.len() as u128 {
            // The box covers more cells than exist; scan occupied cells.
            for idx in self.cells.values().flatten() {
                f(*idx);
            }
            return;
        }
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if let Some(ids) = self.cells.get(&[x, y, z]) {
                        ids.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }
}

/// Immutable collection of element frames with a radius index.
#[derive(Debug, Clone)]
pub struct BenchmarkLibrary {
    frames: Vec<ElementFrame>,
    by_id: HashMap<u64, usize>,
    index: GridIndex,
}

/// Library frame passing the distance gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub frame_id: u64,
    pub distance: f64,
}

/// Build a library from every frame that carries at least one detection.
pub fn build_library(frames: Vec<ElementFrame>, grid_cell: f64) -> Result<BenchmarkLibrary, SemlibError> {
    if !(grid_cell > 0.0) {
        return Err(SemlibError::InvalidCell(grid_cell));
    }
    let mut seen = HashSet::new();
    for f in &frames {
        if !seen.insert(f.frame_id) {
            return Err(SemlibError::DuplicateFrameId(f.frame_id));
        }
        for d in &f.detections {
            d.validate().map_err(|reason| SemlibError::InvalidDetection {
                frame_id: f.frame_id,
                reason,
            })?;
        }
    }
    let frames: Vec<ElementFrame> = frames.into_iter().filter(|f| !f.detections.is_empty()).collect();
    if frames.is_empty() {
        return Err(SemlibError::EmptyInput);
    }
    let by_id = frames.iter().enumerate().map(|(i, f)| (f.frame_id, i)).collect();
    let index = GridIndex::new(grid_cell, frames.iter().map(ElementFrame::position));
    Ok(BenchmarkLibrary { frames, by_id, index })
}

impl BenchmarkLibrary {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[ElementFrame] {
        &self.frames
    }

    pub fn frame(&self, frame_id: u64) -> Option<&ElementFrame> {
        self.by_id.get(&frame_id).map(|&i| &self.frames[i])
    }

    pub fn grid_cell(&self) -> f64 {
        self.index.cell
    }

    /// Frames strictly closer than `delta`, by ascending distance then id.
    pub fn candidates(&self, query: &Point3, delta: f64) -> Vec<Candidate> {
        let mut out = Vec::new();
        if !(delta > 0.0) {
            return out;
        }
        self.index.visit(query, delta, |i| {
            let f = &self.frames[i];
            let distance = (f.position() - query).norm();
            if distance < delta {
                out.push(Candidate {
                    frame_id: f.frame_id,
                    distance,
                });
            }
        });
        sort_candidates(&mut out);
        out
    }

    /// The `n` frames closest to `query` (ties by frame id); fewer when the
    /// library is smaller than `n`.
    pub fn nearest(&self, query: &Point3, n: usize) -> Vec<Candidate> {
        if n == 0 {
            return Vec::new();
        }
        let mut radius = self.index.cell;
        loop {
            let found = self.candidates(query, radius);
            if found.len() >= n || found.len() == self.frames.len() {
                // Everything inside the ball is closer than anything outside.
                return found.into_iter().take(n).collect();
            }
            radius *= 2.0;
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), SemlibError> {
        let w = BufWriter::new(File::create(path)?);
        wire::write_jsonl(w, self.frames.iter().map(FrameRecord::from))?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path, grid_cell: f64) -> Result<Self, SemlibError> {
        let records: Vec<FrameRecord> = wire::read_jsonl(BufReader::new(File::open(path)?))?;
        let frames = records
            .into_iter()
            .map(ElementFrame::try_from)
            .collect::<Result<Vec<_>, _>>()?;
        build_library(frames, grid_cell)
    }
}

fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.frame_id.cmp(&b.frame_id)));
}

/// Ids of frames passing the distance gate, closest first.
pub fn candidates_by_distance(lib: &BenchmarkLibrary, t_query: &Point3, delta: f64) -> Vec<u64> {
    lib.candidates(t_query, delta).into_iter().map(|c| c.frame_id).collect()
}

/// Mean box deviation over category-compatible detection pairs, or `None`
/// when no pair can be formed.
///
/// Pairs are formed greedily by ascending box-center distance within each
/// category; unpaired detections are ignored and the mean is taken over the
/// pairs that were formed.
pub fn box_deviation(current: &[SemanticDetection], stored: &[SemanticDetection]) -> Option<f64> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in current.iter().enumerate() {
        let (ax, ay) = a.center();
        for (j, b) in stored.iter().enumerate() {
            if a.category != b.category {
                continue;
            }
            let (bx, by) = b.center();
            pairs.push(((ax - bx).hypot(ay - by), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_a = vec![false; current.len()];
    let mut used_b = vec![false; stored.len()];
    let mut total = 0.0;
    let mut count = 0usize;
    for (_, i, j) in pairs {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        let (a, b) = (&current[i], &stored[j]);
        total += ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.w - b.w).powi(2) + (a.h - b.h).powi(2)).sqrt();
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

/// A successful two-stage match.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub matched_frame_id: u64,
    pub matched_pose: Pose,
    pub matched_geo: Point3,
    /// Mean box deviation in pixels.
    pub deviation: f64,
    /// Camera-position distance in meters.
    pub distance: f64,
}

/// Closest library frame passing both gates, if any.
pub fn match_frame(
    lib: &BenchmarkLibrary,
    current_pose: &Pose,
    current_detections: &[SemanticDetection],
    delta: f64,
    xi: f64,
) -> Option<MatchResult> {
    let position = current_pose.center();
    for cand in lib.candidates(&position, delta) {
        let frame = lib.frame(cand.frame_id).expect("candidate comes from library");
        let Some(deviation) = box_deviation(current_detections, &frame.detections) else {
            continue;
        };
        if deviation < xi {
            debug_assert!(cand.distance < delta);
            return Some(MatchResult {
                matched_frame_id: frame.frame_id,
                matched_pose: frame.pose,
                matched_geo: frame.geo,
                deviation,
                distance: cand.distance,
            });
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriftDecision {
    /// Accumulated drift is large: restart odometry at the matched pose.
    Reinitialize { correction_pose: Pose },
    /// Drift is small: keep the match as a soft position anchor.
    MicroCorrect,
}

pub fn drift_decision(current_pose: &Pose, m: &MatchResult, reinit_threshold: f64) -> DriftDecision {
    let gap = (current_pose.center() - m.matched_pose.center()).norm();
    if gap >= reinit_threshold {
        DriftDecision::Reinitialize {
            correction_pose: m.matched_pose,
        }
    } else {
        DriftDecision::MicroCorrect
    }
}
