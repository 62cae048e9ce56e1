//! End-to-end commands: simulate → build-library → localize → evaluate → report.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::evalkit::{self, EvalError, MetricReport, ReferenceLine, ReportedElement};
use crate::geoalign::{self, AlignmentReport, GeoAlignError, GeoTransform};
use crate::geometry::{interpolate_pose, rot_z, Intrinsics, Pixel, Point3, Pose};
use crate::optimizer::triangulation::{refine_point, triangulate_midpoint};
use crate::optimizer::{self, FactorGraph, Keyframe, MapPoint, Observation, OptimError, SemanticAnchor, Termination};
use crate::semlib::{self, BenchmarkLibrary, Category, DriftDecision, ElementFrame, SemanticDetection, SemlibError};
use crate::simworld::{self, streams, Scenario, SimError, SimFrame, WorldModel};
use crate::wire;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Semlib(#[from] SemlibError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    GeoAlign(#[from] GeoAlignError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("bad input {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl PipelineError {
    /// Process exit code: 2 config, 3 I/O and malformed inputs, 4 numerical, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Io { .. } | PipelineError::Format { .. } => 3,
            PipelineError::Sim(SimError::Config(_)) => 2,
            PipelineError::Sim(_) => 3,
            PipelineError::Semlib(SemlibError::Io(_)) | PipelineError::Semlib(SemlibError::InvalidRecord(_)) => 3,
            PipelineError::Optim(OptimError::NumericalFailure | OptimError::GaugeUnconstrained) => 4,
            PipelineError::Optim(OptimError::Io(_)) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = wire::to_json_pretty(value).map_err(|e| PipelineError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
    let w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    wire::write_jsonl(w, records).map_err(io_err(path))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    wire::read_jsonl(r).map_err(|e| PipelineError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// simulate

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SURVEY_DIR: &str = "survey";
pub const DRIVE_DIR: &str = "drive";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub scenario: Scenario,
    pub elements: usize,
    pub survey_frames: usize,
    pub drive_frames: usize,
    pub frame_rate_hz: f64,
    pub intrinsics: Intrinsics,
    pub map_bias_m: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub world: WorldModel,
    /// Mapping pass with an accurate INS; source of the benchmark library.
    pub survey: Vec<SimFrame>,
    /// The drive to localize.
    pub drive: Vec<SimFrame>,
    pub manifest: Manifest,
}

pub fn simulate(cfg: &RunConfig) -> Result<Dataset, PipelineError> {
    cfg.validate()?;
    let world = simworld::generate_world(&cfg.world, cfg.seed)?;
    let drive = simworld::simulate_drive(
        &world,
        &cfg.drive,
        &cfg.noise.drive,
        cfg.seed,
        streams::DRIVE_INS,
        streams::DRIVE_DETECTOR,
    )?;
    let survey_cfg = simworld::DriveConfig {
        start_s_m: cfg.drive.start_s_m + cfg.survey.offset_m,
        duration_s: None,
        ..cfg.drive.clone()
    };
    let survey = simworld::simulate_drive(
        &world,
        &survey_cfg,
        &cfg.noise.survey,
        cfg.seed,
        streams::SURVEY_INS,
        streams::SURVEY_DETECTOR,
    )?;
    let manifest = Manifest {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        scenario: cfg.world.scenario,
        elements: world.elements.len(),
        survey_frames: survey.len(),
        drive_frames: drive.len(),
        frame_rate_hz: cfg.drive.frame_rate_hz,
        intrinsics: cfg.drive.camera,
        map_bias_m: cfg.survey.map_bias_m,
    };
    Ok(Dataset {
        world,
        survey,
        drive,
        manifest,
    })
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    simworld::export_world(&ds.world, dir)?;
    simworld::export_frames(&ds.survey, &dir.join(SURVEY_DIR))?;
    simworld::export_frames(&ds.drive, &dir.join(DRIVE_DIR))?;
    write_json(&dir.join(MANIFEST_FILE), &ds.manifest)
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Manifest, PipelineError> {
    let ds = simulate(cfg)?;
    write_dataset(&ds, out)?;
    log::info!(
        "simulated {} elements, {} survey and {} drive frames into {}",
        ds.manifest.elements,
        ds.manifest.survey_frames,
        ds.manifest.drive_frames,
        out.display()
    );
    Ok(ds.manifest)
}

pub fn read_manifest(dataset_dir: &Path) -> Result<Manifest, PipelineError> {
    read_json(&dataset_dir.join(MANIFEST_FILE))
}

// ---------------------------------------------------------------------------
// build-library

/// Library frames from a mapping pass: INS pose as the frame pose and the
/// (biased) ground-truth camera position as its geographic stamp.
pub fn library_frames(survey: &[SimFrame], map_bias: [f64; 3]) -> Vec<ElementFrame> {
    let bias = Vector3::from(map_bias);
    survey
        .iter()
        .map(|f| ElementFrame {
            frame_id: f.frame_id,
            timestamp: f.timestamp,
            pose: f.ins_pose,
            geo: f.gt_pose.center() + bias,
            detections: f.detections.iter().map(|d| d.to_detection(true)).collect(),
        })
        .collect()
}

pub fn build_library(survey: &[SimFrame], map_bias: [f64; 3], grid_cell: f64) -> Result<BenchmarkLibrary, PipelineError> {
    Ok(semlib::build_library(library_frames(survey, map_bias), grid_cell)?)
}

pub fn cmd_build_library(dataset_dir: &Path, cfg: &RunConfig, out: &Path) -> Result<usize, PipelineError> {
    let manifest = read_manifest(dataset_dir)?;
    let survey = simworld::import_frames(&dataset_dir.join(SURVEY_DIR))?;
    let lib = build_library(&survey, manifest.map_bias_m, cfg.localize.grid_cell())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    lib.write_jsonl(out)?;
    log::info!("library of {} frames written to {}", lib.len(), out.display());
    Ok(lib.len())
}

// ---------------------------------------------------------------------------
// localize

type PointKey = (u64, u8);

fn point_id(key: PointKey) -> u64 {
    key.0 * 2 + key.1 as u64
}

/// Greedy IoU association for detections that carry no track id.
#[derive(Debug, Default)]
struct Tracker {
    previous: Vec<SemanticDetection>,
    next_id: u64,
}

fn iou(a: &SemanticDetection, b: &SemanticDetection) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.w * a.h + b.w * b.h - inter)
}

impl Tracker {
    fn assign(&mut self, dets: &mut [SemanticDetection]) {
        let mut pairs = Vec::new();
        for (i, d) in dets.iter().enumerate() {
            for (j, p) in self.previous.iter().enumerate() {
                if d.category == p.category {
                    let o = iou(d, p);
                    if o > 0.3 {
                        pairs.push((o, i, j));
                    }
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used_d = vec![false; dets.len()];
        let mut used_p = vec![false; self.previous.len()];
        for (_, i, j) in pairs {
            if !used_d[i] && !used_p[j] {
                used_d[i] = true;
                used_p[j] = true;
                dets[i].track_id = self.previous[j].track_id;
            }
        }
        for (i, d) in dets.iter_mut().enumerate() {
            if !used_d[i] {
                d.track_id = Some(self.next_id);
                self.next_id += 1;
            }
        }
        self.previous = dets.to_vec();
    }
}

/// Point observations recovered from boxes.
///
/// A sign contributes its box center. Linear elements (lane lines, barriers,
/// arrows) lie below the camera and run away from it, so their box diagonal
/// joins the near and far endpoints: bottom-left to top-right left of the
/// principal column, bottom-right to top-left right of it. Boxes touching the
/// image border are clipped and boxes straddling the principal column are
/// ambiguous; both are skipped.
///
/// A sign plate is generally not fronto-parallel, so its box center is only
/// close to (within a fraction of a pixel) the projection of the plate center.
/// That is fine for placing the sign but biases pose refinement, so callers
/// building pose factors pass `signs = false`.
fn box_observations(
    dets: &[SemanticDetection],
    intr: &Intrinsics,
    border: f64,
    center_margin: f64,
    signs: bool,
) -> Vec<(PointKey, Pixel)> {
    let (w, h) = (intr.image_width as f64, intr.image_height as f64);
    let mut out = Vec::new();
    for d in dets {
        let Some(track) = d.track_id else { continue };
        if d.x <= border || d.y <= border || d.x + d.w >= w - border || d.y + d.h >= h - border {
            continue;
        }
        if d.category == Category::Sign {
            if !signs {
                continue;
            }
            let (u, v) = d.center();
            out.push(((track, 0), Pixel::new(u, v)));
            continue;
        }
        let bottom = d.y + d.h;
        if d.x + d.w < intr.cx - center_margin {
            out.push(((track, 0), Pixel::new(d.x, bottom)));
            out.push(((track, 1), Pixel::new(d.x + d.w, d.y)));
        } else if d.x > intr.cx + center_margin {
            out.push(((track, 0), Pixel::new(d.x + d.w, bottom)));
            out.push(((track, 1), Pixel::new(d.x, d.y)));
        }
    }
    out
}

/// Correction of an INS pose: world-frame rotation `q` and position offset `dc`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Correction {
    q: Matrix3<f64>,
    dc: Vector3<f64>,
}

impl Correction {
    const IDENTITY: Correction = Correction {
        q: Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        dc: Vector3::new(0.0, 0.0, 0.0),
    };

    fn between(estimate: &Pose, ins: &Pose) -> Self {
        Self {
            q: estimate.rotation().transpose() * ins.rotation(),
            dc: estimate.center() - ins.center(),
        }
    }

    /// Keep only the rotation about the world vertical.
    fn heading_only(self) -> Self {
        let q = &self.q;
        let yaw = (q[(1, 0)] - q[(0, 1)]).atan2(q[(0, 0)] + q[(1, 1)]);
        Self { q: rot_z(yaw), ..self }
    }

    fn apply(&self, ins: &Pose) -> Pose {
        if *self == Self::IDENTITY {
            return *ins;
        }
        Pose::from_center(ins.rotation() * self.q.transpose(), ins.center() + self.dc)
    }

    fn lerp(&self, other: &Correction, alpha: f64) -> Correction {
        if self == other {
            return *self;
        }
        let q = interpolate_pose(
            &Pose::from_parts(self.q, Vector3::zeros()),
            &Pose::from_parts(other.q, Vector3::zeros()),
            alpha,
        );
        Correction {
            q: *q.rotation(),
            dc: self.dc.lerp(&other.dc, alpha),
        }
    }
}

#[derive(Debug, Clone)]
struct KfState {
    frame: usize,
    pose: Pose,
    fixed: bool,
    anchor: Option<Point3>,
    observations: Vec<(PointKey, Pixel)>,
    correction: Correction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    NoMatch,
    MicroCorrect,
    Reinitialize,
}

/// Per-keyframe match and drift decision, for ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub frame_id: u64,
    pub timestamp: f64,
    pub decision: DecisionKind,
    pub matched_frame_id: Option<u64>,
    pub deviation: Option<f64>,
    pub distance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LocalizeOutput {
    pub corrected: Vec<(u64, f64, Pose)>,
    /// Geographic camera positions.
    pub geo: Vec<(u64, f64, Point3)>,
    pub reported: Vec<ReportedElement>,
    /// Elements triangulated from the raw INS poses.
    pub reported_before: Vec<ReportedElement>,
    pub decisions: Vec<DecisionRecord>,
    pub alignment: Option<AlignmentReport>,
    pub solves: usize,
}

struct Localizer<'a> {
    cfg: &'a RunConfig,
    intr: Intrinsics,
    lib: &'a BenchmarkLibrary,
    kfs: Vec<KfState>,
    session_start: usize,
    pending: usize,
    solves: usize,
}

impl Localizer<'_> {
    fn template_graph(&self) -> Result<FactorGraph, OptimError> {
        let mut g = FactorGraph::new(self.intr);
        g.pixel_noise = self.cfg.factors.pixel_noise()?;
        g.anchor_noise = self.cfg.factors.anchor_noise()?;
        let (pk, ak) = self.cfg.factors.kernels()?;
        g.pixel_kernel = pk;
        g.anchor_kernel = ak;
        Ok(g)
    }

    /// Optimize the last `window_keyframes` keyframes of the current session.
    /// Every keyframe in the window is free unless it starts a session; the
    /// anchors fix the gauge. Holding older keyframes fixed instead would pin
    /// the window to poses that still carry uncorrected drift.
    ///
    /// Anchors along a near-straight road leave the window's roll about the
    /// road axis unobservable, so only position and heading are taken from
    /// the solve; roll and pitch stay with the gravity-referenced INS.
    fn solve_window(&mut self, ins: &[Pose]) -> Result<(), PipelineError> {
        let lc = &self.cfg.localize;
        let n = self.kfs.len();
        let lo = self.session_start.max(n.saturating_sub(lc.window_keyframes));
        self.pending = 0;
        let has_anchor = self.kfs[lo..].iter().any(|k| !k.fixed && k.anchor.is_some());
        if !has_anchor {
            return Ok(());
        }
        let mut graph = self.template_graph()?;
        let mut views: BTreeMap<PointKey, Vec<(Pose, Pixel)>> = BTreeMap::new();
        for k in &self.kfs[lo..] {
            for (key, px) in &k.observations {
                views.entry(*key).or_default().push((k.pose, *px));
            }
        }
        let min_parallax = lc.min_parallax_deg.to_radians();
        for (key, v) in &views {
            if v.len() < 2 {
                continue;
            }
            if let Some(p) = triangulate_midpoint(v, &self.intr, min_parallax) {
                let p = refine_point(v, &self.intr, p, 5);
                graph.add_point(MapPoint {
                    id: point_id(*key),
                    position: p,
                    fixed: false,
                })?;
            }
        }
        for (idx, k) in self.kfs.iter().enumerate().skip(lo) {
            let mut kf = Keyframe::new(idx as u64, k.pose);
            kf.fixed = k.fixed;
            kf.observations = k
                .observations
                .iter()
                .filter(|(key, _)| graph.points.contains_key(&point_id(*key)))
                .map(|(key, px)| Observation {
                    point_id: point_id(*key),
                    pixel: *px,
                })
                .collect();
            if !kf.fixed {
                kf.anchor = k.anchor.map(|position| SemanticAnchor {
                    position,
                    noise: graph.anchor_noise,
                });
            }
            graph.add_keyframe(kf)?;
        }
        let result = match optimizer::solve(&mut graph, &self.cfg.optimizer) {
            Ok(r) => r,
            Err(OptimError::NumericalFailure) => {
                log::warn!("window ending at keyframe {} could not be solved; keeping estimates", n - 1);
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        if result.termination == Termination::Diverged {
            log::warn!("window ending at keyframe {} diverged; keeping estimates", n - 1);
            return Ok(());
        }
        self.solves += 1;
        log::debug!(
            "solved window [{lo}, {n}): objective {} -> {} in {} iterations",
            result.history[0],
            result.final_objective,
            result.iterations
        );
        for kf in &graph.keyframes {
            if kf.fixed {
                continue;
            }
            let state = &mut self.kfs[kf.id as usize];
            state.correction = Correction::between(&kf.pose, &ins[state.frame]).heading_only();
            state.pose = state.correction.apply(&ins[state.frame]);
        }
        Ok(())
    }
}

/// Triangulate every tracked point from per-frame poses and assemble elements
/// in world coordinates.
fn triangulate_elements(
    frames: &[SimFrame],
    poses: &[Pose],
    dets: &[Vec<SemanticDetection>],
    intr: &Intrinsics,
    cfg: &RunConfig,
    keep_ids: bool,
) -> Vec<(Option<u64>, Category, Vec<Point3>)> {
    let lc = &cfg.localize;
    let mut views: BTreeMap<PointKey, Vec<(Pose, Pixel)>> = BTreeMap::new();
    let mut categories: BTreeMap<u64, Category> = BTreeMap::new();
    for (i, _) in frames.iter().enumerate() {
        for d in &dets[i] {
            if let Some(t) = d.track_id {
                categories.entry(t).or_insert(d.category);
            }
        }
        for (key, px) in box_observations(&dets[i], intr, lc.border_margin_px, lc.center_margin_px, true) {
            views.entry(key).or_default().push((poses[i], px));
        }
    }
    let min_parallax = lc.min_parallax_deg.to_radians();
    let mut points: BTreeMap<PointKey, Point3> = BTreeMap::new();
    for (key, v) in &views {
        if let Some(p) = triangulate_midpoint(v, intr, min_parallax) {
            points.insert(*key, refine_point(v, intr, p, 5));
        }
    }
    let mut out = Vec::new();
    for (track, cat) in categories {
        let id = keep_ids.then_some(track);
        if cat == Category::Sign {
            if let Some(p) = points.get(&(track, 0)) {
                out.push((id, cat, vec![*p]));
            }
        } else if let (Some(a), Some(b)) = (points.get(&(track, 0)), points.get(&(track, 1))) {
            out.push((id, cat, vec![*a, *b]));
        }
    }
    out
}

fn to_reported(
    elements: &[(Option<u64>, Category, Vec<Point3>)],
    lib: &BenchmarkLibrary,
    cfg: &RunConfig,
) -> Result<Vec<ReportedElement>, PipelineError> {
    let lc = &cfg.localize;
    elements
        .iter()
        .map(|(id, cat, pts)| {
            let center = pts.iter().sum::<Point3>() / pts.len() as f64;
            let tf = geoalign::align_near(lib, &center, lc.align_frames, lc.align_max_frames, lc.align_min_conditioning)?;
            let geo: Vec<Point3> = pts.iter().map(|p| geoalign::to_geographic(&tf, p)).collect();
            let position = geo.iter().sum::<Point3>() / geo.len() as f64;
            Ok(ReportedElement {
                element_id: *id,
                category: *cat,
                position: wire::point_array(&position),
                vertices: if cat.is_linear() { geo.iter().map(wire::point_array).collect() } else { Vec::new() },
            })
        })
        .collect()
}

/// Localize a drive against the library.
pub fn localize(
    frames: &[SimFrame],
    intr: &Intrinsics,
    lib: &BenchmarkLibrary,
    cfg: &RunConfig,
) -> Result<LocalizeOutput, PipelineError> {
    cfg.validate()?;
    let lc = &cfg.localize;
    let keep_ids = !lc.strip_ids;
    let mut tracker = Tracker::default();
    let dets: Vec<Vec<SemanticDetection>> = frames
        .iter()
        .map(|f| {
            let mut d: Vec<SemanticDetection> = f.detections.iter().map(|d| d.to_detection(keep_ids)).collect();
            if !keep_ids {
                tracker.assign(&mut d);
            }
            d
        })
        .collect();
    let ins: Vec<Pose> = frames.iter().map(|f| f.ins_pose).collect();

    let mut loc = Localizer {
        cfg,
        intr: *intr,
        lib,
        kfs: Vec::new(),
        session_start: 0,
        pending: 0,
        solves: 0,
    };
    let mut decisions = Vec::new();
    let n = frames.len();
    for (i, f) in frames.iter().enumerate() {
        let is_last = i + 1 == n;
        if i % lc.keyframe_interval != 0 && !is_last {
            continue;
        }
        let correction = loc.kfs.last().map_or(Correction::IDENTITY, |k| k.correction);
        let predicted = correction.apply(&ins[i]);
        let mut state = KfState {
            frame: i,
            pose: predicted,
            fixed: loc.kfs.is_empty(),
            anchor: None,
            observations: box_observations(&dets[i], intr, lc.border_margin_px, lc.center_margin_px, false),
            correction,
        };
        let matched = semlib::match_frame(loc.lib, &predicted, &dets[i], lc.delta_m, lc.xi_px);
        let decision = match &matched {
            None => DecisionKind::NoMatch,
            Some(m) => match semlib::drift_decision(&predicted, m, lc.reinit_threshold_m) {
                DriftDecision::Reinitialize { correction_pose } => {
                    state.pose = correction_pose;
                    state.fixed = true;
                    state.correction = Correction::between(&correction_pose, &ins[i]);
                    DecisionKind::Reinitialize
                }
                DriftDecision::MicroCorrect => {
                    state.anchor = Some(m.matched_pose.center());
                    DecisionKind::MicroCorrect
                }
            },
        };
        decisions.push(DecisionRecord {
            frame_id: f.frame_id,
            timestamp: f.timestamp,
            decision,
            matched_frame_id: matched.as_ref().map(|m| m.matched_frame_id),
            deviation: matched.as_ref().map(|m| m.deviation),
            distance: matched.as_ref().map(|m| m.distance),
        });
        if decision == DecisionKind::Reinitialize {
            // Earlier keyframes no longer constrain the new session.
            loc.session_start = loc.kfs.len();
            loc.pending = 0;
        }
        loc.kfs.push(state);
        loc.pending += 1;
        if loc.pending >= lc.solve_every || is_last {
            loc.solve_window(&ins)?;
        }
    }

    // Per-frame poses: corrections interpolated between keyframes.
    let mut corrected = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    let mut next_kf = 0usize;
    for (i, f) in frames.iter().enumerate() {
        while next_kf < loc.kfs.len() && loc.kfs[next_kf].frame < i {
            next_kf += 1;
        }
        let c = match (next_kf.checked_sub(1).map(|p| &loc.kfs[p]), loc.kfs.get(next_kf)) {
            (_, Some(b)) if b.frame == i => b.correction,
            (Some(a), Some(b)) => a.correction.lerp(&b.correction, (i - a.frame) as f64 / (b.frame - a.frame) as f64),
            (Some(a), None) => a.correction,
            (None, Some(b)) => b.correction,
            (None, None) => Correction::IDENTITY,
        };
        let pose = match loc.kfs.get(next_kf) {
            Some(k) if k.frame == i => k.pose,
            _ => c.apply(&ins[i]),
        };
        poses.push(pose);
        corrected.push((f.frame_id, f.timestamp, pose));
    }

    let mut geo = Vec::with_capacity(n);
    let mut alignment = None;
    for (id, t, pose) in &corrected {
        let c = pose.center();
        let tf: GeoTransform =
            geoalign::align_near(lib, &c, lc.align_frames, lc.align_max_frames, lc.align_min_conditioning)?;
        if tf.rms_residual > 3.0 * lc_expected_align_rms(cfg) {
            log::warn!("frame {id}: alignment rms {:.3} m exceeds 3x the expected noise", tf.rms_residual);
        }
        alignment = Some(tf.report());
        geo.push((*id, *t, geoalign::to_geographic(&tf, &c)));
    }

    let elements = triangulate_elements(frames, &poses, &dets, intr, cfg, keep_ids);
    let elements_before = triangulate_elements(frames, &ins, &dets, intr, cfg, keep_ids);
    Ok(LocalizeOutput {
        corrected,
        geo,
        reported: to_reported(&elements, lib, cfg)?,
        reported_before: to_reported(&elements_before, lib, cfg)?,
        decisions,
        alignment,
        solves: loc.solves,
    })
}

/// Alignment residual expected from the mapping pass's steady-state INS error.
fn lc_expected_align_rms(cfg: &RunConfig) -> f64 {
    let s = &cfg.noise.survey;
    let steady = match s.gnss_correction_time_s {
        Some(tau) => s.ins_bias_rw_sigma * (tau / 2.0).sqrt(),
        None => s.ins_bias_rw_sigma,
    };
    steady.max(0.05)
}

pub const CORRECTED_FILE: &str = "corrected_trajectory.csv";
pub const GEO_FILE: &str = "geo_trajectory.csv";
pub const REPORTED_FILE: &str = "reported_elements.jsonl";
pub const REPORTED_BEFORE_FILE: &str = "reported_elements_before.jsonl";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const ALIGNMENT_FILE: &str = "alignment.json";

pub fn write_localize_output(out: &LocalizeOutput, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(CORRECTED_FILE);
    simworld::write_trajectory_csv(&path, out.corrected.iter().copied()).map_err(io_err(&path))?;
    let path = dir.join(GEO_FILE);
    let mut text = String::from("frame_id,timestamp,east,north,up\n");
    for (id, t, p) in &out.geo {
        text.push_str(&id.to_string());
        for x in [*t, p.x, p.y, p.z] {
            text.push(',');
            wire::push_f64(&mut text, x);
        }
        text.push('\n');
    }
    fs::write(&path, text).map_err(io_err(&path))?;
    write_jsonl(&dir.join(REPORTED_FILE), &out.reported)?;
    write_jsonl(&dir.join(REPORTED_BEFORE_FILE), &out.reported_before)?;
    write_jsonl(&dir.join(DECISIONS_FILE), &out.decisions)?;
    if let Some(a) = &out.alignment {
        write_json(&dir.join(ALIGNMENT_FILE), a)?;
    }
    Ok(())
}

pub fn cmd_localize(dataset_dir: &Path, library_path: &Path, cfg: &RunConfig, out: &Path) -> Result<LocalizeOutput, PipelineError> {
    let manifest = read_manifest(dataset_dir)?;
    let frames = simworld::import_frames(&dataset_dir.join(DRIVE_DIR))?;
    let lib = BenchmarkLibrary::read_jsonl(library_path, cfg.localize.grid_cell())?;
    let result = localize(&frames, &manifest.intrinsics, &lib, cfg)?;
    write_localize_output(&result, out)?;
    log::info!(
        "localized {} frames ({} solves); {} elements reported",
        result.corrected.len(),
        result.solves,
        result.reported.len()
    );
    Ok(result)
}

// ---------------------------------------------------------------------------
// evaluate / report

pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_BEFORE_FILE: &str = "metrics_before.json";
pub const TABLE_FILE: &str = "metrics.txt";

fn centers(rows: &[(u64, f64, Pose)]) -> Vec<(f64, Point3)> {
    rows.iter().map(|(_, t, p)| (*t, p.center())).collect()
}

/// Evaluate reported elements and a trajectory against the simulated truth.
pub fn evaluate_run(
    method: &str,
    reported: &[ReportedElement],
    trajectory: &[(u64, f64, Pose)],
    world: &[simworld::WorldElement],
    gt_trajectory: &[(u64, f64, Pose)],
    cfg: &RunConfig,
) -> Result<MetricReport, PipelineError> {
    let gt: Vec<ReportedElement> = world.iter().map(ReportedElement::from_world).collect();
    let gt_centers = centers(gt_trajectory);
    let line = ReferenceLine::new(gt_centers.iter().map(|(_, p)| *p).collect());
    let mut report = evalkit::evaluate(method, reported, &gt, &line, &cfg.eval)?;
    report.ate = Some(evalkit::trajectory_ate(&centers(trajectory), &gt_centers)?);
    Ok(report)
}

pub fn cmd_evaluate(
    dataset_dir: &Path,
    run_dir: &Path,
    cfg: &RunConfig,
    out: &Path,
    before_after: bool,
) -> Result<Vec<MetricReport>, PipelineError> {
    let world = simworld::read_world_elements(&dataset_dir.join(simworld::WORLD_FILE))?;
    let drive_dir = dataset_dir.join(DRIVE_DIR);
    let gt = simworld::read_trajectory_csv(&drive_dir.join(simworld::GT_TRAJECTORY_FILE))?;
    let corrected = simworld::read_trajectory_csv(&run_dir.join(CORRECTED_FILE))?;
    let reported: Vec<ReportedElement> = read_jsonl(&run_dir.join(REPORTED_FILE))?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut reports = Vec::new();
    if before_after {
        let ins = simworld::read_trajectory_csv(&drive_dir.join(simworld::INS_TRAJECTORY_FILE))?;
        let before: Vec<ReportedElement> = read_jsonl(&run_dir.join(REPORTED_BEFORE_FILE))?;
        let r = evaluate_run("Before optimization", &before, &ins, &world, &gt, cfg)?;
        write_json(&out.join(METRICS_BEFORE_FILE), &r)?;
        reports.push(r);
    }
    let r = evaluate_run("After optimization", &reported, &corrected, &world, &gt, cfg)?;
    write_json(&out.join(METRICS_FILE), &r)?;
    reports.push(r);
    let path = out.join(TABLE_FILE);
    fs::write(&path, evalkit::format_table(&reports)).map_err(io_err(&path))?;
    Ok(reports)
}

/// Text table of the metric reports found in `dir`.
pub fn cmd_report(dir: &Path) -> Result<String, PipelineError> {
    let mut reports: Vec<MetricReport> = Vec::new();
    for name in [METRICS_BEFORE_FILE, METRICS_FILE] {
        let path = dir.join(name);
        if path.exists() {
            reports.push(read_json(&path)?);
        }
    }
    if reports.is_empty() {
        return Err(PipelineError::Io {
            path: dir.join(METRICS_FILE),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no metric reports"),
        });
    }
    Ok(evalkit::format_table(&reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(category: Category, x: f64, y: f64, w: f64, h: f64, track: u64) -> SemanticDetection {
        SemanticDetection {
            category,
            x,
            y,
            w,
            h,
            track_id: Some(track),
        }
    }

    #[test]
    fn box_diagonals_follow_image_side() {
        let intr = Intrinsics::uhd_90deg();
        let dets = [
            det(Category::LaneBoundary, 100.0, 1500.0, 400.0, 300.0, 1),
            det(Category::LaneBoundary, 3000.0, 1500.0, 400.0, 300.0, 2),
            det(Category::LaneBoundary, 1800.0, 1500.0, 400.0, 300.0, 3),
            det(Category::Sign, 2500.0, 500.0, 100.0, 80.0, 4),
            det(Category::Sign, 0.0, 500.0, 100.0, 80.0, 5),
        ];
        let obs = box_observations(&dets, &intr, 2.0, 64.0, true);
        assert_eq!(
            obs,
            vec![
                ((1, 0), Pixel::new(100.0, 1800.0)),
                ((1, 1), Pixel::new(500.0, 1500.0)),
                ((2, 0), Pixel::new(3400.0, 1800.0)),
                ((2, 1), Pixel::new(3000.0, 1500.0)),
                ((4, 0), Pixel::new(2550.0, 540.0)),
            ]
        );
    }

    #[test]
    fn tracker_links_overlapping_boxes() {
        let mut t = Tracker::default();
        let mut a = vec![det(Category::Sign, 10.0, 10.0, 50.0, 50.0, 0), det(Category::Arrow, 500.0, 10.0, 50.0, 50.0, 0)];
        t.assign(&mut a);
        let mut b = vec![det(Category::Arrow, 505.0, 12.0, 50.0, 50.0, 0), det(Category::Sign, 900.0, 10.0, 50.0, 50.0, 0)];
        t.assign(&mut b);
        assert_eq!(b[0].track_id, a[1].track_id);
        assert_ne!(b[1].track_id, a[0].track_id);
    }

    #[test]
    fn correction_round_trip() {
        let ins = Pose::from_center(crate::geometry::vehicle_camera_rotation(0.3, 0.01), Point3::new(1500.0, -20.0, 3.0));
        let est = Pose::from_center(crate::geometry::vehicle_camera_rotation(0.305, 0.01), Point3::new(1500.7, -19.2, 2.9));
        let c = Correction::between(&est, &ins);
        assert!(c.apply(&ins).max_abs_diff(&est) < 1e-9);
        assert_eq!(Correction::IDENTITY.apply(&ins), ins);
        let half = Correction::IDENTITY.lerp(&c, 0.5);
        assert!((half.dc - c.dc * 0.5).norm() < 1e-12);
    }
}
