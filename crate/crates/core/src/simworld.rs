//! Deterministic synthetic road worlds, drives and detections.
//!
//! The world frame is ENU. A route is a centerline sampled every metre; road
//! elements are laid out at lateral offsets from it (positive to the left).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    interpolate_pose, project, row_capture_fraction, rot_z, vehicle_camera_rotation, Intrinsics, Pixel, Point3, Pose,
    DEPTH_EPSILON,
};
use crate::semlib::{Category, SemanticDetection};
use crate::wire::{self, PoseRecord};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("bad dataset file {file}: {reason}")]
    Format { file: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named random sub-streams, so each component can be re-seeded alone.
pub mod streams {
    pub const WORLD: u64 = 1;
    pub const DRIVE_INS: u64 = 2;
    pub const DRIVE_DETECTOR: u64 = 3;
    pub const SURVEY_INS: u64 = 4;
    pub const SURVEY_DETECTOR: u64 = 5;
}

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Urban,
    Highway,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub scenario: Scenario,
    pub route_length_m: f64,
    pub sign_spacing_m: f64,
    pub lanes: usize,
    pub lane_width_m: f64,
    pub dash_length_m: f64,
    pub dash_gap_m: f64,
    /// Solid lines and barriers are emitted as pieces of this length.
    pub segment_length_m: f64,
    pub arrow_spacing_m: f64,
    pub arrow_length_m: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Highway,
            route_length_m: 1000.0,
            sign_spacing_m: 100.0,
            lanes: 3,
            lane_width_m: 3.75,
            dash_length_m: 6.0,
            dash_gap_m: 9.0,
            segment_length_m: 10.0,
            arrow_spacing_m: 50.0,
            arrow_length_m: 5.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("route_length_m", self.route_length_m),
            ("sign_spacing_m", self.sign_spacing_m),
            ("lane_width_m", self.lane_width_m),
            ("dash_length_m", self.dash_length_m),
            ("segment_length_m", self.segment_length_m),
            ("arrow_spacing_m", self.arrow_spacing_m),
            ("arrow_length_m", self.arrow_length_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.dash_gap_m >= 0.0) {
            return Err(SimError::Config("dash_gap_m must be non-negative".into()));
        }
        if self.lanes == 0 {
            return Err(SimError::Config("lanes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Vertical rectangle facing along `yaw` (a sign plate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 3],
    pub width: f64,
    pub height: f64,
    /// Direction of the plate normal, radians from +x toward +y.
    pub yaw: f64,
}

impl OrientedBox {
    pub fn corners(&self) -> [Point3; 4] {
        let c = Point3::from(self.center);
        let across = Vector3::new(-self.yaw.sin(), self.yaw.cos(), 0.0) * (0.5 * self.width);
        let up = Vector3::new(0.0, 0.0, 0.5 * self.height);
        [c - across - up, c + across - up, c + across + up, c - across + up]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementGeometry {
    Polyline(Vec<[f64; 3]>),
    Box(OrientedBox),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldElement {
    pub element_id: u64,
    pub category: Category,
    pub geometry: ElementGeometry,
}

impl WorldElement {
    /// Vertices used for projection and evaluation.
    pub fn vertices(&self) -> Vec<Point3> {
        match &self.geometry {
            ElementGeometry::Polyline(v) => v.iter().map(|p| Point3::from(*p)).collect(),
            ElementGeometry::Box(b) => b.corners().to_vec(),
        }
    }

    /// Representative position: the box center or the polyline vertex mean.
    pub fn position(&self) -> Point3 {
        match &self.geometry {
            ElementGeometry::Box(b) => Point3::from(b.center),
            ElementGeometry::Polyline(v) => v.iter().map(|p| Point3::from(*p)).sum::<Point3>() / v.len() as f64,
        }
    }
}

/// Centerline sampled at a fixed arc-length step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub step_m: f64,
    /// `[x, y, z, heading]` per sample.
    pub samples: Vec<[f64; 4]>,
}

impl Route {
    pub fn length(&self) -> f64 {
        self.step_m * (self.samples.len().saturating_sub(1)) as f64
    }

    /// Centerline point, heading and pitch at arc length `s` (clamped).
    pub fn at(&self, s: f64) -> (Point3, f64, f64) {
        let n = self.samples.len();
        let x = (s / self.step_m).clamp(0.0, (n - 1) as f64);
        let i = (x.floor() as usize).min(n - 2);
        let a = x - i as f64;
        let (p, q) = (self.samples[i], self.samples[i + 1]);
        let pos = Point3::new(p[0] + a * (q[0] - p[0]), p[1] + a * (q[1] - p[1]), p[2] + a * (q[2] - p[2]));
        let heading = p[3] + a * (q[3] - p[3]);
        let pitch = ((q[2] - p[2]) / self.step_m).atan();
        (pos, heading, pitch)
    }

    /// Point at arc length `s`, lateral offset `l` (left positive) and height `h`.
    pub fn offset(&self, s: f64, l: f64, h: f64) -> Point3 {
        let (c, heading, _) = self.at(s);
        c + Vector3::new(-heading.sin(), heading.cos(), 0.0) * l + Vector3::new(0.0, 0.0, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub elements: Vec<WorldElement>,
    pub lane_width: f64,
    pub lanes: usize,
    pub scenario: Scenario,
    pub seed: u64,
    pub route: Route,
    /// Arc-length interval covered by each element, parallel to `elements`.
    spans: Vec<(f64, f64)>,
}

impl WorldModel {
    pub fn new(elements: Vec<WorldElement>, lane_width: f64, lanes: usize, scenario: Scenario, seed: u64, route: Route) -> Self {
        let spans = elements.iter().map(|e| element_span(&route, e)).collect();
        Self {
            elements,
            lane_width,
            lanes,
            scenario,
            seed,
            route,
            spans,
        }
    }

    pub fn element(&self, id: u64) -> Option<&WorldElement> {
        self.elements.iter().find(|e| e.element_id == id)
    }

    /// Lateral offset of a lane center, lanes numbered from the left from 0.
    pub fn lane_center_offset(&self, lane: usize) -> f64 {
        (self.lanes as f64 / 2.0 - lane as f64 - 0.5) * self.lane_width
    }
}

/// Arc-length range of an element, found by nearest centerline sample.
fn element_span(route: &Route, e: &WorldElement) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in e.vertices() {
        let guess = nearest_sample(route, &v);
        lo = lo.min(guess);
        hi = hi.max(guess);
    }
    (lo, hi)
}

fn nearest_sample(route: &Route, p: &Point3) -> f64 {
    let mut best = (f64::INFINITY, 0usize);
    for (i, s) in route.samples.iter().enumerate() {
        let d = (s[0] - p.x).powi(2) + (s[1] - p.y).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1 as f64 * route.step_m
}

const ROUTE_STEP_M: f64 = 1.0;
const URBAN_BLOCK_M: f64 = 120.0;
const URBAN_INTERSECTION_M: f64 = 20.0;

fn build_route(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> (Route, Vec<(f64, f64)>) {
    let n = (cfg.route_length_m / ROUTE_STEP_M).ceil() as usize + 1;
    let mut samples = Vec::with_capacity(n);
    let mut intersections = Vec::new();
    let (mut x, mut y) = (0.0, 0.0);
    match cfg.scenario {
        Scenario::Highway => {
            // Gentle sinusoidal curvature keeps the heading within a few degrees.
            let h0 = rng.random_range(-0.02..0.02);
            let amp = rng.random_range(0.04..0.08);
            let period = rng.random_range(600.0..1000.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let z_amp = rng.random_range(0.5..1.5);
            let z_period = rng.random_range(500.0..900.0);
            for i in 0..n {
                let s = i as f64 * ROUTE_STEP_M;
                let h = h0 + amp * (std::f64::consts::TAU * s / period + phase).sin();
                let z = z_amp * (std::f64::consts::TAU * s / z_period).sin();
                samples.push([x, y, z, h]);
                x += ROUTE_STEP_M * h.cos();
                y += ROUTE_STEP_M * h.sin();
            }
        }
        Scenario::Urban => {
            // Straight blocks; the heading turns through each intersection.
            let mut h = rng.random_range(-0.1..0.1);
            let mut turn_start = URBAN_BLOCK_M;
            let mut target = h;
            let mut base = h;
            for i in 0..n {
                let s = i as f64 * ROUTE_STEP_M;
                if s >= turn_start && s < turn_start + URBAN_INTERSECTION_M {
                    if s == turn_start {
                        base = h;
                        target = h + rng.random_range(-0.17..0.17);
                        intersections.push((turn_start, turn_start + URBAN_INTERSECTION_M));
                    }
                    h = base + (target - base) * (s - turn_start) / URBAN_INTERSECTION_M;
                } else if s >= turn_start + URBAN_INTERSECTION_M {
                    h = target;
                    turn_start += URBAN_BLOCK_M + URBAN_INTERSECTION_M;
                }
                samples.push([x, y, 0.0, h]);
                x += ROUTE_STEP_M * h.cos();
                y += ROUTE_STEP_M * h.sin();
            }
        }
    }
    (
        Route {
            step_m: ROUTE_STEP_M,
            samples,
        },
        intersections,
    )
}

/// Generate the road elements for a route.
///
/// Signs stand at `k · sign_spacing_m` for `k = 1..=floor(L / spacing)`, so a
/// 1000 m route with 100 m spacing has 10 signs (none at the start).
pub fn generate_world(cfg: &WorldConfig, seed: u64) -> Result<WorldModel, SimError> {
    cfg.validate()?;
    let mut rng = substream(seed, streams::WORLD);
    let (route, intersections) = build_route(cfg, &mut rng);
    let length = cfg.route_length_m;
    let in_intersection = |a: f64, b: f64| intersections.iter().any(|&(lo, hi)| a < hi && b > lo);
    let mut elements = Vec::new();
    let mut next_id = 1u64;
    let mut push = |category, geometry| {
        elements.push(WorldElement {
            element_id: next_id,
            category,
            geometry,
        });
        next_id += 1;
    };
    let polyline = |a: f64, b: f64, l: f64, h: f64| {
        let k = ((b - a) / ROUTE_STEP_M).round().max(1.0) as usize;
        ElementGeometry::Polyline(
            (0..=k)
                .map(|i| wire::point_array(&route.offset(a + (b - a) * i as f64 / k as f64, l, h)))
                .collect(),
        )
    };

    let half = cfg.lanes as f64 / 2.0 * cfg.lane_width_m;
    for k in 0..=cfg.lanes {
        let l = half - k as f64 * cfg.lane_width_m;
        let solid = k == 0 || k == cfg.lanes;
        let (len, period) = if solid {
            (cfg.segment_length_m, cfg.segment_length_m)
        } else {
            (cfg.dash_length_m, cfg.dash_length_m + cfg.dash_gap_m)
        };
        let mut s = 0.0;
        while s + len <= length + 1e-9 {
            if !in_intersection(s, s + len) {
                push(Category::LaneBoundary, polyline(s, s + len, l, 0.0));
            }
            s += period;
        }
    }
    for side in [1.0, -1.0] {
        let l = side * (half + 1.0);
        let mut s = 0.0;
        while s + cfg.segment_length_m <= length + 1e-9 {
            if !in_intersection(s, s + cfg.segment_length_m) {
                push(Category::RoadsideBarrier, polyline(s, s + cfg.segment_length_m, l, 0.8));
            }
            s += cfg.segment_length_m;
        }
    }
    let mut s = 0.5 * cfg.arrow_spacing_m;
    while s + cfg.arrow_length_m <= length {
        if !in_intersection(s, s + cfg.arrow_length_m) {
            for lane in 0..cfg.lanes {
                let l = half - (lane as f64 + 0.5) * cfg.lane_width_m;
                push(Category::Arrow, polyline(s, s + cfg.arrow_length_m, l, 0.0));
            }
        }
        s += cfg.arrow_spacing_m;
    }
    let n_signs = (length / cfg.sign_spacing_m + 1e-9).floor() as usize;
    for k in 1..=n_signs {
        let s = k as f64 * cfg.sign_spacing_m;
        let (_, heading, _) = route.at(s);
        push(
            Category::Sign,
            ElementGeometry::Box(OrientedBox {
                center: wire::point_array(&route.offset(s, -(half + 3.0), 4.0)),
                width: rng.random_range(1.5..2.5),
                height: rng.random_range(1.0..1.8),
                yaw: heading,
            }),
        );
    }
    Ok(WorldModel::new(elements, cfg.lane_width_m, cfg.lanes, cfg.scenario, seed, route))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorNoiseConfig {
    /// INS translation random walk, m/√s.
    pub ins_bias_rw_sigma: f64,
    /// INS heading random walk, rad/√s.
    pub ins_heading_rw_sigma: f64,
    pub pixel_sigma: f64,
    pub detection_dropout: f64,
    /// `[start, end)` times in seconds without GNSS.
    pub gnss_outage_windows: Vec<[f64; 2]>,
    /// Time constant with which GNSS pulls the INS error back to zero
    /// outside outages; `None` leaves the error unconstrained throughout.
    pub gnss_correction_time_s: Option<f64>,
}

impl Default for SensorNoiseConfig {
    fn default() -> Self {
        Self {
            ins_bias_rw_sigma: 0.05,
            ins_heading_rw_sigma: 0.002,
            pixel_sigma: 1.0,
            detection_dropout: 0.0,
            gnss_outage_windows: Vec::new(),
            gnss_correction_time_s: Some(5.0),
        }
    }
}

impl SensorNoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            ins_bias_rw_sigma: 0.0,
            ins_heading_rw_sigma: 0.0,
            pixel_sigma: 0.0,
            detection_dropout: 0.0,
            gnss_outage_windows: Vec::new(),
            gnss_correction_time_s: None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("ins_bias_rw_sigma", self.ins_bias_rw_sigma),
            ("ins_heading_rw_sigma", self.ins_heading_rw_sigma),
            ("pixel_sigma", self.pixel_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::Config(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.detection_dropout) {
            return Err(SimError::Config("detection_dropout must lie in [0, 1]".into()));
        }
        if self.gnss_outage_windows.iter().any(|w| !(w[0] <= w[1])) {
            return Err(SimError::Config("outage window end precedes start".into()));
        }
        if let Some(tau) = self.gnss_correction_time_s {
            if !(tau > 0.0) {
                return Err(SimError::Config("gnss_correction_time_s must be positive".into()));
            }
        }
        Ok(())
    }

    fn in_outage(&self, t: f64) -> bool {
        self.gnss_outage_windows.iter().any(|w| t >= w[0] && t < w[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveConfig {
    pub speed_mps: f64,
    pub frame_rate_hz: f64,
    /// Defaults to the time needed to reach `max_range_m` before the route end.
    pub duration_s: Option<f64>,
    /// Arc length at the first frame.
    pub start_s_m: f64,
    /// Lane index counted from the left.
    pub ego_lane: usize,
    pub camera_height_m: f64,
    pub camera_pitch_rad: f64,
    /// Elements farther ahead than this are not detected.
    pub max_range_m: f64,
    pub camera: Intrinsics,
}

impl Default for DriveConfig {
    fn default() -> Self {
        Self {
            speed_mps: 20.0,
            frame_rate_hz: 30.0,
            duration_s: None,
            start_s_m: 0.0,
            ego_lane: 1,
            camera_height_m: 1.5,
            camera_pitch_rad: 0.0,
            max_range_m: 80.0,
            camera: Intrinsics::uhd_90deg(),
        }
    }
}

impl DriveConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.speed_mps > 0.0) {
            return Err(SimError::Config("speed_mps must be positive".into()));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(SimError::Config("frame_rate_hz must be positive".into()));
        }
        if let Some(d) = self.duration_s {
            if !(d >= 0.0) {
                return Err(SimError::Config("duration_s must be non-negative".into()));
            }
        }
        if !(self.max_range_m > 0.0) {
            return Err(SimError::Config("max_range_m must be positive".into()));
        }
        self.camera.validate().map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn frame_count(&self, world: &WorldModel) -> usize {
        let duration = self.duration_s.unwrap_or_else(|| {
            ((world.route.length() - self.max_range_m - self.start_s_m) / self.speed_mps).max(0.0)
        });
        (duration * self.frame_rate_hz + 1e-9).floor() as usize
    }
}

/// A detection with the id of the world element that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimDetection {
    pub category: Category,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub element_id: u64,
}

impl SimDetection {
    /// Library/matcher form; the element id becomes the track id unless stripped.
    pub fn to_detection(&self, keep_ids: bool) -> SemanticDetection {
        SemanticDetection {
            category: self.category,
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
            track_id: keep_ids.then_some(self.element_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub gt_pose: Pose,
    pub ins_pose: Pose,
    pub detections: Vec<SimDetection>,
}

/// Ground-truth camera pose at arc length `s`.
pub fn camera_pose_at(world: &WorldModel, cfg: &DriveConfig, s: f64) -> Pose {
    let (_, heading, pitch) = world.route.at(s);
    let center = world.route.offset(s, world.lane_center_offset(cfg.ego_lane), cfg.camera_height_m);
    Pose::from_center(vehicle_camera_rotation(heading, pitch + cfg.camera_pitch_rad), center)
}

/// Project a world point with a rolling shutter: the row is exposed at the
/// fraction `v / (H − 1)` of the readout, and the pose at that instant is
/// interpolated between `pose0` (frame start) and `pose1` (one frame later).
///
/// `readout_fraction` is readout time over frame period. Solved by
/// fixed-point iteration on the row.
pub fn project_rolling_shutter(
    intr: &Intrinsics,
    pose0: &Pose,
    pose1: &Pose,
    readout_fraction: f64,
    p_w: &Point3,
) -> Option<Pixel> {
    let mut px = project(intr, &pose0.transform_point(p_w)).ok()?;
    if readout_fraction == 0.0 {
        return Some(px);
    }
    let last_row = (intr.image_height - 1) as f64;
    for _ in 0..50 {
        let row = px.v.clamp(0.0, last_row);
        let frac = row_capture_fraction(intr, row).unwrap_or(1.0);
        let pose = interpolate_pose(pose0, pose1, frac * readout_fraction);
        let next = project(intr, &pose.transform_point(p_w)).ok()?;
        let moved = (next.v - px.v).abs() + (next.u - px.u).abs();
        px = next;
        if moved < 1e-12 {
            break;
        }
    }
    Some(px)
}

/// Box of the projected vertices, clipped to the image, or `None` when fewer
/// than two vertices are visible.
pub fn detect_element(
    intr: &Intrinsics,
    pose0: &Pose,
    pose1: &Pose,
    readout_fraction: f64,
    element: &WorldElement,
) -> Option<[f64; 4]> {
    let mut visible = 0;
    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in element.vertices() {
        if pose0.transform_point(&v).z <= DEPTH_EPSILON {
            continue;
        }
        let Some(px) = project_rolling_shutter(intr, pose0, pose1, readout_fraction, &v) else {
            continue;
        };
        if intr.contains(&px) {
            visible += 1;
        }
        u0 = u0.min(px.u);
        v0 = v0.min(px.v);
        u1 = u1.max(px.u);
        v1 = v1.max(px.v);
    }
    if visible < 2 {
        return None;
    }
    let (w, h) = (intr.image_width as f64, intr.image_height as f64);
    Some([u0.clamp(0.0, w), v0.clamp(0.0, h), u1.clamp(0.0, w), v1.clamp(0.0, h)])
}

/// Drive along the route and produce per-frame poses and detections.
///
/// `ins_stream`/`detector_stream` select the random sub-streams so that two
/// passes over the same world use independent noise.
pub fn simulate_drive(
    world: &WorldModel,
    cfg: &DriveConfig,
    noise: &SensorNoiseConfig,
    seed: u64,
    ins_stream: u64,
    detector_stream: u64,
) -> Result<Vec<SimFrame>, SimError> {
    cfg.validate()?;
    noise.validate()?;
    let mut ins_rng = substream(seed, ins_stream);
    let mut det_rng = substream(seed, detector_stream);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let dt = 1.0 / cfg.frame_rate_hz;
    let readout_fraction = cfg.camera.readout_time / dt;
    let n = cfg.frame_count(world);

    // Elements ordered by the start of their arc-length span for windowed lookup.
    let mut order: Vec<usize> = (0..world.elements.len()).collect();
    order.sort_by(|&a, &b| world.spans[a].0.total_cmp(&world.spans[b].0).then(a.cmp(&b)));

    let mut drift = Vector3::zeros();
    let mut yaw_err = 0.0f64;
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * dt;
        let s = cfg.start_s_m + cfg.speed_mps * t;
        let gt_pose = camera_pose_at(world, cfg, s);
        if k > 0 {
            let sq = dt.sqrt();
            drift += Vector3::new(
                std_normal.sample(&mut ins_rng),
                std_normal.sample(&mut ins_rng),
                std_normal.sample(&mut ins_rng),
            ) * (noise.ins_bias_rw_sigma * sq);
            yaw_err += std_normal.sample(&mut ins_rng) * noise.ins_heading_rw_sigma * sq;
            if let (Some(tau), false) = (noise.gnss_correction_time_s, noise.in_outage(t)) {
                let decay = (-dt / tau).exp();
                drift *= decay;
                yaw_err *= decay;
            }
        }
        let ins_pose = if drift == Vector3::zeros() && yaw_err == 0.0 {
            gt_pose
        } else {
            Pose::from_center(gt_pose.rotation() * rot_z(-yaw_err), gt_pose.center() + drift)
        };

        let next_pose = camera_pose_at(world, cfg, s + cfg.speed_mps * dt);
        let mut detections = Vec::new();
        for &i in &order {
            let (lo, hi) = world.spans[i];
            if lo > s + cfg.max_range_m {
                break;
            }
            if hi < s {
                continue;
            }
            let e = &world.elements[i];
            let Some(b) = detect_element(&cfg.camera, &gt_pose, &next_pose, readout_fraction, e) else {
                continue;
            };
            if noise.detection_dropout > 0.0 && det_rng.random::<f64>() < noise.detection_dropout {
                continue;
            }
            let mut b = b;
            if noise.pixel_sigma > 0.0 {
                for c in &mut b {
                    *c += std_normal.sample(&mut det_rng) * noise.pixel_sigma;
                }
                let (w, h) = (cfg.camera.image_width as f64, cfg.camera.image_height as f64);
                b = [b[0].clamp(0.0, w), b[1].clamp(0.0, h), b[2].clamp(0.0, w), b[3].clamp(0.0, h)];
            }
            let (x0, x1) = (b[0].min(b[2]), b[0].max(b[2]));
            let (y0, y1) = (b[1].min(b[3]), b[1].max(b[3]));
            if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
                continue;
            }
            detections.push(SimDetection {
                category: e.category,
                x: x0,
                y: y0,
                w: x1 - x0,
                h: y1 - y0,
                element_id: e.element_id,
            });
        }
        frames.push(SimFrame {
            frame_id: k as u64,
            timestamp: t,
            gt_pose,
            ins_pose,
            detections,
        });
    }
    Ok(frames)
}

// ---------------------------------------------------------------------------
// Files

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameRecord {
    frame_id: u64,
    timestamp: f64,
    gt_pose: PoseRecord,
    ins_pose: PoseRecord,
    detections: Vec<SimDetection>,
}

/// World-level metadata stored next to `world.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldMeta {
    pub lane_width: f64,
    pub lanes: usize,
    pub scenario: Scenario,
    pub seed: u64,
    pub route: Route,
}

pub const FRAMES_FILE: &str = "frames.jsonl";
pub const WORLD_FILE: &str = "world.jsonl";
pub const WORLD_META_FILE: &str = "world_meta.json";
pub const GT_TRAJECTORY_FILE: &str = "gt_trajectory.csv";
pub const INS_TRAJECTORY_FILE: &str = "ins_trajectory.csv";

pub const TRAJECTORY_HEADER: &str = "frame_id,timestamp,tx,ty,tz,r00,r01,r02,r10,r11,r12,r20,r21,r22";

pub fn write_trajectory_csv(path: &Path, rows: impl IntoIterator<Item = (u64, f64, Pose)>) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    let mut line = String::new();
    for (id, t, pose) in rows {
        line.clear();
        line.push_str(&id.to_string());
        line.push(',');
        wire::push_f64(&mut line, t);
        let tr = pose.translation();
        for x in [tr.x, tr.y, tr.z].into_iter().chain(pose.rotation_row_major()) {
            line.push(',');
            wire::push_f64(&mut line, x);
        }
        writeln!(w, "{line}")?;
    }
    w.flush()
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<(u64, f64, Pose)>, SimError> {
    let bad = |reason: String| SimError::Format {
        file: path.display().to_string(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 14 {
            return Err(bad(format!("row {}: expected 14 columns, got {}", i + 1, rec.len())));
        }
        let id: u64 = rec[0].parse().map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
        let mut vals = [0.0; 13];
        for (j, v) in vals.iter_mut().enumerate() {
            *v = rec[j + 1].parse().map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
        }
        let rot: [f64; 9] = vals[4..13].try_into().expect("nine entries");
        let pose = Pose::from_row_major(&rot, &[vals[1], vals[2], vals[3]]).map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
        out.push((id, vals[0], pose));
    }
    Ok(out)
}

/// Write frames.jsonl and the two trajectory CSVs into `dir`.
pub fn export_frames(frames: &[SimFrame], dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    let w = BufWriter::new(File::create(dir.join(FRAMES_FILE))?);
    wire::write_jsonl(
        w,
        frames.iter().map(|f| FrameRecord {
            frame_id: f.frame_id,
            timestamp: f.timestamp,
            gt_pose: PoseRecord::from(&f.gt_pose),
            ins_pose: PoseRecord::from(&f.ins_pose),
            detections: f.detections.clone(),
        }),
    )?;
    write_trajectory_csv(&dir.join(GT_TRAJECTORY_FILE), frames.iter().map(|f| (f.frame_id, f.timestamp, f.gt_pose)))?;
    write_trajectory_csv(&dir.join(INS_TRAJECTORY_FILE), frames.iter().map(|f| (f.frame_id, f.timestamp, f.ins_pose)))?;
    Ok(())
}

pub fn import_frames(dir: &Path) -> Result<Vec<SimFrame>, SimError> {
    let path = dir.join(FRAMES_FILE);
    let records: Vec<FrameRecord> = wire::read_jsonl(BufReader::new(File::open(&path)?)).map_err(|e| SimError::Format {
        file: path.display().to_string(),
        reason: e.to_string(),
    })?;
    records
        .into_iter()
        .map(|r| {
            let pose = |p: PoseRecord| {
                Pose::try_from(p).map_err(|e| SimError::Format {
                    file: path.display().to_string(),
                    reason: format!("frame {}: {e}", r.frame_id),
                })
            };
            Ok(SimFrame {
                frame_id: r.frame_id,
                timestamp: r.timestamp,
                gt_pose: pose(r.gt_pose)?,
                ins_pose: pose(r.ins_pose)?,
                detections: r.detections.clone(),
            })
        })
        .collect()
}

pub fn export_world(world: &WorldModel, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    wire::write_jsonl(BufWriter::new(File::create(dir.join(WORLD_FILE))?), &world.elements)?;
    let meta = WorldMeta {
        lane_width: world.lane_width,
        lanes: world.lanes,
        scenario: world.scenario,
        seed: world.seed,
        route: world.route.clone(),
    };
    fs::write(dir.join(WORLD_META_FILE), wire::to_json_line(&meta).map_err(std::io::Error::other)? + "\n")?;
    Ok(())
}

pub fn read_world_elements(path: &Path) -> Result<Vec<WorldElement>, SimError> {
    wire::read_jsonl(BufReader::new(File::open(path)?)).map_err(|e| SimError::Format {
        file: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn import_world(dir: &Path) -> Result<WorldModel, SimError> {
    let elements = read_world_elements(&dir.join(WORLD_FILE))?;
    let meta_path = dir.join(WORLD_META_FILE);
    let meta: WorldMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?).map_err(|e| SimError::Format {
        file: meta_path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(WorldModel::new(elements, meta.lane_width, meta.lanes, meta.scenario, meta.seed, meta.route))
}

/// Frames and world in one directory.
pub fn export_dataset(frames: &[SimFrame], world: &WorldModel, dir: &Path) -> Result<(), SimError> {
    export_world(world, dir)?;
    export_frames(frames, dir)
}

pub fn import_dataset(dir: &Path) -> Result<(Vec<SimFrame>, WorldModel), SimError> {
    Ok((import_frames(dir)?, import_world(dir)?))
}
