//! Element existence and position metrics: per-class precision/recall,
//! signed per-axis absolute error (MAE) and pairwise relative error (MRE),
//! plus trajectory ATE.

use std::fmt::Write as _;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point3;
use crate::semlib::Category;
use crate::simworld::WorldElement;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trajectory lengths differ: {estimate} vs {ground_truth}")]
    LengthMismatch { estimate: usize, ground_truth: usize },
    #[error("timestamps differ at index {index}: {estimate} vs {ground_truth}")]
    TimestampMismatch { index: usize, estimate: f64, ground_truth: f64 },
    #[error("invalid evaluation config: {0}")]
    Config(String),
}

/// An element position reported by a mapping run (or a ground-truth element).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedElement {
    #[serde(default)]
    pub element_id: Option<u64>,
    pub category: Category,
    pub position: [f64; 3],
    /// Polyline vertices for linear elements; empty for point elements.
    #[serde(default)]
    pub vertices: Vec<[f64; 3]>,
}

impl ReportedElement {
    pub fn point(&self) -> Point3 {
        Point3::from(self.position)
    }

    /// Ground-truth form of a world element.
    pub fn from_world(e: &WorldElement) -> Self {
        let vertices = if e.category.is_linear() {
            e.vertices().iter().map(|v| [v.x, v.y, v.z]).collect()
        } else {
            Vec::new()
        };
        let p = e.position();
        Self {
            element_id: Some(e.element_id),
            category: e.category,
            position: [p.x, p.y, p.z],
            vertices,
        }
    }
}

/// Signed error along the reference line: negative means left, rear, below.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AxisError {
    pub lateral: f64,
    pub longitudinal: f64,
    pub altitudinal: f64,
}

impl AxisError {
    fn add(&mut self, o: &AxisError) {
        self.lateral += o.lateral;
        self.longitudinal += o.longitudinal;
        self.altitudinal += o.altitudinal;
    }

    fn scaled(&self, k: f64) -> AxisError {
        AxisError {
            lateral: self.lateral * k,
            longitudinal: self.longitudinal * k,
            altitudinal: self.altitudinal * k,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.lateral.abs().max(self.longitudinal.abs()).max(self.altitudinal.abs())
    }
}

/// Decompose an error along a horizontal unit heading.
pub fn axis_decompose(error: &Point3, heading: &Vector2<f64>) -> AxisError {
    let left = Vector2::new(-heading.y, heading.x);
    let horizontal = Vector2::new(error.x, error.y);
    AxisError {
        lateral: -horizontal.dot(&left),
        longitudinal: horizontal.dot(heading),
        altitudinal: error.z,
    }
}

/// Reference line: a ground-truth vehicle trajectory.
#[derive(Debug, Clone)]
pub struct ReferenceLine {
    points: Vec<Point3>,
    headings: Vec<Vector2<f64>>,
}

impl ReferenceLine {
    pub fn new(points: Vec<Point3>) -> Self {
        let n = points.len();
        let headings = (0..n)
            .map(|i| {
                let (a, b) = if i + 1 < n { (i, i + 1) } else { (i.saturating_sub(1), i) };
                let d = Vector2::new(points[b].x - points[a].x, points[b].y - points[a].y);
                if d.norm() > 1e-12 {
                    d.normalize()
                } else {
                    Vector2::new(1.0, 0.0)
                }
            })
            .collect();
        Self { points, headings }
    }

    /// Heading at the trajectory point nearest `p` (first on ties).
    pub fn heading_near(&self, p: &Point3) -> Vector2<f64> {
        let mut best = (f64::INFINITY, 0);
        for (i, q) in self.points.iter().enumerate() {
            let d = (q - p).norm_squared();
            if d < best.0 {
                best = (d, i);
            }
        }
        self.headings.get(best.1).copied().unwrap_or_else(|| Vector2::new(1.0, 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Match radius for point elements (signs, arrows).
    pub point_match_radius_m: f64,
    /// Match radius for polyline elements, between element centroids.
    pub polyline_match_radius_m: f64,
    pub pair_radius_m: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            point_match_radius_m: 2.0,
            polyline_match_radius_m: 1.0,
            pair_radius_m: 50.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.point_match_radius_m > 0.0 && self.polyline_match_radius_m > 0.0 && self.pair_radius_m > 0.0) {
            return Err(EvalError::Config("radii must be positive".into()));
        }
        Ok(())
    }

    pub fn match_radius(&self, c: Category) -> f64 {
        if c.is_linear() {
            self.polyline_match_radius_m
        } else {
            self.point_match_radius_m
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchOutcome {
    /// (reported index, ground-truth index)
    pub true_positives: Vec<(usize, usize)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

/// Same-category one-to-one matching within `radius(category)`.
///
/// Pairs are accepted in ascending distance (ties by reported then
/// ground-truth index), which yields exactly the mutual-nearest-neighbour
/// pairs found by repeatedly matching and removing mutual nearest neighbours.
pub fn match_elements(
    reported: &[ReportedElement],
    ground_truth: &[ReportedElement],
    radius: impl Fn(Category) -> f64,
) -> MatchOutcome {
    let mut pairs = Vec::new();
    for (i, r) in reported.iter().enumerate() {
        let rad = radius(r.category);
        for (j, g) in ground_truth.iter().enumerate() {
            if r.category != g.category {
                continue;
            }
            let d = (r.point() - g.point()).norm();
            if d <= rad {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_r = vec![false; reported.len()];
    let mut used_g = vec![false; ground_truth.len()];
    let mut out = MatchOutcome::default();
    for (_, i, j) in pairs {
        if !used_r[i] && !used_g[j] {
            used_r[i] = true;
            used_g[j] = true;
            out.true_positives.push((i, j));
        }
    }
    out.true_positives.sort_unstable();
    out.false_positives = (0..reported.len()).filter(|&i| !used_r[i]).collect();
    out.false_negatives = (0..ground_truth.len()).filter(|&j| !used_g[j]).collect();
    out
}

/// Resample a polyline to `n` vertices evenly spaced in arc length.
pub fn resample_polyline(vertices: &[Point3], n: usize) -> Vec<Point3> {
    if vertices.is_empty() || n == 0 {
        return Vec::new();
    }
    if vertices.len() == 1 || n == 1 {
        let c = vertices.iter().sum::<Point3>() / vertices.len() as f64;
        return vec![c; n];
    }
    let mut cum = vec![0.0];
    for w in vertices.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    if total <= 0.0 {
        return vec![vertices[0]; n];
    }
    (0..n)
        .map(|k| {
            let target = total * k as f64 / (n - 1) as f64;
            let seg = cum.partition_point(|&c| c <= target).clamp(1, vertices.len() - 1);
            let (a, b) = (cum[seg - 1], cum[seg]);
            let t = if b > a { ((target - a) / (b - a)).clamp(0.0, 1.0) } else { 0.0 };
            vertices[seg - 1] + (vertices[seg] - vertices[seg - 1]) * t
        })
        .collect()
}

/// Axis error of one matched element: per-vertex for polylines (averaged),
/// otherwise of the representative position.
fn element_error(rep: &ReportedElement, gt: &ReferenceElementView, line: &ReferenceLine) -> AxisError {
    let heading = line.heading_near(&gt.position);
    if rep.category.is_linear() && gt.vertices.len() >= 2 && rep.vertices.len() >= 2 {
        let rv: Vec<Point3> = rep.vertices.iter().map(|v| Point3::from(*v)).collect();
        // Both sides are resampled so uneven vertex spacing in the truth does
        // not show up as error.
        let n = gt.vertices.len();
        let rv = resample_polyline(&rv, n);
        let gv = resample_polyline(&gt.vertices, n);
        let mut acc = AxisError::default();
        for (r, g) in rv.iter().zip(&gv) {
            acc.add(&axis_decompose(&(r - g), &heading));
        }
        acc.scaled(1.0 / n as f64)
    } else {
        axis_decompose(&(rep.point() - gt.position), &heading)
    }
}

struct ReferenceElementView {
    position: Point3,
    vertices: Vec<Point3>,
}

impl From<&ReportedElement> for ReferenceElementView {
    fn from(g: &ReportedElement) -> Self {
        Self {
            position: g.point(),
            vertices: g.vertices.iter().map(|v| Point3::from(*v)).collect(),
        }
    }
}

/// Signed mean axis error of reported minus truth over matched pairs.
pub fn mae(
    tp_pairs: &[(usize, usize)],
    reported: &[ReportedElement],
    ground_truth: &[ReportedElement],
    line: &ReferenceLine,
) -> Option<AxisError> {
    if tp_pairs.is_empty() {
        return None;
    }
    let mut acc = AxisError::default();
    for &(i, j) in tp_pairs {
        acc.add(&element_error(&reported[i], &(&ground_truth[j]).into(), line));
    }
    Some(acc.scaled(1.0 / tp_pairs.len() as f64))
}

/// Signed mean axis error of relative offsets between matched elements whose
/// true positions lie within `pair_radius_m` of each other.
///
/// Each unordered pair is oriented by ascending ground-truth element id
/// (index when ids are absent): the offset is `a − b` with `a` the lower id.
/// The reference heading is taken at the midpoint of the two true positions.
/// Returns the mean and the number of pairs.
pub fn mre(
    tp_pairs: &[(usize, usize)],
    reported: &[ReportedElement],
    ground_truth: &[ReportedElement],
    line: &ReferenceLine,
    pair_radius_m: f64,
) -> (Option<AxisError>, usize) {
    let mut ordered: Vec<(u64, usize, usize)> = tp_pairs
        .iter()
        .map(|&(i, j)| (ground_truth[j].element_id.unwrap_or(j as u64), i, j))
        .collect();
    ordered.sort_unstable();
    let mut acc = AxisError::default();
    let mut count = 0usize;
    for (k, &(_, ia, ja)) in ordered.iter().enumerate() {
        let (ra, ga) = (reported[ia].point(), ground_truth[ja].point());
        for &(_, ib, jb) in &ordered[k + 1..] {
            let gb = ground_truth[jb].point();
            if (ga - gb).norm() > pair_radius_m {
                continue;
            }
            let rb = reported[ib].point();
            let heading = line.heading_near(&((ga + gb) * 0.5));
            acc.add(&axis_decompose(&((ra - rb) - (ga - gb)), &heading));
            count += 1;
        }
    }
    ((count > 0).then(|| acc.scaled(1.0 / count as f64)), count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ate {
    pub rmse_m: f64,
    pub max_m: f64,
}

/// RMSE and maximum of per-frame position distances between two
/// time-aligned trajectories of `(timestamp, position)`.
pub fn trajectory_ate(estimate: &[(f64, Point3)], ground_truth: &[(f64, Point3)]) -> Result<Ate, EvalError> {
    if estimate.len() != ground_truth.len() {
        return Err(EvalError::LengthMismatch {
            estimate: estimate.len(),
            ground_truth: ground_truth.len(),
        });
    }
    let mut sq = 0.0;
    let mut max = 0.0f64;
    for (index, (e, g)) in estimate.iter().zip(ground_truth).enumerate() {
        if (e.0 - g.0).abs() > 1e-9 {
            return Err(EvalError::TimestampMismatch {
                index,
                estimate: e.0,
                ground_truth: g.0,
            });
        }
        let d = (e.1 - g.1).norm();
        sq += d * d;
        max = max.max(d);
    }
    let rmse_m = if estimate.is_empty() { 0.0 } else { (sq / estimate.len() as f64).sqrt() };
    Ok(Ate { rmse_m, max_m: max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: Category,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Percent; absent when there is no ground truth.
    pub recall: Option<f64>,
    /// Percent; absent when nothing was reported.
    pub precision: Option<f64>,
    pub mae: Option<AxisError>,
    pub mre: Option<AxisError>,
    pub pair_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub categories: Vec<CategoryMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ate: Option<Ate>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Full per-category evaluation of reported elements against ground truth.
pub fn evaluate(
    method: &str,
    reported: &[ReportedElement],
    ground_truth: &[ReportedElement],
    line: &ReferenceLine,
    cfg: &EvalConfig,
) -> Result<MetricReport, EvalError> {
    cfg.validate()?;
    let mut categories = Vec::new();
    for c in Category::ALL {
        let rep_idx: Vec<usize> = (0..reported.len()).filter(|&i| reported[i].category == c).collect();
        let gt_idx: Vec<usize> = (0..ground_truth.len()).filter(|&j| ground_truth[j].category == c).collect();
        if rep_idx.is_empty() && gt_idx.is_empty() {
            continue;
        }
        let rep: Vec<ReportedElement> = rep_idx.iter().map(|&i| reported[i].clone()).collect();
        let gt: Vec<ReportedElement> = gt_idx.iter().map(|&j| ground_truth[j].clone()).collect();
        let m = match_elements(&rep, &gt, |cat| cfg.match_radius(cat));
        let tp = m.true_positives.len();
        let (mre_v, pair_count) = mre(&m.true_positives, &rep, &gt, line, cfg.pair_radius_m);
        categories.push(CategoryMetrics {
            category: c,
            true_positives: tp,
            false_positives: m.false_positives.len(),
            false_negatives: m.false_negatives.len(),
            recall: ratio(tp, tp + m.false_negatives.len()),
            precision: ratio(tp, tp + m.false_positives.len()),
            mae: mae(&m.true_positives, &rep, &gt, line),
            mre: mre_v,
            pair_count,
        });
    }
    Ok(MetricReport {
        method: method.to_string(),
        categories,
        ate: None,
    })
}

impl MetricReport {
    pub fn category(&self, c: Category) -> Option<&CategoryMetrics> {
        self.categories.iter().find(|m| m.category == c)
    }
}

/// Aligned text table: one row per method and element class.
pub fn format_table(reports: &[MetricReport]) -> String {
    let header = [
        "Method", "Semantic element", "Recall(%)", "Precision(%)", "MAE x(m)", "MAE y(m)", "MAE z(m)", "MRE x(m)",
        "MRE y(m)", "MRE z(m)",
    ];
    let opt = |v: Option<f64>, digits: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"));
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        for m in &r.categories {
            let axes = |e: Option<AxisError>| {
                [
                    opt(e.map(|e| e.lateral), 3),
                    opt(e.map(|e| e.longitudinal), 3),
                    opt(e.map(|e| e.altitudinal), 3),
                ]
            };
            let mut row = vec![
                r.method.clone(),
                m.category.name().to_string(),
                opt(m.recall, 2),
                opt(m.precision, 2),
            ];
            row.extend(axes(m.mae));
            row.extend(axes(m.mre));
            rows.push(row);
        }
    }
    let widths: Vec<usize> = (0..header.len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (k, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| if c < 2 { format!("{cell:<w$}", w = widths[c]) } else { format!("{cell:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if k == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    for r in reports {
        if let Some(a) = r.ate {
            let _ = writeln!(out, "{}: trajectory ATE rmse {:.3} m, max {:.3} m", r.method, a.rmse_m, a.max_m);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn point(id: u64, c: Category, p: [f64; 3]) -> ReportedElement {
        ReportedElement {
            element_id: Some(id),
            category: c,
            position: p,
            vertices: Vec::new(),
        }
    }

    fn straight_line() -> ReferenceLine {
        ReferenceLine::new((0..200).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect())
    }

    #[test]
    fn axis_examples() {
        let hx = Vector2::new(1.0, 0.0);
        assert_eq!(axis_decompose(&Point3::zeros(), &hx), AxisError::default());
        let e = axis_decompose(&Point3::new(1.0, 0.0, 0.0), &hx);
        assert_eq!((e.longitudinal, e.lateral, e.altitudinal), (1.0, 0.0, 0.0));
        // +y is to the left of a +x heading, so the lateral error is negative.
        let e = axis_decompose(&Point3::new(0.0, 1.0, -2.0), &hx);
        assert_eq!((e.longitudinal, e.lateral, e.altitudinal), (0.0, -1.0, -2.0));
    }

    #[test]
    fn exact_report_is_all_true_positives() {
        let gt: Vec<_> = (0..5).map(|i| point(i, Category::Sign, [10.0 * i as f64, 3.0, 4.0])).collect();
        let r = evaluate("x", &gt, &gt, &straight_line(), &EvalConfig::default()).unwrap();
        let s = r.category(Category::Sign).unwrap();
        assert_eq!((s.true_positives, s.false_positives, s.false_negatives), (5, 0, 0));
        assert_eq!((s.recall, s.precision), (Some(100.0), Some(100.0)));
        assert_eq!(s.mae, Some(AxisError::default()));
        assert_eq!(s.mre, Some(AxisError::default()));
    }

    #[test]
    fn empty_report() {
        let gt: Vec<_> = (0..3).map(|i| point(i, Category::Arrow, [i as f64 * 5.0, 0.0, 0.0])).collect();
        let r = evaluate("x", &[], &gt, &straight_line(), &EvalConfig::default()).unwrap();
        let a = r.category(Category::Arrow).unwrap();
        assert_eq!(a.false_negatives, 3);
        assert_eq!(a.recall, Some(0.0));
        assert_eq!(a.precision, None);
        assert_eq!(a.mae, None);
    }

    #[test]
    fn outlier_case() {
        let gt: Vec<_> = (0..3).map(|i| point(i, Category::Sign, [20.0 * i as f64, 0.0, 0.0])).collect();
        let mut rep = gt.clone();
        rep[0].position[0] += 0.5;
        rep[1].position[1] -= 0.3;
        rep[2].position[0] += 4.0; // twice the 2 m radius
        let m = match_elements(&rep, &gt, |_| 2.0);
        assert_eq!(m.true_positives, vec![(0, 0), (1, 1)]);
        assert_eq!(m.false_positives, vec![2]);
        assert_eq!(m.false_negatives, vec![2]);
    }

    #[test]
    fn mae_arithmetic_and_bias() {
        let line = straight_line();
        let gt = vec![point(1, Category::Sign, [10.0, 5.0, 2.0]), point(2, Category::Sign, [30.0, -5.0, 2.0])];
        let mut rep = gt.clone();
        rep[0].position[0] += 1.0;
        rep[1].position[0] += 3.0;
        let tp = [(0, 0), (1, 1)];
        assert_eq!(mae(&tp, &rep, &gt, &line).unwrap().longitudinal, 2.0);

        let rep: Vec<_> = gt.iter().map(|g| ReportedElement { position: [g.position[0] + 1.0, g.position[1], g.position[2]], ..g.clone() }).collect();
        let m = mae(&tp, &rep, &gt, &line).unwrap();
        assert!((m.longitudinal - 1.0).abs() < 1e-9);
        let (r, n) = mre(&tp, &rep, &gt, &line, 50.0);
        assert_eq!(n, 1);
        assert!(r.unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn mre_two_element_sign_rule() {
        let line = straight_line();
        let gt = vec![point(7, Category::Sign, [40.0, 0.0, 0.0]), point(3, Category::Sign, [20.0, 0.0, 0.0])];
        let mut rep = gt.clone();
        // Displace the element with the higher id forward by 0.2 m.
        rep[0].position[0] += 0.2;
        let (r, n) = mre(&[(0, 0), (1, 1)], &rep, &gt, &line, 50.0);
        assert_eq!(n, 1);
        // Offset is (id 3) − (id 7): the forward shift of id 7 shows as −0.2.
        assert!((r.unwrap().longitudinal + 0.2).abs() < 1e-12);
        let (r, n) = mre(&[(0, 0), (1, 1)], &rep, &gt, &line, 10.0);
        assert_eq!((r, n), (None, 0));
    }

    #[test]
    fn polyline_errors_are_per_vertex() {
        let line = straight_line();
        let gt_v: Vec<[f64; 3]> = (0..=6).map(|i| [10.0 + i as f64, 2.0, 0.0]).collect();
        let gt = ReportedElement {
            element_id: Some(1),
            category: Category::LaneBoundary,
            position: [13.0, 2.0, 0.0],
            vertices: gt_v,
        };
        // Reported as two endpoints, rotated slightly: ends off by ±0.3 m laterally.
        let rep = ReportedElement {
            element_id: None,
            category: Category::LaneBoundary,
            position: [13.0, 2.0, 0.0],
            vertices: vec![[10.0, 2.3, 0.0], [16.0, 1.7, 0.0]],
        };
        let e = mae(&[(0, 0)], std::slice::from_ref(&rep), std::slice::from_ref(&gt), &line).unwrap();
        assert!(e.max_abs() < 1e-12);
        let shifted = ReportedElement {
            vertices: vec![[10.0, 1.5, 0.0], [16.0, 1.5, 0.0]],
            position: [13.0, 1.5, 0.0],
            ..rep
        };
        let e = mae(&[(0, 0)], &[shifted], &[gt], &line).unwrap();
        assert!((e.lateral - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resample_examples() {
        let v = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(4.0, 0.0, 0.0)];
        let r = resample_polyline(&v, 5);
        assert_eq!(r.iter().map(|p| p.x).collect::<Vec<_>>(), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        let r = resample_polyline(&[Point3::zeros(), Point3::new(1.0, 0.0, 0.0), Point3::new(1.0, 1.0, 0.0)], 3);
        assert!((r[1] - Point3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn ate_examples() {
        let gt: Vec<(f64, Point3)> = (0..10).map(|i| (i as f64, Point3::new(i as f64, 0.0, 0.0))).collect();
        assert_eq!(trajectory_ate(&gt, &gt).unwrap(), Ate { rmse_m: 0.0, max_m: 0.0 });
        let off: Vec<_> = gt.iter().map(|(t, p)| (*t, p + Point3::new(0.0, 1.0, 0.0))).collect();
        let a = trajectory_ate(&off, &gt).unwrap();
        assert!((a.rmse_m - 1.0).abs() < 1e-12 && (a.max_m - 1.0).abs() < 1e-12);
        assert!(matches!(trajectory_ate(&gt[..3], &gt), Err(EvalError::LengthMismatch { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy: Vec<_> = gt.iter().map(|(t, p)| (*t, p + Point3::new(rng.random(), rng.random(), rng.random()))).collect();
        let naive: Vec<f64> = noisy.iter().zip(&gt).map(|(a, b)| (a.1 - b.1).norm()).collect();
        let a = trajectory_ate(&noisy, &gt).unwrap();
        let rmse = (naive.iter().map(|d| d * d).sum::<f64>() / naive.len() as f64).sqrt();
        assert!((a.rmse_m - rmse).abs() < 1e-12);
        assert_eq!(a.max_m, naive.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn table_has_row_per_class() {
        let gt = vec![point(1, Category::Sign, [1.0, 1.0, 1.0]), point(2, Category::Arrow, [5.0, 0.0, 0.0])];
        let r = evaluate("Ours", &gt, &gt, &straight_line(), &EvalConfig::default()).unwrap();
        let t = format_table(&[r]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("Sign") && t.contains("Arrow") && t.contains("100.00"));
    }

    /// Repeatedly match mutual nearest neighbours and remove them.
    fn mutual_nn_oracle(rep: &[ReportedElement], gt: &[ReportedElement], radius: f64) -> Vec<(usize, usize)> {
        let mut r_alive: Vec<bool> = vec![true; rep.len()];
        let mut g_alive: Vec<bool> = vec![true; gt.len()];
        let mut out = Vec::new();
        let key = |i: usize, j: usize| ((rep[i].point() - gt[j].point()).norm(), i, j);
        loop {
            let mut found = Vec::new();
            for i in (0..rep.len()).filter(|&i| r_alive[i]) {
                let best_g = (0..gt.len())
                    .filter(|&j| g_alive[j] && gt[j].category == rep[i].category)
                    .map(|j| key(i, j))
                    .filter(|k| k.0 <= radius)
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
                let Some((_, _, j)) = best_g else { continue };
                let best_r = (0..rep.len())
                    .filter(|&k| r_alive[k] && rep[k].category == gt[j].category)
                    .map(|k| key(k, j))
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .unwrap();
                if best_r.1 == i {
                    found.push((i, j));
                }
            }
            if found.is_empty() {
                break;
            }
            for (i, j) in found {
                r_alive[i] = false;
                g_alive[j] = false;
                out.push((i, j));
            }
        }
        out.sort_unstable();
        out
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<ReportedElement>, Vec<ReportedElement>) {
        let cats = [Category::Sign, Category::Arrow];
        let n_gt = rng.random_range(0..=10);
        let n_rep = rng.random_range(0..=10);
        let mk = |rng: &mut ChaCha8Rng, id| {
            point(id, cats[rng.random_range(0..2)], [rng.random_range(0.0..10.0), rng.random_range(-3.0..3.0), 0.0])
        };
        let gt = (0..n_gt).map(|i| mk(rng, i)).collect();
        let rep = (0..n_rep).map(|i| mk(rng, i)).collect();
        (rep, gt)
    }

    #[test]
    fn matching_equals_mutual_nearest_neighbour_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let (rep, gt) = random_instance(&mut rng);
            let m = match_elements(&rep, &gt, |_| 2.0);
            assert_eq!(m.true_positives, mutual_nn_oracle(&rep, &gt, 2.0));
        }
    }

    proptest! {
        #[test]
        fn mre_is_translation_invariant_and_mae_shifts_by_bias(
            seed in any::<u64>(), dx in -3.0..3.0f64, dy in -3.0..3.0f64, dz in -3.0..3.0f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let line = straight_line();
            let gt: Vec<_> = (0..12).map(|i| point(i, Category::Sign, [rng.random_range(0.0..150.0), rng.random_range(-8.0..8.0), rng.random_range(0.0..5.0)])).collect();
            let rep: Vec<_> = gt.iter().map(|g| ReportedElement { position: [g.position[0] + rng.random_range(-0.3..0.3), g.position[1] + rng.random_range(-0.3..0.3), g.position[2]], ..g.clone() }).collect();
            let shifted: Vec<_> = rep.iter().map(|r| ReportedElement { position: [r.position[0] + dx, r.position[1] + dy, r.position[2] + dz], ..r.clone() }).collect();
            let tp: Vec<_> = (0..12).map(|i| (i, i)).collect();
            let (a, _) = mre(&tp, &rep, &gt, &line, 50.0);
            let (b, _) = mre(&tp, &shifted, &gt, &line, 50.0);
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a.lateral - b.lateral).abs() < 1e-9);
                prop_assert!((a.longitudinal - b.longitudinal).abs() < 1e-9);
                prop_assert!((a.altitudinal - b.altitudinal).abs() < 1e-9);
            }
            let ma = mae(&tp, &rep, &gt, &line).unwrap();
            let mb = mae(&tp, &shifted, &gt, &line).unwrap();
            let bias = axis_decompose(&Point3::new(dx, dy, dz), &Vector2::new(1.0, 0.0));
            prop_assert!((mb.lateral - ma.lateral - bias.lateral).abs() < 1e-9);
            prop_assert!((mb.longitudinal - ma.longitudinal - bias.longitudinal).abs() < 1e-9);
            prop_assert!((mb.altitudinal - ma.altitudinal - bias.altitudinal).abs() < 1e-9);
            // Swapping roles negates the absolute error.
            let sw = mae(&tp, &gt, &rep, &line).unwrap();
            prop_assert!((sw.lateral + ma.lateral).abs() < 1e-9);
            prop_assert!((sw.longitudinal + ma.longitudinal).abs() < 1e-9);
            prop_assert!((sw.altitudinal + ma.altitudinal).abs() < 1e-9);
        }
    }
}
