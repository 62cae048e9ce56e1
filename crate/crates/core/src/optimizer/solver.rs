//! Levenberg–Marquardt with IRLS robust weighting.
//!
//! Free map points are eliminated with a Schur complement before the dense
//! Cholesky solve of the reduced keyframe system; the solution is identical to
//! factorizing the full damped normal equations.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::factors::{pose_update, reprojection_jacobians, semantic_jacobian};
use super::graph::FactorGraph;
use super::noise::robust_cost;
use super::OptimError;

type Matrix6x3 = SMatrix<f64, 6, 3>;
type Matrix6 = SMatrix<f64, 6, 6>;

/// Objective values below this are treated as an exact fit.
const ZERO_COST: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Initial damping relative to the largest diagonal entry of the normal matrix.
    pub initial_damping: f64,
    pub damping_up_factor: f64,
    pub damping_down_factor: f64,
    pub relative_decrease_tol: f64,
    pub parameter_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_damping: 1e-4,
            damping_up_factor: 10.0,
            damping_down_factor: 0.3,
            relative_decrease_tol: 1e-10,
            parameter_tol: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.initial_damping > 0.0) {
            return Err("initial_damping must be positive".into());
        }
        if !(self.damping_up_factor > 1.0) {
            return Err("damping_up_factor must exceed 1".into());
        }
        if !(self.damping_down_factor > 0.0 && self.damping_down_factor < 1.0) {
            return Err("damping_down_factor must lie in (0, 1)".into());
        }
        if !(self.relative_decrease_tol >= 0.0 && self.parameter_tol >= 0.0) {
            return Err("tolerances must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptResult {
    pub final_objective: f64,
    /// Initial objective followed by the value after every accepted step.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    /// Factors skipped at the final estimate because a point was behind a camera.
    pub dropped_factors: usize,
}

struct Layout {
    /// Free-variable slot of each keyframe, by keyframe position.
    kf_slot: Vec<Option<usize>>,
    pt_slot: BTreeMap<u64, usize>,
    n_kf: usize,
}

impl Layout {
    fn new(g: &FactorGraph) -> Self {
        let mut n_kf = 0;
        let kf_slot = g
            .keyframes
            .iter()
            .map(|k| {
                (!k.fixed).then(|| {
                    n_kf += 1;
                    n_kf - 1
                })
            })
            .collect();
        let pt_slot = g
            .points
            .values()
            .filter(|p| !p.fixed)
            .enumerate()
            .map(|(i, p)| (p.id, i))
            .collect();
        Self { kf_slot, pt_slot, n_kf }
    }
}

/// Gauss–Newton normal equations `H δ = b` in block form.
struct Linearization {
    hcc: DMatrix<f64>,
    bc: DVector<f64>,
    hpp: Vec<Matrix3<f64>>,
    bp: Vec<Vector3<f64>>,
    /// Keyframe–point coupling blocks, grouped by point slot.
    hcp: Vec<Vec<(usize, Matrix6x3)>>,
}

impl Linearization {
    fn max_diagonal(&self) -> f64 {
        let c = self.hcc.diagonal().iter().fold(0.0f64, |m, x| m.max(*x));
        self.hpp
            .iter()
            .flat_map(|h| [h[(0, 0)], h[(1, 1)], h[(2, 2)]])
            .fold(c, f64::max)
    }
}

fn linearize(g: &FactorGraph, layout: &Layout) -> Linearization {
    let nc = 6 * layout.n_kf;
    let np = layout.pt_slot.len();
    let mut lin = Linearization {
        hcc: DMatrix::zeros(nc, nc),
        bc: DVector::zeros(nc),
        hpp: vec![Matrix3::zeros(); np],
        bp: vec![Vector3::zeros(); np],
        hcp: vec![Vec::new(); np],
    };
    let wp = g.pixel_noise.whitening();
    for (k, kf) in g.keyframes.iter().enumerate() {
        let cs = layout.kf_slot[k];
        for o in &kf.observations {
            let point = &g.points[&o.point_id];
            let ps = layout.pt_slot.get(&o.point_id).copied();
            if cs.is_none() && ps.is_none() {
                continue;
            }
            let Ok((r, jc, jp)) = reprojection_jacobians(&kf.pose, &point.position, &o.pixel, &g.intrinsics) else {
                continue;
            };
            let r = wp * r;
            let jc = wp * jc;
            let jp = wp * jp;
            let (_, w) = robust_cost(g.pixel_kernel, r.norm_squared());
            if let Some(c) = cs {
                let mut blk = lin.hcc.fixed_view_mut::<6, 6>(6 * c, 6 * c);
                blk += w * jc.transpose() * jc;
                let mut b = lin.bc.fixed_rows_mut::<6>(6 * c);
                b -= w * jc.transpose() * r;
            }
            if let Some(p) = ps {
                lin.hpp[p] += w * jp.transpose() * jp;
                lin.bp[p] -= w * jp.transpose() * r;
                if let Some(c) = cs {
                    let coupling = w * jc.transpose() * jp;
                    match lin.hcp[p].iter_mut().find(|(slot, _)| *slot == c) {
                        Some((_, m)) => *m += coupling,
                        None => lin.hcp[p].push((c, coupling)),
                    }
                }
            }
        }
        if let (Some(c), Some(anchor)) = (cs, &kf.anchor) {
            let (r, j) = semantic_jacobian(&kf.pose, &anchor.position);
            let wa = anchor.noise.whitening();
            let r = wa * r;
            let j = wa * j;
            let (_, w) = robust_cost(g.anchor_kernel, r.norm_squared());
            let mut blk = lin.hcc.fixed_view_mut::<6, 6>(6 * c, 6 * c);
            blk += w * j.transpose() * j;
            let mut b = lin.bc.fixed_rows_mut::<6>(6 * c);
            b -= w * j.transpose() * r;
        }
    }
    lin
}

/// Solve `(H + μI) δ = b` by eliminating points first. `None` when the
/// damped system is not positive definite.
fn solve_damped(lin: &Linearization, mu: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let nc = lin.bc.len();
    let mut s = lin.hcc.clone();
    for i in 0..nc {
        s[(i, i)] += mu;
    }
    let mut rhs = lin.bc.clone();
    let mut v_inv = Vec::with_capacity(lin.hpp.len());
    for (p, hpp) in lin.hpp.iter().enumerate() {
        let inv = (hpp + Matrix3::identity() * mu).cholesky()?.inverse();
        let blocks = &lin.hcp[p];
        for (a, wa) in blocks {
            let wa_vinv = wa * inv;
            let mut rb = rhs.fixed_rows_mut::<6>(6 * a);
            rb -= wa_vinv * lin.bp[p];
            for (b, wb) in blocks {
                let upd: Matrix6 = wa_vinv * wb.transpose();
                let mut blk = s.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                blk -= upd;
            }
        }
        v_inv.push(inv);
    }
    let dc = if nc > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
    let dp = lin
        .hpp
        .iter()
        .enumerate()
        .map(|(p, _)| {
            let mut b = lin.bp[p];
            for (a, wa) in &lin.hcp[p] {
                b -= wa.transpose() * dc.fixed_rows::<6>(6 * a);
            }
            v_inv[p] * b
        })
        .collect();
    Some((dc, dp))
}

fn apply_step(g: &FactorGraph, layout: &Layout, dc: &DVector<f64>, dp: &[Vector3<f64>]) -> FactorGraph {
    let mut out = g.clone();
    for (k, kf) in out.keyframes.iter_mut().enumerate() {
        if let Some(c) = layout.kf_slot[k] {
            let delta: Vector6<f64> = dc.fixed_rows::<6>(6 * c).into_owned();
            kf.pose = pose_update(&kf.pose, &delta);
        }
    }
    for (id, slot) in &layout.pt_slot {
        if let Some(p) = out.points.get_mut(id) {
            p.position += dp[*slot];
        }
    }
    out
}

/// Minimize the graph objective in place.
pub fn solve(graph: &mut FactorGraph, cfg: &SolverConfig) -> Result<OptResult, OptimError> {
    graph.validate()?;
    if !graph.is_gauge_constrained() {
        return Err(OptimError::GaugeUnconstrained);
    }
    cfg.validate().map_err(OptimError::InvalidConfig)?;
    let layout = Layout::new(graph);
    let mut current = graph.evaluate();
    let mut history = vec![current.value];
    let finish = |history: Vec<f64>, termination, current: super::graph::Objective| OptResult {
        final_objective: current.value,
        iterations: history.len() - 1,
        history,
        termination,
        dropped_factors: current.dropped_factors,
    };
    if !current.value.is_finite() {
        return Ok(finish(history, Termination::Diverged, current));
    }
    if layout.n_kf == 0 && layout.pt_slot.is_empty() || current.value <= ZERO_COST {
        return Ok(finish(history, Termination::Converged, current));
    }

    let mut mu = 0.0;
    for iter in 0..cfg.max_iterations {
        let lin = linearize(graph, &layout);
        let scale = lin.max_diagonal().max(1e-12);
        if iter == 0 {
            mu = cfg.initial_damping * scale;
        }
        let cap = 1e16 * scale.max(1.0);
        let mut factorized = false;
        let accepted = loop {
            if mu > cap {
                break None;
            }
            let Some((dc, dp)) = solve_damped(&lin, mu) else {
                mu *= cfg.damping_up_factor;
                continue;
            };
            factorized = true;
            let step_norm = (dc.norm_squared() + dp.iter().map(|d| d.norm_squared()).sum::<f64>()).sqrt();
            let candidate = apply_step(graph, &layout, &dc, &dp);
            let trial = candidate.evaluate();
            if trial.value.is_finite() && trial.value < current.value && trial.dropped_factors <= current.dropped_factors
            {
                mu = (mu * cfg.damping_down_factor).max(1e-15 * scale);
                break Some((candidate, trial, step_norm));
            }
            mu *= cfg.damping_up_factor;
        };
        let Some((candidate, trial, step_norm)) = accepted else {
            if !factorized {
                return Err(OptimError::NumericalFailure);
            }
            // No step reduces the objective any further.
            return Ok(finish(history, Termination::Converged, current));
        };
        let previous = current.value;
        *graph = candidate;
        current = trial;
        history.push(current.value);
        log::trace!("lm iter {iter}: objective {} mu {mu:e} step {step_norm:e}", current.value);
        let rel = (previous - current.value) / previous;
        if current.value <= ZERO_COST || rel < cfg.relative_decrease_tol || step_norm < cfg.parameter_tol {
            return Ok(finish(history, Termination::Converged, current));
        }
    }
    Ok(finish(history, Termination::MaxIterations, current))
}
