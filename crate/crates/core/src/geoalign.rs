//! Rigid world → geographic (ENU) alignment from library frames.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point3;
use crate::semlib::BenchmarkLibrary;
use crate::wire;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoAlignError {
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("world points are collinear or coincident (singular values {0:?})")]
    DegenerateConfiguration([f64; 3]),
    #[error("non-finite correspondence")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// World-frame position.
    pub p: Point3,
    /// Geographic ENU position.
    pub d: Point3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Per-coordinate RMS of `d − (R p + t)`.
    pub rms_residual: f64,
    /// Ratio of the second to the largest singular value of the world-point
    /// scatter; small values mean the rotation about the point line is weak.
    pub conditioning: f64,
    pub n: usize,
}

impl GeoTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            rms_residual: 0.0,
            conditioning: 1.0,
            n: 0,
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// Sum of squared residuals over `pairs` (the quantity being minimized, up to ½).
    pub fn cost(&self, pairs: &[Correspondence]) -> f64 {
        pairs.iter().map(|c| (c.d - self.apply(&c.p)).norm_squared()).sum()
    }

    pub fn report(&self) -> AlignmentReport {
        let r = &self.rotation;
        AlignmentReport {
            rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            translation: wire::point_array(&self.translation),
            rms: self.rms_residual,
            n: self.n,
        }
    }
}

/// JSON form of an alignment; rotation is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub rms: f64,
    pub n: usize,
}

fn check(pairs: &[Correspondence]) -> Result<(), GeoAlignError> {
    if pairs.len() < 3 {
        return Err(GeoAlignError::InsufficientPoints {
            needed: 3,
            got: pairs.len(),
        });
    }
    if pairs.iter().any(|c| !(c.p.iter().chain(c.d.iter()).all(|x| x.is_finite()))) {
        return Err(GeoAlignError::NonFinite);
    }
    Ok(())
}

fn centroids(pairs: &[Correspondence]) -> (Point3, Point3) {
    let n = pairs.len() as f64;
    let cp = pairs.iter().map(|c| c.p).sum::<Point3>() / n;
    let cd = pairs.iter().map(|c| c.d).sum::<Point3>() / n;
    (cp, cd)
}

fn finish(rotation: Matrix3<f64>, translation: Vector3<f64>, pairs: &[Correspondence], conditioning: f64) -> GeoTransform {
    let mut tf = GeoTransform {
        rotation,
        translation,
        rms_residual: 0.0,
        conditioning,
        n: pairs.len(),
    };
    tf.rms_residual = (tf.cost(pairs) / (3 * pairs.len()) as f64).sqrt();
    tf
}

/// Least-squares rotation and translation mapping world points onto their
/// geographic counterparts (no scale).
pub fn solve_rigid_alignment(pairs: &[Correspondence]) -> Result<GeoTransform, GeoAlignError> {
    check(pairs)?;
    let (cp, cd) = centroids(pairs);
    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for c in pairs {
        let a = c.p - cp;
        cov += (c.d - cd) * a.transpose();
        scatter += a * a.transpose();
    }
    // Planar sets are fine; only a rank ≤ 1 scatter leaves a free rotation.
    let mut sv: Vec<f64> = scatter.symmetric_eigenvalues().iter().map(|x| x.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let sv = [sv[0], sv[1], sv[2]];
    if !(sv[1] > 1e-9 * sv[0]) {
        return Err(GeoAlignError::DegenerateConfiguration(sv));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    // nalgebra orders singular values descending, so the last one is flipped.
    let rotation = u * s * v_t;
    let translation = cd - rotation * cp;
    Ok(finish(rotation, translation, pairs, sv[1] / sv[0]))
}

/// Translation-only fit (`R = I`), used when the world points are nearly collinear.
pub fn solve_translation_only(pairs: &[Correspondence]) -> Result<GeoTransform, GeoAlignError> {
    check(pairs)?;
    let (cp, cd) = centroids(pairs);
    Ok(finish(Matrix3::identity(), cd - cp, pairs, 0.0))
}

pub fn to_geographic(tf: &GeoTransform, o_w: &Point3) -> Point3 {
    tf.apply(o_w)
}

/// The `n` library frames nearest `o_w` paired as (frame position, frame geo).
pub fn select_nearest_frames(lib: &BenchmarkLibrary, o_w: &Point3, n: usize) -> Result<Vec<Correspondence>, GeoAlignError> {
    if n < 3 || lib.len() < n {
        return Err(GeoAlignError::InsufficientPoints {
            needed: n.max(3),
            got: lib.len(),
        });
    }
    Ok(lib
        .nearest(o_w, n)
        .into_iter()
        .map(|c| {
            let f = lib.frame(c.frame_id).expect("candidate from library");
            Correspondence {
                p: f.position(),
                d: f.geo,
            }
        })
        .collect())
}

/// Alignment for a vehicle position: starts with `n` frames and doubles the
/// set (up to `max_n`) while the scatter is too thin to pin the rotation,
/// then falls back to a translation-only fit.
pub fn align_near(
    lib: &BenchmarkLibrary,
    o_w: &Point3,
    n: usize,
    max_n: usize,
    min_conditioning: f64,
) -> Result<GeoTransform, GeoAlignError> {
    let mut k = n;
    loop {
        let pairs = select_nearest_frames(lib, o_w, k.min(lib.len()))?;
        match solve_rigid_alignment(&pairs) {
            Ok(tf) if tf.conditioning >= min_conditioning => return Ok(tf),
            Ok(_) | Err(GeoAlignError::DegenerateConfiguration(_)) => {}
            Err(e) => return Err(e),
        }
        if k >= max_n || k >= lib.len() {
            log::debug!("alignment near {o_w:?} ill-conditioned with {k} frames; translation-only");
            return solve_translation_only(&pairs);
        }
        k = (2 * k).min(max_n);
    }
}
