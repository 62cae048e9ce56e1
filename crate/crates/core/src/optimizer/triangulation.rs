//! Initial map-point estimates from several calibrated views.

use nalgebra::Matrix3;

use super::factors::reprojection_jacobians;
use crate::geometry::{bearing, Intrinsics, Pixel, Point3, Pose};

/// Point closest, in the least-squares sense, to every viewing ray.
///
/// Returns `None` when the rays are (nearly) parallel, the baseline angle is
/// below `min_parallax_rad`, or the solution lies behind any camera.
pub fn triangulate_midpoint(views: &[(Pose, Pixel)], intr: &Intrinsics, min_parallax_rad: f64) -> Option<Point3> {
    if views.len() < 2 {
        return None;
    }
    let mut a = Matrix3::zeros();
    let mut b = Point3::zeros();
    let mut dirs = Vec::with_capacity(views.len());
    for (pose, px) in views {
        let d = pose.rotation().transpose() * bearing(intr, px);
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * pose.center();
        dirs.push(d);
    }
    let max_angle = dirs
        .iter()
        .flat_map(|d1| dirs.iter().map(move |d2| d1.dot(d2).clamp(-1.0, 1.0).acos()))
        .fold(0.0, f64::max);
    if max_angle < min_parallax_rad {
        return None;
    }
    let x = a.try_inverse()? * b;
    let in_front = views.iter().all(|(pose, _)| pose.transform_point(&x).z > 0.0);
    (in_front && x.iter().all(|c| c.is_finite())).then_some(x)
}

/// A few Gauss–Newton steps on the reprojection error of a single point.
pub fn refine_point(views: &[(Pose, Pixel)], intr: &Intrinsics, init: Point3, iterations: usize) -> Point3 {
    let mut x = init;
    for _ in 0..iterations {
        let mut h = Matrix3::zeros();
        let mut g = Point3::zeros();
        for (pose, px) in views {
            let Ok((r, _, jp)) = reprojection_jacobians(pose, &x, px, intr) else {
                return x;
            };
            h += jp.transpose() * jp;
            g -= jp.transpose() * r;
        }
        let Some(step) = h.cholesky().map(|c| c.solve(&g)) else {
            return x;
        };
        let next = x + step;
        if views.iter().any(|(p, _)| p.transform_point(&next).z <= 0.0) {
            return x;
        }
        x = next;
        if step.norm() < 1e-9 * (1.0 + x.norm()) {
            break;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use nalgebra::Matrix3 as M3;

    fn views(p: &Point3) -> Vec<(Pose, Pixel)> {
        let intr = Intrinsics::uhd_90deg();
        [Point3::new(0.0, 0.0, 0.0), Point3::new(2.0, 0.0, 0.0), Point3::new(0.0, 1.0, 3.0)]
            .iter()
            .map(|c| {
                let pose = Pose::from_center(M3::identity(), *c);
                (pose, project(&intr, &pose.transform_point(p)).unwrap())
            })
            .collect()
    }

    #[test]
    fn exact_rays_meet_at_point() {
        let p = Point3::new(1.0, -0.5, 20.0);
        let x = triangulate_midpoint(&views(&p), &Intrinsics::uhd_90deg(), 1e-3).unwrap();
        assert!((x - p).norm() < 1e-8);
    }

    #[test]
    fn refinement_recovers_point() {
        let p = Point3::new(-3.0, 1.0, 30.0);
        let x = refine_point(&views(&p), &Intrinsics::uhd_90deg(), p + Point3::new(0.5, 0.5, 2.0), 20);
        assert!((x - p).norm() < 1e-8);
    }

    #[test]
    fn parallel_rays_are_rejected() {
        let intr = Intrinsics::uhd_90deg();
        let pose = Pose::identity();
        let px = Pixel::new(100.0, 200.0);
        assert!(triangulate_midpoint(&[(pose, px), (pose, px)], &intr, 1e-3).is_none());
    }
}
