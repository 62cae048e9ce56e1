//! Residuals and analytic Jacobians.
//!
//! Pose increments are twists `δ = (ω, υ)` applied on the camera side,
//! `T ← Exp(δ) ∘ T`, so a reprojection Jacobian only involves the point in
//! camera coordinates and stays well conditioned far from the world origin.

use nalgebra::{Matrix2x3, SMatrix, Vector2, Vector3, Vector6};

use crate::geometry::{self, GeometryError, Intrinsics, Pixel, Point3, Pose};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;
pub type Matrix3x6 = SMatrix<f64, 3, 6>;

/// Apply a camera-side twist increment to a pose.
pub fn pose_update(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let omega = delta.fixed_rows::<3>(0).into_owned();
    let upsilon = delta.fixed_rows::<3>(3).into_owned();
    if omega == Vector3::zeros() && upsilon == Vector3::zeros() {
        return *pose;
    }
    let inc = geometry::se3_exp(&omega, &upsilon);
    let p = inc.compose(pose);
    Pose::from_parts(*p.rotation(), *p.translation())
}

/// Observed pixel minus predicted pixel.
pub fn reprojection_residual(
    kf_pose: &Pose,
    point: &Point3,
    obs: &Pixel,
    intr: &Intrinsics,
) -> Result<Vector2<f64>, GeometryError> {
    let predicted = geometry::project(intr, &kf_pose.transform_point(point))?;
    Ok(Vector2::new(obs.u - predicted.u, obs.v - predicted.v))
}

/// Residual with its Jacobians with respect to the pose twist and the point.
pub fn reprojection_jacobians(
    kf_pose: &Pose,
    point: &Point3,
    obs: &Pixel,
    intr: &Intrinsics,
) -> Result<(Vector2<f64>, Matrix2x6, Matrix2x3<f64>), GeometryError> {
    let pc = kf_pose.transform_point(point);
    let px = geometry::project(intr, &pc)?;
    let r = Vector2::new(obs.u - px.u, obs.v - px.v);
    let iz = 1.0 / pc.z;
    let d_proj = Matrix2x3::new(
        intr.fx * iz,
        0.0,
        -intr.fx * pc.x * iz * iz,
        0.0,
        intr.fy * iz,
        -intr.fy * pc.y * iz * iz,
    );
    // d(Exp(δ) pc)/dδ = [-[pc]x | I]
    let mut d_pc = Matrix3x6::zeros();
    d_pc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-geometry::skew(&pc)));
    d_pc.fixed_view_mut::<3, 3>(0, 3).copy_from(&nalgebra::Matrix3::identity());
    let j_pose = -(d_proj * d_pc);
    let j_point = -(d_proj * kf_pose.rotation());
    Ok((r, j_pose, j_point))
}

/// Anchor position minus keyframe camera position.
pub fn semantic_residual(kf_translation: &Point3, anchor: &Point3) -> Vector3<f64> {
    anchor - kf_translation
}

/// Anchor residual for a keyframe pose with its Jacobian on the pose twist.
pub fn semantic_jacobian(kf_pose: &Pose, anchor: &Point3) -> (Vector3<f64>, Matrix3x6) {
    let r = semantic_residual(&kf_pose.center(), anchor);
    // center(Exp(δ) T) ≈ c − Rᵀ υ
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&kf_pose.rotation().transpose());
    (r, j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix3;

    #[test]
    fn zero_delta_is_identity_update() {
        let pose = Pose::from_center(so3_exp(&Vector3::new(0.2, -0.1, 0.5)), Point3::new(3.0, 4.0, 5.0));
        assert_eq!(pose_update(&pose, &Vector6::zeros()), pose);
    }

    #[test]
    fn pure_translation_update() {
        let p = pose_update(&Pose::identity(), &Vector6::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0));
        assert_abs_diff_eq!(*p.translation(), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(*p.rotation(), Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn consistent_observation_has_zero_residual() {
        let intr = Intrinsics::uhd_90deg();
        let pose = Pose::from_center(so3_exp(&Vector3::new(0.01, 0.02, -0.03)), Point3::new(1.0, 2.0, 3.0));
        let p = Point3::new(2.0, 3.0, 30.0);
        let obs = geometry::project(&intr, &pose.transform_point(&p)).unwrap();
        let r = reprojection_residual(&pose, &p, &obs, &intr).unwrap();
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn optical_axis_residual() {
        let intr = Intrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4, 0.0).unwrap();
        let r = reprojection_residual(&Pose::identity(), &Point3::new(0.0, 0.0, 1.0), &Pixel::new(0.5, 0.0), &intr)
            .unwrap();
        assert_eq!(r, Vector2::new(0.5, 0.0));
    }

    #[test]
    fn behind_camera_is_reported() {
        let intr = Intrinsics::uhd_90deg();
        let e = reprojection_residual(&Pose::identity(), &Point3::new(0.0, 0.0, -1.0), &Pixel::new(0.0, 0.0), &intr);
        assert!(matches!(e, Err(GeometryError::NonPositiveDepth(_))));
    }

    #[test]
    fn semantic_examples() {
        let a = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(semantic_residual(&a, &a), Vector3::zeros());
        assert_eq!(semantic_residual(&Point3::new(1.0, 2.0, 0.0), &a), Vector3::new(0.0, 0.0, 3.0));
    }
}
