//! Rigid-body poses, the pinhole camera and the world → pixel projection chain.
//!
//! Conventions: a [`Pose`] maps world coordinates into the camera frame
//! (`p_c = R p_w + t`). The camera frame has +z along the optical axis, +x to
//! the right and +y down. Positions of cameras in the world are obtained with
//! [`Pose::center`].

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A 3-D point or vector in meters.
pub type Point3 = Vector3<f64>;

/// Points closer than this to the camera plane cannot be projected.
pub const DEPTH_EPSILON: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point depth {0} is not in front of the camera")]
    NonPositiveDepth(f64),
    #[error("row {row} outside image of height {height}")]
    RowOutOfRange { row: f64, height: u32 },
    #[error("rotation matrix is not orthonormal with det +1")]
    NotARotation,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
}

/// Pixel coordinates. Predictions may fall outside the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// World → camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !is_rotation(&rotation) || !translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::NotARotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a pose from a matrix known to be a rotation. The matrix is
    /// re-orthonormalized to remove accumulated rounding.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: orthonormalize(&rotation),
            translation,
        }
    }

    /// Pose of a camera whose world → camera rotation is `rotation` and whose
    /// optical center sits at `center` in the world.
    pub fn from_center(rotation: Matrix3<f64>, center: Point3) -> Self {
        let rotation = orthonormalize(&rotation);
        Self {
            translation: -(rotation * center),
            rotation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera optical center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Point3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major rotation followed by translation, the on-disk layout.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    /// Exact inverse of [`Pose::rotation_row_major`]; no re-orthonormalization
    /// so that serialized poses round-trip bit for bit.
    pub fn from_row_major(rotation: &[f64; 9], translation: &[f64; 3]) -> Result<Self, GeometryError> {
        let r = Matrix3::from_row_slice(rotation);
        Self::new(r, Vector3::from_column_slice(translation))
    }

    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

pub fn transform_point(pose: &Pose, p_w: &Point3) -> Point3 {
    pose.transform_point(p_w)
}

fn is_rotation(r: &Matrix3<f64>) -> bool {
    if !r.iter().all(|x| x.is_finite()) {
        return false;
    }
    let should_be_identity = r.transpose() * r;
    let ortho = (should_be_identity - Matrix3::identity()).abs().max() <= ORTHONORMAL_TOL;
    ortho && (r.determinant() - 1.0).abs() <= ORTHONORMAL_TOL
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    if is_rotation(r) && (r.transpose() * r - Matrix3::identity()).abs().max() < 1e-14 {
        return *r;
    }
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Rotation matrix of the axis-angle vector `omega` (Rodrigues).
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*omega).into_inner()
}

/// Axis-angle vector of a rotation matrix.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SE(3) exponential of the twist `(omega, upsilon)`.
pub fn se3_exp(omega: &Vector3<f64>, upsilon: &Vector3<f64>) -> Pose {
    let theta = omega.norm();
    let rotation = so3_exp(omega);
    let w = skew(omega);
    let v = if theta < 1e-8 {
        Matrix3::identity() + 0.5 * w + (1.0 / 6.0) * w * w
    } else {
        let t2 = theta * theta;
        Matrix3::identity()
            + ((1.0 - theta.cos()) / t2) * w
            + ((theta - theta.sin()) / (t2 * theta)) * w * w
    };
    Pose {
        rotation,
        translation: v * upsilon,
    }
}

/// Pinhole intrinsics with an optional rolling-shutter readout time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Seconds between exposure of the top and bottom rows; 0 is a global shutter.
    #[serde(default)]
    pub readout_time: f64,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        image_width: u32,
        image_height: u32,
        readout_time: f64,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            image_width,
            image_height,
            readout_time,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.image_width as f64) {
            return Err(GeometryError::InvalidIntrinsics("cx outside image"));
        }
        if !(self.cy >= 0.0 && self.cy < self.image_height as f64) {
            return Err(GeometryError::InvalidIntrinsics("cy outside image"));
        }
        if !(self.readout_time >= 0.0) {
            return Err(GeometryError::InvalidIntrinsics("readout_time must be >= 0"));
        }
        Ok(())
    }

    /// A 3840×2160 camera with a 90° horizontal field of view.
    pub fn uhd_90deg() -> Self {
        Self {
            fx: 1920.0,
            fy: 1920.0,
            cx: 1920.0,
            cy: 1080.0,
            image_width: 3840,
            image_height: 2160,
            readout_time: 0.0,
        }
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.u >= 0.0
            && px.v >= 0.0
            && px.u <= (self.image_width - 1) as f64
            && px.v <= (self.image_height - 1) as f64
    }
}

pub fn project(intr: &Intrinsics, p_c: &Point3) -> Result<Pixel, GeometryError> {
    if !(p_c.z > DEPTH_EPSILON) {
        return Err(GeometryError::NonPositiveDepth(p_c.z));
    }
    Ok(Pixel {
        u: intr.fx * p_c.x / p_c.z + intr.cx,
        v: intr.fy * p_c.y / p_c.z + intr.cy,
    })
}

/// Camera-frame point at `depth` along the ray through `px`.
pub(crate) fn backproject(intr: &Intrinsics, px: &Pixel, depth: f64) -> Point3 {
    Point3::new(
        (px.u - intr.cx) / intr.fx * depth,
        (px.v - intr.cy) / intr.fy * depth,
        depth,
    )
}

/// Unit-norm bearing of a pixel in the camera frame.
pub fn bearing(intr: &Intrinsics, px: &Pixel) -> Point3 {
    backproject(intr, px, 1.0).normalize()
}

/// Geodesic interpolation between two poses: slerp on rotation, lerp on
/// translation.
pub fn interpolate_pose(t0_pose: &Pose, t1_pose: &Pose, alpha: f64) -> Pose {
    if alpha <= 0.0 {
        return *t0_pose;
    }
    if alpha >= 1.0 {
        return *t1_pose;
    }
    let q0 = quat(&t0_pose.rotation);
    let mut q1 = quat(&t1_pose.rotation);
    if q0.coords.dot(&q1.coords) < 0.0 {
        q1 = UnitQuaternion::new_unchecked(-q1.into_inner());
    }
    let q = q0.try_slerp(&q1, alpha, 1e-12).unwrap_or(q0);
    let translation = t0_pose.translation.lerp(&t1_pose.translation, alpha);
    Pose::from_parts(q.to_rotation_matrix().into_inner(), translation)
}

fn quat(r: &Matrix3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r))
}

/// Fraction of the frame readout elapsed when row `v` is exposed.
pub fn row_capture_fraction(intr: &Intrinsics, v: f64) -> Result<f64, GeometryError> {
    let h = intr.image_height;
    if !(v >= 0.0 && v < h as f64) {
        return Err(GeometryError::RowOutOfRange { row: v, height: h });
    }
    if h <= 1 {
        return Ok(0.0);
    }
    Ok((v / (h - 1) as f64).min(1.0))
}

/// Rotation about world +z by `yaw` radians.
pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// World → camera rotation of a forward-looking camera on a vehicle heading
/// `yaw` (radians from +x toward +y) with pitch `pitch` (nose up positive).
pub fn vehicle_camera_rotation(yaw: f64, pitch: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let forward = Vector3::new(cy * cp, sy * cp, sp);
    let right = Vector3::new(sy, -cy, 0.0);
    let down = forward.cross(&right);
    // Rows of world → camera are the camera axes expressed in the world.
    Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
}
