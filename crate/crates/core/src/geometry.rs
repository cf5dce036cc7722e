//! Pinhole camera model, angle-axis rigid transforms and the depth-driven
//! warp that maps target-frame pixels into the source frame.
//!
//! Conventions: pixel centers sit at integer coordinates, +z looks into the
//! scene, and a pose maps target-camera coordinates into source-camera
//! coordinates (`Y = R * X + t`).

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::image::DepthMap;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite())
            || fx <= 0.0
            || fy <= 0.0
        {
            return Err(Error::InvalidInput {
                what: "intrinsics",
                reason: format!("fx={fx} fy={fy} cx={cx} cy={cy}"),
            });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Factory calibration of the TUM RGB-D "freiburg3" sensor (640x480).
    pub fn freiburg3() -> Self {
        Self {
            fx: 535.4,
            fy: 539.2,
            cx: 320.1,
            cy: 247.6,
        }
    }

    /// Loads `fx = ... / fy = ... / cx = ... / cy = ...` lines. `#` starts a
    /// comment; all four keys are required, anything else is rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut fx = None;
        let mut fy = None;
        let mut cx = None;
        let mut cy = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}: expected key = value", lineno + 1)))?;
            let value: f64 = value.trim().parse().map_err(|_| {
                Error::format(path, format!("line {}: bad number {:?}", lineno + 1, value.trim()))
            })?;
            match key.trim() {
                "fx" => fx = Some(value),
                "fy" => fy = Some(value),
                "cx" => cx = Some(value),
                "cy" => cy = Some(value),
                other => {
                    return Err(Error::format(
                        path,
                        format!("line {}: unknown key {other:?}", lineno + 1),
                    ))
                }
            }
        }
        match (fx, fy, cx, cy) {
            (Some(fx), Some(fy), Some(cx), Some(cy)) => Intrinsics::new(fx, fy, cx, cy),
            _ => Err(Error::format(path, "missing one of fx, fy, cx, cy")),
        }
    }

    /// Intrinsics after resizing the image plane from `(from_w, from_h)` to
    /// `(to_w, to_h)` under the pixel-centers-at-integers convention.
    pub fn scale_to(&self, from_w: usize, from_h: usize, to_w: usize, to_h: usize) -> Intrinsics {
        let sx = to_w as f64 / from_w as f64;
        let sy = to_h as f64 / from_h as f64;
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
        }
    }

    /// Intrinsics at pyramid level `level` (each level halves both axes).
    pub fn for_level(&self, level: usize) -> Intrinsics {
        let s = 1.0 / (1 << level) as f64;
        Intrinsics {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: (self.cx + 0.5) * s - 0.5,
            cy: (self.cy + 0.5) * s - 0.5,
        }
    }

    /// Unit-depth ray through pixel (u, v).
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Rotation matrix from an angle-axis vector (Rodrigues), with a series
/// expansion below `theta ~ 1e-4` so tiny rotations stay accurate.
pub fn axis_angle_to_matrix(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let k = skew(r);
    let (a, b) = sin_cos_coefficients(theta2);
    Matrix3::identity() + k * a + k * k * b
}

/// Returns (sin(t)/t, (1-cos(t))/t^2) given t^2, series-expanded near zero.
fn sin_cos_coefficients(theta2: f64) -> (f64, f64) {
    if theta2 < 1e-8 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    }
}

#[inline]
pub(crate) fn skew(r: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -r.z, r.y, r.z, 0.0, -r.x, -r.y, r.x, 0.0)
}

/// Angle-axis vector of a rotation matrix (matrix logarithm). The angle of
/// the result lies in [0, pi].
pub fn matrix_to_axis_angle(m: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta < 1e-10 {
        // First order: R ~ I + [r]x.
        return Vector3::new(
            (m[(2, 1)] - m[(1, 2)]) * 0.5,
            (m[(0, 2)] - m[(2, 0)]) * 0.5,
            (m[(1, 0)] - m[(0, 1)]) * 0.5,
        );
    }
    if theta < std::f64::consts::PI - 1e-6 {
        let s = theta / (2.0 * theta.sin());
        return Vector3::new(
            (m[(2, 1)] - m[(1, 2)]) * s,
            (m[(0, 2)] - m[(2, 0)]) * s,
            (m[(1, 0)] - m[(0, 1)]) * s,
        );
    }
    // Near pi the skew part degenerates; recover the axis from the diagonal.
    let xx = ((m[(0, 0)] + 1.0) * 0.5).max(0.0).sqrt();
    let yy = ((m[(1, 1)] + 1.0) * 0.5).max(0.0).sqrt();
    let zz = ((m[(2, 2)] + 1.0) * 0.5).max(0.0).sqrt();
    let mut axis = Vector3::new(xx, yy, zz);
    // Fix signs using the off-diagonal sums.
    if m[(2, 1)] - m[(1, 2)] < 0.0 {
        axis.x = -axis.x;
    }
    if m[(0, 2)] - m[(2, 0)] < 0.0 {
        axis.y = -axis.y;
    }
    if m[(1, 0)] - m[(0, 1)] < 0.0 {
        axis.z = -axis.z;
    }
    if axis.norm() < 1e-12 {
        return Vector3::new(std::f64::consts::PI, 0.0, 0.0);
    }
    axis.normalize() * theta
}

/// SE(3) element stored as angle-axis rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    /// Rejects rotations at or beyond pi so the angle-axis form stays unique.
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.norm() >= std::f64::consts::PI {
            return Err(Error::InvalidInput {
                what: "rigid transform",
                reason: format!("rotation angle {} not below pi", rotation.norm()),
            });
        }
        if !(rotation.iter().all(|v| v.is_finite()) && translation.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput {
                what: "rigid transform",
                reason: "non-finite component".into(),
            });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Vector3::zeros() && self.translation == Vector3::zeros()
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        axis_angle_to_matrix(&self.rotation)
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: matrix_to_axis_angle(r),
            translation,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation_matrix().transpose();
        RigidTransform {
            rotation: -self.rotation,
            translation: -(rt * self.translation),
        }
    }

    /// `self` after `other`: (self * other)(x) = self(other(x)).
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let ra = self.rotation_matrix();
        let rb = other.rotation_matrix();
        RigidTransform::from_rotation_matrix(&(ra * rb), ra * other.translation + self.translation)
    }

    /// Angle in radians between this rotation and another.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation_matrix().transpose() * other.rotation_matrix();
        matrix_to_axis_angle(&rel).norm()
    }

    /// Homogeneous 4x4 form.
    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Left Jacobian of SO(3): exp((r + d)^) ~ exp((J_l(r) d)^) exp(r^).
/// Used to differentiate rotated points with respect to the angle-axis vector.
pub fn so3_left_jacobian(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let k = skew(r);
    let (a, b) = if theta2 < 1e-8 {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Per-pixel correspondence field: where each target pixel lands in the
/// source image, with a validity flag (invalid depth or point behind camera).
#[derive(Debug, Clone)]
pub struct FlowField {
    width: usize,
    height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    /// All-invalid field of the given size; callers fill in coordinates.
    pub fn new(width: usize, height: usize) -> FlowField {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (f64, f64) {
        (self.u[i], self.v[i])
    }
}

/// Back-projects valid pixels to camera-frame 3D points, returned with their
/// flat pixel index.
pub fn backproject(depth: &DepthMap, k: &Intrinsics) -> Vec<(usize, Vector3<f64>)> {
    let mut points = Vec::with_capacity(depth.valid_count());
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if depth.is_valid(x, y) {
                let z = depth.value(x, y);
                points.push((y * depth.width() + x, k.ray(x as f64, y as f64) * z));
            }
        }
    }
    points
}

/// Projects camera-frame points to pixel coordinates. The flag is false for
/// points at or behind the camera plane.
pub fn project(points: &[Vector3<f64>], k: &Intrinsics) -> Vec<(f64, f64, bool)> {
    points
        .iter()
        .map(|p| {
            if p.z > 0.0 {
                (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, true)
            } else {
                (0.0, 0.0, false)
            }
        })
        .collect()
}

/// Warps a single pixel: back-project at depth `z`, move by `pose`, project.
/// Returns the source-frame coordinates and the transformed depth, or None if
/// the point ends up behind the camera.
pub fn warp_point(
    u: f64,
    v: f64,
    z: f64,
    pose: &RigidTransform,
    k: &Intrinsics,
) -> Option<(f64, f64, f64)> {
    let x = k.ray(u, v) * z;
    let y = pose.apply(&x);
    if y.z > 0.0 {
        Some((k.fx * y.x / y.z + k.cx, k.fy * y.y / y.z + k.cy, y.z))
    } else {
        None
    }
}

/// Dense warp of every valid depth pixel into the source frame.
///
/// The identity pose short-circuits to the pixel grid itself, which keeps a
/// no-motion warp bit-exact instead of within float dust.
pub fn warp_coords(depth: &DepthMap, pose: &RigidTransform, k: &Intrinsics) -> FlowField {
    let (w, h) = (depth.width(), depth.height());
    let mut flow = FlowField::new(w, h);
    if pose.is_identity() {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if depth.is_valid(x, y) {
                    flow.u[i] = x as f64;
                    flow.v[i] = y as f64;
                    flow.valid[i] = true;
                }
            }
        }
        return flow;
    }
    let r = pose.rotation_matrix();
    let t = pose.translation;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !depth.is_valid(x, y) {
                continue;
            }
            let p = r * (k.ray(x as f64, y as f64) * depth.value(x, y)) + t;
            if p.z > 0.0 {
                flow.u[i] = k.fx * p.x / p.z + k.cx;
                flow.v[i] = k.fy * p.y / p.z + k.cy;
                flow.valid[i] = true;
            }
        }
    }
    flow
}

/// Per-pixel derivatives of the warp coordinates: with respect to the pixel's
/// depth and to the 6 pose parameters (angle-axis xyz, then translation xyz).
#[derive(Debug, Clone)]
pub struct WarpJacobian {
    /// d(u', v') / d(depth), zero where the flow is invalid.
    pub d_depth: Vec<[f64; 2]>,
    /// d(u', v') / d(pose), rows (u', v') by columns (rx, ry, rz, tx, ty, tz).
    pub d_pose: Vec<[[f64; 6]; 2]>,
}

/// Warp plus the analytic Jacobians needed to backpropagate photometric
/// gradients into depth and pose.
pub fn warp_with_jacobian(
    depth: &DepthMap,
    pose: &RigidTransform,
    k: &Intrinsics,
) -> (FlowField, WarpJacobian) {
    let (w, h) = (depth.width(), depth.height());
    let n = w * h;
    let mut flow = FlowField::new(w, h);
    let mut jac = WarpJacobian {
        d_depth: vec![[0.0; 2]; n],
        d_pose: vec![[[0.0; 6]; 2]; n],
    };
    let identity = pose.is_identity();
    let r = pose.rotation_matrix();
    let t = pose.translation;
    let jl = so3_left_jacobian(&pose.rotation);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !depth.is_valid(x, y) {
                continue;
            }
            let q = k.ray(x as f64, y as f64);
            let rq = r * q;
            let p = rq * depth.value(x, y) + t;
            if p.z <= 0.0 {
                continue;
            }
            if identity {
                // Keep the forward pass bit-exact for no motion; the
                // derivatives below are exact there as well.
                flow.u[i] = x as f64;
                flow.v[i] = y as f64;
            } else {
                flow.u[i] = k.fx * p.x / p.z + k.cx;
                flow.v[i] = k.fy * p.y / p.z + k.cy;
            }
            flow.valid[i] = true;

            let inv_z = 1.0 / p.z;
            // d(u', v') / dY for the projected point Y = p.
            let du_dy = Vector3::new(k.fx * inv_z, 0.0, -k.fx * p.x * inv_z * inv_z);
            let dv_dy = Vector3::new(0.0, k.fy * inv_z, -k.fy * p.y * inv_z * inv_z);
            // Y = R(r) X + t with X fixed: dY/dr = -[R X]x J_l(r), dY/dt = I.
            let rx = p - t;
            let dy_dr = -skew(&rx) * jl;
            jac.d_depth[i] = [du_dy.dot(&rq), dv_dy.dot(&rq)];
            for col in 0..3 {
                let dy = dy_dr.column(col);
                jac.d_pose[i][0][col] = du_dy.dot(&dy);
                jac.d_pose[i][1][col] = dv_dy.dot(&dy);
            }
            jac.d_pose[i][0][3] = du_dy.x;
            jac.d_pose[i][0][4] = du_dy.y;
            jac.d_pose[i][0][5] = du_dy.z;
            jac.d_pose[i][1][3] = dv_dy.x;
            jac.d_pose[i][1][4] = dv_dy.y;
            jac.d_pose[i][1][5] = dv_dy.z;
        }
    }
    (flow, jac)
}
