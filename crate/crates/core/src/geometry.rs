//! Rotations and view-plane math.
//!
//! Rotations are right-handed and active. A view plane maps pixel `(i, j)`
//! to `a + alpha_j e_u + beta_i e_v`; a rigid correction rotates the basis
//! vectors with Rodrigues' formula and shifts the anchor.

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use thiserror::Error;

/// Below this rotation angle (radians) the Rodrigues coefficients switch to
/// their Taylor expansions in `theta^2`.
pub const SMALL_ANGLE: f64 = 1e-6;

const UNIT_TOLERANCE: f64 = 1e-6;
const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("axis must be unit length, |axis| = {0}")]
    NonUnitAxis(f64),
    #[error("pixel ({row}, {col}) outside {height}x{width} grid")]
    PixelOutOfRange {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("plane basis is not orthonormal (|e_u|={norm_u}, |e_v|={norm_v}, e_u.e_v={dot})")]
    NotOrthonormal { norm_u: f64, norm_v: f64, dot: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Point or direction in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    /// Unit vector, or `None` for a zero vector.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn max_abs_diff(&self, o: &Mat3) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(o.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `(sin t / t, (1 - cos t) / t^2)` as functions of `t^2`, with a
/// second-order Taylor expansion below [`SMALL_ANGLE`].
fn rodrigues_coefficients(theta_sq: f64) -> (f64, f64) {
    if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    }
}

/// Rotation matrix of an axis-angle vector: `I + b K + c K^2`.
pub fn rodrigues(axis_angle: Vec3) -> Mat3 {
    let (b, c) = rodrigues_coefficients(axis_angle.dot(axis_angle));
    let Vec3 { x, y, z } = axis_angle;
    let k = Mat3([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]]);
    let k2 = k.mul_mat(&k);
    let mut r = Mat3::IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r.0[i][j] += b * k.0[i][j] + c * k2.0[i][j];
        }
    }
    r
}

/// Rotate `v` about a unit `axis` by `angle` radians.
pub fn rotate_about(v: Vec3, axis: Vec3, angle: f64) -> Result<Vec3, GeometryError> {
    let n = axis.norm();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(GeometryError::NonUnitAxis(n));
    }
    let (s, c) = angle.sin_cos();
    Ok(v * c + axis.cross(v) * s + axis * (axis.dot(v) * (1.0 - c)))
}

/// Unit component of `v` orthogonal to the unit `axis`.
pub fn project_orthogonal(v: Vec3, axis: Vec3) -> Result<Vec3, GeometryError> {
    let n = axis.norm();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(GeometryError::NonUnitAxis(n));
    }
    let vn = v.norm();
    let perp = v - axis * axis.dot(v);
    // sin of the angle between v and axis
    if vn == 0.0 || perp.norm() / vn <= SMALL_ANGLE {
        return Err(GeometryError::Degenerate(format!(
            "vector {v:?} is parallel to axis {axis:?}"
        )));
    }
    Ok(perp.normalized().expect("nonzero perpendicular component"))
}

/// A planar pixel grid embedded in 3D.
///
/// `alphas[j]` is the in-plane coordinate along `basis_u` of column `j`,
/// `betas[i]` the coordinate along `basis_v` of row `i`, both in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPlane {
    pub anchor: Vec3,
    pub basis_u: Vec3,
    pub basis_v: Vec3,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl ViewPlane {
    pub fn new(
        anchor: Vec3,
        basis_u: Vec3,
        basis_v: Vec3,
        alphas: Vec<f64>,
        betas: Vec<f64>,
    ) -> Result<Self, GeometryError> {
        let plane = Self {
            anchor,
            basis_u,
            basis_v,
            alphas,
            betas,
        };
        plane.validate()?;
        Ok(plane)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let (nu, nv, dot) = (self.basis_u.norm(), self.basis_v.norm(), self.basis_u.dot(self.basis_v));
        if (nu - 1.0).abs() > ORTHONORMAL_TOLERANCE
            || (nv - 1.0).abs() > ORTHONORMAL_TOLERANCE
            || dot.abs() > ORTHONORMAL_TOLERANCE
        {
            return Err(GeometryError::NotOrthonormal {
                norm_u: nu,
                norm_v: nv,
                dot,
            });
        }
        if !self.anchor.is_finite() {
            return Err(GeometryError::Degenerate("non-finite anchor".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.alphas.len()
    }

    pub fn height(&self) -> usize {
        self.betas.len()
    }

    /// Unit plane normal `e_u x e_v`.
    pub fn normal(&self) -> Vec3 {
        self.basis_u.cross(self.basis_v)
    }

    fn coords(&self, row: usize, col: usize) -> Result<(f64, f64), GeometryError> {
        match (self.alphas.get(col), self.betas.get(row)) {
            (Some(a), Some(b)) => Ok((*a, *b)),
            _ => Err(GeometryError::PixelOutOfRange {
                row,
                col,
                height: self.height(),
                width: self.width(),
            }),
        }
    }

    /// Pixel-center spacing along rows and columns (mm).
    pub fn pixel_spacing(&self) -> (f64, f64) {
        let step = |v: &[f64]| {
            if v.len() < 2 {
                0.0
            } else {
                (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64
            }
        };
        (step(&self.betas), step(&self.alphas))
    }
}

/// Axis-angle rotation (radians) and translation (mm) applied to a plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidParams {
    pub axis_angle: Vec3,
    pub translation: Vec3,
}

impl RigidParams {
    pub fn is_zero(&self) -> bool {
        self.axis_angle == Vec3::ZERO && self.translation == Vec3::ZERO
    }

    pub fn to_array(&self) -> [f64; 6] {
        let a = self.axis_angle;
        let t = self.translation;
        [a.x, a.y, a.z, t.x, t.y, t.z]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            axis_angle: Vec3::new(v[0], v[1], v[2]),
            translation: Vec3::new(v[3], v[4], v[5]),
        }
    }
}

/// `a + alpha_ij e_u + beta_ij e_v`.
pub fn plane_point(plane: &ViewPlane, row: usize, col: usize) -> Result<Vec3, GeometryError> {
    let (alpha, beta) = plane.coords(row, col)?;
    Ok(plane.anchor + plane.basis_u * alpha + plane.basis_v * beta)
}

/// `(a + t) + alpha_ij R e_u + beta_ij R e_v`. With zero rigid parameters
/// this evaluates exactly the same expression as [`plane_point`].
pub fn rigid_plane_point(
    plane: &ViewPlane,
    rigid: &RigidParams,
    row: usize,
    col: usize,
) -> Result<Vec3, GeometryError> {
    let (alpha, beta) = plane.coords(row, col)?;
    if rigid.is_zero() {
        return Ok(plane.anchor + plane.basis_u * alpha + plane.basis_v * beta);
    }
    let (eu, ev) = rotated_basis(plane, rigid);
    Ok((plane.anchor + rigid.translation) + eu * alpha + ev * beta)
}

/// `(R e_u, R e_v)` for the plane's basis.
pub fn rotated_basis(plane: &ViewPlane, rigid: &RigidParams) -> (Vec3, Vec3) {
    let r = rodrigues(rigid.axis_angle);
    (r.mul_vec(plane.basis_u), r.mul_vec(plane.basis_v))
}

/// Taped `R(alpha) v = v + b (alpha x v) + c alpha x (alpha x v)`, where
/// `alpha` is a `[3]` node and `v` a constant direction.
pub fn rotate_on_tape(tape: &mut Tape, axis_angle: NodeId, v: Vec3) -> Result<NodeId, GeometryError> {
    let v = tape.constant(Tensor::vector(v.to_array().to_vec()));
    let theta_sq = tape.dot(axis_angle, axis_angle)?;
    let (b, c) = if tape.value(theta_sq).item() < SMALL_ANGLE * SMALL_ANGLE {
        let b = tape.scale(theta_sq, -1.0 / 6.0)?;
        let b = tape.add_scalar(b, 1.0)?;
        let c = tape.scale(theta_sq, -1.0 / 24.0)?;
        let c = tape.add_scalar(c, 0.5)?;
        (b, c)
    } else {
        let theta = tape.sqrt(theta_sq)?;
        let sin = tape.sin(theta)?;
        let b = tape.div(sin, theta)?;
        let cos = tape.cos(theta)?;
        let one_minus_cos = tape.scale(cos, -1.0)?;
        let one_minus_cos = tape.add_scalar(one_minus_cos, 1.0)?;
        let c = tape.div(one_minus_cos, theta_sq)?;
        (b, c)
    };
    let kv = tape.cross(axis_angle, v)?;
    let kkv = tape.cross(axis_angle, kv)?;
    let first = tape.mul_scalar(kv, b)?;
    let second = tape.mul_scalar(kkv, c)?;
    let out = tape.add(v, first)?;
    Ok(tape.add(out, second)?)
}

/// Taped world coordinates `[n, 3]` of the pixels `(row, col)` under rigid
/// parameters held in `axis_angle` and `translation` (`[3]` nodes).
pub fn rigid_plane_points_on_tape(
    tape: &mut Tape,
    plane: &ViewPlane,
    pixels: &[(usize, usize)],
    axis_angle: NodeId,
    translation: NodeId,
) -> Result<NodeId, GeometryError> {
    let mut coeffs = Vec::with_capacity(2 * pixels.len());
    for &(row, col) in pixels {
        let (alpha, beta) = plane.coords(row, col)?;
        coeffs.push(alpha);
        coeffs.push(beta);
    }
    let coeffs = tape.constant(Tensor::matrix(pixels.len(), 2, coeffs));
    let eu = rotate_on_tape(tape, axis_angle, plane.basis_u)?;
    let ev = rotate_on_tape(tape, axis_angle, plane.basis_v)?;
    let basis = tape.concat(&[eu, ev])?;
    let basis = tape.reshape(basis, &[2, 3])?;
    let anchor = tape.constant(Tensor::vector(plane.anchor.to_array().to_vec()));
    let origin = tape.add(anchor, translation)?;
    let points = tape.matmul(coeffs, basis)?;
    Ok(tape.add_row(points, origin)?)
}
