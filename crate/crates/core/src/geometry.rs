//! Rigid-body geometry: SE(3)/se(3) maps, camera intrinsics and pinhole projection
//! of depth-backprojected pixels.
//!
//! Twist coordinates are ordered `(ω, v)`: rotation first, translation second.
//! Pose perturbations are always applied on the left, `exp(δξ)·T`.
//!
//! Image coordinates are continuous with pixel centres at half-integers: the raster
//! cell at column `i`, row `j` is centred at `(i + 0.5, j + 0.5)`. Under this convention
//! resampling an image by a factor `s` scales every intrinsic parameter by exactly `s`.

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{Matrix2x6, Matrix3, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

/// Minimum camera-frame depth for a valid projection.
pub const BEHIND_CAMERA_EPS: f64 = 1e-6;

/// Tolerance used to validate rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part: `(M21 - M12, M02 - M20, M10 - M01)`.
fn vee_antisym(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// se(3) element in `(ω, v)` coordinates, restricted to the principal branch `‖ω‖ ≤ π`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct Twist {
    omega: Vector3<f64>,
    v: Vector3<f64>,
}

impl TryFrom<[f64; 6]> for Twist {
    type Error = Error;

    fn try_from(a: [f64; 6]) -> Result<Self> {
        Twist::from_vector(&Vector6::from(a))
    }
}

impl From<Twist> for [f64; 6] {
    fn from(t: Twist) -> Self {
        [t.omega.x, t.omega.y, t.omega.z, t.v.x, t.v.y, t.v.z]
    }
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Result<Self> {
        if !omega.iter().chain(v.iter()).all(|x| x.is_finite()) {
            return Err(Error::invalid("twist has non-finite components"));
        }
        if omega.norm() > std::f64::consts::PI + 1e-12 {
            return Err(Error::invalid(format!(
                "twist rotation norm {} exceeds π",
                omega.norm()
            )));
        }
        Ok(Twist { omega, v })
    }

    pub fn zero() -> Self {
        Twist {
            omega: Vector3::zeros(),
            v: Vector3::zeros(),
        }
    }

    pub fn from_vector(xi: &Vector6<f64>) -> Result<Self> {
        Twist::new(xi.fixed_rows::<3>(0).into(), xi.fixed_rows::<3>(3).into())
    }

    pub fn omega(&self) -> &Vector3<f64> {
        &self.omega
    }

    pub fn v(&self) -> &Vector3<f64> {
        &self.v
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Rigid transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl SE3Pose {
    /// Checked constructor: `R` must be orthonormal with determinant +1 within [`ROTATION_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::invalid("pose has non-finite entries"));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        let det = rotation.determinant();
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::invalid(format!(
                "rotation is not in SO(3): |RᵀR - I| = {ortho:e}, det = {det}"
            )));
        }
        Ok(SE3Pose {
            rotation,
            translation,
        })
    }

    /// Projects an approximately orthonormal matrix onto SO(3) (nearest rotation in Frobenius norm).
    pub fn from_approx(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::invalid("pose has non-finite entries"));
        }
        let svd = rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        let r = u * d * vt;
        if (r - rotation).norm() > 1e-3 {
            return Err(Error::invalid("matrix is too far from a rotation"));
        }
        Ok(SE3Pose {
            rotation: r,
            translation,
        })
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        SE3Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        SE3Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        SE3Pose {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`, i.e. apply `other` first.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let rt = self.rotation.transpose();
        SE3Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major 3×4 `[R|t]`, the layout of KITTI odometry pose files.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major_3x4(m: &[f64; 12]) -> Result<Self> {
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let t = Vector3::new(m[3], m[7], m[11]);
        SE3Pose::new(r, t).or_else(|_| SE3Pose::from_approx(r, t))
    }

    /// Largest absolute entry difference of the 3×4 matrices.
    pub fn max_abs_diff(&self, other: &SE3Pose) -> f64 {
        self.to_row_major_3x4()
            .iter()
            .zip(other.to_row_major_3x4().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Minimal scalar interface so the exponential map can be evaluated on dual numbers.
trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(x: f64) -> Self;
    fn re(self) -> f64;
    fn sin(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Real for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn re(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Forward-mode dual number `re + eps·ε`, `ε² = 0`.
#[derive(Debug, Clone, Copy)]
struct Dual {
    re: f64,
    eps: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            re: self.re + o.re,
            eps: self.eps + o.eps,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            re: self.re - o.re,
            eps: self.eps - o.eps,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            re: self.re * o.re,
            eps: self.re * o.eps + self.eps * o.re,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            re: self.re / o.re,
            eps: (self.eps * o.re - self.re * o.eps) / (o.re * o.re),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            re: -self.re,
            eps: -self.eps,
        }
    }
}

impl Real for Dual {
    fn cst(x: f64) -> Self {
        Dual { re: x, eps: 0.0 }
    }
    fn re(self) -> f64 {
        self.re
    }
    fn sin(self) -> Self {
        Dual {
            re: self.re.sin(),
            eps: self.eps * self.re.cos(),
        }
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual {
            re: s,
            eps: self.eps / (2.0 * s),
        }
    }
}

/// `(sin θ/θ, (1 - cos θ)/θ², (θ - sin θ)/θ³)` as functions of `θ²`.
/// Small angles use the Taylor series, which also covers the `θ → 0` limit.
fn exp_coefficients<T: Real>(theta2: T) -> (T, T, T) {
    let c = T::cst;
    if theta2.re() < 1e-4 {
        let t2 = theta2;
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        let a = c(1.0) - t2 / c(6.0) + t4 / c(120.0) - t6 / c(5040.0);
        let b = c(0.5) - t2 / c(24.0) + t4 / c(720.0) - t6 / c(40320.0);
        let cc = c(1.0 / 6.0) - t2 / c(120.0) + t4 / c(5040.0) - t6 / c(362880.0);
        (a, b, cc)
    } else {
        let theta = theta2.sqrt();
        let s = theta.sin();
        let half = (theta / c(2.0)).sin();
        let a = s / theta;
        let b = c(2.0) * half * half / theta2;
        let cc = (theta - s) / (theta2 * theta);
        (a, b, cc)
    }
}

type Mat3<T> = [[T; 3]; 3];

/// Rodrigues closed form on plain arrays, generic over the scalar.
fn exp_generic<T: Real>(xi: [T; 6]) -> (Mat3<T>, [T; 3]) {
    let c = T::cst;
    let (wx, wy, wz) = (xi[0], xi[1], xi[2]);
    let theta2 = wx * wx + wy * wy + wz * wz;
    let (a, b, cc) = exp_coefficients(theta2);
    let zero = c(0.0);
    let w = [[zero, -wz, wy], [wz, zero, -wx], [-wy, wx, zero]];
    let mut w2 = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = zero;
            for k in 0..3 {
                acc = acc + w[i][k] * w[k][j];
            }
            w2[i][j] = acc;
        }
    }
    let mut r = [[zero; 3]; 3];
    let mut v = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { c(1.0) } else { zero };
            r[i][j] = id + a * w[i][j] + b * w2[i][j];
            v[i][j] = id + b * w[i][j] + cc * w2[i][j];
        }
    }
    let mut t = [zero; 3];
    for i in 0..3 {
        t[i] = v[i][0] * xi[3] + v[i][1] * xi[4] + v[i][2] * xi[5];
    }
    (r, t)
}

/// Exponential of arbitrary twist coordinates `(ω, v)`; no principal-branch restriction.
pub fn exp_coords(xi: &Vector6<f64>) -> SE3Pose {
    let (r, t) = exp_generic([xi[0], xi[1], xi[2], xi[3], xi[4], xi[5]]);
    SE3Pose::from_parts_unchecked(
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        ),
        Vector3::new(t[0], t[1], t[2]),
    )
}

pub fn se3_exp(xi: &Twist) -> SE3Pose {
    exp_coords(&xi.to_vector())
}

/// Partial derivatives of `exp(ξ)` with respect to each twist coordinate.
#[derive(Debug, Clone)]
pub struct ExpJacobian {
    pub pose: SE3Pose,
    pub d_rotation: [Matrix3<f64>; 6],
    pub d_translation: [Vector3<f64>; 6],
}

pub fn exp_jacobian(xi: &Vector6<f64>) -> ExpJacobian {
    let mut d_rotation = [Matrix3::zeros(); 6];
    let mut d_translation = [Vector3::zeros(); 6];
    for k in 0..6 {
        let mut arg = [Dual { re: 0.0, eps: 0.0 }; 6];
        for (j, a) in arg.iter_mut().enumerate() {
            *a = Dual {
                re: xi[j],
                eps: if j == k { 1.0 } else { 0.0 },
            };
        }
        let (r, t) = exp_generic(arg);
        for i in 0..3 {
            for j in 0..3 {
                d_rotation[k][(i, j)] = r[i][j].eps;
            }
            d_translation[k][i] = t[i].eps;
        }
    }
    ExpJacobian {
        pose: exp_coords(xi),
        d_rotation,
        d_translation,
    }
}

/// Logarithm onto the principal branch. Rotation angles at (or within 1e-3 of) π use the
/// symmetric part of `R` to extract the axis.
pub fn se3_log(pose: &SE3Pose) -> Twist {
    let r = pose.rotation();
    let cos_theta = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let anti = vee_antisym(r);
    let sin_theta = (anti.norm() / 2.0).min(1.0);
    let theta = sin_theta.atan2(cos_theta);

    let omega = if std::f64::consts::PI - theta < 1e-3 {
        // R ≈ 2nnᵀ - I + sinθ[n]×: recover n from the symmetric part.
        let bb = (r + r.transpose()) / 2.0 - Matrix3::identity() * cos_theta;
        let scale = 1.0 - cos_theta;
        let nnt = bb / scale;
        let mut col = 0;
        for i in 1..3 {
            if nnt[(i, i)] > nnt[(col, col)] {
                col = i;
            }
        }
        let mut n: Vector3<f64> = nnt.column(col).into();
        n /= n.norm();
        if n.dot(&anti) < 0.0 {
            n = -n;
        }
        n * theta
    } else {
        let (a, _, _) = exp_coefficients(theta * theta);
        anti / (2.0 * a)
    };

    let theta2 = omega.norm_squared();
    let w = skew(&omega);
    // V⁻¹ = I - ½[ω]× + k[ω]×², k = (1 - (θ/2)cot(θ/2))/θ²
    let k = if theta2 < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let th = theta2.sqrt();
        let half = th / 2.0;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    let v_inv = Matrix3::identity() - w * 0.5 + w * w * k;
    let v = v_inv * pose.translation();
    Twist { omega, v }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Pose-network style parameterisation: `R = Rz(γ)·Ry(β)·Rx(α)` for `angles = (α, β, γ)`,
/// translation divided by the mean scene depth.
pub fn euler_pose(angles: &Vector3<f64>, t: &Vector3<f64>, depth_mean: f64) -> Result<SE3Pose> {
    if !(depth_mean > 0.0) || !depth_mean.is_finite() {
        return Err(Error::invalid(format!(
            "depth mean must be positive, got {depth_mean}"
        )));
    }
    let r = rot_z(angles.z) * rot_y(angles.y) * rot_x(angles.x);
    SE3Pose::new(r, t / depth_mean)
}

/// Continuous image coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub x: f64,
    pub y: f64,
}

impl Pixel {
    pub fn new(x: f64, y: f64) -> Self {
        Pixel { x, y }
    }

    /// Centre of the raster cell at (column, row).
    pub fn center_of(col: usize, row: usize) -> Self {
        Pixel {
            x: col as f64 + 0.5,
            y: row as f64 + 0.5,
        }
    }

    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, 1.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid(format!("bad intrinsics {self:?}")));
        }
        if !(self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid(format!("bad intrinsics {self:?}")));
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        CameraIntrinsics {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
        }
    }

    /// `K⁻¹·(x, y, 1)ᵀ`.
    pub fn unproject(&self, p: &Pixel) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    pub fn project_point(&self, y: &Vector3<f64>) -> Pixel {
        Pixel {
            x: self.fx * y.x / y.z + self.cx,
            y: self.fy * y.y / y.z + self.cy,
        }
    }

    /// Derivative of the perspective projection with respect to the camera-frame point.
    pub fn projection_jacobian(&self, y: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / y.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * y.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * y.y * iz2,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Pixel,
    /// Camera-frame point `T·(d·K⁻¹·p)`.
    pub point: Vector3<f64>,
}

impl Projection {
    pub fn depth(&self) -> f64 {
        self.point.z
    }
}

/// `p_s ~ K·T·d·K⁻¹·p_t`. Fails with [`Error::BehindCamera`] when the transformed depth is
/// at most [`BEHIND_CAMERA_EPS`].
pub fn project(k: &CameraIntrinsics, pose: &SE3Pose, depth: f64, p: &Pixel) -> Result<Projection> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::invalid(format!("depth must be positive, got {depth}")));
    }
    if !p.is_finite() {
        return Err(Error::invalid("non-finite pixel"));
    }
    let point = pose.transform_point(&(k.unproject(p) * depth));
    if point.z <= BEHIND_CAMERA_EPS {
        return Err(Error::BehindCamera { z: point.z });
    }
    Ok(Projection {
        pixel: k.project_point(&point),
        point,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionJacobian {
    pub projection: Projection,
    pub d_depth: Vector2<f64>,
    /// With respect to a left twist perturbation `exp(δξ)·T`, columns `(ω, v)`.
    pub d_twist: Matrix2x6<f64>,
}

pub fn project_with_jacobian(
    k: &CameraIntrinsics,
    pose: &SE3Pose,
    depth: f64,
    p: &Pixel,
) -> Result<ProjectionJacobian> {
    let projection = project(k, pose, depth, p)?;
    let y = projection.point;
    let ju = k.projection_jacobian(&y);
    let d_depth = ju * (pose.rotation() * k.unproject(p));
    let mut d_twist = Matrix2x6::zeros();
    let d_omega = ju * (-skew(&y));
    d_twist.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_omega);
    d_twist.fixed_view_mut::<2, 3>(0, 3).copy_from(&ju);
    Ok(ProjectionJacobian {
        projection,
        d_depth,
        d_twist,
    })
}

/// Converts Euclidean partials `(∂f/∂R, ∂f/∂t)` into the left-perturbation gradient
/// `∂f(exp(δ)·T)/∂δ` at `δ = 0`.
pub fn left_gradient(pose: &SE3Pose, r_bar: &Matrix3<f64>, t_bar: &Vector3<f64>) -> Vector6<f64> {
    let m = r_bar * pose.rotation().transpose();
    let w = vee_antisym(&m) + pose.translation().cross(t_bar);
    Vector6::new(w.x, w.y, w.z, t_bar.x, t_bar.y, t_bar.z)
}

/// One choice of Euclidean partials whose left gradient is `g` (inverse of [`left_gradient`]).
pub fn euclidean_from_left(pose: &SE3Pose, g: &Vector6<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let t_bar = Vector3::new(g[3], g[4], g[5]);
    let m = Vector3::new(g[0], g[1], g[2]) - pose.translation().cross(&t_bar);
    (skew(&m) * pose.rotation() * 0.5, t_bar)
}
