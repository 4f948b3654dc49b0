//! SE(2) poses, the exponential and logarithm maps, and the left (global)
//! plus/minus operators.
//!
//! Perturbations are applied on the left throughout the crate:
//! `tau ⊕ y = Exp(tau) ∘ y` and `y1 ⊖ y2 = Log(y1 ∘ y2⁻¹)`. Tangent
//! coordinates are ordered `(rho_x, rho_y, phi)`.

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};

/// Below this rotation magnitude the closed forms of `V` and `V⁻¹` are
/// replaced by their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-9;

/// Default step for numeric derivatives, about √ε for `f64`.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let wrapped = (angle + PI).rem_euclid(TAU) - PI;
    if wrapped <= -PI {
        wrapped + TAU
    } else {
        wrapped
    }
}

/// A rigid planar transform: translation `(x, y)` and heading `theta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose2 {
    x: f64,
    y: f64,
    theta: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Pose2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6}, {:.6})", self.x, self.y, self.theta)
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    /// Heading in `(-π, π]`.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    /// Homogeneous 3×3 matrix representation.
    pub fn matrix(&self) -> Matrix3<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix3::new(c, -s, self.x, s, c, self.y, 0.0, 0.0, 1.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    /// Group composition `self ∘ other`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            -(-s * self.x + c * self.y),
            -self.theta,
        )
    }

    /// `self⁻¹ ∘ other`, the pose of `other` expressed in this frame.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    pub fn exp(tau: &TangentVec) -> Pose2 {
        let t = v_matrix(tau.phi) * Vector2::new(tau.rho_x, tau.rho_y);
        Pose2::new(t[0], t[1], tau.phi)
    }

    /// Logarithm map. The heading is already in `(-π, π]`, so the result
    /// has `|phi| ≤ π`. Near `|theta| = π` the translation part stays finite
    /// but loses conditioning because `V(phi)⁻¹` grows like `π/2`.
    pub fn log(&self) -> TangentVec {
        let phi = self.theta;
        let rho = v_inverse(phi) * self.translation();
        TangentVec::new(rho[0], rho[1], phi)
    }

    /// Adjoint matrix acting on `(rho_x, rho_y, phi)`:
    /// `self ∘ Exp(tau) ∘ self⁻¹ = Exp(Ad · tau)`.
    pub fn adjoint(&self) -> Matrix3<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix3::new(c, -s, self.y, s, c, -self.x, 0.0, 0.0, 1.0)
    }
}

/// An element of se(2) in `(rho_x, rho_y, phi)` coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TangentVec {
    pub rho_x: f64,
    pub rho_y: f64,
    pub phi: f64,
}

impl TangentVec {
    pub fn new(rho_x: f64, rho_y: f64, phi: f64) -> Self {
        Self { rho_x, rho_y, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.rho_x, self.rho_y, self.phi)
    }

    pub fn is_finite(&self) -> bool {
        self.rho_x.is_finite() && self.rho_y.is_finite() && self.phi.is_finite()
    }

    pub fn exp(&self) -> Pose2 {
        Pose2::exp(self)
    }

    /// Right Jacobian `Jr` with `Exp(tau + d) ≈ Exp(tau) ∘ Exp(Jr · d)`.
    pub fn right_jacobian(&self) -> Matrix3<f64> {
        let phi = self.phi;
        let (a, b) = (sinc(phi), versine_over(phi));
        let (c, e) = (phi_minus_sin_over_sq(phi), versine_over_sq(phi));
        let (r1, r2) = (self.rho_x, self.rho_y);
        Matrix3::new(
            a,
            b,
            r1 * c - r2 * e,
            -b,
            a,
            r1 * e + r2 * c,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Inverse of [`right_jacobian`](Self::right_jacobian). The leading 2×2
    /// block has determinant `2(1 − cos φ)/φ²`, so it is invertible for
    /// `|φ| < 2π`.
    pub fn right_jacobian_inv(&self) -> Matrix3<f64> {
        let jr = self.right_jacobian();
        let block = jr.fixed_view::<2, 2>(0, 0).into_owned();
        let block_inv = block
            .try_inverse()
            .expect("right Jacobian is invertible for |phi| <= pi");
        let col = -block_inv * Vector2::new(jr[(0, 2)], jr[(1, 2)]);
        Matrix3::new(
            block_inv[(0, 0)],
            block_inv[(0, 1)],
            col[0],
            block_inv[(1, 0)],
            block_inv[(1, 1)],
            col[1],
            0.0,
            0.0,
            1.0,
        )
    }
}

impl std::ops::Add for TangentVec {
    type Output = TangentVec;

    fn add(self, rhs: TangentVec) -> TangentVec {
        TangentVec::new(
            self.rho_x + rhs.rho_x,
            self.rho_y + rhs.rho_y,
            self.phi + rhs.phi,
        )
    }
}

impl std::ops::Mul<f64> for TangentVec {
    type Output = TangentVec;

    fn mul(self, rhs: f64) -> TangentVec {
        TangentVec::new(self.rho_x * rhs, self.rho_y * rhs, self.phi * rhs)
    }
}

/// `tau ⊕ y = Exp(tau) ∘ y`.
pub fn oplus(tau: &TangentVec, y: &Pose2) -> Pose2 {
    tau.exp().compose(y)
}

/// `y1 ⊖ y2 = Log(y1 ∘ y2⁻¹)`.
pub fn ominus(y1: &Pose2, y2: &Pose2) -> TangentVec {
    y1.compose(&y2.inverse()).log()
}

fn sinc(phi: f64) -> f64 {
    if phi.abs() < SMALL_ANGLE {
        1.0 - phi * phi / 6.0
    } else {
        phi.sin() / phi
    }
}

/// `(1 − cos φ)/φ`, written with the half angle to avoid cancellation.
fn versine_over(phi: f64) -> f64 {
    if phi.abs() < SMALL_ANGLE {
        phi / 2.0
    } else {
        let h = (phi / 2.0).sin();
        2.0 * h * h / phi
    }
}

/// `(1 − cos φ)/φ²`.
fn versine_over_sq(phi: f64) -> f64 {
    if phi.abs() < SMALL_ANGLE {
        0.5 - phi * phi / 24.0
    } else {
        let h = (phi / 2.0).sin();
        2.0 * h * h / (phi * phi)
    }
}

/// `(φ − sin φ)/φ²`, which cancels badly for small φ.
fn phi_minus_sin_over_sq(phi: f64) -> f64 {
    if phi.abs() < 1e-4 {
        phi / 6.0 - phi.powi(3) / 120.0
    } else {
        (phi - phi.sin()) / (phi * phi)
    }
}

/// `V(φ)` mapping `rho` to the translation of `Exp`.
fn v_matrix(phi: f64) -> Matrix2<f64> {
    let a = sinc(phi);
    let b = versine_over(phi);
    Matrix2::new(a, -b, b, a)
}

fn v_inverse(phi: f64) -> Matrix2<f64> {
    let half = phi / 2.0;
    // (φ/2) / tan(φ/2), finite (zero) at φ = π
    let a = if phi.abs() < SMALL_ANGLE {
        1.0 - phi * phi / 12.0
    } else {
        half * half.cos() / half.sin()
    };
    Matrix2::new(a, half, -half, a)
}

/// A space with a retraction and a local difference, used by the numeric
/// differentiation utilities and by the outer-loop sensitivities.
pub trait Manifold: Clone {
    fn dof(&self) -> usize;
    /// `delta ⊕ self`.
    fn oplus(&self, delta: &[f64]) -> Self;
    /// `self ⊖ other`.
    fn ominus(&self, other: &Self) -> DVector<f64>;
    /// Derivative of `(δ ⊕ self) ⊖ other` with respect to `δ` at zero.
    fn ominus_jacobian(&self, other: &Self) -> DMatrix<f64>;
}

impl Manifold for Pose2 {
    fn dof(&self) -> usize {
        3
    }

    fn oplus(&self, delta: &[f64]) -> Self {
        oplus(&TangentVec::new(delta[0], delta[1], delta[2]), self)
    }

    fn ominus(&self, other: &Self) -> DVector<f64> {
        let t = ominus(self, other);
        DVector::from_column_slice(&[t.rho_x, t.rho_y, t.phi])
    }

    /// `Jl⁻¹(e) = Jr⁻¹(−e)` with `e = self ⊖ other`.
    fn ominus_jacobian(&self, other: &Self) -> DMatrix<f64> {
        let e = ominus(self, other);
        let j = (e * -1.0).right_jacobian_inv();
        DMatrix::from_iterator(3, 3, j.iter().copied())
    }
}

impl Manifold for DVector<f64> {
    fn dof(&self) -> usize {
        self.len()
    }

    fn oplus(&self, delta: &[f64]) -> Self {
        self + DVector::from_column_slice(delta)
    }

    fn ominus(&self, other: &Self) -> DVector<f64> {
        self - other
    }

    fn ominus_jacobian(&self, _other: &Self) -> DMatrix<f64> {
        DMatrix::identity(self.len(), self.len())
    }
}

impl Manifold for Vector2<f64> {
    fn dof(&self) -> usize {
        2
    }

    fn oplus(&self, delta: &[f64]) -> Self {
        self + Vector2::new(delta[0], delta[1])
    }

    fn ominus(&self, other: &Self) -> DVector<f64> {
        let d = self - other;
        DVector::from_column_slice(d.as_slice())
    }

    fn ominus_jacobian(&self, _other: &Self) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Difference {
    /// One-sided `(f(h ⊕ x) ⊖ f(x)) / h`.
    #[default]
    Forward,
    /// `(f(h ⊕ x) ⊖ f(−h ⊕ x)) / 2h`, for verification.
    Central,
}

/// Numeric left Jacobian of `f` at `at`: column `j` is
/// `f(step·e_j ⊕ at) ⊖ f(at)` divided by `step`. Works for any pair of
/// [`Manifold`] domains, so vector spaces use plain addition.
pub fn numeric_left_jacobian<X, Y, F>(f: F, at: &X, step: f64, scheme: Difference) -> DMatrix<f64>
where
    X: Manifold,
    Y: Manifold,
    F: Fn(&X) -> Y,
{
    assert!(step > 0.0, "numeric step must be positive");
    let n = at.dof();
    let base = f(at);
    let m = base.dof();
    let mut jac = DMatrix::zeros(m, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = step;
        let column = match scheme {
            Difference::Forward => f(&at.oplus(&e)).ominus(&base) / step,
            Difference::Central => {
                let plus = f(&at.oplus(&e));
                e[j] = -step;
                let minus = f(&at.oplus(&e));
                plus.ominus(&minus) / (2.0 * step)
            }
        };
        jac.set_column(j, &column);
        e[j] = 0.0;
    }
    jac
}
