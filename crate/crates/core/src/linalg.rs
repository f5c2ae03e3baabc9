//! Small fixed-size vectors and matrices for 2D/3D particle and grid math.
//!
//! Everything here is `Copy` and stack allocated. Matrices are row-major:
//! `m.0[i][j]` is row `i`, column `j`. Only `D = 2` and `D = 3` are supported
//! by the dimension-specific helpers (determinant, inverse, rotations).

use core::ops::{Add, AddAssign, Index, IndexMut, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar math backed by `libm` so the crate stays `no_std`.
pub mod scalar {
    #[inline]
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
    #[inline]
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    #[inline]
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    #[inline]
    pub fn sin(x: f64) -> f64 {
        libm::sin(x)
    }
    #[inline]
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }
    #[inline]
    pub fn cbrt(x: f64) -> f64 {
        libm::cbrt(x)
    }
    #[inline]
    pub fn powf(x: f64, y: f64) -> f64 {
        libm::pow(x, y)
    }
    #[inline]
    pub fn atan2(y: f64, x: f64) -> f64 {
        libm::atan2(y, x)
    }
    #[inline]
    pub fn floor(x: f64) -> f64 {
        libm::floor(x)
    }
    #[inline]
    pub fn round(x: f64) -> f64 {
        libm::round(x)
    }
    #[inline]
    pub fn abs(x: f64) -> f64 {
        libm::fabs(x)
    }
    #[inline]
    pub fn hypot(x: f64, y: f64) -> f64 {
        libm::hypot(x, y)
    }
}

use scalar::{abs, sqrt};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vector<const D: usize>(pub [f64; D]);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matrix<const D: usize>(pub [[f64; D]; D]);

pub type Vec2 = Vector<2>;
pub type Vec3 = Vector<3>;
pub type Mat2 = Matrix<2>;
pub type Mat3 = Matrix<3>;

impl<const D: usize> Default for Vector<D> {
    fn default() -> Self {
        Self::zeros()
    }
}

impl<const D: usize> Default for Matrix<D> {
    fn default() -> Self {
        Self::zeros()
    }
}

impl<const D: usize> Vector<D> {
    #[inline]
    pub const fn zeros() -> Self {
        Vector([0.0; D])
    }

    #[inline]
    pub fn splat(v: f64) -> Self {
        Vector([v; D])
    }

    #[inline]
    pub fn unit(axis: usize) -> Self {
        let mut v = Self::zeros();
        v.0[axis] = 1.0;
        v
    }

    /// Builds a vector from the first `D` entries of `s`; missing entries are zero.
    pub fn from_slice(s: &[f64]) -> Self {
        let mut v = Self::zeros();
        for (dst, src) in v.0.iter_mut().zip(s) {
            *dst = *src;
        }
        v
    }

    #[inline]
    pub fn dot(&self, other: &Self) -> f64 {
        let mut s = 0.0;
        for i in 0..D {
            s += self.0[i] * other.0[i];
        }
        s
    }

    #[inline]
    pub fn norm_squared(&self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        sqrt(self.norm_squared())
    }

    #[inline]
    pub fn outer(&self, other: &Self) -> Matrix<D> {
        let mut m = Matrix::zeros();
        for i in 0..D {
            for j in 0..D {
                m.0[i][j] = self.0[i] * other.0[j];
            }
        }
        m
    }

    #[inline]
    pub fn component_mul(&self, other: &Self) -> Self {
        let mut v = *self;
        for i in 0..D {
            v.0[i] *= other.0[i];
        }
        v
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut v = *self;
        for x in v.0.iter_mut() {
            *x = f(*x);
        }
        v
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| if abs(*x) > m { abs(*x) } else { m })
    }
}

impl<const D: usize> Matrix<D> {
    #[inline]
    pub const fn zeros() -> Self {
        Matrix([[0.0; D]; D])
    }

    #[inline]
    pub fn identity() -> Self {
        Self::from_diagonal(&Vector::splat(1.0))
    }

    #[inline]
    pub fn from_diagonal(d: &Vector<D>) -> Self {
        let mut m = Self::zeros();
        for i in 0..D {
            m.0[i][i] = d.0[i];
        }
        m
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vector<D>; D]) -> Self {
        let mut m = Self::zeros();
        for j in 0..D {
            for i in 0..D {
                m.0[i][j] = cols[j].0[i];
            }
        }
        m
    }

    #[inline]
    pub fn column(&self, j: usize) -> Vector<D> {
        let mut v = Vector::zeros();
        for i in 0..D {
            v.0[i] = self.0[i][j];
        }
        v
    }

    #[inline]
    pub fn set_column(&mut self, j: usize, v: &Vector<D>) {
        for i in 0..D {
            self.0[i][j] = v.0[i];
        }
    }

    #[inline]
    pub fn diagonal(&self) -> Vector<D> {
        let mut v = Vector::zeros();
        for i in 0..D {
            v.0[i] = self.0[i][i];
        }
        v
    }

    #[inline]
    pub fn transpose(&self) -> Self {
        let mut m = Self::zeros();
        for i in 0..D {
            for j in 0..D {
                m.0[j][i] = self.0[i][j];
            }
        }
        m
    }

    #[inline]
    pub fn trace(&self) -> f64 {
        let mut t = 0.0;
        for i in 0..D {
            t += self.0[i][i];
        }
        t
    }

    /// Frobenius inner product `Σ a_ij b_ij`.
    #[inline]
    pub fn ddot(&self, other: &Self) -> f64 {
        let mut s = 0.0;
        for i in 0..D {
            for j in 0..D {
                s += self.0[i][j] * other.0[i][j];
            }
        }
        s
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        sqrt(self.ddot(self))
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        match D {
            1 => m[0][0],
            2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
            3 => {
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            }
            _ => panic!("determinant only implemented for D <= 3"),
        }
    }

    /// Cofactor matrix, `cof(A) = det(A) A⁻ᵀ`; defined for singular `A` too.
    pub fn cofactor(&self) -> Self {
        let m = &self.0;
        let mut c = Self::zeros();
        match D {
            1 => c.0[0][0] = 1.0,
            2 => {
                c.0[0][0] = m[1][1];
                c.0[0][1] = -m[1][0];
                c.0[1][0] = -m[0][1];
                c.0[1][1] = m[0][0];
            }
            3 => {
                for i in 0..3 {
                    for j in 0..3 {
                        let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
                        let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
                        c.0[i][j] = m[i1][j1] * m[i2][j2] - m[i1][j2] * m[i2][j1];
                    }
                }
            }
            _ => panic!("cofactor only implemented for D <= 3"),
        }
        c
    }

    /// Inverse, or `None` when the determinant is exactly zero or non-finite.
    pub fn try_inverse(&self) -> Option<Self> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        Some(self.cofactor().transpose() * (1.0 / det))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|r| r.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for r in &self.0 {
            for x in r {
                if abs(*x) > m {
                    m = abs(*x);
                }
            }
        }
        m
    }
}

/// Angular velocity crossed with a lever arm. In 2D only the z component of
/// `omega` is used.
pub fn angular_cross<const D: usize>(omega: &[f64; 3], r: &Vector<D>) -> Vector<D> {
    let mut out = Vector::zeros();
    match D {
        2 => {
            out.0[0] = -omega[2] * r.0[1];
            out.0[1] = omega[2] * r.0[0];
        }
        3 => {
            out.0[0] = omega[1] * r.0[2] - omega[2] * r.0[1];
            out.0[1] = omega[2] * r.0[0] - omega[0] * r.0[2];
            out.0[2] = omega[0] * r.0[1] - omega[1] * r.0[0];
        }
        _ => panic!("angular_cross needs D = 2 or 3"),
    }
    out
}

/// Reverse of [`angular_cross`]: given the cotangent `g` of `ω × r`, returns
/// the cotangents `(ω̄, r̄)`.
pub fn angular_cross_vjp<const D: usize>(
    omega: &[f64; 3],
    r: &Vector<D>,
    g: &Vector<D>,
) -> ([f64; 3], Vector<D>) {
    let mut w_bar = [0.0; 3];
    let mut r_bar = Vector::zeros();
    match D {
        2 => {
            w_bar[2] = r.0[0] * g.0[1] - r.0[1] * g.0[0];
            r_bar.0[0] = omega[2] * g.0[1];
            r_bar.0[1] = -omega[2] * g.0[0];
        }
        3 => {
            // ω̄ = r × g, r̄ = g × ω
            let (a, b) = (&r.0, &g.0);
            w_bar = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
            let w = omega;
            r_bar.0[0] = b[1] * w[2] - b[2] * w[1];
            r_bar.0[1] = b[2] * w[0] - b[0] * w[2];
            r_bar.0[2] = b[0] * w[1] - b[1] * w[0];
        }
        _ => panic!("angular_cross_vjp needs D = 2 or 3"),
    }
    (w_bar, r_bar)
}

/// Rotation by the rotation vector `phi` (exponential map). 2D uses `phi[2]`
/// as the angle.
pub fn rotation_exp<const D: usize>(phi: &[f64; 3]) -> Matrix<D> {
    let mut out = Matrix::zeros();
    match D {
        2 => {
            let (s, c) = (scalar::sin(phi[2]), scalar::cos(phi[2]));
            out.0[0][0] = c;
            out.0[0][1] = -s;
            out.0[1][0] = s;
            out.0[1][1] = c;
        }
        3 => {
            let basis = rodrigues_terms(phi);
            let k = skew(phi);
            let k2 = mat3_mul(&k, &k);
            for i in 0..3 {
                for j in 0..3 {
                    let id = if i == j { 1.0 } else { 0.0 };
                    out.0[i][j] = id + basis.a * k[i][j] + basis.b * k2[i][j];
                }
            }
        }
        _ => panic!("rotation_exp needs D = 2 or 3"),
    }
    out
}

/// Reverse of [`rotation_exp`]: cotangent of the rotation vector given the
/// cotangent `g` of the resulting rotation matrix.
pub fn rotation_exp_vjp<const D: usize>(phi: &[f64; 3], g: &Matrix<D>) -> [f64; 3] {
    let mut out = [0.0; 3];
    match D {
        2 => {
            let (s, c) = (scalar::sin(phi[2]), scalar::cos(phi[2]));
            // dR/dθ = [[-s, -c], [c, -s]]
            out[2] = -s * g.0[0][0] - c * g.0[0][1] + c * g.0[1][0] - s * g.0[1][1];
        }
        3 => {
            let t = rodrigues_terms(phi);
            let k = skew(phi);
            let k2 = mat3_mul(&k, &k);
            for (comp, slot) in out.iter_mut().enumerate() {
                let mut e = [0.0; 3];
                e[comp] = 1.0;
                let dk = skew(&e);
                let dkk = mat3_mul(&dk, &k);
                let kdk = mat3_mul(&k, &dk);
                let mut acc = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        let d = t.a * dk[i][j]
                            + t.b * (dkk[i][j] + kdk[i][j])
                            + phi[comp] * (t.da_over_theta * k[i][j] + t.db_over_theta * k2[i][j]);
                        acc += d * g.0[i][j];
                    }
                }
                *slot = acc;
            }
        }
        _ => panic!("rotation_exp_vjp needs D = 2 or 3"),
    }
    out
}

struct RodriguesTerms {
    a: f64,
    b: f64,
    da_over_theta: f64,
    db_over_theta: f64,
}

/// `a = sin θ/θ`, `b = (1 − cos θ)/θ²` and their θ-derivatives divided by θ,
/// with series expansions near zero.
fn rodrigues_terms(phi: &[f64; 3]) -> RodriguesTerms {
    let t2 = phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2];
    if t2 < 1e-8 {
        RodriguesTerms {
            a: 1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            b: 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            da_over_theta: -1.0 / 3.0 + t2 / 30.0,
            db_over_theta: -1.0 / 12.0 + t2 / 180.0,
        }
    } else {
        let t = sqrt(t2);
        let (s, c) = (scalar::sin(t), scalar::cos(t));
        let a = s / t;
        let b = (1.0 - c) / t2;
        RodriguesTerms {
            a,
            b,
            da_over_theta: (c - a) / t2,
            db_over_theta: (a - 2.0 * b) / t2,
        }
    }
}

fn skew(w: &[f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// operator impls

impl<const D: usize> Index<usize> for Vector<D> {
    type Output = f64;
    #[inline]
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl<const D: usize> IndexMut<usize> for Vector<D> {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl<const D: usize> Index<(usize, usize)> for Matrix<D> {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.0[i][j]
    }
}

impl<const D: usize> IndexMut<(usize, usize)> for Matrix<D> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.0[i][j]
    }
}

macro_rules! elementwise {
    ($ty:ident, $tr:ident, $f:ident, $tra:ident, $fa:ident, $op:tt) => {
        impl<const D: usize> $tr for $ty<D> {
            type Output = Self;
            #[inline]
            fn $f(mut self, rhs: Self) -> Self {
                self.$fa(rhs);
                self
            }
        }
        impl<const D: usize> $tra for $ty<D> {
            #[inline]
            fn $fa(&mut self, rhs: Self) {
                let a: &mut [f64] = self.as_flat_mut();
                let b: &[f64] = rhs.as_flat();
                for (x, y) in a.iter_mut().zip(b) {
                    *x $op *y;
                }
            }
        }
    };
}

impl<const D: usize> Vector<D> {
    #[inline]
    fn as_flat(&self) -> &[f64] {
        &self.0
    }
    #[inline]
    fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl<const D: usize> Matrix<D> {
    #[inline]
    fn as_flat(&self) -> &[f64] {
        self.0.as_flattened()
    }
    #[inline]
    fn as_flat_mut(&mut self) -> &mut [f64] {
        self.0.as_flattened_mut()
    }
}

elementwise!(Vector, Add, add, AddAssign, add_assign, +=);
elementwise!(Vector, Sub, sub, SubAssign, sub_assign, -=);
elementwise!(Matrix, Add, add, AddAssign, add_assign, +=);
elementwise!(Matrix, Sub, sub, SubAssign, sub_assign, -=);

impl<const D: usize> Neg for Vector<D> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self * -1.0
    }
}

impl<const D: usize> Neg for Matrix<D> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self * -1.0
    }
}

impl<const D: usize> Mul<f64> for Vector<D> {
    type Output = Self;
    #[inline]
    fn mul(mut self, s: f64) -> Self {
        self *= s;
        self
    }
}

impl<const D: usize> MulAssign<f64> for Vector<D> {
    #[inline]
    fn mul_assign(&mut self, s: f64) {
        for x in self.0.iter_mut() {
            *x *= s;
        }
    }
}

impl<const D: usize> Mul<f64> for Matrix<D> {
    type Output = Self;
    #[inline]
    fn mul(mut self, s: f64) -> Self {
        self *= s;
        self
    }
}

impl<const D: usize> MulAssign<f64> for Matrix<D> {
    #[inline]
    fn mul_assign(&mut self, s: f64) {
        for x in self.as_flat_mut() {
            *x *= s;
        }
    }
}

impl<const D: usize> Mul<Vector<D>> for Matrix<D> {
    type Output = Vector<D>;
    #[inline]
    fn mul(self, v: Vector<D>) -> Vector<D> {
        let mut out = Vector::zeros();
        for i in 0..D {
            let mut s = 0.0;
            for j in 0..D {
                s += self.0[i][j] * v.0[j];
            }
            out.0[i] = s;
        }
        out
    }
}

impl<const D: usize> Mul<Matrix<D>> for Matrix<D> {
    type Output = Matrix<D>;
    #[inline]
    fn mul(self, b: Matrix<D>) -> Matrix<D> {
        let mut out = Matrix::zeros();
        for i in 0..D {
            for k in 0..D {
                let a = self.0[i][k];
                for j in 0..D {
                    out.0[i][j] += a * b.0[k][j];
                }
            }
        }
        out
    }
}
