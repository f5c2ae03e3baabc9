//! Singular value decomposition of small square matrices and its
//! differentials.
//!
//! The decomposition uses one-sided Jacobi rotations, which keeps high
//! relative accuracy for the small singular values that show up in strongly
//! compressed deformation gradients. Output is canonical: singular values
//! sorted descending and non-negative, `det(V) = +1`, and `det(U) = +1`
//! whenever `det(A) >= 0`.
//!
//! Two reverse-mode entry points are provided:
//!
//! * [`svd_vjp`] / [`svd_jvp`]: the raw factor differentials, with the
//!   `1/(σ_j² − σ_i²)` coupling clamped for near-degenerate pairs.
//! * [`spectral_vjp`]: the cotangent of `U·diag(h(σ))·Vᵀ` for a symmetric
//!   function `h`. This form has a finite limit at repeated singular values,
//!   so the return mappings and the polar rotation use it instead of the raw
//!   factor differentials.

use crate::linalg::{scalar, Matrix, Vector};

/// Singular-value gaps below this are treated as degenerate.
pub const GAP_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvdTriple<const D: usize> {
    pub u: Matrix<D>,
    pub sigma: Vector<D>,
    pub v: Matrix<D>,
}

impl<const D: usize> SvdTriple<D> {
    pub fn reconstruct(&self) -> Matrix<D> {
        self.compose(&self.sigma)
    }

    /// `U·diag(s)·Vᵀ`
    pub fn compose(&self, s: &Vector<D>) -> Matrix<D> {
        let mut us = self.u;
        for i in 0..D {
            for j in 0..D {
                us.0[i][j] *= s.0[j];
            }
        }
        us * self.v.transpose()
    }

    /// The rotation closest to the decomposed matrix, `U·D·Vᵀ` with `D` the
    /// reflection fix `diag(1, …, 1, det(U)det(V))`.
    pub fn polar_rotation(&self) -> Matrix<D> {
        self.compose(&self.rotation_signs())
    }

    /// Diagonal of the reflection fix used by [`polar_rotation`](Self::polar_rotation).
    pub fn rotation_signs(&self) -> Vector<D> {
        let mut s = Vector::splat(1.0);
        if self.u.determinant() * self.v.determinant() < 0.0 {
            s.0[D - 1] = -1.0;
        }
        s
    }
}

pub fn svd<const D: usize>(a: &Matrix<D>) -> SvdTriple<D> {
    let mut w = *a;
    let mut v = Matrix::<D>::identity();

    for _sweep in 0..64 {
        let mut rotated = false;
        for p in 0..D {
            for q in (p + 1)..D {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..D {
                    alpha += w.0[i][p] * w.0[i][p];
                    beta += w.0[i][q] * w.0[i][q];
                    gamma += w.0[i][p] * w.0[i][q];
                }
                if gamma == 0.0 || scalar::abs(gamma) <= 1e-15 * scalar::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (scalar::abs(zeta) + scalar::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / scalar::sqrt(1.0 + t * t);
                let s = c * t;
                for i in 0..D {
                    let (wp, wq) = (w.0[i][p], w.0[i][q]);
                    w.0[i][p] = c * wp - s * wq;
                    w.0[i][q] = s * wp + c * wq;
                    let (vp, vq) = (v.0[i][p], v.0[i][q]);
                    v.0[i][p] = c * vp - s * vq;
                    v.0[i][q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma = Vector::<D>::zeros();
    for j in 0..D {
        sigma.0[j] = w.column(j).norm();
    }

    // sort descending (stable selection keeps ties deterministic)
    let mut order = [0usize; D];
    for (i, o) in order.iter_mut().enumerate() {
        *o = i;
    }
    for i in 0..D {
        let mut best = i;
        for j in (i + 1)..D {
            if sigma.0[order[j]] > sigma.0[order[best]] {
                best = j;
            }
        }
        order.swap(i, best);
    }
    let mut sorted_sigma = Vector::<D>::zeros();
    let mut sorted_w = Matrix::<D>::zeros();
    let mut sorted_v = Matrix::<D>::zeros();
    for (k, &j) in order.iter().enumerate() {
        sorted_sigma.0[k] = sigma.0[j];
        sorted_w.set_column(k, &w.column(j));
        sorted_v.set_column(k, &v.column(j));
    }
    let (sigma, w, mut v) = (sorted_sigma, sorted_w, sorted_v);

    // canonical signs: largest component of every right singular vector but
    // the last is positive; the last is fixed by det(V) = +1
    for j in 0..D.saturating_sub(1) {
        let col = v.column(j);
        let mut k = 0;
        for i in 1..D {
            if scalar::abs(col.0[i]) > scalar::abs(col.0[k]) {
                k = i;
            }
        }
        if col.0[k] < 0.0 {
            v.set_column(j, &(col * -1.0));
        }
    }
    let mut w = w;
    for j in 0..D {
        // keep W = A·V consistent with the sign flips above
        let mut col = Vector::zeros();
        for i in 0..D {
            let mut s = 0.0;
            for k in 0..D {
                s += a.0[i][k] * v.0[k][j];
            }
            col.0[i] = s;
        }
        if sigma.0[j] > 0.0 {
            w.set_column(j, &col);
        }
    }
    if v.determinant() < 0.0 {
        let last = v.column(D - 1) * -1.0;
        v.set_column(D - 1, &last);
        let wl = w.column(D - 1) * -1.0;
        w.set_column(D - 1, &wl);
    }

    let scale = sigma.0[0].max(f64::MIN_POSITIVE);
    let mut u = Matrix::<D>::zeros();
    let mut filled = [false; D];
    for j in 0..D {
        if sigma.0[j] > 1e-14 * scale && sigma.0[j] > 0.0 {
            u.set_column(j, &(w.column(j) * (1.0 / sigma.0[j])));
            filled[j] = true;
        }
    }
    complete_basis(&mut u, &filled);
    SvdTriple { u, sigma, v }
}

/// Fills the columns of `u` not marked in `filled` with an orthonormal
/// completion, choosing the last free sign so that `det(u) = +1`.
fn complete_basis<const D: usize>(u: &mut Matrix<D>, filled: &[bool; D]) {
    if filled.iter().all(|f| *f) {
        return;
    }
    for j in 0..D {
        if filled[j] {
            continue;
        }
        // Gram-Schmidt the coordinate axis least aligned with the filled set
        let mut best = Vector::zeros();
        let mut best_norm = -1.0;
        for axis in 0..D {
            let mut cand = Vector::<D>::unit(axis);
            for k in 0..D {
                if k != j {
                    let c = u.column(k);
                    if c.norm_squared() > 0.0 {
                        cand -= c * c.dot(&cand);
                    }
                }
            }
            let n = cand.norm();
            if n > best_norm {
                best_norm = n;
                best = cand * (1.0 / n);
            }
        }
        u.set_column(j, &best);
    }
    if u.determinant() < 0.0 {
        // flip one of the completed columns
        let j = (0..D).rev().find(|&j| !filled[j]).unwrap();
        let c = u.column(j) * -1.0;
        u.set_column(j, &c);
    }
}

fn clamp_gap(g: f64) -> f64 {
    if scalar::abs(g) < GAP_TOLERANCE {
        if g < 0.0 {
            -GAP_TOLERANCE
        } else {
            GAP_TOLERANCE
        }
    } else {
        g
    }
}

/// `K_ij = 1/(σ_j² − σ_i²)` with the gap `σ_j − σ_i` clamped away from zero.
fn coupling<const D: usize>(sigma: &Vector<D>, i: usize, j: usize) -> f64 {
    let gap = clamp_gap(sigma.0[j] - sigma.0[i]);
    let sum = (sigma.0[j] + sigma.0[i]).max(GAP_TOLERANCE);
    1.0 / (gap * sum)
}

/// Cotangent of `A` from cotangents of the factors `(U, σ, V)`.
pub fn svd_vjp<const D: usize>(
    s: &SvdTriple<D>,
    u_bar: &Matrix<D>,
    sigma_bar: &Vector<D>,
    v_bar: &Matrix<D>,
) -> Matrix<D> {
    let p = s.u.transpose() * *u_bar;
    let q = s.v.transpose() * *v_bar;
    let mut m = Matrix::<D>::zeros();
    for i in 0..D {
        for j in 0..D {
            if i == j {
                m.0[i][i] = sigma_bar.0[i];
            } else {
                let k = coupling(&s.sigma, i, j);
                m.0[i][j] = k
                    * (s.sigma.0[j] * (p.0[i][j] - p.0[j][i])
                        + s.sigma.0[i] * (q.0[i][j] - q.0[j][i]));
            }
        }
    }
    s.u * m * s.v.transpose()
}

/// Forward differential of the factors for a perturbation `da`.
pub fn svd_jvp<const D: usize>(s: &SvdTriple<D>, da: &Matrix<D>) -> (Matrix<D>, Vector<D>, Matrix<D>) {
    let m = s.u.transpose() * *da * s.v;
    let mut omega_u = Matrix::<D>::zeros();
    let mut omega_v = Matrix::<D>::zeros();
    let mut dsigma = Vector::<D>::zeros();
    for i in 0..D {
        dsigma.0[i] = m.0[i][i];
        for j in 0..D {
            if i == j {
                continue;
            }
            let k = coupling(&s.sigma, i, j);
            omega_u.0[i][j] = k * (s.sigma.0[j] * m.0[i][j] + s.sigma.0[i] * m.0[j][i]);
            omega_v.0[i][j] = k * (s.sigma.0[i] * m.0[i][j] + s.sigma.0[j] * m.0[j][i]);
        }
    }
    (s.u * omega_u, dsigma, s.v * omega_v)
}

/// Cotangent of `A` for `G = U·diag(h(σ))·Vᵀ`, given the values `h`, the
/// Jacobian `jac[k][i] = ∂h_k/∂σ_i`, and the cotangent `g_bar` of `G`.
///
/// `h` must be symmetric under permutations of the singular values. At
/// (near-)repeated singular values the divided difference
/// `(h_i − h_j)/(σ_i − σ_j)` is replaced by its limit from the Jacobian.
pub fn spectral_vjp<const D: usize>(
    s: &SvdTriple<D>,
    h: &Vector<D>,
    jac: &Matrix<D>,
    g_bar: &Matrix<D>,
) -> Matrix<D> {
    let n = s.u.transpose() * *g_bar * s.v;
    let mut m = Matrix::<D>::zeros();
    for i in 0..D {
        let mut acc = 0.0;
        for k in 0..D {
            acc += jac.0[k][i] * n.0[k][k];
        }
        m.0[i][i] = acc;
    }
    for i in 0..D {
        for j in 0..D {
            if i == j {
                continue;
            }
            let (si, sj) = (s.sigma.0[i], s.sigma.0[j]);
            let a = if scalar::abs(si - sj) < GAP_TOLERANCE {
                0.5 * (jac.0[i][i] - jac.0[i][j] + jac.0[j][j] - jac.0[j][i])
            } else {
                (h.0[i] - h.0[j]) / (si - sj)
            };
            let b = (h.0[i] + h.0[j]) / (si + sj).max(GAP_TOLERANCE);
            m.0[i][j] = 0.5 * (a + b) * n.0[i][j] + 0.5 * (a - b) * n.0[j][i];
        }
    }
    s.u * m * s.v.transpose()
}
