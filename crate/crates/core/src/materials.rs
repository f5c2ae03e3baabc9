//! Constitutive models, plastic return mappings and rigid shape matching.
//!
//! Every map comes with a reverse-mode companion. Return mappings are
//! spectral functions `F ↦ U·diag(h(σ))·Vᵀ` and share [`spectral_vjp`].

use alloc::string::String;

use crate::linalg::{scalar, Matrix, Vector};
use crate::svd::{spectral_vjp, svd, SvdTriple};

/// `det(F) <= 0` (or a non-positive singular value) where the model needs a positive one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Degenerate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaterialKind {
    Elastic,
    Plastic,
    Liquid,
    ViscousLiquid,
    NonNewtonian,
    Rigid,
}

impl MaterialKind {
    pub const ALL: [MaterialKind; 6] = [
        MaterialKind::Elastic,
        MaterialKind::Plastic,
        MaterialKind::Liquid,
        MaterialKind::ViscousLiquid,
        MaterialKind::NonNewtonian,
        MaterialKind::Rigid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaterialKind::Elastic => "elastic",
            MaterialKind::Plastic => "plastic",
            MaterialKind::Liquid => "liquid",
            MaterialKind::ViscousLiquid => "viscous_liquid",
            MaterialKind::NonNewtonian => "non_newtonian",
            MaterialKind::Rigid => "rigid",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YieldParams {
    pub theta_c: f64,
    pub theta_s: f64,
    pub sigma_y: f64,
}

impl Default for YieldParams {
    fn default() -> Self {
        YieldParams { theta_c: 0.025, theta_s: 0.025, sigma_y: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaterialParams {
    pub name: String,
    pub kind: MaterialKind,
    pub mu: f64,
    pub lambda: f64,
    pub rho: f64,
    pub yield_params: YieldParams,
}

impl MaterialParams {
    pub fn new(name: &str, kind: MaterialKind, mu: f64, lambda: f64, rho: f64) -> Self {
        MaterialParams { name: name.into(), kind, mu, lambda, rho, yield_params: YieldParams::default() }
    }

    /// Named presets for the materials used by the task scenes.
    pub fn preset(name: &str) -> Option<Self> {
        use MaterialKind::*;
        let (kind, mu, rho) = match name {
            "water" | "milk" | "coffee" => (Liquid, 0.0, 1.0),
            "frothed_milk" | "sugar" => (ViscousLiquid, 208.33, 1.0),
            "ice_cream" => (NonNewtonian, 416.67, 0.5),
            "floating_object" => (Elastic, 416.67, 0.5),
            "light_liquid" => (Liquid, 0.0, 0.8),
            "heavy_liquid" => (Liquid, 0.0, 1.5),
            "transport_object" => (Rigid, 416.67, 5.0),
            _ => return None,
        };
        Some(Self::new(name, kind, mu, 277.78, rho))
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.mu >= 0.0 && self.lambda >= 0.0 && self.rho > 0.0) {
            return Err(alloc::format!("material '{}': need mu >= 0, lambda >= 0, rho > 0", self.name));
        }
        if self.kind == MaterialKind::Liquid && self.mu != 0.0 {
            return Err(alloc::format!("material '{}': liquid must have mu = 0", self.name));
        }
        let y = &self.yield_params;
        match self.kind {
            MaterialKind::Plastic if !(y.theta_c > 0.0 && y.theta_c < 1.0 && y.theta_s > 0.0) => {
                Err(alloc::format!("material '{}': need 0 < theta_c < 1 and theta_s > 0", self.name))
            }
            MaterialKind::NonNewtonian if !(y.sigma_y > 0.0 && self.mu > 0.0) => {
                Err(alloc::format!("material '{}': need sigma_y > 0 and mu > 0", self.name))
            }
            _ => Ok(()),
        }
    }

    pub fn projection(&self) -> Projection {
        match self.kind {
            MaterialKind::Elastic | MaterialKind::Rigid => Projection::None,
            MaterialKind::Liquid | MaterialKind::ViscousLiquid => Projection::Liquid,
            MaterialKind::Plastic => {
                Projection::Box { theta_c: self.yield_params.theta_c, theta_s: self.yield_params.theta_s }
            }
            MaterialKind::NonNewtonian => Projection::VonMises { sigma_y: self.yield_params.sigma_y, mu: self.mu },
        }
    }
}

/// Fixed-corotated energy density `μ·Σ(σᵢ−1)² + λ/2·(J−1)²`.
pub fn corotated_energy<const D: usize>(f: &Matrix<D>, mu: f64, lambda: f64) -> f64 {
    let s = svd(f);
    let j = f.determinant();
    let mut e = 0.0;
    for i in 0..D {
        let d = s.sigma.0[i] - 1.0;
        e += d * d;
    }
    mu * e + 0.5 * lambda * (j - 1.0) * (j - 1.0)
}

/// First Piola–Kirchhoff stress of the fixed-corotated model.
pub fn corotated_stress<const D: usize>(f: &Matrix<D>, mu: f64, lambda: f64) -> Result<Matrix<D>, Degenerate> {
    let j = f.determinant();
    if !(j > 0.0) {
        return Err(Degenerate);
    }
    let mut p = f.cofactor() * (lambda * (j - 1.0));
    if mu != 0.0 {
        let r = svd(f).polar_rotation();
        p += (*f - r) * (2.0 * mu);
    }
    Ok(p)
}

/// Kirchhoff stress `τ = P·Fᵀ`, the quantity the particle-to-grid transfer uses.
/// Does not check `det(F)`; the caller does.
pub fn kirchhoff_stress<const D: usize>(f: &Matrix<D>, mu: f64, lambda: f64) -> Matrix<D> {
    let j = f.determinant();
    let mut tau = Matrix::identity() * (lambda * j * (j - 1.0));
    if mu != 0.0 {
        let r = svd(f).polar_rotation();
        tau += (*f - r) * f.transpose() * (2.0 * mu);
    }
    tau
}

/// Cotangent of `F` given the cotangent of [`kirchhoff_stress`].
pub fn kirchhoff_stress_vjp<const D: usize>(f: &Matrix<D>, mu: f64, lambda: f64, tau_bar: &Matrix<D>) -> Matrix<D> {
    let j = f.determinant();
    let j_bar = lambda * (2.0 * j - 1.0) * tau_bar.trace();
    let mut f_bar = f.cofactor() * j_bar;
    if mu != 0.0 {
        let s = svd(f);
        let r = s.polar_rotation();
        let sym = *tau_bar + tau_bar.transpose();
        // τ = 2μ(F·Fᵀ − R·Fᵀ)
        f_bar += sym * *f * (2.0 * mu);
        f_bar -= tau_bar.transpose() * r * (2.0 * mu);
        let r_bar = *tau_bar * *f * (-2.0 * mu);
        f_bar += spectral_vjp(&s, &Vector::splat(1.0), &Matrix::zeros(), &r_bar);
    }
    f_bar
}

/// Per-material return mapping applied after the deformation update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    None,
    Liquid,
    Box { theta_c: f64, theta_s: f64 },
    VonMises { sigma_y: f64, mu: f64 },
}

impl Projection {
    pub fn apply<const D: usize>(&self, f: &Matrix<D>) -> Result<Matrix<D>, Degenerate> {
        match *self {
            Projection::None => Ok(*f),
            Projection::Liquid => liquid_project(f),
            Projection::Box { theta_c, theta_s } => box_yield_project(f, theta_c, theta_s),
            Projection::VonMises { sigma_y, mu } => von_mises_project(f, sigma_y, mu),
        }
    }

    /// Cotangent of the input given the cotangent of the projected matrix.
    pub fn vjp<const D: usize>(&self, f: &Matrix<D>, out_bar: &Matrix<D>) -> Matrix<D> {
        match *self {
            Projection::None => *out_bar,
            Projection::Liquid => liquid_project_vjp(f, out_bar),
            Projection::Box { theta_c, theta_s } => {
                let s = svd(f);
                let (lo, hi) = (1.0 - theta_c, 1.0 + theta_s);
                let h = s.sigma.map(|x| x.clamp(lo, hi));
                let mut jac = Matrix::zeros();
                for i in 0..D {
                    let x = s.sigma.0[i];
                    jac.0[i][i] = if x > lo && x < hi { 1.0 } else { 0.0 };
                }
                spectral_vjp(&s, &h, &jac, out_bar)
            }
            Projection::VonMises { sigma_y, mu } => {
                let s = svd(f);
                let (h, jac) = von_mises_spectral(&s.sigma, sigma_y, mu);
                spectral_vjp(&s, &h, &jac, out_bar)
            }
        }
    }
}

pub fn box_yield_project<const D: usize>(f: &Matrix<D>, theta_c: f64, theta_s: f64) -> Result<Matrix<D>, Degenerate> {
    if !(f.determinant() > 0.0) {
        return Err(Degenerate);
    }
    let s = svd(f);
    let (lo, hi) = (1.0 - theta_c, 1.0 + theta_s);
    if s.sigma.0.iter().all(|x| *x >= lo && *x <= hi) {
        return Ok(*f);
    }
    Ok(s.compose(&s.sigma.map(|x| x.clamp(lo, hi))))
}

/// Returned singular values and their Jacobian `∂h/∂σ` for the von Mises return.
fn von_mises_spectral<const D: usize>(sigma: &Vector<D>, sigma_y: f64, mu: f64) -> (Vector<D>, Matrix<D>) {
    let eps = sigma.map(scalar::ln);
    let mean = eps.0.iter().sum::<f64>() / D as f64;
    let dev = eps - Vector::splat(mean);
    let norm = dev.norm();
    let radius = sigma_y / (2.0 * mu);
    if norm <= radius {
        return (*sigma, Matrix::identity());
    }
    let scale = radius / norm;
    let eps_new = Vector::splat(mean) + dev * scale;
    let h = eps_new.map(scalar::exp);
    // ∂ε'/∂ε = 11ᵀ/D + s·(Π − ê·êᵀ)
    let e_hat = dev * (1.0 / norm);
    let mut jac = Matrix::zeros();
    for i in 0..D {
        for j in 0..D {
            let pi = if i == j { 1.0 } else { 0.0 } - 1.0 / D as f64;
            let de = 1.0 / D as f64 + scale * (pi - e_hat.0[i] * e_hat.0[j]);
            jac.0[i][j] = h.0[i] * de / sigma.0[j];
        }
    }
    (h, jac)
}

pub fn von_mises_project<const D: usize>(f: &Matrix<D>, sigma_y: f64, mu: f64) -> Result<Matrix<D>, Degenerate> {
    if !(f.determinant() > 0.0) {
        return Err(Degenerate);
    }
    let s = svd(f);
    if s.sigma.0.iter().any(|x| !(*x > 0.0)) {
        return Err(Degenerate);
    }
    let eps = s.sigma.map(scalar::ln);
    let mean = eps.0.iter().sum::<f64>() / D as f64;
    if 2.0 * mu * (eps - Vector::splat(mean)).norm() <= sigma_y {
        return Ok(*f);
    }
    let (h, _) = von_mises_spectral(&s.sigma, sigma_y, mu);
    Ok(s.compose(&h))
}

pub fn liquid_project<const D: usize>(f: &Matrix<D>) -> Result<Matrix<D>, Degenerate> {
    let j = f.determinant();
    if !(j > 0.0) {
        return Err(Degenerate);
    }
    Ok(Matrix::identity() * root(j, D))
}

fn root(j: f64, d: usize) -> f64 {
    match d {
        1 => j,
        2 => scalar::sqrt(j),
        3 => scalar::cbrt(j),
        _ => scalar::powf(j, 1.0 / d as f64),
    }
}

pub fn liquid_project_vjp<const D: usize>(f: &Matrix<D>, out_bar: &Matrix<D>) -> Matrix<D> {
    let j = f.determinant();
    // d(J^(1/D))/dJ = J^(1/D) / (D·J)
    let dj = root(j, D) / (D as f64 * j);
    f.cofactor() * (out_bar.trace() * dj)
}

/// Result of the mass-weighted Kabsch fit.
#[derive(Clone, Copy, Debug)]
pub struct RigidFit<const D: usize> {
    pub rotation: Matrix<D>,
    /// `x = R·x⁰ + translation`
    pub translation: Vector<D>,
    pub center: Vector<D>,
    pub rest_center: Vector<D>,
    svd: SvdTriple<D>,
    signs: Vector<D>,
}

/// Rank deficiency of the covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RigidityError;

fn centroid<const D: usize>(points: &[Vector<D>], masses: &[f64]) -> Vector<D> {
    let mut c = Vector::zeros();
    let mut m = 0.0;
    for (p, w) in points.iter().zip(masses) {
        c += *p * *w;
        m += w;
    }
    c * (1.0 / m)
}

pub fn rigid_shape_match<const D: usize>(
    current: &[Vector<D>],
    rest: &[Vector<D>],
    masses: &[f64],
) -> Result<RigidFit<D>, RigidityError> {
    if current.len() != rest.len() || current.len() != masses.len() || current.len() < D {
        return Err(RigidityError);
    }
    let c = centroid(current, masses);
    let c0 = centroid(rest, masses);
    let mut a = Matrix::zeros();
    let mut scale = 0.0f64;
    for i in 0..current.len() {
        let r0 = rest[i] - c0;
        a += (current[i] - c).outer(&r0) * masses[i];
        scale = scale.max(masses[i] * r0.norm_squared());
    }
    let s = svd(&a);
    let tol = 1e-10 * s.sigma.0[0].max(scale * 1e-300);
    if D >= 2 && !(s.sigma.0[D - 2] > tol) || !s.sigma.0[0].is_finite() {
        return Err(RigidityError);
    }
    let mut signs = Vector::splat(1.0);
    if s.u.determinant() * s.v.determinant() < 0.0 {
        signs.0[D - 1] = -1.0;
    }
    let rotation = s.compose(&signs);
    Ok(RigidFit { rotation, translation: c - rotation * c0, center: c, rest_center: c0, svd: s, signs })
}

impl<const D: usize> RigidFit<D> {
    pub fn apply(&self, rest: &Vector<D>) -> Vector<D> {
        self.rotation * (*rest - self.rest_center) + self.center
    }

    /// Reverse of `x'ᵢ = R·(x⁰ᵢ − c⁰) + c` through the fit: accumulates the
    /// cotangents of the current positions into `current_bar`. `rotation_bar`
    /// is any extra cotangent on `R` itself.
    pub fn apply_vjp(
        &self,
        rest: &[Vector<D>],
        masses: &[f64],
        out_bar: &[Vector<D>],
        rotation_bar: &Matrix<D>,
        current_bar: &mut [Vector<D>],
    ) {
        let total: f64 = masses.iter().sum();
        let mut r_bar = *rotation_bar;
        let mut c_bar = Vector::zeros();
        for i in 0..rest.len() {
            r_bar += out_bar[i].outer(&(rest[i] - self.rest_center));
            c_bar += out_bar[i];
        }
        let a_bar = spectral_vjp(&self.svd, &self.signs, &Matrix::zeros(), &r_bar);
        for i in 0..rest.len() {
            // the centroid term of A cancels because rest offsets are centered
            current_bar[i] += a_bar * (rest[i] - self.rest_center) * masses[i] + c_bar * (masses[i] / total);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rotation_exp;
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_f<const D: usize>(rng: &mut ChaCha8Rng, spread: f64) -> Matrix<D> {
        loop {
            let mut f = Matrix::identity();
            for i in 0..D {
                for j in 0..D {
                    f.0[i][j] += rng.random_range(-spread..spread);
                }
            }
            let j = f.determinant();
            if (0.5..=2.0).contains(&j) {
                return f;
            }
        }
    }

    fn fd_energy_gradient<const D: usize>(f: &Matrix<D>, mu: f64, lambda: f64) -> Matrix<D> {
        let h = 1e-6;
        let mut g = Matrix::zeros();
        for i in 0..D {
            for j in 0..D {
                let mut fp = *f;
                fp.0[i][j] += h;
                let mut fm = *f;
                fm.0[i][j] -= h;
                g.0[i][j] = (corotated_energy(&fp, mu, lambda) - corotated_energy(&fm, mu, lambda)) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn stress_vanishes_at_rest_and_under_rotation() {
        let p = corotated_stress(&Matrix::<3>::identity(), 208.33, 277.78).unwrap();
        assert!(p.max_abs() < 1e-12);
        let r: Matrix<3> = rotation_exp(&[0.4, -1.1, 0.7]);
        let p = corotated_stress(&r, 208.33, 277.78).unwrap();
        assert!(p.max_abs() < 1e-10, "{p:?}");
    }

    #[test]
    fn stress_matches_energy_gradient() {
        let f = Matrix::from_diagonal(&Vector([1.1, 1.0, 1.0]));
        let p = corotated_stress(&f, 208.33, 277.78).unwrap();
        let g = fd_energy_gradient(&f, 208.33, 277.78);
        assert!((p - g).max_abs() <= 1e-6 * g.max_abs(), "{p:?} vs {g:?}");

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let f: Matrix<2> = random_f(&mut rng, 0.4);
            let p = corotated_stress(&f, 208.33, 277.78).unwrap();
            let g = fd_energy_gradient(&f, 208.33, 277.78);
            assert!((p - g).max_abs() <= 1e-6 * g.max_abs().max(1.0));
            let f: Matrix<3> = random_f(&mut rng, 0.4);
            let p = corotated_stress(&f, 416.67, 277.78).unwrap();
            let g = fd_energy_gradient(&f, 416.67, 277.78);
            assert!((p - g).max_abs() <= 1e-6 * g.max_abs().max(1.0));
        }
    }

    #[test]
    fn degenerate_deformation_is_rejected() {
        let f = Matrix::from_diagonal(&Vector([1.0, -1.0]));
        assert_eq!(corotated_stress(&f, 1.0, 1.0), Err(Degenerate));
        assert_eq!(liquid_project(&f), Err(Degenerate));
        assert_eq!(von_mises_project(&f, 1.0, 1.0), Err(Degenerate));
    }

    #[test]
    fn kirchhoff_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..40 {
            let f: Matrix<3> = random_f(&mut rng, 0.3);
            let mut w = Matrix::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    w.0[i][j] = rng.random_range(-1.0..1.0);
                }
            }
            let fb = kirchhoff_stress_vjp(&f, 208.33, 277.78, &w);
            for i in 0..3 {
                for j in 0..3 {
                    let mut fp = f;
                    fp.0[i][j] += h;
                    let mut fm = f;
                    fm.0[i][j] -= h;
                    let fd = (kirchhoff_stress(&fp, 208.33, 277.78).ddot(&w)
                        - kirchhoff_stress(&fm, 208.33, 277.78).ddot(&w))
                        / (2.0 * h);
                    assert!((fd - fb.0[i][j]).abs() < 1e-5 * fd.abs().max(1.0), "{fd} vs {}", fb.0[i][j]);
                }
            }
        }
    }

    #[test]
    fn box_clamp_examples() {
        let f = Matrix::from_diagonal(&Vector([1.01, 0.99]));
        assert_eq!(box_yield_project(&f, 0.025, 0.025).unwrap(), f);
        let f = Matrix::from_diagonal(&Vector([1.2, 1.0]));
        let g = box_yield_project(&f, 0.025, 0.05).unwrap();
        assert!((g - Matrix::from_diagonal(&Vector([1.05, 1.0]))).max_abs() < 1e-14);
    }

    #[test]
    fn von_mises_examples() {
        let f = Matrix::identity() * 1.3;
        assert_eq!(von_mises_project::<3>(&f, 0.1, 10.0).unwrap(), f);
        let f = Matrix::from_diagonal(&Vector([2.0, 0.5]));
        let (sigma_y, mu) = (0.2, 1.0);
        let g = von_mises_project(&f, sigma_y, mu).unwrap();
        let s = svd(&g);
        let eps = s.sigma.map(scalar::ln);
        let mean = (eps.0[0] + eps.0[1]) / 2.0;
        let dev = (eps - Vector::splat(mean)).norm();
        assert!((2.0 * mu * dev - sigma_y).abs() <= 1e-10);
        assert!((g.determinant() - f.determinant()).abs() <= 1e-10);
    }

    #[test]
    fn liquid_examples() {
        assert_eq!(liquid_project(&Matrix::<3>::identity()).unwrap(), Matrix::identity());
        let f = Matrix::from_diagonal(&Vector([4.0, 2.0, 1.0]));
        assert!((liquid_project(&f).unwrap() - Matrix::identity() * 2.0).max_abs() < 1e-15);
    }

    #[test]
    fn projection_vjps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-7;
        let projections =
            [Projection::Liquid, Projection::Box { theta_c: 0.05, theta_s: 0.05 }, Projection::VonMises { sigma_y: 0.1, mu: 1.0 }];
        for proj in projections {
            for _ in 0..60 {
                let f: Matrix<3> = random_f(&mut rng, 0.3);
                let mut w = Matrix::zeros();
                for i in 0..3 {
                    for j in 0..3 {
                        w.0[i][j] = rng.random_range(-1.0..1.0);
                    }
                }
                let fb = proj.vjp(&f, &w);
                for i in 0..3 {
                    for j in 0..3 {
                        let mut fp = f;
                        fp.0[i][j] += h;
                        let mut fm = f;
                        fm.0[i][j] -= h;
                        let fd = (proj.apply(&fp).unwrap().ddot(&w) - proj.apply(&fm).unwrap().ddot(&w)) / (2.0 * h);
                        assert!((fd - fb.0[i][j]).abs() < 1e-5 * fd.abs().max(1.0), "{proj:?}: {fd} vs {}", fb.0[i][j]);
                    }
                }
            }
        }
    }

    #[test]
    fn rigid_fit_recovers_translation_and_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rest: Vec<Vector<3>> = (0..20)
            .map(|_| Vector([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        let masses: Vec<f64> = (0..20).map(|_| rng.random_range(0.5..2.0)).collect();
        let offset = Vector([0.3, -0.2, 1.5]);
        let moved: Vec<_> = rest.iter().map(|p| *p + offset).collect();
        let fit = rigid_shape_match(&moved, &rest, &masses).unwrap();
        assert!((fit.rotation - Matrix::identity()).max_abs() < 1e-12);
        assert!((fit.translation - offset).max_abs() < 1e-12);
        let q: Matrix<3> = rotation_exp(&[0.7, 0.2, -1.3]);
        let moved: Vec<_> = rest.iter().map(|p| q * *p).collect();
        let fit = rigid_shape_match(&moved, &rest, &masses).unwrap();
        assert!((fit.rotation - q).max_abs() < 1e-10);
    }

    #[test]
    fn collinear_body_is_rejected() {
        let rest: Vec<Vector<3>> = (0..5).map(|i| Vector([i as f64, 0.0, 0.0])).collect();
        let m = [1.0; 5];
        assert!(rigid_shape_match(&rest, &rest, &m).is_err());
    }

    #[test]
    fn rigid_fit_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rest: Vec<Vector<2>> =
            (0..8).map(|_| Vector([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])).collect();
        let masses: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..2.0)).collect();
        let cur: Vec<Vector<2>> =
            rest.iter().map(|p| *p + Vector([rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)])).collect();
        let w: Vec<Vector<2>> = (0..8).map(|_| Vector([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])).collect();
        let rb = Matrix([[0.4, -1.2], [0.7, 0.3]]);
        let f = |c: &[Vector<2>]| {
            let fit = rigid_shape_match(c, &rest, &masses).unwrap();
            rest.iter().zip(&w).map(|(r, w)| fit.apply(r).dot(w)).sum::<f64>() + fit.rotation.ddot(&rb)
        };
        let fit = rigid_shape_match(&cur, &rest, &masses).unwrap();
        let mut bar = alloc::vec![Vector::zeros(); 8];
        fit.apply_vjp(&rest, &masses, &w, &rb, &mut bar);
        let h = 1e-6;
        for i in 0..8 {
            for k in 0..2 {
                let mut p = cur.clone();
                p[i].0[k] += h;
                let mut m = cur.clone();
                m[i].0[k] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - bar[i].0[k]).abs() < 1e-6, "{fd} vs {}", bar[i].0[k]);
            }
        }
    }

    fn mat3() -> impl Strategy<Value = Matrix<3>> {
        proptest::array::uniform9(-0.6f64..0.6).prop_filter_map("det in [0.3, 3]", |a| {
            let mut f = Matrix::<3>::identity();
            for i in 0..9 {
                f.0[i / 3][i % 3] += a[i];
            }
            let j = f.determinant();
            (0.3..3.0).contains(&j).then_some(f)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn box_clamp_bounds_and_idempotent(f in mat3()) {
            let g = box_yield_project(&f, 0.025, 0.03).unwrap();
            let s = svd(&g);
            for x in s.sigma.0 {
                prop_assert!(x >= 0.975 - 1e-12 && x <= 1.03 + 1e-12);
            }
            let gg = box_yield_project(&g, 0.025, 0.03).unwrap();
            prop_assert!((gg - g).max_abs() <= 1e-12);
            prop_assert!(g.determinant() > 0.0);
        }

        #[test]
        fn von_mises_hits_yield_surface_and_is_idempotent(f in mat3()) {
            let (sigma_y, mu) = (0.05, 1.0);
            let g = von_mises_project(&f, sigma_y, mu).unwrap();
            prop_assert!((g.determinant() - f.determinant()).abs() <= 1e-10 * f.determinant());
            let s = svd(&g);
            let eps = s.sigma.map(scalar::ln);
            let mean = eps.0.iter().sum::<f64>() / 3.0;
            prop_assert!(2.0 * mu * (eps - Vector::splat(mean)).norm() <= sigma_y + 1e-10);
            let gg = von_mises_project(&g, sigma_y, mu).unwrap();
            prop_assert!((gg - g).max_abs() <= 1e-12);
        }

        #[test]
        fn liquid_reset_preserves_det_and_is_idempotent(f in mat3()) {
            let g = liquid_project(&f).unwrap();
            prop_assert!((g.determinant() - f.determinant()).abs() <= 1e-12 * f.determinant());
            prop_assert!((liquid_project(&g).unwrap() - g).max_abs() <= 1e-12);
        }

        #[test]
        fn rigid_projection_is_proper_and_distance_preserving(
            pts in proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 6..20),
            noise in proptest::collection::vec(proptest::array::uniform3(-0.5f64..0.5), 20),
            flip in proptest::bool::ANY,
        ) {
            let rest: Vec<Vector<3>> = pts.iter().map(|p| Vector(*p)).collect();
            let masses = alloc::vec![1.0; rest.len()];
            // a mirrored copy favors a reflection; the fit must stay proper
            let cur: Vec<Vector<3>> = rest.iter().zip(&noise).map(|(p, n)| {
                let mut q = *p + Vector(*n) * 0.2;
                if flip { q.0[0] = -q.0[0]; }
                q
            }).collect();
            if let Ok(fit) = rigid_shape_match(&cur, &rest, &masses) {
                prop_assert!((fit.rotation.determinant() - 1.0).abs() < 1e-10);
                let proj: Vec<_> = rest.iter().map(|p| fit.apply(p)).collect();
                for i in 0..rest.len() {
                    for j in 0..i {
                        let d0 = (rest[i] - rest[j]).norm();
                        let d1 = (proj[i] - proj[j]).norm();
                        prop_assert!((d0 - d1).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}
