//! Analytic signed distance primitives.
//!
//! Distances are negative inside. Besides the distance and unit normal,
//! every primitive reports the Jacobian of its normal (the distance Hessian
//! away from the medial axis), which the contact adjoint needs to push
//! cotangents of the contact normal back to the effector pose.

use alloc::vec::Vec;

use crate::linalg::{scalar, Matrix, Vector};

#[derive(Clone, Debug, PartialEq)]
pub enum Shape<const D: usize> {
    Sphere {
        radius: f64,
    },
    Box {
        half_extents: Vector<D>,
    },
    /// Segment `a`–`b` swept by `radius`.
    Capsule {
        a: Vector<D>,
        b: Vector<D>,
        radius: f64,
    },
    /// Axis along local y. In 2D this is the rectangle `radius × half_height`.
    Cylinder { half_height: f64, radius: f64 },
    /// `{x : n·x <= offset}`
    HalfSpace {
        normal: Vector<D>,
        offset: f64,
    },
}

/// Rigid transform `x_world = rotation · x_local + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<const D: usize> {
    pub translation: Vector<D>,
    pub rotation: Matrix<D>,
}

impl<const D: usize> Default for Pose<D> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<const D: usize> Pose<D> {
    pub fn identity() -> Self {
        Pose { translation: Vector::zeros(), rotation: Matrix::identity() }
    }

    pub fn from_translation(t: Vector<D>) -> Self {
        Pose { translation: t, rotation: Matrix::identity() }
    }

    pub fn to_world(&self, local: &Vector<D>) -> Vector<D> {
        self.rotation * *local + self.translation
    }

    pub fn to_local(&self, world: &Vector<D>) -> Vector<D> {
        self.rotation.transpose() * (*world - self.translation)
    }

    pub fn compose(&self, inner: &Pose<D>) -> Pose<D> {
        Pose {
            translation: self.to_world(&inner.translation),
            rotation: self.rotation * inner.rotation,
        }
    }

    pub fn is_valid(&self) -> bool {
        let r = self.rotation;
        let rtr = r.transpose() * r;
        self.translation.is_finite()
            && (rtr - Matrix::identity()).max_abs() < 1e-9
            && (r.determinant() - 1.0).abs() < 1e-9
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdfPrimitive<const D: usize> {
    pub shape: Shape<D>,
    pub pose: Pose<D>,
}

/// Distance, gradient and gradient Jacobian, all in the primitive's local frame.
#[derive(Clone, Copy, Debug)]
pub struct LocalSample<const D: usize> {
    pub distance: f64,
    pub gradient: Vector<D>,
    pub hessian: Matrix<D>,
}

fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Distance of a box with half extents `h`, where only the axes in `axes`
/// take part. Returns `(distance, gradient, hessian)` in the box frame.
fn box_sample<const D: usize>(q: &Vector<D>, h: &Vector<D>) -> LocalSample<D> {
    let mut over = Vector::<D>::zeros();
    let mut any_out = false;
    let mut k_max = 0;
    let mut q_max = f64::NEG_INFINITY;
    for i in 0..D {
        let e = scalar::abs(q.0[i]) - h.0[i];
        if e > 0.0 {
            over.0[i] = e;
            any_out = true;
        }
        if e > q_max {
            q_max = e;
            k_max = i;
        }
    }
    if any_out {
        let m = over.norm();
        let mut g = Vector::zeros();
        for i in 0..D {
            g.0[i] = sign(q.0[i]) * over.0[i] / m;
        }
        let mut hess = Matrix::zeros();
        for i in 0..D {
            for j in 0..D {
                let active = if i == j && over.0[i] > 0.0 { 1.0 } else { 0.0 };
                hess.0[i][j] = (active - g.0[i] * g.0[j]) / m;
            }
        }
        LocalSample { distance: m, gradient: g, hessian: hess }
    } else {
        let mut g = Vector::zeros();
        g.0[k_max] = sign(q.0[k_max]);
        LocalSample { distance: q_max, gradient: g, hessian: Matrix::zeros() }
    }
}

impl<const D: usize> Shape<D> {
    pub fn is_valid(&self) -> bool {
        match self {
            Shape::Sphere { radius } => *radius > 0.0,
            Shape::Box { half_extents } => half_extents.0.iter().all(|h| *h > 0.0),
            Shape::Capsule { a, b, radius } => *radius > 0.0 && (*b - *a).norm() > 0.0,
            Shape::Cylinder { half_height, radius } => *half_height > 0.0 && *radius > 0.0,
            Shape::HalfSpace { normal, offset } => (normal.norm() - 1.0).abs() < 1e-9 && offset.is_finite(),
        }
    }

    pub fn sample_local(&self, q: &Vector<D>) -> LocalSample<D> {
        match self {
            Shape::Sphere { radius } => {
                let r = q.norm();
                if r == 0.0 {
                    // gradient singularity: +x fallback, no curvature information
                    return LocalSample { distance: -radius, gradient: Vector::unit(0), hessian: Matrix::zeros() };
                }
                let n = *q * (1.0 / r);
                let hess = (Matrix::identity() - n.outer(&n)) * (1.0 / r);
                LocalSample { distance: r - radius, gradient: n, hessian: hess }
            }
            Shape::Box { half_extents } => box_sample(q, half_extents),
            Shape::Capsule { a, b, radius } => {
                let ab = *b - *a;
                let len2 = ab.norm_squared();
                let t_raw = (*q - *a).dot(&ab) / len2;
                let interior = t_raw > 0.0 && t_raw < 1.0;
                let t = t_raw.clamp(0.0, 1.0);
                let e = *q - (*a + ab * t);
                let r = e.norm();
                if r == 0.0 {
                    let mut g = Vector::unit(0);
                    // pick a direction orthogonal to the axis when possible
                    if D > 1 && interior {
                        let axis = ab * (1.0 / scalar::sqrt(len2));
                        g = g - axis * axis.dot(&g);
                        if g.norm() < 1e-6 {
                            g = Vector::unit(1) - axis * axis.0[1];
                        }
                        g = g * (1.0 / g.norm());
                    }
                    return LocalSample { distance: -radius, gradient: g, hessian: Matrix::zeros() };
                }
                let n = e * (1.0 / r);
                let mut proj = Matrix::identity();
                if interior {
                    let axis = ab * (1.0 / scalar::sqrt(len2));
                    proj = proj - axis.outer(&axis);
                }
                let hess = (proj - n.outer(&n)) * (1.0 / r);
                LocalSample { distance: r - radius, gradient: n, hessian: hess }
            }
            Shape::Cylinder { half_height, radius } => {
                if D == 2 {
                    let mut h = Vector::zeros();
                    h.0[0] = *radius;
                    h.0[1] = *half_height;
                    return box_sample(q, &h);
                }
                // 3D: 2D box in (ρ, |y|) space
                let rho = scalar::hypot(q.0[0], q.0[2]);
                let (rho_hat, rho_hess) = if rho > 0.0 {
                    let mut rh = Vector::<D>::zeros();
                    rh.0[0] = q.0[0] / rho;
                    rh.0[2] = q.0[2] / rho;
                    let mut pxz = Matrix::<D>::zeros();
                    pxz.0[0][0] = 1.0;
                    pxz.0[2][2] = 1.0;
                    (rh, (pxz - rh.outer(&rh)) * (1.0 / rho))
                } else {
                    (Vector::unit(0), Matrix::zeros())
                };
                let w = Vector::<2>([rho, q.0[1]]);
                let inner = box_sample(&w, &Vector([*radius, *half_height]));
                // chain rule: ∂w/∂q rows are ρ̂ and e_y
                let mut dw = [Vector::<D>::zeros(); 2];
                dw[0] = rho_hat;
                dw[1] = Vector::unit(1);
                let mut g = Vector::zeros();
                for a in 0..2 {
                    g += dw[a] * inner.gradient.0[a];
                }
                let mut hess = rho_hess * inner.gradient.0[0];
                for a in 0..2 {
                    for b in 0..2 {
                        hess += dw[a].outer(&dw[b]) * inner.hessian.0[a][b];
                    }
                }
                LocalSample { distance: inner.distance, gradient: g, hessian: hess }
            }
            Shape::HalfSpace { normal, offset } => LocalSample {
                distance: normal.dot(q) - offset,
                gradient: *normal,
                hessian: Matrix::zeros(),
            },
        }
    }

    /// Axis-aligned local bounds, or `None` for unbounded shapes.
    pub fn local_bounds(&self) -> Option<(Vector<D>, Vector<D>)> {
        match self {
            Shape::Sphere { radius } => Some((Vector::splat(-radius), Vector::splat(*radius))),
            Shape::Box { half_extents } => Some((-*half_extents, *half_extents)),
            Shape::Capsule { a, b, radius } => {
                let mut lo = *a;
                let mut hi = *a;
                for i in 0..D {
                    lo.0[i] = a.0[i].min(b.0[i]) - radius;
                    hi.0[i] = a.0[i].max(b.0[i]) + radius;
                }
                Some((lo, hi))
            }
            Shape::Cylinder { half_height, radius } => {
                let mut h = Vector::splat(*radius);
                h.0[1] = *half_height;
                Some((-h, h))
            }
            Shape::HalfSpace { .. } => None,
        }
    }
}

/// World-frame SDF sample together with what the adjoint needs.
#[derive(Clone, Copy, Debug)]
pub struct SdfSample<const D: usize> {
    pub distance: f64,
    /// Unit outward normal in world coordinates.
    pub normal: Vector<D>,
    /// Point in the primitive frame.
    pub local_point: Vector<D>,
    pub local: LocalSample<D>,
}

impl<const D: usize> SdfPrimitive<D> {
    pub fn new(shape: Shape<D>, pose: Pose<D>) -> Self {
        SdfPrimitive { shape, pose }
    }

    pub fn is_valid(&self) -> bool {
        self.shape.is_valid() && self.pose.is_valid()
    }

    /// Sample with an extra outer transform `frame` (the owning effector's pose).
    pub fn sample_in(&self, frame: &Pose<D>, x: &Vector<D>) -> SdfSample<D> {
        let y = frame.to_local(x);
        let q = self.pose.to_local(&y);
        let local = self.shape.sample_local(&q);
        let mut normal = frame.rotation * (self.pose.rotation * local.gradient);
        let n = normal.norm();
        if n > 0.0 {
            normal = normal * (1.0 / n);
        }
        SdfSample { distance: local.distance, normal, local_point: q, local }
    }

    pub fn sample(&self, x: &Vector<D>) -> SdfSample<D> {
        self.sample_in(&Pose::identity(), x)
    }

    /// World-frame bounding box (conservative under rotation).
    pub fn world_bounds(&self) -> Option<(Vector<D>, Vector<D>)> {
        let (lo, hi) = self.shape.local_bounds()?;
        let mut wlo = Vector::splat(f64::INFINITY);
        let mut whi = Vector::splat(f64::NEG_INFINITY);
        for corner in 0..(1usize << D) {
            let mut c = Vector::zeros();
            for i in 0..D {
                c.0[i] = if corner >> i & 1 == 1 { hi.0[i] } else { lo.0[i] };
            }
            let w = self.pose.to_world(&c);
            for i in 0..D {
                wlo.0[i] = wlo.0[i].min(w.0[i]);
                whi.0[i] = whi.0[i].max(w.0[i]);
            }
        }
        Some((wlo, whi))
    }
}

/// Signed distance and unit normal of a primitive at a world point.
pub fn sdf_eval<const D: usize>(prim: &SdfPrimitive<D>, point: &Vector<D>) -> (f64, Vector<D>) {
    let s = prim.sample(point);
    (s.distance, s.normal)
}

/// Union of primitives rigidly attached to a common frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CompoundSdf<const D: usize> {
    pub parts: Vec<SdfPrimitive<D>>,
}

impl<const D: usize> CompoundSdf<D> {
    pub fn single(p: SdfPrimitive<D>) -> Self {
        CompoundSdf { parts: alloc::vec![p] }
    }

    /// Closest part and its sample (ties resolve to the first part).
    pub fn sample_in(&self, frame: &Pose<D>, x: &Vector<D>) -> Option<(usize, SdfSample<D>)> {
        let mut best: Option<(usize, SdfSample<D>)> = None;
        for (i, p) in self.parts.iter().enumerate() {
            let s = p.sample_in(frame, x);
            if best.as_ref().is_none_or(|(_, b)| s.distance < b.distance) {
                best = Some((i, s));
            }
        }
        best
    }
}

/// Cotangents of `(distance, world normal)` pushed back to the outer frame
/// `(translation, rotation)` for one sample.
pub fn sample_vjp<const D: usize>(
    prim: &SdfPrimitive<D>,
    frame: &Pose<D>,
    x: &Vector<D>,
    s: &SdfSample<D>,
    distance_bar: f64,
    normal_bar: &Vector<D>,
) -> (Vector<D>, Matrix<D>) {
    let local_rot = prim.pose.rotation;
    let g = s.local.gradient;
    // world normal = Rf·Rp·g / |g|; |g| = 1 except at fallbacks, treat as constant
    let gn = g.norm().max(1e-300);
    let rp_g = local_rot * g * (1.0 / gn);
    let mut rot_bar = normal_bar.outer(&rp_g);
    let g_bar = (frame.rotation * local_rot).transpose() * *normal_bar * (1.0 / gn);
    let q_bar = g * distance_bar + s.local.hessian.transpose() * g_bar;
    let y_bar = local_rot * q_bar;
    let trans_bar = -(frame.rotation * y_bar);
    rot_bar += (*x - frame.translation).outer(&y_bar);
    (trans_bar, rot_bar)
}
