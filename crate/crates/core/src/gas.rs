//! Eulerian gas on a staggered (MAC) grid.
//!
//! Velocity components live on cell faces, smoke and temperature at cell
//! centers. The outermost ring of cells is always solid wall. Each step
//! records a [`GasTape`] from which [`gas_step_vjp`] runs the exact discrete
//! reverse pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{SceneError, SimError};
use crate::linalg::{angular_cross, angular_cross_vjp, scalar, Vector};
use crate::scene::{EffectorBar, EffectorSpec, EffectorState};

/// Axis along which buoyancy acts.
pub const VERTICAL: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    /// Weighted Jacobi with a fixed iteration budget; the residual is not enforced.
    Jacobi,
    /// Conjugate gradients run to `tolerance`.
    ConjugateGradient,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionSolve {
    pub kind: SolverKind,
    pub iterations: usize,
    /// Maximum divergence left on fluid cells (CG only).
    pub tolerance: f64,
}

impl ProjectionSolve {
    pub fn jacobi(iterations: usize) -> Self {
        ProjectionSolve { kind: SolverKind::Jacobi, iterations, tolerance: f64::INFINITY }
    }

    pub fn cg(iterations: usize, tolerance: f64) -> Self {
        ProjectionSolve { kind: SolverKind::ConjugateGradient, iterations, tolerance }
    }
}

/// Smooth blob attached to an effector that pulls gas fields toward targets.
#[derive(Clone, Debug, PartialEq)]
pub struct GasSource<const D: usize> {
    /// Center in the effector frame.
    pub offset: Vector<D>,
    pub radius: f64,
    /// Blend fraction per step at the center, in `(0, 1]`.
    pub strength: f64,
    pub temperature: Option<f64>,
    pub smoke: Option<f64>,
    /// Effector-frame velocity target.
    pub velocity: Option<Vector<D>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GasConfig<const D: usize> {
    /// Cells per axis, including the solid wall ring.
    pub resolution: [usize; D],
    pub cell_size: f64,
    pub origin: Vector<D>,
    pub ambient_temperature: f64,
    pub kappa_smoke: f64,
    pub beta_temp: f64,
    /// Normal velocity of the low and high wall along each axis.
    pub wall_velocity: [[f64; 2]; D],
    /// Relaxation rate of gas velocity toward particle velocity.
    pub impact_strength: f64,
    pub solve: ProjectionSolve,
    pub initial_velocity: Vector<D>,
}

impl<const D: usize> GasConfig<D> {
    pub fn new(resolution: [usize; D], cell_size: f64) -> Self {
        GasConfig {
            resolution,
            cell_size,
            origin: Vector::zeros(),
            ambient_temperature: 0.0,
            kappa_smoke: 0.0,
            beta_temp: 1.0,
            wall_velocity: [[0.0; 2]; D],
            impact_strength: 0.0,
            solve: ProjectionSolve::jacobi(40),
            initial_velocity: Vector::zeros(),
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |what: &str| Err(SceneError::InvalidParameter { what: what.into() });
        if self.resolution.iter().any(|n| *n < 4) {
            return bad("gas resolution must be at least 4 per axis");
        }
        if !(self.cell_size > 0.0) {
            return bad("gas cell_size must be positive");
        }
        if self.solve.iterations == 0 || !(self.solve.tolerance > 0.0) {
            return bad("projection needs iterations >= 1 and tolerance > 0");
        }
        if !(self.impact_strength >= 0.0) || !self.kappa_smoke.is_finite() || !self.beta_temp.is_finite() {
            return bad("gas coefficients must be finite and impact_strength >= 0");
        }
        Ok(())
    }

    pub fn cells(&self) -> Dims<D> {
        Dims(self.resolution)
    }

    pub fn faces(&self, axis: usize) -> Dims<D> {
        let mut n = self.resolution;
        n[axis] += 1;
        Dims(n)
    }

    pub fn cell_center(&self, c: &[usize; D]) -> Vector<D> {
        let mut x = self.origin;
        for k in 0..D {
            x.0[k] += (c[k] as f64 + 0.5) * self.cell_size;
        }
        x
    }

    pub fn face_center(&self, axis: usize, c: &[usize; D]) -> Vector<D> {
        let mut x = self.cell_center(c);
        x.0[axis] -= 0.5 * self.cell_size;
        x
    }

    /// Upper corner of the gas domain.
    pub fn extent(&self) -> Vector<D> {
        let mut x = self.origin;
        for k in 0..D {
            x.0[k] += self.resolution[k] as f64 * self.cell_size;
        }
        x
    }

    pub fn is_wall(&self, c: &[usize; D]) -> bool {
        (0..D).any(|k| c[k] == 0 || c[k] + 1 == self.resolution[k])
    }

    pub fn initial_state(&self) -> GasState<D> {
        let cells = self.cells().len();
        GasState {
            u: core::array::from_fn(|a| vec![self.initial_velocity.0[a]; self.faces(a).len()]),
            smoke: vec![0.0; cells],
            temperature: vec![self.ambient_temperature; cells],
            solid: (0..cells).map(|i| self.is_wall(&self.cells().coords(i))).collect(),
        }
    }

    /// Cell containing a world point, if inside the domain.
    pub fn cell_of(&self, x: &Vector<D>) -> Option<usize> {
        let mut c = [0usize; D];
        for k in 0..D {
            let g = (x.0[k] - self.origin.0[k]) / self.cell_size;
            if !(g >= 0.0) || g >= self.resolution[k] as f64 {
                return None;
            }
            c[k] = g as usize;
        }
        Some(self.cells().index(&c))
    }
}

/// Row-major extents with axis 0 varying fastest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims<const D: usize>(pub [usize; D]);

impl<const D: usize> Dims<D> {
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, c: &[usize; D]) -> usize {
        let mut i = 0;
        for k in (0..D).rev() {
            i = i * self.0[k] + c[k];
        }
        i
    }

    pub fn coords(&self, mut i: usize) -> [usize; D] {
        let mut c = [0; D];
        for k in 0..D {
            c[k] = i % self.0[k];
            i /= self.0[k];
        }
        c
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.0[..axis].iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GasState<const D: usize> {
    /// Face velocities, one array per axis.
    pub u: [Vec<f64>; D],
    pub smoke: Vec<f64>,
    pub temperature: Vec<f64>,
    /// Solid cells as of the last step.
    pub solid: Vec<bool>,
}

impl<const D: usize> GasState<D> {
    pub fn zeros_like(&self) -> Self {
        GasState {
            u: core::array::from_fn(|a| vec![0.0; self.u[a].len()]),
            smoke: vec![0.0; self.smoke.len()],
            temperature: vec![0.0; self.temperature.len()],
            solid: self.solid.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|f| f.iter().all(|x| x.is_finite()))
            && self.smoke.iter().all(|x| x.is_finite())
            && self.temperature.iter().all(|x| x.is_finite())
    }

    pub fn kinetic_energy(&self, cfg: &GasConfig<D>) -> f64 {
        let vol = scalar::powf(cfg.cell_size, D as f64);
        0.5 * vol * self.u.iter().flat_map(|f| f.iter()).map(|x| x * x).sum::<f64>()
    }

    /// Velocity at a world point by multilinear interpolation of each component.
    pub fn velocity_at(&self, cfg: &GasConfig<D>, x: &Vector<D>) -> Vector<D> {
        let g = grid_coords(cfg, x);
        let mut v = Vector::zeros();
        for a in 0..D {
            v.0[a] = face_sampler(cfg, &self.u[a], a).sample(&g).0;
        }
        v
    }

    pub fn temperature_at(&self, cfg: &GasConfig<D>, x: &Vector<D>) -> f64 {
        cell_sampler(cfg, &self.temperature).sample(&grid_coords(cfg, x)).0
    }

    /// Adds `weight · ∂temperature_at(x)/∂temperature` into `out`.
    pub fn temperature_at_vjp(cfg: &GasConfig<D>, x: &Vector<D>, weight: f64, out: &mut [f64]) {
        cell_sampler(cfg, &[]).scatter(&grid_coords(cfg, x), weight, out)
    }

    /// Largest absolute divergence over fluid cells.
    pub fn max_divergence(&self, cfg: &GasConfig<D>) -> f64 {
        let cells = cfg.cells();
        let mut worst = 0.0f64;
        for i in 0..cells.len() {
            if self.solid[i] {
                continue;
            }
            worst = worst.max(scalar::abs(divergence_at(cfg, &self.u, &cells.coords(i))));
        }
        worst
    }
}

fn grid_coords<const D: usize>(cfg: &GasConfig<D>, x: &Vector<D>) -> [f64; D] {
    core::array::from_fn(|k| (x.0[k] - cfg.origin.0[k]) / cfg.cell_size)
}

fn divergence_at<const D: usize>(cfg: &GasConfig<D>, u: &[Vec<f64>; D], c: &[usize; D]) -> f64 {
    let mut div = 0.0;
    for a in 0..D {
        let fd = cfg.faces(a);
        let lo = fd.index(c);
        let hi = lo + fd.stride(a);
        div += u[a][hi] - u[a][lo];
    }
    div / cfg.cell_size
}

/// Multilinear interpolation of samples located at `(k + shift)` in grid coordinates.
struct Sampler<'a, const D: usize> {
    data: &'a [f64],
    dims: Dims<D>,
    shift: [f64; D],
}

/// Corner indices, weights and per-axis data of one interpolation.
struct Stencil<const D: usize> {
    base: [usize; D],
    t: [f64; D],
    /// Axes where the query was clamped (zero derivative).
    clamped: [bool; D],
}

impl<const D: usize> Sampler<'_, D> {
    fn stencil(&self, g: &[f64; D]) -> Stencil<D> {
        let mut base = [0; D];
        let mut t = [0.0; D];
        let mut clamped = [false; D];
        for k in 0..D {
            let hi = (self.dims.0[k] - 1) as f64;
            let mut p = g[k] - self.shift[k];
            if p < 0.0 {
                p = 0.0;
                clamped[k] = true;
            } else if p > hi {
                p = hi;
                clamped[k] = true;
            }
            let b = (scalar::floor(p) as usize).min(self.dims.0[k] - 2);
            base[k] = b;
            t[k] = p - b as f64;
        }
        Stencil { base, t, clamped }
    }

    fn corners(&self, s: &Stencil<D>) -> impl Iterator<Item = (usize, f64, [f64; D])> + '_ {
        let base = s.base;
        let t = s.t;
        (0..(1usize << D)).map(move |corner| {
            let mut c = base;
            let mut w = 1.0;
            let mut dw = [1.0; D];
            for k in 0..D {
                let bit = corner >> k & 1;
                c[k] += bit;
                let (wk, dk) = if bit == 1 { (t[k], 1.0) } else { (1.0 - t[k], -1.0) };
                w *= wk;
                for (j, d) in dw.iter_mut().enumerate() {
                    *d *= if j == k { dk } else { wk };
                }
            }
            (self.dims.index(&c), w, dw)
        })
    }

    /// Value and gradient with respect to grid coordinates.
    fn sample(&self, g: &[f64; D]) -> (f64, [f64; D]) {
        let s = self.stencil(g);
        let mut v = 0.0;
        let mut grad = [0.0; D];
        for (i, w, dw) in self.corners(&s) {
            v += w * self.data[i];
            for k in 0..D {
                grad[k] += dw[k] * self.data[i];
            }
        }
        for k in 0..D {
            if s.clamped[k] {
                grad[k] = 0.0;
            }
        }
        (v, grad)
    }

    /// Adds `weight ·` interpolation weights into `out` (reverse of `sample` in `data`).
    fn scatter(&self, g: &[f64; D], weight: f64, out: &mut [f64]) {
        let s = self.stencil(g);
        for (i, w, _) in self.corners(&s) {
            out[i] += weight * w;
        }
    }
}

fn cell_sampler<'a, const D: usize>(cfg: &GasConfig<D>, data: &'a [f64]) -> Sampler<'a, D> {
    Sampler { data, dims: cfg.cells(), shift: [0.5; D] }
}

fn face_sampler<'a, const D: usize>(cfg: &GasConfig<D>, data: &'a [f64], axis: usize) -> Sampler<'a, D> {
    let mut shift = [0.5; D];
    shift[axis] = 0.0;
    Sampler { data, dims: cfg.faces(axis), shift }
}

fn velocity_at_grid<const D: usize>(cfg: &GasConfig<D>, u: &[Vec<f64>; D], g: &[f64; D]) -> [f64; D] {
    core::array::from_fn(|a| face_sampler(cfg, &u[a], a).sample(g).0)
}

/// Sample points of a field: cell centers (`axis = None`) or faces of `axis`.
fn sample_points<const D: usize>(cfg: &GasConfig<D>, axis: Option<usize>) -> (Dims<D>, [f64; D]) {
    match axis {
        None => (cfg.cells(), [0.5; D]),
        Some(a) => {
            let mut shift = [0.5; D];
            shift[a] = 0.0;
            (cfg.faces(a), shift)
        }
    }
}

fn point_of<const D: usize>(dims: &Dims<D>, shift: &[f64; D], i: usize) -> [f64; D] {
    let c = dims.coords(i);
    core::array::from_fn(|k| c[k] as f64 + shift[k])
}

/// Semi-Lagrangian transport of a cell-centered scalar field.
pub fn semi_lagrangian_advect<const D: usize>(cfg: &GasConfig<D>, field: &[f64], u: &[Vec<f64>; D], dt: f64) -> Vec<f64> {
    advect_field(cfg, field, None, u, dt)
}

fn advect_field<const D: usize>(cfg: &GasConfig<D>, field: &[f64], axis: Option<usize>, u: &[Vec<f64>; D], dt: f64) -> Vec<f64> {
    let (dims, shift) = sample_points(cfg, axis);
    let sampler = Sampler { data: field, dims, shift };
    let scale = dt / cfg.cell_size;
    (0..dims.len())
        .map(|i| {
            let g = point_of(&dims, &shift, i);
            let v = velocity_at_grid(cfg, u, &g);
            let back: [f64; D] = core::array::from_fn(|k| g[k] - scale * v[k]);
            sampler.sample(&back).0
        })
        .collect()
}

/// Reverse of [`advect_field`]: accumulates into the field and velocity cotangents.
fn advect_field_vjp<const D: usize>(
    cfg: &GasConfig<D>,
    field: &[f64],
    axis: Option<usize>,
    u: &[Vec<f64>; D],
    dt: f64,
    out_bar: &[f64],
    field_bar: &mut [f64],
    u_bar: &mut [Vec<f64>; D],
) {
    let (dims, shift) = sample_points(cfg, axis);
    let sampler = Sampler { data: field, dims, shift };
    let scale = dt / cfg.cell_size;
    for i in 0..dims.len() {
        let gb = out_bar[i];
        if gb == 0.0 {
            continue;
        }
        let g = point_of(&dims, &shift, i);
        let v = velocity_at_grid(cfg, u, &g);
        let back: [f64; D] = core::array::from_fn(|k| g[k] - scale * v[k]);
        let (_, grad) = sampler.sample(&back);
        sampler.scatter(&back, gb, field_bar);
        for a in 0..D {
            let vb = -scale * grad[a] * gb;
            if vb != 0.0 {
                face_sampler(cfg, &u[a], a).scatter(&g, vb, &mut u_bar[a]);
            }
        }
    }
}

/// Vertical face forcing `dt·(−κ·smoke + β·(T − T_amb))` with face values
/// averaged from the two adjacent cells.
pub fn add_buoyancy<const D: usize>(cfg: &GasConfig<D>, gas: &mut GasState<D>, dt: f64) {
    let fd = cfg.faces(VERTICAL);
    let cells = cfg.cells();
    let stride = cells.stride(VERTICAL);
    for i in 0..fd.len() {
        let c = fd.coords(i);
        if c[VERTICAL] == 0 || c[VERTICAL] == cfg.resolution[VERTICAL] {
            continue;
        }
        let hi = cells.index(&c);
        let lo = hi - stride;
        let s = 0.5 * (gas.smoke[lo] + gas.smoke[hi]);
        let t = 0.5 * (gas.temperature[lo] + gas.temperature[hi]);
        gas.u[VERTICAL][i] += dt * (-cfg.kappa_smoke * s + cfg.beta_temp * (t - cfg.ambient_temperature));
    }
}

fn add_buoyancy_vjp<const D: usize>(cfg: &GasConfig<D>, bar: &mut GasState<D>, dt: f64) {
    let fd = cfg.faces(VERTICAL);
    let cells = cfg.cells();
    let stride = cells.stride(VERTICAL);
    for i in 0..fd.len() {
        let c = fd.coords(i);
        if c[VERTICAL] == 0 || c[VERTICAL] == cfg.resolution[VERTICAL] {
            continue;
        }
        let hi = cells.index(&c);
        let lo = hi - stride;
        let ub = bar.u[VERTICAL][i];
        let sb = -0.5 * dt * cfg.kappa_smoke * ub;
        let tb = 0.5 * dt * cfg.beta_temp * ub;
        bar.smoke[lo] += sb;
        bar.smoke[hi] += sb;
        bar.temperature[lo] += tb;
        bar.temperature[hi] += tb;
    }
}

/// What a solid cell contributes to a fixed face velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
enum SolidVelocity<const D: usize> {
    Wall(f64),
    /// Rigid velocity of effector `effector` sampled at `point`.
    Effector { effector: usize, point: Vector<D> },
}

/// Solid cells and the prescribed velocity of every face touching one.
#[derive(Clone, Debug, PartialEq)]
pub struct SolidMask<const D: usize> {
    pub solid: Vec<bool>,
    /// Per axis: `None` for free faces, else the solid contributions averaged
    /// into the face value.
    fixed: [Vec<Option<[Option<SolidVelocity<D>>; 2]>>; D],
}

impl<const D: usize> SolidMask<D> {
    pub fn is_fixed(&self, axis: usize, face: usize) -> bool {
        self.fixed[axis][face].is_some()
    }

    /// Solid cells that belong to effectors rather than walls.
    pub fn effector_cells(&self, cfg: &GasConfig<D>) -> usize {
        let cells = cfg.cells();
        (0..cells.len()).filter(|i| self.solid[*i] && !cfg.is_wall(&cells.coords(*i))).count()
    }
}

/// Marks walls and cells whose center lies inside a gas-blocking effector.
pub fn rasterize_solid_mask<const D: usize>(
    cfg: &GasConfig<D>,
    effectors: &[EffectorSpec<D>],
    states: &[EffectorState<D>],
) -> SolidMask<D> {
    let cells = cfg.cells();
    let mut owner: Vec<Option<SolidVelocity<D>>> = vec![None; cells.len()];
    let mut solid = vec![false; cells.len()];
    for i in 0..cells.len() {
        let c = cells.coords(i);
        if cfg.is_wall(&c) {
            solid[i] = true;
            continue;
        }
        let x = cfg.cell_center(&c);
        for (e, (spec, st)) in effectors.iter().zip(states).enumerate() {
            if !spec.gas_solid {
                continue;
            }
            if let Some((_, s)) = spec.shape.sample_in(&st.pose, &x) {
                if s.distance <= 0.0 {
                    solid[i] = true;
                    owner[i] = Some(SolidVelocity::Effector { effector: e, point: x });
                    break;
                }
            }
        }
    }
    let fixed = core::array::from_fn(|a| {
        let fd = cfg.faces(a);
        (0..fd.len())
            .map(|f| {
                let c = fd.coords(f);
                let n = cfg.resolution[a];
                // cells on either side of the face
                let lo = (c[a] > 0).then(|| {
                    let mut l = c;
                    l[a] -= 1;
                    cells.index(&l)
                });
                let hi = (c[a] < n).then(|| cells.index(&c));
                let side = |cell: Option<usize>| -> Option<SolidVelocity<D>> {
                    let i = cell?;
                    if !solid[i] {
                        return None;
                    }
                    Some(owner[i].unwrap_or_else(|| {
                        let cc = cells.coords(i);
                        let v = if cc[a] == 0 {
                            cfg.wall_velocity[a][0]
                        } else if cc[a] + 1 == n {
                            cfg.wall_velocity[a][1]
                        } else {
                            0.0
                        };
                        SolidVelocity::Wall(v)
                    }))
                };
                let l = side(lo);
                let h = side(hi);
                let lo_solid = lo.is_none_or(|i| solid[i]);
                let hi_solid = hi.is_none_or(|i| solid[i]);
                if lo_solid || hi_solid {
                    Some([l, h])
                } else {
                    None
                }
            })
            .collect()
    });
    SolidMask { solid, fixed }
}

fn solid_velocity<const D: usize>(sv: &SolidVelocity<D>, axis: usize, states: &[EffectorState<D>]) -> f64 {
    match sv {
        SolidVelocity::Wall(v) => *v,
        SolidVelocity::Effector { effector, point } => {
            let st = &states[*effector];
            (st.linear_velocity + angular_cross(&st.angular_velocity, &(*point - st.pose.translation))).0[axis]
        }
    }
}

fn fixed_value<const D: usize>(f: &[Option<SolidVelocity<D>>; 2], axis: usize, states: &[EffectorState<D>]) -> f64 {
    let vals: Vec<f64> = f.iter().flatten().map(|s| solid_velocity(s, axis, states)).collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn apply_mask<const D: usize>(mask: &SolidMask<D>, gas: &mut GasState<D>, states: &[EffectorState<D>]) {
    for a in 0..D {
        for (f, fx) in mask.fixed[a].iter().enumerate() {
            if let Some(fx) = fx {
                gas.u[a][f] = fixed_value(fx, a, states);
            }
        }
    }
    gas.solid = mask.solid.clone();
}

/// Reverse of [`apply_mask`]: moves fixed-face cotangents to the effectors.
fn apply_mask_vjp<const D: usize>(
    mask: &SolidMask<D>,
    bar: &mut GasState<D>,
    states: &[EffectorState<D>],
    eff_bar: &mut [EffectorBar<D>],
) {
    for a in 0..D {
        for (f, fx) in mask.fixed[a].iter().enumerate() {
            let Some(fx) = fx else { continue };
            let g = bar.u[a][f];
            bar.u[a][f] = 0.0;
            let count = fx.iter().flatten().count();
            if g == 0.0 || count == 0 {
                continue;
            }
            for sv in fx.iter().flatten() {
                if let SolidVelocity::Effector { effector, point } = sv {
                    let st = &states[*effector];
                    let mut vb = Vector::<D>::zeros();
                    vb.0[a] = g / count as f64;
                    let eb = &mut eff_bar[*effector];
                    eb.linear += vb;
                    let (wb, rb) = angular_cross_vjp(&st.angular_velocity, &(*point - st.pose.translation), &vb);
                    for k in 0..3 {
                        eb.angular[k] += wb[k];
                    }
                    eb.translation -= rb;
                }
            }
        }
    }
}

/// Faces, fluid cells and connected components of one projection.
#[derive(Clone, Debug)]
struct Projector<const D: usize> {
    solve: ProjectionSolve,
    /// Component label per cell (`usize::MAX` for solid cells).
    component: Vec<usize>,
    n_components: usize,
    /// Free-face neighbor count per fluid cell.
    degree: Vec<u8>,
    /// Neighbors of cell `i` are `adjacency[offsets[i]..offsets[i + 1]]`.
    offsets: Vec<u32>,
    adjacency: Vec<u32>,
    free: [Vec<bool>; D],
}

impl<const D: usize> Projector<D> {
    fn new(cfg: &GasConfig<D>, mask: &SolidMask<D>, solve: ProjectionSolve) -> Self {
        let cells = cfg.cells();
        let free: [Vec<bool>; D] = core::array::from_fn(|a| mask.fixed[a].iter().map(|f| f.is_none()).collect());
        let mut component = vec![usize::MAX; cells.len()];
        let mut degree = vec![0u8; cells.len()];
        let mut n_components = 0;
        let mut stack = Vec::new();
        for start in 0..cells.len() {
            if mask.solid[start] || component[start] != usize::MAX {
                continue;
            }
            component[start] = n_components;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let c = cells.coords(i);
                for (j, _) in neighbors(cfg, &free, &c) {
                    if component[j] == usize::MAX {
                        component[j] = n_components;
                        stack.push(j);
                    }
                }
            }
            n_components += 1;
        }
        let mut offsets = Vec::with_capacity(cells.len() + 1);
        let mut adjacency = Vec::new();
        offsets.push(0);
        for i in 0..cells.len() {
            if !mask.solid[i] {
                let before = adjacency.len();
                adjacency.extend(neighbors(cfg, &free, &cells.coords(i)).map(|(j, _)| j as u32));
                degree[i] = (adjacency.len() - before) as u8;
            }
            offsets.push(adjacency.len() as u32);
        }
        Projector { solve, component, n_components, degree, offsets, adjacency, free }
    }

    fn remove_means(&self, v: &mut [f64]) {
        let mut sum = vec![0.0; self.n_components];
        let mut count = vec![0usize; self.n_components];
        for (i, x) in v.iter().enumerate() {
            let c = self.component[i];
            if c != usize::MAX {
                sum[c] += x;
                count[c] += 1;
            }
        }
        for (i, x) in v.iter_mut().enumerate() {
            let c = self.component[i];
            if c != usize::MAX {
                *x -= sum[c] / count[c] as f64;
            } else {
                *x = 0.0;
            }
        }
    }

    /// `A·p` with `A` the negative Laplacian over free faces, scaled by `h²`.
    fn apply_a(&self, p: &[f64], out: &mut [f64]) {
        for i in 0..out.len() {
            if self.component[i] == usize::MAX {
                out[i] = 0.0;
                continue;
            }
            let mut acc = self.degree[i] as f64 * p[i];
            for &j in &self.adjacency[self.offsets[i] as usize..self.offsets[i + 1] as usize] {
                acc -= p[j as usize];
            }
            out[i] = acc;
        }
    }

    /// `p ≈ A⁺·b` (in `h²`-scaled units). Symmetric in `b` for Jacobi exactly,
    /// for CG up to the tolerance.
    fn solve(&self, cfg: &GasConfig<D>, b: &[f64]) -> Result<Vec<f64>, SimError> {
        let n = b.len();
        let mut rhs = b.to_vec();
        self.remove_means(&mut rhs);
        let mut p = vec![0.0; n];
        let mut ap = vec![0.0; n];
        match self.solve.kind {
            SolverKind::Jacobi => {
                let omega = 2.0 / 3.0;
                for _ in 0..self.solve.iterations {
                    self.apply_a(&p, &mut ap);
                    for i in 0..n {
                        if self.degree[i] > 0 && self.component[i] != usize::MAX {
                            p[i] += omega * (rhs[i] - ap[i]) / self.degree[i] as f64;
                        }
                    }
                }
            }
            SolverKind::ConjugateGradient => {
                // tolerance is on divergence, residual here is divergence·h
                let tol = self.solve.tolerance * cfg.cell_size;
                let mut r = rhs.clone();
                let mut d = r.clone();
                let mut rr: f64 = r.iter().map(|x| x * x).sum();
                let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(scalar::abs(*x)));
                let mut converged = max_abs(&r) <= tol;
                for _ in 0..self.solve.iterations {
                    if converged {
                        break;
                    }
                    self.apply_a(&d, &mut ap);
                    let dad: f64 = d.iter().zip(&ap).map(|(a, b)| a * b).sum();
                    if dad <= 0.0 {
                        break;
                    }
                    let alpha = rr / dad;
                    for i in 0..n {
                        p[i] += alpha * d[i];
                        r[i] -= alpha * ap[i];
                    }
                    let rr_new: f64 = r.iter().map(|x| x * x).sum();
                    converged = max_abs(&r) <= tol;
                    let beta = rr_new / rr;
                    rr = rr_new;
                    for i in 0..n {
                        d[i] = r[i] + beta * d[i];
                    }
                }
                if !converged {
                    return Err(SimError::ResidualTooLarge { residual: max_abs(&r) / cfg.cell_size });
                }
            }
        }
        self.remove_means(&mut p);
        Ok(p)
    }

    /// Scaled divergence `h·div(u)` per fluid cell.
    fn scaled_divergence(&self, cfg: &GasConfig<D>, u: &[Vec<f64>; D], free_only: bool) -> Vec<f64> {
        let cells = cfg.cells();
        let mut out = vec![0.0; cells.len()];
        for (i, o) in out.iter_mut().enumerate() {
            if self.component[i] == usize::MAX {
                continue;
            }
            let c = cells.coords(i);
            for a in 0..D {
                let fd = cfg.faces(a);
                let lo = fd.index(&c);
                let hi = lo + fd.stride(a);
                let take = |f: usize| if !free_only || self.free[a][f] { u[a][f] } else { 0.0 };
                *o += take(hi) - take(lo);
            }
        }
        out
    }

    /// Subtracts the pressure gradient on free faces given scaled pressure `p`.
    fn subtract_gradient(&self, cfg: &GasConfig<D>, p: &[f64], u: &mut [Vec<f64>; D]) {
        let cells = cfg.cells();
        for a in 0..D {
            let fd = cfg.faces(a);
            let stride = cells.stride(a);
            for f in 0..fd.len() {
                if !self.free[a][f] {
                    continue;
                }
                let c = fd.coords(f);
                let hi = cells.index(&c);
                let lo = hi - stride;
                // with A·p = h·div(u) this zeroes h·div on every fluid cell
                u[a][f] += p[hi] - p[lo];
            }
        }
    }

    fn project(&self, cfg: &GasConfig<D>, u: &mut [Vec<f64>; D]) -> Result<(), SimError> {
        let b = self.scaled_divergence(cfg, u, false);
        let p = self.solve(cfg, &b)?;
        self.subtract_gradient(cfg, &p, u);
        Ok(())
    }

    /// Reverse of [`Projector::project`]. The free-face block is symmetric, so
    /// free faces are projected exactly like the forward field; fixed faces
    /// pick up the pressure coupling.
    fn project_vjp(&self, cfg: &GasConfig<D>, u_bar: &mut [Vec<f64>; D]) -> Result<(), SimError> {
        let cells = cfg.cells();
        let b = self.scaled_divergence(cfg, u_bar, true);
        let q = self.solve(cfg, &b)?;
        for a in 0..D {
            let fd = cfg.faces(a);
            let stride = cells.stride(a);
            for f in 0..fd.len() {
                let c = fd.coords(f);
                let hi = (c[a] < cfg.resolution[a]).then(|| cells.index(&c));
                let lo = (c[a] > 0).then(|| cells.index(&c) - stride);
                let qv = |i: Option<usize>| i.map_or(0.0, |i| if self.component[i] == usize::MAX { 0.0 } else { q[i] });
                // free and fixed faces alike enter the divergence of `lo` with +1 and of `hi` with −1
                u_bar[a][f] += qv(hi) - qv(lo);
            }
        }
        Ok(())
    }
}

/// Fluid neighbors across free faces: `(cell, axis)`.
fn neighbors<'a, const D: usize>(
    cfg: &'a GasConfig<D>,
    free: &'a [Vec<bool>; D],
    c: &[usize; D],
) -> impl Iterator<Item = (usize, usize)> + 'a {
    let cells = cfg.cells();
    let c = *c;
    (0..D).flat_map(move |a| {
        let fd = cfg.faces(a);
        let lo_face = fd.index(&c);
        let hi_face = lo_face + fd.stride(a);
        let me = cells.index(&c);
        let stride = cells.stride(a);
        let down = (c[a] > 0 && free[a][lo_face]).then(|| (me - stride, a));
        let up = (c[a] + 1 < cfg.resolution[a] && free[a][hi_face]).then(|| (me + stride, a));
        down.into_iter().chain(up)
    })
}

/// Projects the gas velocity onto divergence-free fields compatible with the mask.
pub fn pressure_project<const D: usize>(
    cfg: &GasConfig<D>,
    gas: &mut GasState<D>,
    mask: &SolidMask<D>,
    solve: ProjectionSolve,
) -> Result<(), SimError> {
    Projector::new(cfg, mask, solve).project(cfg, &mut gas.u)
}

/// A particle as seen by the gas: position, velocity and mass.
#[derive(Clone, Copy, Debug)]
pub struct ImpactParticle<const D: usize> {
    pub index: usize,
    pub x: Vector<D>,
    pub v: Vector<D>,
    pub mass: f64,
}

struct ImpactCells<const D: usize> {
    mass: Vec<f64>,
    momentum: Vec<Vector<D>>,
    cell: Vec<Option<usize>>,
}

fn impact_cells<const D: usize>(cfg: &GasConfig<D>, particles: &[ImpactParticle<D>]) -> ImpactCells<D> {
    let n = cfg.cells().len();
    let mut mass = vec![0.0; n];
    let mut momentum = vec![Vector::zeros(); n];
    let mut cell = Vec::with_capacity(particles.len());
    for p in particles {
        let c = cfg.cell_of(&p.x);
        if let Some(i) = c {
            mass[i] += p.mass;
            momentum[i] += p.v * p.mass;
        }
        cell.push(c);
    }
    ImpactCells { mass, momentum, cell }
}

/// For a face: the cells it averages particle velocity over.
fn face_cells<const D: usize>(cfg: &GasConfig<D>, axis: usize, f: usize) -> [Option<usize>; 2] {
    let cells = cfg.cells();
    let c = cfg.faces(axis).coords(f);
    let hi = (c[axis] < cfg.resolution[axis]).then(|| cells.index(&c));
    let lo = (c[axis] > 0).then(|| cells.index(&c) - cells.stride(axis));
    [lo, hi]
}

/// Relaxes free-face velocities toward the mass-weighted particle velocity of
/// the adjacent cells: `u += c·dt·(v̄ − u)`.
pub fn particle_impact<const D: usize>(
    cfg: &GasConfig<D>,
    gas: &mut GasState<D>,
    mask: &SolidMask<D>,
    particles: &[ImpactParticle<D>],
    dt: f64,
) {
    let k = (cfg.impact_strength * dt).min(1.0);
    if k == 0.0 || particles.is_empty() {
        return;
    }
    let ic = impact_cells(cfg, particles);
    for a in 0..D {
        for f in 0..gas.u[a].len() {
            if mask.is_fixed(a, f) {
                continue;
            }
            let (mut m, mut p) = (0.0, 0.0);
            for i in face_cells(cfg, a, f).into_iter().flatten() {
                m += ic.mass[i];
                p += ic.momentum[i].0[a];
            }
            if m > 0.0 {
                gas.u[a][f] += k * (p / m - gas.u[a][f]);
            }
        }
    }
}

fn particle_impact_vjp<const D: usize>(
    cfg: &GasConfig<D>,
    bar: &mut GasState<D>,
    mask: &SolidMask<D>,
    particles: &[ImpactParticle<D>],
    dt: f64,
    v_bar: &mut [Vector<D>],
) {
    let k = (cfg.impact_strength * dt).min(1.0);
    if k == 0.0 || particles.is_empty() {
        return;
    }
    let ic = impact_cells(cfg, particles);
    // cotangent of each cell's mean-velocity numerator, per axis
    let mut mom_bar = vec![Vector::<D>::zeros(); ic.mass.len()];
    for a in 0..D {
        for f in 0..bar.u[a].len() {
            if mask.is_fixed(a, f) {
                continue;
            }
            let fc = face_cells(cfg, a, f);
            let m: f64 = fc.iter().flatten().map(|i| ic.mass[*i]).sum();
            if m > 0.0 {
                let g = bar.u[a][f];
                bar.u[a][f] = (1.0 - k) * g;
                for i in fc.into_iter().flatten() {
                    mom_bar[i].0[a] += k * g / m;
                }
            }
        }
    }
    for (p, cell) in particles.iter().zip(&ic.cell) {
        if let Some(i) = cell {
            v_bar[p.index] += mom_bar[*i] * p.mass;
        }
    }
}

/// Smooth source kernel `strength·(1 − r²/R²)²` and its derivative in `r²`.
fn source_kernel(strength: f64, radius: f64, r2: f64) -> (f64, f64) {
    let q = 1.0 - r2 / (radius * radius);
    if q <= 0.0 {
        (0.0, 0.0)
    } else {
        (strength * q * q, -2.0 * strength * q / (radius * radius))
    }
}

fn apply_sources<const D: usize>(
    cfg: &GasConfig<D>,
    gas: &mut GasState<D>,
    effectors: &[EffectorSpec<D>],
    states: &[EffectorState<D>],
) {
    for (spec, st) in effectors.iter().zip(states) {
        let Some(src) = &spec.gas_source else { continue };
        let center = st.pose.to_world(&src.offset);
        let cells = cfg.cells();
        for i in 0..cells.len() {
            let x = cfg.cell_center(&cells.coords(i));
            let (k, _) = source_kernel(src.strength, src.radius, (x - center).norm_squared());
            if k == 0.0 {
                continue;
            }
            if let Some(t) = src.temperature {
                gas.temperature[i] += k * (t - gas.temperature[i]);
            }
            if let Some(s) = src.smoke {
                gas.smoke[i] += k * (s - gas.smoke[i]);
            }
        }
        if let Some(vl) = src.velocity {
            let target = st.pose.rotation * vl;
            for a in 0..D {
                let fd = cfg.faces(a);
                for f in 0..fd.len() {
                    let x = cfg.face_center(a, &fd.coords(f));
                    let (k, _) = source_kernel(src.strength, src.radius, (x - center).norm_squared());
                    if k != 0.0 {
                        gas.u[a][f] += k * (target.0[a] - gas.u[a][f]);
                    }
                }
            }
        }
    }
}

/// Reverse of [`apply_sources`] for the fields in `pre` (the state the sources read).
fn apply_sources_vjp<const D: usize>(
    cfg: &GasConfig<D>,
    pre: &GasState<D>,
    bar: &mut GasState<D>,
    effectors: &[EffectorSpec<D>],
    states: &[EffectorState<D>],
    eff_bar: &mut [EffectorBar<D>],
) {
    // sources run in effector order; undo them in reverse with per-source inputs
    let mut inputs = Vec::with_capacity(effectors.len());
    let mut cur = pre.clone();
    for e in 0..effectors.len() {
        inputs.push(cur.clone());
        apply_sources(cfg, &mut cur, &effectors[e..=e], &states[e..=e]);
    }
    for e in (0..effectors.len()).rev() {
        let (spec, st) = (&effectors[e], &states[e]);
        let Some(src) = &spec.gas_source else { continue };
        let input = &inputs[e];
        let center = st.pose.to_world(&src.offset);
        let mut center_bar = Vector::<D>::zeros();
        let cells = cfg.cells();
        let field = |target: Option<f64>, q: &[f64], qb: &mut [f64], center_bar: &mut Vector<D>| {
            let Some(t) = target else { return };
            for i in 0..cells.len() {
                let x = cfg.cell_center(&cells.coords(i));
                let (k, dk) = source_kernel(src.strength, src.radius, (x - center).norm_squared());
                if k == 0.0 && dk == 0.0 {
                    continue;
                }
                let g = qb[i];
                let kb = g * (t - q[i]);
                qb[i] = (1.0 - k) * g;
                *center_bar += (center - x) * (2.0 * dk * kb);
            }
        };
        field(src.temperature, &input.temperature, &mut bar.temperature, &mut center_bar);
        field(src.smoke, &input.smoke, &mut bar.smoke, &mut center_bar);
        if let Some(vl) = src.velocity {
            let target = st.pose.rotation * vl;
            let mut target_bar = Vector::<D>::zeros();
            for a in 0..D {
                let fd = cfg.faces(a);
                for f in 0..fd.len() {
                    let x = cfg.face_center(a, &fd.coords(f));
                    let (k, dk) = source_kernel(src.strength, src.radius, (x - center).norm_squared());
                    if k == 0.0 && dk == 0.0 {
                        continue;
                    }
                    let g = bar.u[a][f];
                    let kb = g * (target.0[a] - input.u[a][f]);
                    bar.u[a][f] = (1.0 - k) * g;
                    target_bar.0[a] += k * g;
                    center_bar += (center - x) * (2.0 * dk * kb);
                }
            }
            eff_bar[e].rotation += target_bar.outer(&vl);
        }
        eff_bar[e].translation += center_bar;
        eff_bar[e].rotation += center_bar.outer(&src.offset);
    }
}

/// Intermediates of one gas step needed by the reverse pass.
#[derive(Clone, Debug)]
pub struct GasTape<const D: usize> {
    pre: GasState<D>,
    sourced: GasState<D>,
    mask: SolidMask<D>,
    projector: Projector<D>,
}

impl<const D: usize> GasTape<D> {
    pub fn mask(&self) -> &SolidMask<D> {
        &self.mask
    }
}

/// Sources → advection → buoyancy → solid mask → particle impact → projection.
pub fn gas_step<const D: usize>(
    cfg: &GasConfig<D>,
    gas: &GasState<D>,
    effectors: &[EffectorSpec<D>],
    states: &[EffectorState<D>],
    particles: &[ImpactParticle<D>],
    dt: f64,
) -> Result<(GasState<D>, GasTape<D>), SimError> {
    let mut sourced = gas.clone();
    apply_sources(cfg, &mut sourced, effectors, states);
    let mut next = GasState {
        u: core::array::from_fn(|a| advect_field(cfg, &sourced.u[a], Some(a), &sourced.u, dt)),
        smoke: advect_field(cfg, &sourced.smoke, None, &sourced.u, dt),
        temperature: advect_field(cfg, &sourced.temperature, None, &sourced.u, dt),
        solid: sourced.solid.clone(),
    };
    add_buoyancy(cfg, &mut next, dt);
    let mask = rasterize_solid_mask(cfg, effectors, states);
    apply_mask(&mask, &mut next, states);
    particle_impact(cfg, &mut next, &mask, particles, dt);
    let projector = Projector::new(cfg, &mask, cfg.solve);
    projector.project(cfg, &mut next.u)?;
    Ok((next, GasTape { pre: gas.clone(), sourced, mask, projector }))
}

/// Reverse of [`gas_step`]. `bar` holds the cotangent of the output and is
/// replaced by the cotangent of the input.
pub fn gas_step_vjp<const D: usize>(
    cfg: &GasConfig<D>,
    tape: &GasTape<D>,
    bar: &mut GasState<D>,
    effectors: &[EffectorSpec<D>],
    states: &[EffectorState<D>],
    particles: &[ImpactParticle<D>],
    dt: f64,
    eff_bar: &mut [EffectorBar<D>],
    particle_v_bar: &mut [Vector<D>],
) -> Result<(), SimError> {
    tape.projector.project_vjp(cfg, &mut bar.u)?;
    particle_impact_vjp(cfg, bar, &tape.mask, particles, dt, particle_v_bar);
    apply_mask_vjp(&tape.mask, bar, states, eff_bar);
    add_buoyancy_vjp(cfg, bar, dt);
    let s = &tape.sourced;
    let mut in_bar = s.zeros_like();
    let mut through_velocity: [Vec<f64>; D] = core::array::from_fn(|a| vec![0.0; s.u[a].len()]);
    for a in 0..D {
        advect_field_vjp(cfg, &s.u[a], Some(a), &s.u, dt, &bar.u[a], &mut in_bar.u[a], &mut through_velocity);
    }
    advect_field_vjp(cfg, &s.smoke, None, &s.u, dt, &bar.smoke, &mut in_bar.smoke, &mut through_velocity);
    advect_field_vjp(cfg, &s.temperature, None, &s.u, dt, &bar.temperature, &mut in_bar.temperature, &mut through_velocity);
    for a in 0..D {
        for (x, y) in in_bar.u[a].iter_mut().zip(&through_velocity[a]) {
            *x += y;
        }
    }
    apply_sources_vjp(cfg, &tape.pre, &mut in_bar, effectors, states, eff_bar);
    in_bar.solid = tape.pre.solid.clone();
    *bar = in_bar;
    Ok(())
}
