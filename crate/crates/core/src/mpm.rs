//! MLS-MPM substep: particle-to-grid, grid update with walls and effector
//! contact, grid-to-particle with material projections, rigid projection and
//! the gas coupling hook.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::SimError;
use crate::gas::{gas_step, GasTape, ImpactParticle};
use crate::linalg::{angular_cross, rotation_exp, scalar, Matrix, Vector};
use crate::materials::{kirchhoff_stress, rigid_shape_match, RigidFit};
use crate::scene::{Action, ContactModel, EffectorSpec, EffectorState, Particle, Scene, SimState};
use crate::sdf::SdfSample;

/// Quadratic B-spline stencil of one particle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelWeights<const D: usize> {
    pub base_cell: [i64; D],
    /// Per-axis weights of nodes `base, base+1, base+2`.
    pub weights: [[f64; 3]; D],
    /// Derivatives of the weights with respect to the fractional offset.
    pub dweights: [[f64; 3]; D],
    /// Fractional offset `x/dx − base`, in `[0.5, 1.5)`.
    pub fx: [f64; D],
}

pub fn kernel_weights<const D: usize>(x: &Vector<D>, origin: &Vector<D>, dx: f64) -> KernelWeights<D> {
    let mut base_cell = [0i64; D];
    let mut weights = [[0.0; 3]; D];
    let mut dweights = [[0.0; 3]; D];
    let mut fxs = [0.0; D];
    for k in 0..D {
        let g = (x.0[k] - origin.0[k]) / dx;
        let base = scalar::floor(g - 0.5);
        let fx = g - base;
        base_cell[k] = base as i64;
        fxs[k] = fx;
        weights[k] = [0.5 * (1.5 - fx) * (1.5 - fx), 0.75 - (fx - 1.0) * (fx - 1.0), 0.5 * (fx - 0.5) * (fx - 0.5)];
        dweights[k] = [fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5];
    }
    KernelWeights { base_cell, weights, dweights, fx: fxs }
}

impl<const D: usize> KernelWeights<D> {
    /// Node offset digits for stencil entry `s` in `0..3^D`.
    fn digits(s: usize) -> [usize; D] {
        let mut d = [0; D];
        let mut r = s;
        for k in 0..D {
            d[k] = r % 3;
            r /= 3;
        }
        d
    }

    /// `(node coordinates, weight, ∂weight/∂x, node − x)` for stencil entry `s`.
    pub fn entry(&self, s: usize, dx: f64) -> ([usize; D], f64, Vector<D>, Vector<D>) {
        let d = Self::digits(s);
        let mut node = [0usize; D];
        let mut w = 1.0;
        let mut grad = Vector::splat(1.0);
        let mut dpos = Vector::zeros();
        for k in 0..D {
            node[k] = (self.base_cell[k] + d[k] as i64) as usize;
            w *= self.weights[k][d[k]];
            dpos.0[k] = (d[k] as f64 - self.fx[k]) * dx;
            for j in 0..D {
                grad.0[j] *= if j == k { self.dweights[k][d[k]] / dx } else { self.weights[k][d[k]] };
            }
        }
        (node, w, grad, dpos)
    }

    pub const STENCIL: usize = if D == 2 { 9 } else { 27 };
}

/// Collocated MPM grid with `resolution + 1` nodes per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<const D: usize> {
    pub nodes: usize,
    pub mass: Vec<f64>,
    pub momentum: Vec<Vector<D>>,
    /// Velocity after the grid update (zero on empty nodes).
    pub velocity: Vec<Vector<D>>,
}

impl<const D: usize> Grid<D> {
    pub fn new(resolution: usize) -> Self {
        let nodes = resolution + 1;
        let len = nodes.pow(D as u32);
        Grid { nodes, mass: vec![0.0; len], momentum: vec![Vector::zeros(); len], velocity: vec![Vector::zeros(); len] }
    }

    pub fn index(&self, c: &[usize; D]) -> usize {
        let mut i = 0;
        for k in (0..D).rev() {
            i = i * self.nodes + c[k];
        }
        i
    }

    pub fn coords(&self, mut i: usize) -> [usize; D] {
        let mut c = [0; D];
        for k in 0..D {
            c[k] = i % self.nodes;
            i /= self.nodes;
        }
        c
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn total_momentum(&self) -> Vector<D> {
        let mut p = Vector::zeros();
        for m in &self.momentum {
            p += *m;
        }
        p
    }
}

fn node_position<const D: usize>(scene: &Scene<D>, c: &[usize; D]) -> Vector<D> {
    let dx = scene.config.dx();
    let mut x = scene.config.domain_min;
    for k in 0..D {
        x.0[k] += c[k] as f64 * dx;
    }
    x
}

/// Stencil of a particle, or an escape error if it leaves the interior.
pub(crate) fn stencil_of<const D: usize>(scene: &Scene<D>, x: &Vector<D>, particle: usize) -> Result<KernelWeights<D>, SimError> {
    let cfg = &scene.config;
    let dx = cfg.dx();
    let res = cfg.grid_resolution as f64;
    for k in 0..D {
        let g = (x.0[k] - cfg.domain_min.0[k]) / dx;
        if !(g >= 1.0 && g <= res - 1.0) {
            return Err(SimError::Escape { particle });
        }
    }
    Ok(kernel_weights(x, &cfg.domain_min, dx))
}

/// Scaled stress `−dt·V⁰·(4/dx²)·τ` contributed to the affine momentum term.
pub(crate) fn stress_term<const D: usize>(scene: &Scene<D>, i: usize, p: &Particle<D>) -> Result<Matrix<D>, SimError> {
    let info = &scene.info[i];
    let mat = &scene.materials[info.material];
    if !(p.f.determinant() > 0.0) {
        return Err(SimError::DegenerateDeformation { particle: i });
    }
    let dx = scene.config.dx();
    let tau = kirchhoff_stress(&p.f, mat.mu, mat.lambda);
    Ok(tau * (-scene.config.dt * info.volume0 * 4.0 / (dx * dx)))
}

/// Particle-to-grid transfer of mass and momentum for the active particles.
pub fn p2g<const D: usize>(scene: &Scene<D>, particles: &[Particle<D>], active: &[bool]) -> Result<Grid<D>, SimError> {
    let dx = scene.config.dx();
    let mut grid = Grid::new(scene.config.grid_resolution);
    for (i, p) in particles.iter().enumerate() {
        if !active[i] {
            continue;
        }
        let m = scene.info[i].mass;
        let kw = stencil_of(scene, &p.x, i)?;
        let affine = stress_term(scene, i, p)? + p.c * m;
        let mv = p.v * m;
        for s in 0..KernelWeights::<D>::STENCIL {
            let (node, w, _, dpos) = kw.entry(s, dx);
            let n = grid.index(&node);
            grid.mass[n] += w * m;
            grid.momentum[n] += (mv + affine * dpos) * w;
        }
    }
    Ok(grid)
}

/// Removes the approaching normal component of `v_rel` and applies Coulomb
/// friction to the tangential part. Infinite friction sticks, even when
/// separating.
pub fn coulomb_project<const D: usize>(v_rel: &Vector<D>, normal: &Vector<D>, friction: f64) -> Vector<D> {
    if friction == f64::INFINITY {
        return Vector::zeros();
    }
    let vn = v_rel.dot(normal);
    if vn >= 0.0 {
        return *v_rel;
    }
    let vt = *v_rel - *normal * vn;
    let t = vt.norm();
    if t <= -friction * vn {
        Vector::zeros()
    } else {
        vt * (1.0 + friction * vn / t)
    }
}

/// Cotangents `(v̄_rel, n̄)` of [`coulomb_project`].
pub fn coulomb_project_vjp<const D: usize>(
    v_rel: &Vector<D>,
    normal: &Vector<D>,
    friction: f64,
    g: &Vector<D>,
) -> (Vector<D>, Vector<D>) {
    if friction == f64::INFINITY {
        return (Vector::zeros(), Vector::zeros());
    }
    let s = v_rel.dot(normal);
    if s >= 0.0 {
        return (*g, Vector::zeros());
    }
    let t = *v_rel - *normal * s;
    let tn = t.norm();
    if tn <= -friction * s {
        return (Vector::zeros(), Vector::zeros());
    }
    // out = t + μ·s·t̂
    let th = t * (1.0 / tn);
    let t_bar = *g + (*g - th * th.dot(g)) * (friction * s / tn);
    let mut s_bar = friction * th.dot(g);
    let mut v_bar = t_bar;
    let mut n_bar = t_bar * (-s);
    s_bar -= normal.dot(&t_bar);
    v_bar += *normal * s_bar;
    n_bar += *v_rel * s_bar;
    (v_bar, n_bar)
}

/// `α·v_c + (1−α)·v_original` with `α = min(exp(−d), 1)`.
pub fn soft_contact_blend<const D: usize>(v_original: &Vector<D>, v_c: &Vector<D>, d: f64) -> Vector<D> {
    let alpha = contact_alpha(d);
    *v_c * alpha + *v_original * (1.0 - alpha)
}

/// `min(exp(−d), 1)`.
pub fn contact_alpha(d: f64) -> f64 {
    if d <= 0.0 {
        1.0
    } else {
        scalar::exp(-d)
    }
}

/// Blend weight used on the grid and its derivative in `d` (cell widths).
/// The soft weight is rescaled so it reaches zero exactly at the threshold.
pub fn contact_weight(model: ContactModel, d: f64) -> (f64, f64) {
    match model {
        ContactModel::Hard => (if d <= 0.0 { 1.0 } else { 0.0 }, 0.0),
        ContactModel::Soft { threshold } => {
            if d >= threshold {
                return (0.0, 0.0);
            }
            let cut = scalar::exp(-threshold);
            let norm = 1.0 / (1.0 - cut);
            if d <= 0.0 {
                (1.0, 0.0)
            } else {
                let e = scalar::exp(-d);
                ((e - cut) * norm, -e * norm)
            }
        }
    }
}

/// One effector's contact response at one node, with what the reverse pass needs.
#[derive(Clone, Copy, Debug)]
pub struct ContactEval<const D: usize> {
    pub part: usize,
    pub sample: SdfSample<D>,
    /// Distance in cell widths.
    pub d: f64,
    pub alpha: f64,
    pub dalpha: f64,
    pub v_in: Vector<D>,
    pub v_e: Vector<D>,
    pub v_rel: Vector<D>,
    pub v_c: Vector<D>,
    pub v_out: Vector<D>,
}

pub(crate) fn contact_eval<const D: usize>(
    model: ContactModel,
    dx: f64,
    spec: &EffectorSpec<D>,
    st: &EffectorState<D>,
    xi: &Vector<D>,
    v: &Vector<D>,
) -> Option<ContactEval<D>> {
    if !spec.contact {
        return None;
    }
    let (part, sample) = spec.shape.sample_in(&st.pose, xi)?;
    let d = sample.distance / dx;
    let (alpha, dalpha) = contact_weight(model, d);
    if alpha == 0.0 && dalpha == 0.0 {
        return None;
    }
    let v_e = st.linear_velocity + angular_cross(&st.angular_velocity, &(*xi - st.pose.translation));
    let v_rel = *v - v_e;
    let v_c = v_e + coulomb_project(&v_rel, &sample.normal, spec.friction);
    let v_out = v_c * alpha + *v * (1.0 - alpha);
    Some(ContactEval { part, sample, d, alpha, dalpha, v_in: *v, v_e, v_rel, v_c, v_out })
}

/// Per-node contact diagnostics recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactDiagnostic<const D: usize> {
    pub node: usize,
    pub effector: usize,
    pub alpha: f64,
    pub distance: f64,
    pub normal: Vector<D>,
}

/// Velocity of a massive node before contact: momentum/mass, gravity, walls.
pub(crate) fn node_free_velocity<const D: usize>(scene: &Scene<D>, momentum: &Vector<D>, mass: f64) -> Vector<D> {
    let cfg = &scene.config;
    *momentum * (1.0 / mass) + cfg.gravity * cfg.dt
}

/// Separating walls: zero the components that point into a wall band.
pub(crate) fn apply_walls<const D: usize>(scene: &Scene<D>, coords: &[usize; D], v: &mut Vector<D>) -> [bool; D] {
    let cfg = &scene.config;
    let mut walled = [false; D];
    let res = cfg.grid_resolution;
    for k in 0..D {
        if (coords[k] < cfg.wall_band && v.0[k] < 0.0) || (coords[k] + cfg.wall_band > res && v.0[k] > 0.0) {
            v.0[k] = 0.0;
            walled[k] = true;
        }
    }
    walled
}

/// Grid update: normalize, gravity, separating walls, effector contact.
pub fn grid_update<const D: usize>(
    scene: &Scene<D>,
    grid: &mut Grid<D>,
    effectors: &[EffectorState<D>],
) -> Vec<ContactDiagnostic<D>> {
    let eps = scene.config.mass_epsilon;
    let dx = scene.config.dx();
    let mut diags = Vec::new();
    for n in 0..grid.mass.len() {
        if grid.mass[n] <= eps {
            grid.velocity[n] = Vector::zeros();
            continue;
        }
        let c = grid.coords(n);
        let mut v = node_free_velocity(scene, &grid.momentum[n], grid.mass[n]);
        apply_walls(scene, &c, &mut v);
        let xi = node_position(scene, &c);
        for (e, (spec, st)) in scene.effectors.iter().zip(effectors).enumerate() {
            if let Some(ce) = contact_eval(scene.config.contact, dx, spec, st, &xi, &v) {
                diags.push(ContactDiagnostic { node: n, effector: e, alpha: ce.alpha, distance: ce.d, normal: ce.sample.normal });
                v = ce.v_out;
            }
        }
        grid.velocity[n] = v;
    }
    diags
}

/// Gathered quantities of one particle in grid-to-particle.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Gathered<const D: usize> {
    pub v: Vector<D>,
    /// `Σ w·vᵢ·(xᵢ − x)ᵀ`
    pub b: Matrix<D>,
}

pub(crate) fn gather<const D: usize>(scene: &Scene<D>, grid: &Grid<D>, kw: &KernelWeights<D>) -> Gathered<D> {
    let dx = scene.config.dx();
    let mut v = Vector::zeros();
    let mut b = Matrix::zeros();
    for s in 0..KernelWeights::<D>::STENCIL {
        let (node, w, _, dpos) = kw.entry(s, dx);
        let vi = grid.velocity[grid.index(&node)];
        v += vi * w;
        b += vi.outer(&dpos) * w;
    }
    Gathered { v, b }
}

/// Border clamp: keeps positions at least one cell inside the domain so the
/// next stencil is valid. Returns the clamped axes.
pub(crate) fn clamp_to_interior<const D: usize>(scene: &Scene<D>, x: &mut Vector<D>) -> [bool; D] {
    let cfg = &scene.config;
    let dx = cfg.dx();
    let mut hit = [false; D];
    for k in 0..D {
        let lo = cfg.domain_min.0[k] + dx;
        let hi = cfg.domain_min.0[k] + dx * (cfg.grid_resolution as f64 - 1.0);
        if x.0[k] < lo {
            x.0[k] = lo;
            hit[k] = true;
        } else if x.0[k] > hi {
            x.0[k] = hi;
            hit[k] = true;
        }
    }
    hit
}

/// Speed clamp `|v| ≤ vmax`.
pub(crate) fn clamp_speed<const D: usize>(v: &Vector<D>, vmax: f64) -> Vector<D> {
    let n = v.norm();
    if n > vmax {
        *v * (vmax / n)
    } else {
        *v
    }
}

pub(crate) fn clamp_speed_vjp<const D: usize>(v: &Vector<D>, vmax: f64, g: &Vector<D>) -> Vector<D> {
    let n = v.norm();
    if n > vmax {
        let vh = *v * (1.0 / n);
        (*g - vh * vh.dot(g)) * (vmax / n)
    } else {
        *g
    }
}

pub(crate) fn max_speed<const D: usize>(scene: &Scene<D>) -> f64 {
    scene.config.cfl_factor * scene.config.dx() / scene.config.dt
}

/// Grid-to-particle: velocity, affine matrix, deformation update with the
/// material projection, speed clamp and advection.
pub fn g2p<const D: usize>(scene: &Scene<D>, grid: &Grid<D>, particles: &mut [Particle<D>], active: &[bool]) -> Result<(), SimError> {
    let dx = scene.config.dx();
    let dt = scene.config.dt;
    let vmax = max_speed(scene);
    let k = 4.0 / (dx * dx);
    for (i, p) in particles.iter_mut().enumerate() {
        if !active[i] {
            continue;
        }
        let kw = stencil_of(scene, &p.x, i)?;
        let g = gather(scene, grid, &kw);
        let c = g.b * k;
        let f_trial = (Matrix::identity() + c * dt) * p.f;
        let proj = scene.materials[scene.info[i].material].projection();
        let f = proj.apply(&f_trial).map_err(|_| SimError::DegenerateDeformation { particle: i })?;
        let v = clamp_speed(&g.v, vmax);
        p.x += v * dt;
        clamp_to_interior(scene, &mut p.x);
        p.v = v;
        p.c = c;
        p.f = f;
        if !p.x.is_finite() {
            return Err(SimError::Escape { particle: i });
        }
    }
    Ok(())
}

/// Rigid projection of every rigid body. Returns the fit per body.
pub fn rigid_body_pass<const D: usize>(
    scene: &Scene<D>,
    start: &[Particle<D>],
    particles: &mut [Particle<D>],
) -> Result<Vec<Option<RigidFit<D>>>, SimError> {
    let dt = scene.config.dt;
    let mut fits = Vec::with_capacity(scene.bodies.len());
    for (b, body) in scene.bodies.iter().enumerate() {
        if !body.rigid {
            fits.push(None);
            continue;
        }
        let r = body.particles.clone();
        let cur: Vec<Vector<D>> = particles[r.clone()].iter().map(|p| p.x).collect();
        let rest: Vec<Vector<D>> = scene.info[r.clone()].iter().map(|p| p.rest).collect();
        let masses: Vec<f64> = scene.info[r.clone()].iter().map(|p| p.mass).collect();
        let fit = rigid_shape_match(&cur, &rest, &masses).map_err(|_| SimError::Rigidity { body: b })?;
        for (j, i) in r.enumerate() {
            let x = fit.apply(&rest[j]);
            particles[i].v = (x - start[i].x) * (1.0 / dt);
            particles[i].x = x;
            particles[i].f = fit.rotation;
        }
        fits.push(Some(fit));
    }
    Ok(fits)
}

/// Everything the reverse pass needs about one substep.
#[derive(Clone, Debug)]
pub struct SubstepRecord<const D: usize> {
    pub substep: usize,
    pub action: Action,
    /// Effector states after the pose update.
    pub effectors: Vec<EffectorState<D>>,
    pub active: Vec<bool>,
    /// Particle state after activation, before p2g.
    pub activated: Vec<Particle<D>>,
    pub grid: Grid<D>,
    pub contacts: Vec<ContactDiagnostic<D>>,
    /// Particle state after g2p, before the rigid pass.
    pub after_g2p: Vec<Particle<D>>,
    pub rigid_fits: Vec<Option<RigidFit<D>>>,
    pub gas_tape: Option<GasTape<D>>,
    pub impact: Vec<ImpactParticle<D>>,
}

/// Advances effector poses by their commanded velocities.
pub fn update_effectors<const D: usize>(scene: &Scene<D>, effectors: &[EffectorState<D>], action: &Action) -> Vec<EffectorState<D>> {
    let dt = scene.config.dt;
    scene
        .effectors
        .iter()
        .zip(effectors)
        .map(|(spec, st)| {
            let (lin, ang) = spec.velocity(action);
            let phi = [ang[0] * dt, ang[1] * dt, ang[2] * dt];
            let mut pose = st.pose;
            pose.translation += lin * dt;
            pose.rotation = rotation_exp::<D>(&phi) * st.pose.rotation;
            EffectorState { pose, linear_velocity: lin, angular_velocity: ang }
        })
        .collect()
}

/// Places particles whose emitter fires at this substep.
pub(crate) fn activate<const D: usize>(scene: &Scene<D>, substep: usize, effectors: &[EffectorState<D>], particles: &mut [Particle<D>]) {
    for (i, info) in scene.info.iter().enumerate() {
        if let Some(a) = info.activation {
            if a.substep == substep {
                let pose = &effectors[a.effector].pose;
                particles[i] = Particle {
                    x: pose.to_world(&a.offset),
                    v: pose.rotation * a.velocity,
                    f: Matrix::identity(),
                    c: Matrix::zeros(),
                };
            }
        }
    }
}

pub(crate) fn impact_particles<const D: usize>(scene: &Scene<D>, particles: &[Particle<D>], active: &[bool]) -> Vec<ImpactParticle<D>> {
    particles
        .iter()
        .enumerate()
        .filter(|(i, _)| active[*i])
        .map(|(i, p)| ImpactParticle { index: i, x: p.x, v: p.v, mass: scene.info[i].mass })
        .collect()
}

/// One full substep. Errors carry the substep index.
pub fn mpm_substep<const D: usize>(
    scene: &Scene<D>,
    state: &SimState<D>,
    action: &Action,
) -> Result<(SimState<D>, SubstepRecord<D>), SimError> {
    let k = state.substep;
    let inner = || -> Result<(SimState<D>, SubstepRecord<D>), SimError> {
        let effectors = update_effectors(scene, &state.effectors, action);
        let active: Vec<bool> = scene.info.iter().map(|p| p.active_at(k)).collect();
        let mut particles = state.particles.clone();
        activate(scene, k, &effectors, &mut particles);
        let activated = particles.clone();
        let mut grid = p2g(scene, &particles, &active)?;
        let contacts = grid_update(scene, &mut grid, &effectors);
        g2p(scene, &grid, &mut particles, &active)?;
        let after_g2p = particles.clone();
        let rigid_fits = rigid_body_pass(scene, &activated, &mut particles)?;
        let (gas, gas_tape, impact) = match (&scene.gas, &state.gas) {
            (Some(cfg), Some(g)) => {
                let impact = impact_particles(scene, &particles, &active);
                let (next, tape) = gas_step(cfg, g, &scene.effectors, &effectors, &impact, scene.config.dt)?;
                (Some(next), Some(tape), impact)
            }
            _ => (state.gas.clone(), None, Vec::new()),
        };
        let next = SimState {
            substep: k + 1,
            time: state.time + scene.config.dt,
            particles,
            effectors: effectors.clone(),
            gas,
        };
        let record = SubstepRecord {
            substep: k,
            action: *action,
            effectors,
            active,
            activated,
            grid,
            contacts,
            after_g2p,
            rigid_fits,
            gas_tape,
            impact,
        };
        Ok((next, record))
    };
    inner().map_err(|e| e.at_substep(k))
}

/// Forward step without keeping the tape.
pub fn step<const D: usize>(scene: &Scene<D>, state: &SimState<D>, action: &Action) -> Result<SimState<D>, SimError> {
    mpm_substep(scene, state, action).map(|(s, _)| s)
}

/// Conserved quantities over the active particles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics<const D: usize> {
    pub total_mass: f64,
    pub momentum: Vector<D>,
    pub kinetic_energy: f64,
    pub max_speed: f64,
}

pub fn metrics<const D: usize>(scene: &Scene<D>, state: &SimState<D>) -> Metrics<D> {
    let mut m = Metrics { total_mass: 0.0, momentum: Vector::zeros(), kinetic_energy: 0.0, max_speed: 0.0 };
    for (p, info) in state.particles.iter().zip(&scene.info) {
        if !info.active_at(state.substep) {
            continue;
        }
        m.total_mass += info.mass;
        m.momentum += p.v * info.mass;
        m.kinetic_energy += 0.5 * info.mass * p.v.norm_squared();
        m.max_speed = m.max_speed.max(p.v.norm());
    }
    m
}
