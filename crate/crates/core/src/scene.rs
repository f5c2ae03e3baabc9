//! World representation and scene construction.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::SceneError;
use crate::gas::{GasConfig, GasSource, GasState};
use crate::linalg::{scalar, Matrix, Vector};
use crate::materials::{MaterialKind, MaterialParams};
use crate::sdf::{CompoundSdf, Pose, SdfPrimitive};

/// Effector command for one substep: linear velocity in `0..3`, angular in `3..6`.
/// 2D scenes read components 0, 1 and 5.
pub type Action = [f64; 6];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ContactModel {
    /// `α = min(exp(−d), 1)` with `d` in cell widths, skipped beyond the threshold.
    Soft { threshold: f64 },
    /// `α = 1` inside or on the surface, `0` outside.
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig<const D: usize> {
    pub grid_resolution: usize,
    pub domain_min: Vector<D>,
    /// Edge length of the cubic MPM domain.
    pub domain_size: f64,
    pub dt: f64,
    pub substeps_per_step: usize,
    pub gravity: Vector<D>,
    pub contact: ContactModel,
    /// Particle speeds are clamped to `cfl_factor · dx / dt`.
    pub cfl_factor: f64,
    /// Nodes within this many cells of a wall get the separating condition.
    pub wall_band: usize,
    pub mass_epsilon: f64,
}

impl<const D: usize> SimConfig<D> {
    pub fn new(grid_resolution: usize, domain_size: f64, dt: f64) -> Self {
        let mut gravity = Vector::zeros();
        gravity.0[1] = -9.8;
        SimConfig {
            grid_resolution,
            domain_min: Vector::zeros(),
            domain_size,
            dt,
            substeps_per_step: 10,
            gravity,
            contact: ContactModel::Soft { threshold: 3.0 },
            cfl_factor: 0.9,
            wall_band: 3,
            mass_epsilon: 1e-12,
        }
    }

    pub fn dx(&self) -> f64 {
        self.domain_size / self.grid_resolution as f64
    }

    pub fn domain_max(&self) -> Vector<D> {
        self.domain_min + Vector::splat(self.domain_size)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |what: &str| Err(SceneError::InvalidParameter { what: what.to_string() });
        if !(2..=3).contains(&D) {
            return bad("dim must be 2 or 3");
        }
        if self.grid_resolution < 8 {
            return bad("grid_resolution must be at least 8");
        }
        if !(self.domain_size > 0.0) || !self.domain_min.is_finite() {
            return bad("domain must have positive size");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.substeps_per_step == 0 {
            return bad("substeps_per_step must be at least 1");
        }
        if !self.gravity.is_finite() {
            return bad("gravity must be finite");
        }
        if !(self.cfl_factor > 0.0) {
            return bad("cfl_factor must be positive");
        }
        if let ContactModel::Soft { threshold } = self.contact {
            if !(threshold > 0.0) {
                return bad("contact threshold must be positive");
            }
        }
        Ok(())
    }
}

/// Time-varying particle data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle<const D: usize> {
    pub x: Vector<D>,
    pub v: Vector<D>,
    pub f: Matrix<D>,
    pub c: Matrix<D>,
}

/// Emitted particles start inactive and appear at the nozzle at `substep`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Activation<const D: usize> {
    pub substep: usize,
    pub effector: usize,
    /// Nozzle-frame position.
    pub offset: Vector<D>,
    /// Nozzle-frame exit velocity.
    pub velocity: Vector<D>,
}

/// Per-particle data that never changes over a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParticleInfo<const D: usize> {
    pub material: usize,
    pub body: usize,
    pub mass: f64,
    pub volume0: f64,
    pub rest: Vector<D>,
    pub activation: Option<Activation<D>>,
}

impl<const D: usize> ParticleInfo<D> {
    pub fn active_at(&self, substep: usize) -> bool {
        self.activation.is_none_or(|a| substep >= a.substep)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Body {
    pub name: String,
    pub material: usize,
    pub particles: Range<usize>,
    pub rigid: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectorSpec<const D: usize> {
    pub name: String,
    /// Geometry in the effector frame.
    pub shape: CompoundSdf<D>,
    pub initial_pose: Pose<D>,
    /// Coulomb coefficient; `f64::INFINITY` makes the contact sticky.
    pub friction: f64,
    /// Whether the effector pushes MPM material.
    pub contact: bool,
    /// Whether the effector blocks the gas.
    pub gas_solid: bool,
    pub action_mask: [bool; 6],
    /// Velocity added to the masked action every substep.
    pub scripted_linear: Vector<D>,
    pub scripted_angular: [f64; 3],
    pub gas_source: Option<GasSource<D>>,
}

impl<const D: usize> EffectorSpec<D> {
    pub fn new(name: &str, shape: CompoundSdf<D>, initial_pose: Pose<D>) -> Self {
        EffectorSpec {
            name: name.to_string(),
            shape,
            initial_pose,
            friction: 0.0,
            contact: true,
            gas_solid: false,
            action_mask: [false; 6],
            scripted_linear: Vector::zeros(),
            scripted_angular: [0.0; 3],
            gas_source: None,
        }
    }

    /// Mask that accepts every component meaningful in `D` dimensions.
    pub fn full_mask() -> [bool; 6] {
        if D == 2 {
            [true, true, false, false, false, true]
        } else {
            [true; 6]
        }
    }

    /// Commanded `(linear, angular)` velocity for one substep.
    pub fn velocity(&self, action: &Action) -> (Vector<D>, [f64; 3]) {
        let a = |i: usize| if self.action_mask[i] { action[i] } else { 0.0 };
        let mut lin = self.scripted_linear;
        for k in 0..D {
            lin.0[k] += a(k);
        }
        let mut ang = self.scripted_angular;
        if D == 2 {
            ang[2] += a(5);
        } else {
            for k in 0..3 {
                ang[k] += a(3 + k);
            }
        }
        (lin, ang)
    }

    /// Pulls `(linear, angular)` cotangents back to the 6-vector action.
    pub fn velocity_vjp(&self, lin_bar: &Vector<D>, ang_bar: &[f64; 3]) -> Action {
        let mut out = [0.0; 6];
        for k in 0..D {
            out[k] = lin_bar.0[k];
        }
        if D == 2 {
            out[5] = ang_bar[2];
        } else {
            out[3..6].copy_from_slice(ang_bar);
        }
        for i in 0..6 {
            if !self.action_mask[i] {
                out[i] = 0.0;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectorState<const D: usize> {
    pub pose: Pose<D>,
    pub linear_velocity: Vector<D>,
    pub angular_velocity: [f64; 3],
}

/// Cotangents of one effector's pose and commanded velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectorBar<const D: usize> {
    pub translation: Vector<D>,
    pub rotation: Matrix<D>,
    pub linear: Vector<D>,
    pub angular: [f64; 3],
}

impl<const D: usize> Default for EffectorBar<D> {
    fn default() -> Self {
        EffectorBar { translation: Vector::zeros(), rotation: Matrix::zeros(), linear: Vector::zeros(), angular: [0.0; 3] }
    }
}

impl<const D: usize> EffectorBar<D> {
    pub fn is_finite(&self) -> bool {
        self.translation.is_finite() && self.rotation.is_finite() && self.linear.is_finite() && self.angular.iter().all(|a| a.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState<const D: usize> {
    pub substep: usize,
    pub time: f64,
    pub particles: Vec<Particle<D>>,
    pub effectors: Vec<EffectorState<D>>,
    pub gas: Option<GasState<D>>,
}

impl<const D: usize> SimState<D> {
    /// Position and velocity of every particle, flattened (`2·D` numbers each).
    pub fn observation(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.particles.len() * 2 * D);
        for p in &self.particles {
            out.extend_from_slice(&p.x.0);
            out.extend_from_slice(&p.v.0);
        }
        out
    }
}

/// Static description shared by every state of a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene<const D: usize> {
    pub config: SimConfig<D>,
    pub materials: Vec<MaterialParams>,
    pub info: Vec<ParticleInfo<D>>,
    pub bodies: Vec<Body>,
    pub effectors: Vec<EffectorSpec<D>>,
    pub gas: Option<GasConfig<D>>,
}

impl<const D: usize> Scene<D> {
    pub fn body(&self, name: &str) -> Option<(usize, &Body)> {
        self.bodies.iter().enumerate().find(|(_, b)| b.name == name)
    }

    pub fn with_contact(&self, contact: ContactModel) -> Self {
        let mut s = self.clone();
        s.config.contact = contact;
        s
    }

    pub fn total_mass(&self) -> f64 {
        self.info.iter().map(|p| p.mass).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmitterSpec<const D: usize> {
    pub effector: usize,
    pub start_substep: usize,
    /// Substeps between batches.
    pub interval: usize,
    pub batches: usize,
    /// Nozzle-frame positions of one batch.
    pub offsets: Vec<Vector<D>>,
    pub exit_velocity: Vector<D>,
    /// Rest volume per emitted particle.
    pub volume: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BodySource<const D: usize> {
    /// Lattice sampling of the shape's interior.
    Shape {
        shape: SdfPrimitive<D>,
        particles_per_cell: usize,
        /// Random displacement as a fraction of the lattice spacing.
        jitter: f64,
    },
    Emitter(EmitterSpec<D>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodySpec<const D: usize> {
    pub name: String,
    pub material: String,
    pub source: BodySource<D>,
    pub velocity: Vector<D>,
}

impl<const D: usize> BodySpec<D> {
    pub fn shape(name: &str, material: &str, shape: SdfPrimitive<D>, particles_per_cell: usize) -> Self {
        BodySpec {
            name: name.to_string(),
            material: material.to_string(),
            source: BodySource::Shape { shape, particles_per_cell, jitter: 0.0 },
            velocity: Vector::zeros(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec<const D: usize> {
    pub config: SimConfig<D>,
    pub materials: Vec<MaterialParams>,
    pub bodies: Vec<BodySpec<D>>,
    pub effectors: Vec<EffectorSpec<D>>,
    pub gas: Option<GasConfig<D>>,
    /// Seeds the sampling jitter.
    pub seed: u64,
}

impl<const D: usize> SceneSpec<D> {
    pub fn new(config: SimConfig<D>) -> Self {
        SceneSpec { config, materials: Vec::new(), bodies: Vec::new(), effectors: Vec::new(), gas: None, seed: 0 }
    }

    /// Registers a material by preset name unless already present.
    pub fn with_preset(mut self, name: &str) -> Self {
        if !self.materials.iter().any(|m| m.name == name) {
            if let Some(m) = MaterialParams::preset(name) {
                self.materials.push(m);
            }
        }
        self
    }
}

/// Lattice points per axis for a particles-per-cell count, if it is a perfect power.
fn per_axis(ppc: usize, d: usize) -> Option<usize> {
    let n = scalar::round(scalar::powf(ppc as f64, 1.0 / d as f64)) as usize;
    (n >= 1 && n.pow(d as u32) == ppc).then_some(n)
}

pub fn build_scene<const D: usize>(spec: &SceneSpec<D>) -> Result<(Scene<D>, SimState<D>), SceneError> {
    let cfg = &spec.config;
    cfg.validate()?;
    for m in &spec.materials {
        m.validate().map_err(|what| SceneError::InvalidParameter { what })?;
    }
    let dx = cfg.dx();
    let lo = cfg.domain_min;
    let hi = cfg.domain_max();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut effectors = Vec::new();
    let mut effector_states = Vec::new();
    for e in &spec.effectors {
        if !(e.friction >= 0.0) || !e.initial_pose.is_valid() || e.shape.parts.iter().any(|p| !p.is_valid()) {
            return Err(SceneError::InvalidParameter { what: alloc::format!("effector '{}'", e.name) });
        }
        effectors.push(e.clone());
        effector_states.push(EffectorState {
            pose: e.initial_pose,
            linear_velocity: Vector::zeros(),
            angular_velocity: [0.0; 3],
        });
    }

    let mut info = Vec::new();
    let mut particles = Vec::new();
    let mut bodies = Vec::new();
    for (body_id, b) in spec.bodies.iter().enumerate() {
        let material = spec
            .materials
            .iter()
            .position(|m| m.name == b.material)
            .ok_or_else(|| SceneError::UnknownMaterial { name: b.material.clone() })?;
        let mat = &spec.materials[material];
        let start = particles.len();
        match &b.source {
            BodySource::Shape { shape, particles_per_cell, jitter } => {
                if !shape.is_valid() {
                    return Err(SceneError::InvalidParameter { what: alloc::format!("shape of body '{}'", b.name) });
                }
                let (blo, bhi) = shape.world_bounds().ok_or_else(|| SceneError::ShapeOutsideDomain { shape: b.name.clone() })?;
                for k in 0..D {
                    if blo.0[k] < lo.0[k] || bhi.0[k] > hi.0[k] {
                        return Err(SceneError::ShapeOutsideDomain { shape: b.name.clone() });
                    }
                }
                let n = per_axis(*particles_per_cell, D).ok_or_else(|| SceneError::InvalidParameter {
                    what: alloc::format!("particles_per_cell of '{}' must be a perfect {}-th power", b.name, D),
                })?;
                let volume0 = scalar::powf(dx, D as f64) / *particles_per_cell as f64;
                let h = dx / n as f64;
                let mut first = [0i64; D];
                let mut count = [0usize; D];
                for k in 0..D {
                    let a = scalar::floor((blo.0[k] - lo.0[k]) / h) as i64;
                    let z = scalar::floor((bhi.0[k] - lo.0[k]) / h) as i64 + 1;
                    first[k] = a;
                    count[k] = (z - a).max(0) as usize;
                }
                let total: usize = count.iter().product();
                for flat in 0..total {
                    let mut rem = flat;
                    let mut x = Vector::zeros();
                    for k in (0..D).rev() {
                        let i = first[k] + (rem % count[k]) as i64;
                        rem /= count[k];
                        x.0[k] = lo.0[k] + (i as f64 + 0.5) * h;
                    }
                    if *jitter > 0.0 {
                        for k in 0..D {
                            x.0[k] += rng.random_range(-0.5..0.5) * jitter * h;
                        }
                    }
                    if shape.sample(&x).distance < 0.0 {
                        particles.push(Particle { x, v: b.velocity, f: Matrix::identity(), c: Matrix::zeros() });
                        info.push(ParticleInfo {
                            material,
                            body: body_id,
                            mass: mat.rho * volume0,
                            volume0,
                            rest: x,
                            activation: None,
                        });
                    }
                }
            }
            BodySource::Emitter(em) => {
                if em.effector >= effectors.len() {
                    return Err(SceneError::UnknownEffector { index: em.effector });
                }
                if !(em.volume > 0.0) || em.interval == 0 {
                    return Err(SceneError::InvalidParameter { what: alloc::format!("emitter of '{}'", b.name) });
                }
                let pose = effectors[em.effector].initial_pose;
                for batch in 0..em.batches {
                    for off in &em.offsets {
                        let x = pose.to_world(off);
                        particles.push(Particle { x, v: Vector::zeros(), f: Matrix::identity(), c: Matrix::zeros() });
                        info.push(ParticleInfo {
                            material,
                            body: body_id,
                            mass: mat.rho * em.volume,
                            volume0: em.volume,
                            rest: x,
                            activation: Some(Activation {
                                substep: em.start_substep + batch * em.interval,
                                effector: em.effector,
                                offset: *off,
                                velocity: em.exit_velocity,
                            }),
                        });
                    }
                }
            }
        }
        if particles.len() == start {
            return Err(SceneError::NoParticlesSampled { shape: b.name.clone() });
        }
        bodies.push(Body {
            name: b.name.clone(),
            material,
            particles: start..particles.len(),
            rigid: mat.kind == MaterialKind::Rigid,
        });
    }

    let gas = match &spec.gas {
        Some(g) => {
            g.validate()?;
            Some(g.initial_state())
        }
        None => None,
    };
    let scene = Scene {
        config: cfg.clone(),
        materials: spec.materials.clone(),
        info,
        bodies,
        effectors,
        gas: spec.gas.clone(),
    };
    let state = SimState { substep: 0, time: 0.0, particles, effectors: effector_states, gas };
    Ok((scene, state))
}
