//! Reverse-mode gradients of whole trajectories: the adjoint substep,
//! checkpointed backward sweeps and the finite-difference audit.

use alloc::vec;
use alloc::vec::Vec;

use crate::checkpoint::CheckpointStore;
use crate::error::SimError;
use crate::gas::{gas_step_vjp, GasState};
use crate::linalg::{angular_cross_vjp, rotation_exp, rotation_exp_vjp, Matrix, Vector};
use crate::materials::kirchhoff_stress_vjp;
use crate::mpm::{
    apply_walls, clamp_speed, clamp_speed_vjp, clamp_to_interior, contact_eval, coulomb_project_vjp, gather, max_speed, mpm_substep, node_free_velocity, step,
    stencil_of, stress_term, KernelWeights, SubstepRecord,
};
use crate::scene::{Action, EffectorBar, Scene, SimState};
use crate::sdf::sample_vjp;

/// Cotangent of one particle's state.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ParticleBar<const D: usize> {
    pub x: Vector<D>,
    pub v: Vector<D>,
    pub f: Matrix<D>,
    pub c: Matrix<D>,
}

impl<const D: usize> ParticleBar<D> {
    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.v.is_finite() && self.f.is_finite() && self.c.is_finite()
    }
}

/// Cotangents mirroring [`SimState`]. Effector entries use the pose fields;
/// the velocity fields are scratch space inside a substep.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointState<const D: usize> {
    pub particles: Vec<ParticleBar<D>>,
    pub effectors: Vec<EffectorBar<D>>,
    pub gas: Option<GasState<D>>,
}

impl<const D: usize> AdjointState<D> {
    pub fn zeros_for(state: &SimState<D>) -> Self {
        AdjointState {
            particles: vec![ParticleBar::default(); state.particles.len()],
            effectors: vec![EffectorBar::default(); state.effectors.len()],
            gas: state.gas.as_ref().map(|g| g.zeros_like()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.particles.iter().all(|p| p.is_finite())
            && self.effectors.iter().all(|e| e.is_finite())
            && self.gas.as_ref().is_none_or(|g| g.is_finite())
    }
}

/// A loss observed at selected states of a rollout of `horizon` substeps.
pub trait Objective<const D: usize> {
    /// Whether state `index` (0 = initial, `horizon` = final) enters the loss.
    fn observes(&self, index: usize, horizon: usize) -> bool;

    fn value(&self, scene: &Scene<D>, state: &SimState<D>, index: usize, horizon: usize) -> Result<f64, SimError>;

    /// Adds the gradient of this state's loss contribution into `bar`.
    fn accumulate_gradient(
        &self,
        scene: &Scene<D>,
        state: &SimState<D>,
        index: usize,
        horizon: usize,
        bar: &mut AdjointState<D>,
    ) -> Result<(), SimError>;
}

/// Reverse of [`mpm_substep`]: maps the cotangent of the substep's output to
/// the cotangent of its input `pre` and of the substep action.
pub fn adjoint_substep<const D: usize>(
    scene: &Scene<D>,
    pre: &SimState<D>,
    rec: &SubstepRecord<D>,
    out: &AdjointState<D>,
) -> Result<(AdjointState<D>, Action), SimError> {
    let k = rec.substep;
    let cfg = &scene.config;
    let dt = cfg.dt;
    let dx = cfg.dx();
    let kk = 4.0 / (dx * dx);
    let n = pre.particles.len();

    let mut eb: Vec<EffectorBar<D>> = out
        .effectors
        .iter()
        .map(|e| EffectorBar { translation: e.translation, rotation: e.rotation, ..Default::default() })
        .collect();
    let mut xb: Vec<Vector<D>> = out.particles.iter().map(|p| p.x).collect();
    let mut vb: Vec<Vector<D>> = out.particles.iter().map(|p| p.v).collect();
    let mut fb: Vec<Matrix<D>> = out.particles.iter().map(|p| p.f).collect();
    let cb: Vec<Matrix<D>> = out.particles.iter().map(|p| p.c).collect();

    let gas_bar = match (&scene.gas, &rec.gas_tape, &out.gas) {
        (Some(gcfg), Some(tape), Some(gbar)) => {
            let mut g = gbar.clone();
            gas_step_vjp(gcfg, tape, &mut g, &scene.effectors, &rec.effectors, &rec.impact, dt, &mut eb, &mut vb)?;
            Some(g)
        }
        _ => out.gas.clone(),
    };

    // rigid pass: x' = fit(x_g2p), v' = (x' − x_activated)/dt, F' = R
    let mut xa = vec![Vector::<D>::zeros(); n];
    for (b, body) in scene.bodies.iter().enumerate() {
        let Some(fit) = &rec.rigid_fits[b] else { continue };
        let r = body.particles.clone();
        let rest: Vec<Vector<D>> = scene.info[r.clone()].iter().map(|p| p.rest).collect();
        let masses: Vec<f64> = scene.info[r.clone()].iter().map(|p| p.mass).collect();
        let mut out_bar = Vec::with_capacity(r.len());
        let mut rot_bar = Matrix::zeros();
        for i in r.clone() {
            out_bar.push(xb[i] + vb[i] * (1.0 / dt));
            xa[i] -= vb[i] * (1.0 / dt);
            rot_bar += fb[i];
        }
        let mut cur_bar = vec![Vector::zeros(); r.len()];
        fit.apply_vjp(&rest, &masses, &out_bar, &rot_bar, &mut cur_bar);
        for (j, i) in r.enumerate() {
            xb[i] = cur_bar[j];
            vb[i] = Vector::zeros();
            fb[i] = Matrix::zeros();
        }
    }

    // g2p
    let grid = &rec.grid;
    let vmax = max_speed(scene);
    let mut gvb = vec![Vector::<D>::zeros(); grid.mass.len()];
    let mut va = vec![Vector::<D>::zeros(); n];
    let mut fa = vec![Matrix::<D>::zeros(); n];
    let mut ca = vec![Matrix::<D>::zeros(); n];
    for i in 0..n {
        if !rec.active[i] {
            continue;
        }
        let p = &rec.activated[i];
        let kw = stencil_of(scene, &p.x, i)?;
        let g = gather(scene, grid, &kw);
        let c = g.b * kk;
        let step_m = Matrix::identity() + c * dt;
        let f_trial = step_m * p.f;
        let proj = scene.materials[scene.info[i].material].projection();
        let mut x_new = p.x + clamp_speed(&g.v, vmax) * dt;
        let mut x_bar = xb[i];
        for (k, hit) in clamp_to_interior(scene, &mut x_new).into_iter().enumerate() {
            if hit {
                x_bar.0[k] = 0.0;
            }
        }
        let vbar = clamp_speed_vjp(&g.v, vmax, &(vb[i] + x_bar * dt));
        xa[i] += x_bar;
        let ft_bar = proj.vjp(&f_trial, &fb[i]);
        let c_bar = cb[i] + ft_bar * p.f.transpose() * dt;
        fa[i] += step_m.transpose() * ft_bar;
        let b_bar = c_bar * kk;
        let b_bar_t = b_bar.transpose();
        for s in 0..KernelWeights::<D>::STENCIL {
            let (node, w, grad, dpos) = kw.entry(s, dx);
            let ni = grid.index(&node);
            let vi = grid.velocity[ni];
            let bd = b_bar * dpos;
            gvb[ni] += (vbar + bd) * w;
            xa[i] += grad * (vi.dot(&vbar) + vi.dot(&bd)) - b_bar_t * vi * w;
        }
    }

    // grid update
    let mut mom_bar = vec![Vector::<D>::zeros(); grid.mass.len()];
    let mut mass_bar = vec![0.0; grid.mass.len()];
    let mut evals = Vec::new();
    for ni in 0..grid.mass.len() {
        let m = grid.mass[ni];
        if m <= cfg.mass_epsilon || gvb[ni].max_abs() == 0.0 {
            continue;
        }
        let coords = grid.coords(ni);
        let mut v = node_free_velocity(scene, &grid.momentum[ni], m);
        let walled = apply_walls(scene, &coords, &mut v);
        let mut xi = cfg.domain_min;
        for a in 0..D {
            xi.0[a] += coords[a] as f64 * dx;
        }
        evals.clear();
        for (e, (spec, st)) in scene.effectors.iter().zip(&rec.effectors).enumerate() {
            if let Some(ce) = contact_eval(cfg.contact, dx, spec, st, &xi, &v) {
                v = ce.v_out;
                evals.push((e, ce));
            }
        }
        let mut g = gvb[ni];
        for (e, ce) in evals.iter().rev() {
            let spec = &scene.effectors[*e];
            let st = &rec.effectors[*e];
            let alpha_bar = g.dot(&(ce.v_c - ce.v_in));
            let vc_bar = g * ce.alpha;
            let mut vin_bar = g * (1.0 - ce.alpha);
            let (vrel_bar, n_bar) = coulomb_project_vjp(&ce.v_rel, &ce.sample.normal, spec.friction, &vc_bar);
            vin_bar += vrel_bar;
            let ve_bar = vc_bar - vrel_bar;
            eb[*e].linear += ve_bar;
            let (w_bar, r_bar) = angular_cross_vjp(&st.angular_velocity, &(xi - st.pose.translation), &ve_bar);
            for a in 0..3 {
                eb[*e].angular[a] += w_bar[a];
            }
            eb[*e].translation -= r_bar;
            let dist_bar = alpha_bar * ce.dalpha / dx;
            let (t_bar, rot_bar) = sample_vjp(&spec.shape.parts[ce.part], &st.pose, &xi, &ce.sample, dist_bar, &n_bar);
            eb[*e].translation += t_bar;
            eb[*e].rotation += rot_bar;
            g = vin_bar;
        }
        for a in 0..D {
            if walled[a] {
                g.0[a] = 0.0;
            }
        }
        mom_bar[ni] = g * (1.0 / m);
        mass_bar[ni] = -g.dot(&grid.momentum[ni]) / (m * m);
    }

    // p2g
    for i in 0..n {
        if !rec.active[i] {
            continue;
        }
        let p = &rec.activated[i];
        let info = &scene.info[i];
        let mat = &scene.materials[info.material];
        let m = info.mass;
        let kw = stencil_of(scene, &p.x, i)?;
        let a = stress_term(scene, i, p)? + p.c * m;
        let a_t = a.transpose();
        let mv = p.v * m;
        let mut a_bar = Matrix::zeros();
        let mut v_bar = Vector::zeros();
        for s in 0..KernelWeights::<D>::STENCIL {
            let (node, w, grad, dpos) = kw.entry(s, dx);
            let ni = grid.index(&node);
            let mb = mom_bar[ni];
            v_bar += mb * (w * m);
            a_bar += mb.outer(&dpos) * w;
            let w_bar = mb.dot(&(mv + a * dpos)) + mass_bar[ni] * m;
            xa[i] += grad * w_bar - a_t * mb * w;
        }
        va[i] += v_bar;
        ca[i] += a_bar * m;
        let tau_scale = -dt * info.volume0 * kk;
        fa[i] += kirchhoff_stress_vjp(&p.f, mat.mu, mat.lambda, &(a_bar * tau_scale));
    }

    // activation and pass-through of inactive particles
    let mut particles = Vec::with_capacity(n);
    for i in 0..n {
        if !rec.active[i] {
            particles.push(out.particles[i]);
            continue;
        }
        match scene.info[i].activation {
            Some(act) if act.substep == k => {
                let e = &mut eb[act.effector];
                e.translation += xa[i];
                e.rotation += xa[i].outer(&act.offset) + va[i].outer(&act.velocity);
                particles.push(ParticleBar::default());
            }
            _ => particles.push(ParticleBar { x: xa[i], v: va[i], f: fa[i], c: ca[i] }),
        }
    }

    // pose update: t' = t + lin·dt, R' = exp(ω·dt)·R
    let mut action_bar = [0.0; 6];
    let mut effectors = Vec::with_capacity(eb.len());
    for (e, spec) in scene.effectors.iter().enumerate() {
        let b = &eb[e];
        let old = &pre.effectors[e];
        let ang = rec.effectors[e].angular_velocity;
        let phi = [ang[0] * dt, ang[1] * dt, ang[2] * dt];
        let rot_step: Matrix<D> = rotation_exp(&phi);
        let phi_bar = rotation_exp_vjp::<D>(&phi, &(b.rotation * old.pose.rotation.transpose()));
        let lin_bar = b.linear + b.translation * dt;
        let mut ang_bar = b.angular;
        for a in 0..3 {
            ang_bar[a] += dt * phi_bar[a];
        }
        let ab = spec.velocity_vjp(&lin_bar, &ang_bar);
        for a in 0..6 {
            action_bar[a] += ab[a];
        }
        effectors.push(EffectorBar {
            translation: b.translation,
            rotation: rot_step.transpose() * b.rotation,
            ..Default::default()
        });
    }

    let bar = AdjointState { particles, effectors, gas: gas_bar };
    if !bar.is_finite() || action_bar.iter().any(|a| !a.is_finite()) {
        return Err(SimError::PoisonedAdjoint { substep: k });
    }
    Ok((bar, action_bar))
}

/// Loss and per-substep action gradient of one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryGradient<const D: usize> {
    pub loss: f64,
    pub gradient: Vec<Action>,
    pub final_state: SimState<D>,
    pub snapshots: usize,
    /// Most full states held at once during the backward sweep.
    pub peak_retained: usize,
}

/// Forward rollout returning the loss and the final state.
pub fn rollout_loss<const D: usize>(
    scene: &Scene<D>,
    initial: &SimState<D>,
    actions: &[Action],
    objective: &dyn Objective<D>,
) -> Result<(f64, SimState<D>), SimError> {
    let horizon = actions.len();
    let mut state = initial.clone();
    let mut loss = 0.0;
    if objective.observes(0, horizon) {
        loss += objective.value(scene, &state, 0, horizon)?;
    }
    for (j, a) in actions.iter().enumerate() {
        state = step(scene, &state, a)?;
        if objective.observes(j + 1, horizon) {
            loss += objective.value(scene, &state, j + 1, horizon)?;
        }
    }
    if !loss.is_finite() {
        return Err(SimError::NonFiniteLoss { value: loss });
    }
    Ok((loss, state))
}

/// Checkpointed reverse-mode gradient of `objective` with respect to every
/// substep action. The store is cleared and refilled with strided snapshots;
/// each backward segment is replayed from its snapshot before the adjoint
/// sweep runs through it.
pub fn grad_trajectory<const D: usize>(
    scene: &Scene<D>,
    initial: &SimState<D>,
    actions: &[Action],
    objective: &dyn Objective<D>,
    store: &mut CheckpointStore,
) -> Result<TrajectoryGradient<D>, SimError> {
    let horizon = actions.len();
    let stride = store.stride();
    store.clear();
    let mut state = initial.clone();
    let mut loss = 0.0;
    if objective.observes(0, horizon) {
        loss += objective.value(scene, &state, 0, horizon)?;
    }
    store.save(0, &state, horizon)?;
    for (j, a) in actions.iter().enumerate() {
        state = step(scene, &state, a)?;
        if objective.observes(j + 1, horizon) {
            loss += objective.value(scene, &state, j + 1, horizon)?;
        }
        if (j + 1) % stride == 0 || j + 1 == horizon {
            store.save(j + 1, &state, horizon)?;
        }
    }
    if !loss.is_finite() {
        return Err(SimError::NonFiniteLoss { value: loss });
    }

    let mut bar = AdjointState::zeros_for(&state);
    if objective.observes(horizon, horizon) {
        objective.accumulate_gradient(scene, &state, horizon, horizon, &mut bar)?;
    }
    let mut gradient = vec![[0.0; 6]; horizon];
    let mut peak = 0;
    let mut seg_end = horizon;
    while seg_end > 0 {
        let seg_start = ((seg_end - 1) / stride) * stride;
        let mut s: SimState<D> = store.restore(seg_start)?;
        let mut states = Vec::with_capacity(seg_end - seg_start);
        let mut records = Vec::with_capacity(seg_end - seg_start);
        for a in &actions[seg_start..seg_end] {
            let (next, rec) = mpm_substep(scene, &s, a)?;
            states.push(s);
            records.push(rec);
            s = next;
        }
        peak = peak.max(states.len() + store.len());
        for j in (seg_start..seg_end).rev() {
            let pre = &states[j - seg_start];
            let (b, ab) = adjoint_substep(scene, pre, &records[j - seg_start], &bar)?;
            bar = b;
            gradient[j] = ab;
            if objective.observes(j, horizon) {
                objective.accumulate_gradient(scene, pre, j, horizon, &mut bar)?;
            }
        }
        seg_end = seg_start;
    }
    Ok(TrajectoryGradient { loss, gradient, final_state: state, snapshots: store.len(), peak_retained: peak })
}

/// Central differences `(f(a + ε·eᵢ) − f(a − ε·eᵢ)) / 2ε`. The objective is
/// also evaluated once at `params`, so it runs `2·n + 1` times.
pub fn finite_difference_gradient(
    mut objective: impl FnMut(&[f64]) -> Result<f64, SimError>,
    params: &[f64],
    eps: f64,
) -> Result<Vec<f64>, SimError> {
    let base = objective(params)?;
    if !base.is_finite() {
        return Err(SimError::NonFiniteLoss { value: base });
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        p[i] = params[i] + eps;
        let hi = objective(&p)?;
        p[i] = params[i] - eps;
        let lo = objective(&p)?;
        p[i] = params[i];
        for v in [hi, lo] {
            if !v.is_finite() {
                return Err(SimError::NonFiniteObjective { parameter: i, value: v });
            }
        }
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(grad)
}

pub const REL_ERROR_DELTA: f64 = 1e-12;

/// `‖g − g_fd‖∞ / (‖g_fd‖∞ + δ)`.
pub fn max_rel_error(gradient: &[f64], fd: &[f64]) -> f64 {
    let num = gradient.iter().zip(fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let den = fd.iter().map(|b| b.abs()).fold(0.0, f64::max);
    num / (den + REL_ERROR_DELTA)
}

/// Gradient audit result. `wall_time` is filled in by callers with a clock.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub fd_gradient: Option<Vec<f64>>,
    pub max_rel_error: Option<f64>,
    pub wall_time: f64,
}

impl GradReport {
    pub fn new(loss: f64, gradient: Vec<f64>, fd_gradient: Option<Vec<f64>>) -> Self {
        let max_rel_error = fd_gradient.as_ref().map(|fd| max_rel_error(&gradient, fd));
        GradReport { loss, gradient, fd_gradient, max_rel_error, wall_time: 0.0 }
    }
}
