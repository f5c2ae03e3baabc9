//! Trajectory optimizers: gradient descent through the simulator with an
//! expanding time window and attraction loss, its ablation without either,
//! CMA-ES, and periodic policies.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{grad_trajectory, rollout_loss};
use crate::checkpoint::CheckpointStore;
use crate::error::SimError;
use crate::linalg::scalar;
use crate::objectives::LossSpec;
use crate::scene::{Action, ContactModel, Scene, SimState};

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizeError {
    Sim(SimError),
    /// The horizon does not split into whole periods.
    Divisibility { horizon: usize, periods: usize },
    /// Every sample of a CMA-ES generation evaluated to a non-finite value.
    AllNonFinite { generation: usize },
    InvalidConfig(&'static str),
}

impl From<SimError> for OptimizeError {
    fn from(e: SimError) -> Self {
        OptimizeError::Sim(e)
    }
}

impl fmt::Display for OptimizeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizeError::Sim(e) => write!(f, "{e}"),
            OptimizeError::Divisibility { horizon, periods } => {
                write!(f, "horizon {horizon} is not a whole number of {periods} periods")
            }
            OptimizeError::AllNonFinite { generation } => {
                write!(f, "every sample of generation {generation} was non-finite")
            }
            OptimizeError::InvalidConfig(what) => write!(f, "invalid optimizer configuration: {what}"),
        }
    }
}

impl core::error::Error for OptimizeError {}

/// Piecewise-constant 6-vector actions, one per segment.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionTrajectory {
    pub segment_length: usize,
    pub values: Vec<Action>,
    /// Components that are optimized; the rest stay at their initial values.
    pub mask: [bool; 6],
    pub lower: Action,
    pub upper: Action,
}

impl ActionTrajectory {
    pub fn constant(n_segments: usize, segment_length: usize, value: Action, mask: [bool; 6], bound: f64) -> Self {
        ActionTrajectory {
            segment_length,
            values: vec![value; n_segments],
            mask,
            lower: [-bound; 6],
            upper: [bound; 6],
        }
    }

    pub fn n_segments(&self) -> usize {
        self.values.len()
    }

    pub fn horizon(&self) -> usize {
        self.values.len() * self.segment_length
    }

    /// Segments touched by the first `window` substeps.
    pub fn active_segments(&self, window: usize) -> usize {
        window.div_ceil(self.segment_length).min(self.values.len())
    }

    /// Copy whose segments past the window repeat the last active one.
    pub fn held(&self, window: usize) -> Self {
        let mut out = self.clone();
        let k = self.active_segments(window).max(1);
        let last = self.values[k - 1];
        for v in &mut out.values[k..] {
            *v = last;
        }
        out
    }

    /// Per-substep actions.
    pub fn expand(&self) -> Vec<Action> {
        let mut out = Vec::with_capacity(self.horizon());
        for v in &self.values {
            for _ in 0..self.segment_length {
                out.push(*v);
            }
        }
        out
    }

    /// Masked components of every segment, flattened.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for v in &self.values {
            for c in 0..6 {
                if self.mask[c] {
                    p.push(v[c]);
                }
            }
        }
        p
    }

    /// Inverse of [`params`](Self::params), clamping to the bounds.
    pub fn set_params(&mut self, p: &[f64]) {
        let mut it = p.iter();
        for v in &mut self.values {
            for c in 0..6 {
                if self.mask[c] {
                    v[c] = it.next().copied().unwrap_or(v[c]).clamp(self.lower[c], self.upper[c]);
                }
            }
        }
    }

    /// Sums per-substep gradients into per-segment masked parameters.
    pub fn reduce_gradient(&self, per_substep: &[Action]) -> Vec<f64> {
        let mut g = Vec::new();
        for (s, _) in self.values.iter().enumerate() {
            let lo = s * self.segment_length;
            let hi = (lo + self.segment_length).min(per_substep.len());
            for c in 0..6 {
                if self.mask[c] {
                    g.push(per_substep.get(lo..hi).map_or(0.0, |r| r.iter().map(|a| a[c]).sum()));
                }
            }
        }
        g
    }

    pub fn params_per_segment(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Temporally expanding optimization window.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandSchedule {
    pub window: usize,
    pub initial_window: usize,
    pub horizon: usize,
    pub growth_factor: f64,
    pub patience: usize,
    pub improvement_threshold: f64,
}

impl ExpandSchedule {
    /// Defaults: a first window of an eighth of the horizon, doubling after 20
    /// iterations with under 0.1% relative improvement.
    pub fn new(horizon: usize) -> Self {
        let w = (horizon / 8).max(1);
        ExpandSchedule {
            window: w,
            initial_window: w,
            horizon,
            growth_factor: 2.0,
            patience: 20,
            improvement_threshold: 1e-3,
        }
    }

    /// Window fixed at the horizon.
    pub fn full(horizon: usize) -> Self {
        ExpandSchedule { window: horizon, initial_window: horizon, ..Self::new(horizon) }
    }

    pub fn at_horizon(&self) -> bool {
        self.window >= self.horizon
    }
}

/// Grows the window when the last `patience` losses improved by less than
/// the threshold, relative to the first of them. Returns whether it grew.
pub fn expand_window(schedule: &mut ExpandSchedule, recent: &[f64]) -> bool {
    if schedule.at_horizon() || schedule.patience == 0 || recent.len() < schedule.patience {
        return false;
    }
    let tail = &recent[recent.len() - schedule.patience..];
    let reference = tail[0];
    let best = tail[1..].iter().copied().fold(f64::INFINITY, f64::min);
    let improvement = if reference.abs() > 0.0 { (reference - best) / reference.abs() } else { 0.0 };
    if improvement < schedule.improvement_threshold {
        let grown = scalar::round(schedule.window as f64 * schedule.growth_factor) as usize;
        schedule.window = grown.max(schedule.window + 1).min(schedule.horizon);
        true
    } else {
        false
    }
}

/// Adaptive-moment gradient steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, step_size: f64) -> Self {
        Adam { step_size, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Updates `x` in place; entries with `active[i] == false` are left alone.
    pub fn step(&mut self, x: &mut [f64], g: &[f64], active: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - scalar::powf(self.beta1, self.t as f64);
        let c2 = 1.0 - scalar::powf(self.beta2, self.t as f64);
        for i in 0..x.len() {
            if !active[i] {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= self.step_size * mh / (scalar::sqrt(vh) + self.epsilon);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub checkpoint_stride: usize,
}

impl DpConfig {
    pub fn new(iterations: usize, step_size: f64) -> Self {
        DpConfig { iterations, step_size, checkpoint_stride: 64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub window: usize,
    /// Full-horizon task loss of this iterate (held actions past the window).
    pub loss: f64,
    /// Loss actually differentiated (window, attraction).
    pub window_loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeResult {
    pub best: ActionTrajectory,
    pub best_loss: f64,
    pub history: Vec<IterationRecord>,
    /// Set when the divergence guard stopped the run.
    pub aborted: bool,
}

/// Shared gradient loop. `schedule` and `attraction` switch the two
/// techniques; contact is whatever `scene` uses.
fn gradient_loop<const D: usize>(
    scene: &Scene<D>,
    initial: &SimState<D>,
    loss: &LossSpec<D>,
    init: &ActionTrajectory,
    mut schedule: ExpandSchedule,
    attraction: bool,
    cfg: &DpConfig,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<OptimizeResult, OptimizeError> {
    let horizon = init.horizon();
    if schedule.horizon != horizon || schedule.window == 0 {
        return Err(OptimizeError::InvalidConfig("schedule horizon must match the trajectory"));
    }
    let task = loss.without_attraction();
    let mut objective = if attraction { loss.clone() } else { task.clone() };
    let mut traj = init.clone();
    let mut x = traj.params();
    let per_seg = traj.params_per_segment();
    let mut adam = Adam::new(x.len(), cfg.step_size);
    let mut store = CheckpointStore::new(cfg.checkpoint_stride);
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut since_expand: Vec<f64> = Vec::new();
    let mut best = (f64::INFINITY, traj.clone());
    let mut initial_loss = None;
    let mut diverging = 0;
    for it in 0..cfg.iterations {
        let window = schedule.window;
        let held = traj.held(window);
        let actions = held.expand();
        let (full_loss, _) = rollout_loss(scene, initial, &actions, &task)?;
        if full_loss < best.0 {
            best = (full_loss, held.clone());
        }
        let g = grad_trajectory(scene, initial, &actions[..window], &objective, &mut store)?;
        let grad = held.reduce_gradient(&g.gradient);
        let n_active = held.active_segments(window);
        let active: Vec<bool> = (0..x.len()).map(|i| i / per_seg.max(1) < n_active).collect();
        let grad_norm = scalar::sqrt(grad.iter().zip(&active).filter(|(_, a)| **a).map(|(g, _)| g * g).sum());
        let rec = IterationRecord { iteration: it, window, loss: full_loss, window_loss: g.loss, grad_norm };
        on_iteration(&rec);
        history.push(rec);

        let l0 = *initial_loss.get_or_insert(full_loss);
        diverging = if full_loss > 10.0 * l0.abs() { diverging + 1 } else { 0 };
        if diverging >= 10 {
            return Ok(OptimizeResult { best: best.1, best_loss: best.0, history, aborted: true });
        }

        x = held.params();
        adam.step(&mut x, &grad, &active);
        traj = held;
        traj.set_params(&x);
        x = traj.params();
        if attraction {
            objective.refresh_attraction(scene, &g.final_state);
        }
        since_expand.push(g.loss);
        if expand_window(&mut schedule, &since_expand) {
            since_expand.clear();
        }
    }
    // Every candidate in `best` has a history row; the last update is not scored.
    Ok(OptimizeResult { best: best.1, best_loss: best.0, history, aborted: false })
}

/// Gradient-based trajectory optimization with the expanding window and the
/// attraction loss (if `loss` contains an attraction term).
pub fn optimize_dp<const D: usize>(
    scene: &Scene<D>,
    initial: &SimState<D>,
    loss: &LossSpec<D>,
    init: &ActionTrajectory,
    schedule: ExpandSchedule,
    cfg: &DpConfig,
    on_iteration: impl FnMut(&IterationRecord),
) -> Result<OptimizeResult, OptimizeError> {
    gradient_loop(scene, initial, loss, init, schedule, true, cfg, on_iteration)
}

/// The ablation: full horizon from the start, no attraction, hard contact.
/// Losses are measured in the hard-contact physics it optimizes.
pub fn optimize_dp_hard<const D: usize>(
    scene: &Scene<D>,
    initial: &SimState<D>,
    loss: &LossSpec<D>,
    init: &ActionTrajectory,
    cfg: &DpConfig,
    on_iteration: impl FnMut(&IterationRecord),
) -> Result<OptimizeResult, OptimizeError> {
    let hard = scene.with_contact(ContactModel::Hard);
    gradient_loop(&hard, initial, loss, init, ExpandSchedule::full(init.horizon()), false, cfg, on_iteration)
}

/// CMA-ES state.
#[derive(Clone, Debug)]
pub struct EsState {
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub covariance: DMatrix<f64>,
    pub lambda: usize,
    pub path_sigma: DVector<f64>,
    pub path_c: DVector<f64>,
    pub generation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsGeneration {
    pub generation: usize,
    pub evaluations: usize,
    pub best: f64,
    pub best_ever: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsResult {
    pub x_best: Vec<f64>,
    pub f_best: f64,
    pub history: Vec<EsGeneration>,
}

/// Default population size `4 + ⌊3·ln n⌋`.
pub fn default_population(n: usize) -> usize {
    4 + scalar::floor(3.0 * scalar::ln(n.max(1) as f64)) as usize
}

/// `(μ/μ_w, λ)`-CMA-ES. `evaluate` receives a whole generation so callers can
/// evaluate it in parallel; non-finite values rank last.
pub fn cma_es_minimize(
    mut evaluate: impl FnMut(&[Vec<f64>]) -> Vec<f64>,
    x0: &[f64],
    sigma0: f64,
    lambda: usize,
    budget: usize,
    seed: u64,
) -> Result<EsResult, OptimizeError> {
    let n = x0.len();
    if n == 0 || lambda < 4 || budget < lambda || !(sigma0 > 0.0) {
        return Err(OptimizeError::InvalidConfig("need n ≥ 1, λ ≥ 4, budget ≥ λ and σ₀ > 0"));
    }
    let nf = n as f64;
    let mu = lambda / 2;
    let raw: Vec<f64> = (0..mu).map(|i| scalar::ln(mu as f64 + 0.5) - scalar::ln(i as f64 + 1.0)).collect();
    let wsum: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / wsum).collect();
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (scalar::sqrt((mu_eff - 1.0) / (nf + 1.0)) - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
    let c1 = 2.0 / ((nf + 1.3) * (nf + 1.3) + mu_eff);
    let c_mu = (1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0) * (nf + 2.0) + mu_eff));
    let chi_n = scalar::sqrt(nf) * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

    let mut st = EsState {
        mean: DVector::from_column_slice(x0),
        sigma: sigma0,
        covariance: DMatrix::identity(n, n),
        lambda,
        path_sigma: DVector::zeros(n),
        path_c: DVector::zeros(n),
        generation: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = (x0.to_vec(), f64::INFINITY);
    let mut history = Vec::new();
    let mut evals = 0;
    while evals + lambda <= budget {
        let eig = SymmetricEigen::new(st.covariance.clone());
        let b = eig.eigenvectors;
        let dvals = eig.eigenvalues.map(|e| scalar::sqrt(e.max(1e-300)));
        let mut ys = Vec::with_capacity(lambda);
        let mut xs = Vec::with_capacity(lambda);
        for _ in 0..lambda {
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let y = &b * z.component_mul(&dvals);
            let x = &st.mean + &y * st.sigma;
            xs.push(x.iter().copied().collect::<Vec<f64>>());
            ys.push(y);
        }
        let fs = evaluate(&xs);
        evals += lambda;
        if fs.iter().all(|f| !f.is_finite()) {
            return Err(OptimizeError::AllNonFinite { generation: st.generation });
        }
        let key = |f: f64| if f.is_finite() { f } else { f64::INFINITY };
        let mut order: Vec<usize> = (0..lambda).collect();
        order.sort_by(|&a, &b| key(fs[a]).total_cmp(&key(fs[b])).then(a.cmp(&b)));
        if key(fs[order[0]]) < best.1 {
            best = (xs[order[0]].clone(), fs[order[0]]);
        }

        let mut y_w = DVector::zeros(n);
        for (w, &i) in weights.iter().zip(&order) {
            y_w += &ys[i] * *w;
        }
        st.mean += &y_w * st.sigma;
        // C^{-1/2} y_w = B D^{-1} Bᵀ y_w
        let inv_sqrt = &b * DMatrix::from_diagonal(&dvals.map(|d| 1.0 / d)) * b.transpose();
        st.path_sigma = &st.path_sigma * (1.0 - c_sigma) + &inv_sqrt * &y_w * scalar::sqrt(c_sigma * (2.0 - c_sigma) * mu_eff);
        let ps_norm = st.path_sigma.norm();
        let gen1 = (st.generation + 1) as f64;
        let h_sigma = ps_norm / scalar::sqrt(1.0 - scalar::powf(1.0 - c_sigma, 2.0 * gen1)) < (1.4 + 2.0 / (nf + 1.0)) * chi_n;
        let hs = if h_sigma { 1.0 } else { 0.0 };
        st.path_c = &st.path_c * (1.0 - c_c) + &y_w * (hs * scalar::sqrt(c_c * (2.0 - c_c) * mu_eff));
        let mut rank_mu = DMatrix::zeros(n, n);
        for (w, &i) in weights.iter().zip(&order) {
            rank_mu += &ys[i] * ys[i].transpose() * *w;
        }
        let delta_h = (1.0 - hs) * c_c * (2.0 - c_c);
        st.covariance = &st.covariance * (1.0 - c1 - c_mu + c1 * delta_h)
            + &st.path_c * st.path_c.transpose() * c1
            + rank_mu * c_mu;
        // keep exact symmetry
        st.covariance = (&st.covariance + st.covariance.transpose()) * 0.5;
        st.sigma *= scalar::exp((c_sigma / d_sigma) * (ps_norm / chi_n - 1.0));
        history.push(EsGeneration {
            generation: st.generation,
            evaluations: evals,
            best: fs[order[0]],
            best_ever: best.1,
            sigma: st.sigma,
        });
        st.generation += 1;
    }
    Ok(EsResult { x_best: best.0, f_best: best.1, history })
}

/// Reset motion undoing a base period: the base segments negated, in reverse.
pub fn reverse_motion(base: &ActionTrajectory) -> Vec<Action> {
    base.values.iter().rev().map(|v| v.map(|a| -a)).collect()
}

/// A base period followed by a fixed reset, repeated.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicPolicy {
    pub base: ActionTrajectory,
    pub reset: Vec<Action>,
    pub n_periods: usize,
}

impl PeriodicPolicy {
    pub fn period_segments(&self) -> usize {
        self.base.values.len() + self.reset.len()
    }

    pub fn wrap(&self) -> ActionTrajectory {
        let mut values = Vec::with_capacity(self.period_segments() * self.n_periods);
        for _ in 0..self.n_periods {
            values.extend_from_slice(&self.base.values);
            values.extend_from_slice(&self.reset);
        }
        ActionTrajectory { values, ..self.base.clone() }
    }

    /// Gradient of the base parameters from per-substep gradients of the
    /// wrapped trajectory.
    pub fn reduce_gradient(&self, per_substep: &[Action]) -> Vec<f64> {
        let wrapped = self.wrap().reduce_gradient(per_substep);
        let pps = self.base.params_per_segment();
        let nb = self.base.values.len() * pps;
        let period = self.period_segments() * pps;
        let mut g = vec![0.0; nb];
        for p in 0..self.n_periods {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += wrapped[p * period + i];
            }
        }
        g
    }
}

/// Wraps one period into a trajectory of `horizon` substeps.
pub fn periodic_wrap(base: &ActionTrajectory, n_periods: usize, reset: &[Action], horizon: usize) -> Result<PeriodicPolicy, OptimizeError> {
    if n_periods == 0 || horizon % n_periods != 0 {
        return Err(OptimizeError::Divisibility { horizon, periods: n_periods });
    }
    let policy = PeriodicPolicy { base: base.clone(), reset: reset.to_vec(), n_periods };
    if policy.period_segments() * base.segment_length * n_periods != horizon {
        return Err(OptimizeError::Divisibility { horizon, periods: n_periods });
    }
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;
    use crate::mpm::update_effectors;
    use crate::objectives::{LossTerm, Schedule};
    use crate::scene::{build_scene, BodySpec, EffectorSpec, SceneSpec, SimConfig};
    use crate::sdf::{CompoundSdf, Pose, SdfPrimitive, Shape};

    #[test]
    fn trajectory_params_roundtrip_and_hold() {
        let mut t = ActionTrajectory::constant(4, 3, [0.0; 6], [true, true, false, false, false, true], 1.0);
        assert_eq!(t.params().len(), 12);
        let p: Vec<f64> = (0..12).map(|i| i as f64 * 0.1 - 0.5).collect();
        t.set_params(&p);
        assert_eq!(t.params(), p);
        assert_eq!(t.expand().len(), 12);
        let h = t.held(4);
        assert_eq!(h.values[2], h.values[1]);
        assert_eq!(h.values[3], h.values[1]);
        assert_eq!(h.values[0], t.values[0]);
        t.set_params(&[5.0; 12]);
        assert!(t.params().iter().all(|x| *x == 1.0));
        let g = t.reduce_gradient(&vec![[1.0; 6]; 12]);
        assert_eq!(g, vec![3.0; 12]);
    }

    #[test]
    fn expand_window_rules() {
        let mut s = ExpandSchedule::new(64);
        s.patience = 3;
        assert_eq!(s.window, 8);
        assert!(!expand_window(&mut s, &[10.0, 5.0, 2.0]));
        assert!(expand_window(&mut s, &[1.0, 1.0, 1.0]));
        assert_eq!(s.window, 16);
        let mut windows = vec![s.window];
        while !s.at_horizon() {
            expand_window(&mut s, &[1.0, 1.0, 1.0]);
            windows.push(s.window);
        }
        assert!(windows.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*windows.last().unwrap(), 64);
        assert!(!expand_window(&mut s, &[1.0, 1.0, 1.0]));
        assert_eq!(s.window, 64);
    }

    #[test]
    fn population_size_rule() {
        assert_eq!(default_population(8), 10);
        assert_eq!(default_population(1), 4);
    }

    #[test]
    fn cma_es_solves_sphere() {
        let sphere = |xs: &[Vec<f64>]| xs.iter().map(|x| x.iter().map(|v| v * v).sum()).collect();
        let r = cma_es_minimize(sphere, &[1.0; 8], 0.5, default_population(8), 4000, 3).unwrap();
        assert!(r.f_best <= 1e-6, "{}", r.f_best);
    }

    #[test]
    fn cma_es_is_rank_invariant() {
        let mut seen_a = Vec::new();
        let mut seen_b = Vec::new();
        let f = |x: &Vec<f64>| (x[0] - 1.0).powi(2) + 3.0 * x[1] * x[1];
        let a = cma_es_minimize(
            |xs| {
                seen_a.extend(xs.iter().cloned());
                xs.iter().map(f).collect()
            },
            &[0.0, 0.0],
            0.3,
            6,
            120,
            7,
        )
        .unwrap();
        let b = cma_es_minimize(
            |xs| {
                seen_b.extend(xs.iter().cloned());
                xs.iter().map(|x| scalar::exp(f(x)) + 42.0).collect()
            },
            &[0.0, 0.0],
            0.3,
            6,
            120,
            7,
        )
        .unwrap();
        assert_eq!(seen_a, seen_b);
        assert_eq!(a.x_best, b.x_best);
    }

    #[test]
    fn cma_es_skips_non_finite_and_aborts_when_all_are() {
        let r = cma_es_minimize(
            |xs| xs.iter().map(|x| if x[0] > 0.5 { f64::NAN } else { x[0] * x[0] }).collect(),
            &[0.0],
            0.3,
            4,
            200,
            1,
        )
        .unwrap();
        assert!(r.f_best.is_finite());
        let e = cma_es_minimize(|xs| vec![f64::NAN; xs.len()], &[0.0], 0.3, 4, 40, 1).unwrap_err();
        assert_eq!(e, OptimizeError::AllNonFinite { generation: 0 });
    }

    #[test]
    fn periodic_wrapping() {
        let mut base = ActionTrajectory::constant(3, 5, [0.0; 6], [true, true, false, false, false, true], 2.0);
        base.values = vec![[0.4, -0.1, 0.0, 0.0, 0.0, 0.3], [0.2, 0.5, 0.0, 0.0, 0.0, -0.2], [-0.3, 0.1, 0.0, 0.0, 0.0, 0.1]];
        let one = periodic_wrap(&base, 1, &[], 15).unwrap();
        assert_eq!(one.wrap(), base);
        let reset = reverse_motion(&base);
        let p = periodic_wrap(&base, 3, &reset, 90).unwrap();
        let traj = p.wrap();
        assert_eq!(traj.horizon(), 3 * 30);
        assert_eq!(periodic_wrap(&base, 4, &reset, 90).unwrap_err(), OptimizeError::Divisibility { horizon: 90, periods: 4 });

        // integrate an effector through the wrapped motion
        let mut cfg = SimConfig::<2>::new(16, 1.0, 1e-3);
        cfg.gravity = Vector::zeros();
        let mut spec = SceneSpec::new(cfg);
        let mut e = EffectorSpec::new("e", CompoundSdf::single(SdfPrimitive::new(Shape::Sphere { radius: 0.05 }, Pose::identity())), Pose::from_translation(Vector([0.5, 0.5])));
        e.action_mask = EffectorSpec::<2>::full_mask();
        spec.effectors.push(e);
        let (scene, state) = build_scene(&spec).unwrap();
        let mut eff = state.effectors.clone();
        for (j, a) in traj.expand().iter().enumerate() {
            eff = update_effectors(&scene, &eff, a);
            if (j + 1) % 30 == 0 {
                assert!((eff[0].pose.translation - Vector([0.5, 0.5])).max_abs() <= 1e-9);
                assert!((eff[0].pose.rotation - crate::linalg::Matrix::identity()).max_abs() <= 1e-9);
            }
        }
        let g = p.reduce_gradient(&vec![[1.0; 6]; 90]);
        assert_eq!(g, vec![15.0; 9]);
    }

    fn carrier() -> (Scene<2>, SimState<2>) {
        let mut cfg = SimConfig::<2>::new(32, 1.0, 1e-3);
        cfg.gravity = Vector::zeros();
        let mut spec = SceneSpec::new(cfg).with_preset("water");
        let b = SdfPrimitive::new(Shape::Box { half_extents: Vector([0.05, 0.05]) }, Pose::from_translation(Vector([0.5, 0.5])));
        spec.bodies.push(BodySpec::shape("p", "water", b, 1));
        let mut e = EffectorSpec::new(
            "carrier",
            CompoundSdf::single(SdfPrimitive::new(Shape::Box { half_extents: Vector([0.2, 0.2]) }, Pose::identity())),
            Pose::from_translation(Vector([0.5, 0.5])),
        );
        e.friction = f64::INFINITY;
        e.action_mask = [true, true, false, false, false, false];
        spec.effectors.push(e);
        let (mut scene, mut state) = build_scene(&spec).unwrap();
        scene.info.truncate(1);
        scene.bodies[0].particles = 0..1;
        state.particles.truncate(1);
        state.particles[0].x = Vector([0.5, 0.5]);
        scene.info[0].rest = Vector([0.5, 0.5]);
        (scene, state)
    }

    #[test]
    fn constant_loss_leaves_trajectory_unchanged() {
        let (scene, state) = carrier();
        let loss = LossSpec::single(LossTerm::RestAnchor { body: 0, schedule: Schedule::Final }).with(0.0, LossTerm::RestAnchor { body: 0, schedule: Schedule::Final });
        // the carrier stays put with zero actions, so the anchor loss and its gradient vanish
        let init = ActionTrajectory::constant(2, 5, [0.0; 6], [true, true, false, false, false, false], 1.0);
        let r = optimize_dp(&scene, &state, &loss, &init, ExpandSchedule::full(10), &DpConfig::new(5, 0.1), |_| {}).unwrap();
        assert_eq!(r.best, init);
        assert!(r.history.iter().all(|h| h.grad_norm == 0.0));
    }

    #[test]
    fn convex_toy_converges_for_both_optimizers() {
        let (mut scene, state) = carrier();
        // squared distance to the goal
        scene.info[0].rest = Vector([0.56, 0.47]);
        let loss = LossSpec::single(LossTerm::RestAnchor { body: 0, schedule: Schedule::Final });
        let init = ActionTrajectory::constant(1, 40, [0.0; 6], [true, true, false, false, false, false], 5.0);
        let cfg = DpConfig::new(400, 0.05);
        let dp = optimize_dp(&scene, &state, &loss, &init, ExpandSchedule::full(40), &cfg, |_| {}).unwrap();
        let dph = optimize_dp_hard(&scene, &state, &loss, &init, &cfg, |_| {}).unwrap();
        assert!(dp.best_loss <= 1e-6, "{}", dp.best_loss);
        assert!(dph.best_loss <= 1e-6, "{}", dph.best_loss);
        let again = optimize_dp_hard(&scene, &state, &loss, &init, &cfg, |_| {}).unwrap();
        assert_eq!(again, dph);
    }
}
