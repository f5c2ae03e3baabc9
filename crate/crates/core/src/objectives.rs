//! Task losses with hand-written adjoints, the attraction surrogate and the
//! composite [`LossSpec`] driven by the gradient machinery.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{AdjointState, Objective};
use crate::error::{LossError, SimError};
use crate::gas::{GasConfig, GasState};
use crate::linalg::{scalar, Vector};
use crate::scene::{Scene, SimState};

fn unit_or_zero<const D: usize>(d: &Vector<D>) -> (f64, Vector<D>) {
    let n = d.norm();
    if n > 0.0 {
        (n, *d * (1.0 / n))
    } else {
        (0.0, Vector::zeros())
    }
}

fn nearest<const D: usize>(p: &Vector<D>, set: &[Vector<D>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in set.iter().enumerate() {
        let d = (*p - *q).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    (best.0, scalar::sqrt(best.1))
}

/// Mean nearest-neighbor distance from `a` to `b` plus from `b` to `a`.
pub fn chamfer_distance<const D: usize>(a: &[Vector<D>], b: &[Vector<D>]) -> Result<f64, LossError> {
    if a.is_empty() || b.is_empty() {
        return Err(LossError::EmptySet);
    }
    let ab: f64 = a.iter().map(|p| nearest(p, b).1).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|q| nearest(q, a).1).sum::<f64>() / b.len() as f64;
    Ok(ab + ba)
}

/// Adds `scale · ∂CD(a, b)/∂a` into `a_bar`; `b` is treated as fixed.
pub fn chamfer_distance_vjp<const D: usize>(a: &[Vector<D>], b: &[Vector<D>], scale: f64, a_bar: &mut [Vector<D>]) {
    let na = a.len() as f64;
    let nb = b.len() as f64;
    for (i, p) in a.iter().enumerate() {
        let (j, _) = nearest(p, b);
        a_bar[i] += unit_or_zero(&(*p - b[j])).1 * (scale / na);
    }
    for q in b {
        let (i, _) = nearest(q, a);
        a_bar[i] += unit_or_zero(&(a[i] - *q)).1 * (scale / nb);
    }
}

/// Sum of per-step Chamfer distances between tracked points and goal sets.
pub fn trajectory_goal_loss<const D: usize>(states: &[Vec<Vector<D>>], goals: &[Vec<Vector<D>>]) -> Result<f64, LossError> {
    if states.len() != goals.len() {
        return Err(LossError::LengthMismatch { expected: goals.len(), got: states.len() });
    }
    states.iter().zip(goals).map(|(s, g)| chamfer_distance(s, g)).sum()
}

/// `Σᵢ ‖pᵢ − goal‖`.
pub fn target_point_loss<const D: usize>(points: &[Vector<D>], goal: &Vector<D>) -> Result<f64, LossError> {
    if points.is_empty() {
        return Err(LossError::EmptySet);
    }
    Ok(points.iter().map(|p| (*p - *goal).norm()).sum())
}

pub fn target_point_loss_vjp<const D: usize>(points: &[Vector<D>], goal: &Vector<D>, scale: f64, bar: &mut [Vector<D>]) {
    for (i, p) in points.iter().enumerate() {
        bar[i] += unit_or_zero(&(*p - *goal)).1 * scale;
    }
}

/// `−Σᵢ Σⱼ ‖pᵢ − pⱼ‖` over ordered pairs.
pub fn mixing_spread_loss<const D: usize>(points: &[Vector<D>]) -> Result<f64, LossError> {
    if points.len() < 2 {
        return Err(LossError::TooFewParticles { needed: 2, got: points.len() });
    }
    let mut s = 0.0;
    for i in 0..points.len() {
        for j in 0..i {
            s += (points[i] - points[j]).norm();
        }
    }
    Ok(-2.0 * s)
}

pub fn mixing_spread_loss_vjp<const D: usize>(points: &[Vector<D>], scale: f64, bar: &mut [Vector<D>]) {
    for i in 0..points.len() {
        for j in 0..i {
            let u = unit_or_zero(&(points[i] - points[j])).1 * (-2.0 * scale);
            bar[i] += u;
            bar[j] -= u;
        }
    }
}

/// Rooms of the heating task; the lower-left room is the warm one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Room {
    UpperLeft,
    Right,
    LowerLeft,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sensor<const D: usize> {
    pub position: Vector<D>,
    pub room: Room,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorLayout<const D: usize> {
    pub sensors: Vec<Sensor<D>>,
    pub t_cool: f64,
    pub t_warm: f64,
}

impl<const D: usize> SensorLayout<D> {
    /// Nine sensors per room on a uniform 3×3 pattern inside each room's box
    /// (placed on the mid-plane in 3D).
    pub fn rooms(boxes: [(Room, Vector<D>, Vector<D>); 3], t_cool: f64, t_warm: f64) -> Self {
        let mut sensors = Vec::with_capacity(27);
        for (room, lo, hi) in boxes {
            for a in 0..3 {
                for b in 0..3 {
                    let mut p = (lo + hi) * 0.5;
                    p.0[0] = lo.0[0] + (hi.0[0] - lo.0[0]) * (a as f64 + 0.5) / 3.0;
                    p.0[1] = lo.0[1] + (hi.0[1] - lo.0[1]) * (b as f64 + 0.5) / 3.0;
                    sensors.push(Sensor { position: p, room });
                }
            }
        }
        SensorLayout { sensors, t_cool, t_warm }
    }

    fn target(&self, room: Room) -> f64 {
        match room {
            Room::UpperLeft | Room::Right => self.t_cool,
            Room::LowerLeft => self.t_warm,
        }
    }

    pub fn validate(&self, cfg: &GasConfig<D>) -> Result<(), LossError> {
        let ext = cfg.extent();
        for (i, s) in self.sensors.iter().enumerate() {
            for k in 0..D {
                let t = s.position.0[k] - cfg.origin.0[k];
                if !(t >= 0.0 && t <= ext.0[k]) {
                    return Err(LossError::SensorOutsideDomain { sensor: i });
                }
            }
        }
        Ok(())
    }
}

/// `Σ |T(sensor) − target(room)|` with multilinear temperature sampling.
pub fn air_sensor_loss<const D: usize>(cfg: &GasConfig<D>, gas: &GasState<D>, layout: &SensorLayout<D>) -> Result<f64, LossError> {
    layout.validate(cfg)?;
    Ok(layout
        .sensors
        .iter()
        .map(|s| scalar::abs(gas.temperature_at(cfg, &s.position) - layout.target(s.room)))
        .sum())
}

pub fn air_sensor_loss_vjp<const D: usize>(
    cfg: &GasConfig<D>,
    gas: &GasState<D>,
    layout: &SensorLayout<D>,
    scale: f64,
    temperature_bar: &mut [f64],
) {
    for s in &layout.sensors {
        let d = gas.temperature_at(cfg, &s.position) - layout.target(s.room);
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        GasState::temperature_at_vjp(cfg, &s.position, scale * sign, temperature_bar);
    }
}

/// Kernel `w(L, d) = exp(−L/τ)·max(0, 1 − d/r)` of the attraction loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttractionKernel {
    pub tau: f64,
    pub radius: f64,
}

impl AttractionKernel {
    /// Default temperature `0.1 · median(L)`, floored to stay positive.
    pub fn with_default_tau(prev_loss: &[f64], radius: f64) -> Self {
        let mut l: Vec<f64> = prev_loss.iter().copied().filter(|x| x.is_finite()).collect();
        l.sort_by(f64::total_cmp);
        let median = if l.is_empty() {
            0.0
        } else if l.len() % 2 == 1 {
            l[l.len() / 2]
        } else {
            0.5 * (l[l.len() / 2 - 1] + l[l.len() / 2])
        };
        AttractionKernel { tau: (0.1 * median).max(1e-12), radius }
    }
}

/// Neighbor lists within `radius` (excluding self) via a sorted cell hash.
fn neighbors<const D: usize>(points: &[Vector<D>], radius: f64) -> Vec<Vec<usize>> {
    let key = |p: &Vector<D>| -> [i64; D] { core::array::from_fn(|k| scalar::floor(p.0[k] / radius) as i64) };
    let mut order: Vec<([i64; D], usize)> = points.iter().enumerate().map(|(i, p)| (key(p), i)).collect();
    order.sort();
    let r2 = radius * radius;
    let mut out = vec![Vec::new(); points.len()];
    let span = 3usize.pow(D as u32);
    for (i, p) in points.iter().enumerate() {
        let k = key(p);
        for s in 0..span {
            let mut c = k;
            let mut r = s;
            for a in 0..D {
                c[a] += (r % 3) as i64 - 1;
                r /= 3;
            }
            let start = order.partition_point(|(kk, _)| *kk < c);
            for (kk, j) in &order[start..] {
                if *kk != c {
                    break;
                }
                if *j != i && (points[*j] - *p).norm_squared() < r2 {
                    out[i].push(*j);
                }
            }
        }
        out[i].sort_unstable();
    }
    out
}

/// Normalized weights `(j, w_ij)` per particle `i`; empty where no neighbor
/// lies within the radius.
pub fn attraction_weights<const D: usize>(points: &[Vector<D>], prev_loss: &[f64], kernel: &AttractionKernel) -> Vec<Vec<(usize, f64)>> {
    neighbors(points, kernel.radius)
        .into_iter()
        .enumerate()
        .map(|(i, nb)| {
            let lmin = nb.iter().map(|j| prev_loss[*j]).fold(f64::INFINITY, f64::min);
            let raw: Vec<(usize, f64)> = nb
                .iter()
                .map(|&j| {
                    let d = (points[i] - points[j]).norm();
                    (j, scalar::exp(-(prev_loss[j] - lmin) / kernel.tau) * (1.0 - d / kernel.radius).max(0.0))
                })
                .collect();
            let total: f64 = raw.iter().map(|x| x.1).sum();
            if total > 0.0 {
                raw.into_iter().map(|(j, w)| (j, w / total)).collect()
            } else {
                Vec::new()
            }
        })
        .collect()
}

/// `Σᵢ Σⱼ w_ij ‖pᵢ − pⱼ‖` with [`attraction_weights`].
pub fn attraction_loss<const D: usize>(points: &[Vector<D>], prev_loss: &[f64], kernel: &AttractionKernel) -> f64 {
    let w = attraction_weights(points, prev_loss, kernel);
    w.iter()
        .enumerate()
        .map(|(i, ws)| ws.iter().map(|(j, w)| w * (points[i] - points[*j]).norm()).sum::<f64>())
        .sum()
}

/// Exact reverse of [`attraction_loss`], including the distance dependence
/// of the normalized weights.
pub fn attraction_loss_vjp<const D: usize>(
    points: &[Vector<D>],
    prev_loss: &[f64],
    kernel: &AttractionKernel,
    scale: f64,
    bar: &mut [Vector<D>],
) {
    let r = kernel.radius;
    for (i, nb) in neighbors(points, r).into_iter().enumerate() {
        let lmin = nb.iter().map(|j| prev_loss[*j]).fold(f64::INFINITY, f64::min);
        let mut terms = Vec::with_capacity(nb.len());
        let mut total = 0.0;
        let mut weighted = 0.0;
        for &j in &nb {
            let (d, dir) = unit_or_zero(&(points[i] - points[j]));
            let e = scalar::exp(-(prev_loss[j] - lmin) / kernel.tau);
            let u = e * (1.0 - d / r).max(0.0);
            total += u;
            weighted += u * d;
            terms.push((j, d, dir, e, u));
        }
        if !(total > 0.0) {
            continue;
        }
        let li = weighted / total;
        for (j, d, dir, e, u) in terms {
            let du = if d < r { -e / r } else { 0.0 };
            let g = (u + du * (d - li)) / total * scale;
            bar[i] += dir * g;
            bar[j] -= dir * g;
        }
    }
}

/// `R = c₁ − c₂·L`.
pub fn reward_from_loss(loss: f64, c1: f64, c2: f64) -> f64 {
    c1 - c2 * loss
}

/// Which states of a rollout a term observes.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Final,
    /// Every `n`-th state after the initial one, plus the final state.
    Every(usize),
    At(Vec<usize>),
}

impl Schedule {
    pub fn includes(&self, index: usize, horizon: usize) -> bool {
        match self {
            Schedule::Final => index == horizon,
            Schedule::Every(n) => index > 0 && (index % (*n).max(1) == 0 || index == horizon),
            Schedule::At(v) => index <= horizon && v.contains(&index),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossTerm<const D: usize> {
    /// Chamfer distance of a body to goal point sets at given state indices.
    TrajectoryChamfer { body: usize, goals: Vec<(usize, Vec<Vector<D>>)> },
    TargetPoint { body: usize, goal: Vector<D>, schedule: Schedule },
    MixingSpread { body: usize, schedule: Schedule },
    AirSensors { layout: SensorLayout<D>, schedule: Schedule },
    /// `Σ ‖xᵢ − restᵢ‖²`, keeping a body near where it started.
    RestAnchor { body: usize, schedule: Schedule },
    /// Attraction surrogate over a body. `tau = None` uses the median rule.
    Attraction { body: usize, radius: f64, tau: Option<f64>, prev_loss: Vec<f64>, schedule: Schedule },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    TrajectoryChamfer,
    TargetPoint,
    MixingSpread,
    AirSensors,
    RestAnchor,
    Attraction,
    Composite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedTerm<const D: usize> {
    pub weight: f64,
    pub term: LossTerm<D>,
}

/// Weighted sum of loss terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec<const D: usize> {
    pub terms: Vec<WeightedTerm<D>>,
}

fn body_points<const D: usize>(scene: &Scene<D>, state: &SimState<D>, body: usize) -> (Vec<usize>, Vec<Vector<D>>) {
    let r = scene.bodies[body].particles.clone();
    let idx: Vec<usize> = r.filter(|i| scene.info[*i].active_at(state.substep)).collect();
    let pts = idx.iter().map(|i| state.particles[*i].x).collect();
    (idx, pts)
}

impl<const D: usize> LossTerm<D> {
    pub fn kind(&self) -> LossKind {
        match self {
            LossTerm::TrajectoryChamfer { .. } => LossKind::TrajectoryChamfer,
            LossTerm::TargetPoint { .. } => LossKind::TargetPoint,
            LossTerm::MixingSpread { .. } => LossKind::MixingSpread,
            LossTerm::AirSensors { .. } => LossKind::AirSensors,
            LossTerm::RestAnchor { .. } => LossKind::RestAnchor,
            LossTerm::Attraction { .. } => LossKind::Attraction,
        }
    }

    /// Attraction term over `body` with radius `3·dx` and the median rule.
    pub fn attraction(scene: &Scene<D>, body: usize, schedule: Schedule) -> Self {
        LossTerm::Attraction { body, radius: 3.0 * scene.config.dx(), tau: None, prev_loss: Vec::new(), schedule }
    }

    fn observes(&self, index: usize, horizon: usize) -> bool {
        match self {
            LossTerm::TrajectoryChamfer { goals, .. } => goals.iter().any(|(k, _)| *k == index && index <= horizon),
            LossTerm::TargetPoint { schedule, .. }
            | LossTerm::MixingSpread { schedule, .. }
            | LossTerm::AirSensors { schedule, .. }
            | LossTerm::RestAnchor { schedule, .. }
            | LossTerm::Attraction { schedule, .. } => schedule.includes(index, horizon),
        }
    }

    fn kernel(radius: f64, tau: Option<f64>, prev_loss: &[f64]) -> AttractionKernel {
        match tau {
            Some(tau) => AttractionKernel { tau, radius },
            None => AttractionKernel::with_default_tau(prev_loss, radius),
        }
    }

    fn value(&self, scene: &Scene<D>, state: &SimState<D>, index: usize) -> Result<f64, SimError> {
        Ok(match self {
            LossTerm::TrajectoryChamfer { body, goals } => {
                let (_, pts) = body_points(scene, state, *body);
                let mut s = 0.0;
                for (k, g) in goals {
                    if *k == index {
                        s += chamfer_distance(&pts, g)?;
                    }
                }
                s
            }
            LossTerm::TargetPoint { body, goal, .. } => target_point_loss(&body_points(scene, state, *body).1, goal)?,
            LossTerm::MixingSpread { body, .. } => mixing_spread_loss(&body_points(scene, state, *body).1)?,
            LossTerm::AirSensors { layout, .. } => {
                let (Some(cfg), Some(gas)) = (&scene.gas, &state.gas) else { return Err(LossError::MissingGas.into()) };
                air_sensor_loss(cfg, gas, layout)?
            }
            LossTerm::RestAnchor { body, .. } => {
                let (idx, pts) = body_points(scene, state, *body);
                idx.iter().zip(&pts).map(|(i, p)| (*p - scene.info[*i].rest).norm_squared()).sum()
            }
            LossTerm::Attraction { body, radius, tau, prev_loss, .. } => {
                if prev_loss.is_empty() {
                    return Ok(0.0);
                }
                let (idx, pts) = body_points(scene, state, *body);
                let l = attraction_prev(scene, *body, &idx, prev_loss)?;
                attraction_loss(&pts, &l, &Self::kernel(*radius, *tau, prev_loss))
            }
        })
    }

    fn accumulate(&self, scene: &Scene<D>, state: &SimState<D>, index: usize, scale: f64, bar: &mut AdjointState<D>) -> Result<(), SimError> {
        let scatter = |idx: &[usize], local: &[Vector<D>], bar: &mut AdjointState<D>| {
            for (i, g) in idx.iter().zip(local) {
                bar.particles[*i].x += *g;
            }
        };
        match self {
            LossTerm::TrajectoryChamfer { body, goals } => {
                let (idx, pts) = body_points(scene, state, *body);
                let mut local = vec![Vector::zeros(); pts.len()];
                for (k, g) in goals {
                    if *k == index {
                        chamfer_distance(&pts, g)?;
                        chamfer_distance_vjp(&pts, g, scale, &mut local);
                    }
                }
                scatter(&idx, &local, bar);
            }
            LossTerm::TargetPoint { body, goal, .. } => {
                let (idx, pts) = body_points(scene, state, *body);
                let mut local = vec![Vector::zeros(); pts.len()];
                target_point_loss_vjp(&pts, goal, scale, &mut local);
                scatter(&idx, &local, bar);
            }
            LossTerm::MixingSpread { body, .. } => {
                let (idx, pts) = body_points(scene, state, *body);
                let mut local = vec![Vector::zeros(); pts.len()];
                mixing_spread_loss_vjp(&pts, scale, &mut local);
                scatter(&idx, &local, bar);
            }
            LossTerm::AirSensors { layout, .. } => {
                let (Some(cfg), Some(gas), Some(gb)) = (&scene.gas, &state.gas, bar.gas.as_mut()) else {
                    return Err(LossError::MissingGas.into());
                };
                air_sensor_loss_vjp(cfg, gas, layout, scale, &mut gb.temperature);
            }
            LossTerm::RestAnchor { body, .. } => {
                let (idx, pts) = body_points(scene, state, *body);
                for (i, p) in idx.iter().zip(&pts) {
                    bar.particles[*i].x += (*p - scene.info[*i].rest) * (2.0 * scale);
                }
            }
            LossTerm::Attraction { body, radius, tau, prev_loss, .. } => {
                if prev_loss.is_empty() {
                    return Ok(());
                }
                let (idx, pts) = body_points(scene, state, *body);
                let l = attraction_prev(scene, *body, &idx, prev_loss)?;
                let mut local = vec![Vector::zeros(); pts.len()];
                attraction_loss_vjp(&pts, &l, &Self::kernel(*radius, *tau, prev_loss), scale, &mut local);
                scatter(&idx, &local, bar);
            }
        }
        Ok(())
    }
}

/// Previous-iterate losses of the active subset `idx` of a body.
fn attraction_prev<const D: usize>(scene: &Scene<D>, body: usize, idx: &[usize], prev: &[f64]) -> Result<Vec<f64>, LossError> {
    let r = scene.bodies[body].particles.clone();
    if prev.len() != r.len() {
        return Err(LossError::LengthMismatch { expected: r.len(), got: prev.len() });
    }
    Ok(idx.iter().map(|i| prev[i - r.start]).collect())
}

impl<const D: usize> LossSpec<D> {
    pub fn single(term: LossTerm<D>) -> Self {
        LossSpec { terms: vec![WeightedTerm { weight: 1.0, term }] }
    }

    pub fn with(mut self, weight: f64, term: LossTerm<D>) -> Self {
        self.terms.push(WeightedTerm { weight, term });
        self
    }

    pub fn kind(&self) -> LossKind {
        match self.terms.as_slice() {
            [t] => t.term.kind(),
            _ => LossKind::Composite,
        }
    }

    pub fn validate(&self, scene: &Scene<D>) -> Result<(), LossError> {
        for t in &self.terms {
            if !t.weight.is_finite() || (self.terms.len() > 1 && t.weight < 0.0) {
                return Err(LossError::InvalidWeight);
            }
            match &t.term {
                LossTerm::TrajectoryChamfer { body, goals } => {
                    check_body(scene, *body)?;
                    if goals.iter().any(|(_, g)| g.is_empty()) {
                        return Err(LossError::EmptySet);
                    }
                }
                LossTerm::TargetPoint { body, .. } | LossTerm::RestAnchor { body, .. } | LossTerm::Attraction { body, .. } => {
                    check_body(scene, *body)?
                }
                LossTerm::MixingSpread { body, .. } => {
                    check_body(scene, *body)?;
                    let n = scene.bodies[*body].particles.len();
                    if n < 2 {
                        return Err(LossError::TooFewParticles { needed: 2, got: n });
                    }
                }
                LossTerm::AirSensors { layout, .. } => match &scene.gas {
                    Some(cfg) => layout.validate(cfg)?,
                    None => return Err(LossError::MissingGas),
                },
            }
        }
        Ok(())
    }

    /// Copy without attraction terms, as used by the ablated optimizer.
    pub fn without_attraction(&self) -> Self {
        LossSpec { terms: self.terms.iter().filter(|t| t.term.kind() != LossKind::Attraction).cloned().collect() }
    }

    /// Per-particle distance-to-goal of `body` in `state`, from the first
    /// goal-bearing term on that body (zero if there is none).
    pub fn per_particle_loss(&self, scene: &Scene<D>, state: &SimState<D>, body: usize) -> Vec<f64> {
        let r = scene.bodies[body].particles.clone();
        let pts: Vec<Vector<D>> = r.clone().map(|i| state.particles[i].x).collect();
        for t in &self.terms {
            match &t.term {
                LossTerm::TargetPoint { body: b, goal, .. } if *b == body => {
                    return pts.iter().map(|p| (*p - *goal).norm()).collect();
                }
                LossTerm::TrajectoryChamfer { body: b, goals } if *b == body => {
                    if let Some((_, g)) = goals.iter().max_by_key(|(k, _)| *k) {
                        return pts.iter().map(|p| nearest(p, g).1).collect();
                    }
                }
                _ => {}
            }
        }
        vec![0.0; pts.len()]
    }

    /// Refreshes every attraction term's previous-iterate losses from `state`.
    pub fn refresh_attraction(&mut self, scene: &Scene<D>, state: &SimState<D>) {
        let snapshot = self.clone();
        for t in &mut self.terms {
            if let LossTerm::Attraction { body, prev_loss, .. } = &mut t.term {
                *prev_loss = snapshot.per_particle_loss(scene, state, *body);
            }
        }
    }

    /// Per-term totals of one rollout, for logging.
    pub fn breakdown(&self, scene: &Scene<D>, states: &[SimState<D>]) -> Result<Vec<f64>, SimError> {
        let horizon = states.len().saturating_sub(1);
        let mut out = vec![0.0; self.terms.len()];
        for (k, s) in states.iter().enumerate() {
            for (o, t) in out.iter_mut().zip(&self.terms) {
                if t.term.observes(k, horizon) {
                    *o += t.weight * t.term.value(scene, s, k)?;
                }
            }
        }
        Ok(out)
    }
}

fn check_body<const D: usize>(scene: &Scene<D>, body: usize) -> Result<(), LossError> {
    match scene.bodies.get(body) {
        Some(b) if !b.particles.is_empty() => Ok(()),
        _ => Err(LossError::EmptySet),
    }
}

impl<const D: usize> Objective<D> for LossSpec<D> {
    fn observes(&self, index: usize, horizon: usize) -> bool {
        self.terms.iter().any(|t| t.term.observes(index, horizon))
    }

    fn value(&self, scene: &Scene<D>, state: &SimState<D>, index: usize, horizon: usize) -> Result<f64, SimError> {
        let mut s = 0.0;
        for t in &self.terms {
            if t.term.observes(index, horizon) {
                s += t.weight * t.term.value(scene, state, index)?;
            }
        }
        Ok(s)
    }

    fn accumulate_gradient(
        &self,
        scene: &Scene<D>,
        state: &SimState<D>,
        index: usize,
        horizon: usize,
        bar: &mut AdjointState<D>,
    ) -> Result<(), SimError> {
        for t in &self.terms {
            if t.term.observes(index, horizon) {
                t.term.accumulate(scene, state, index, t.weight, bar)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v2(x: f64, y: f64) -> Vector<2> {
        Vector([x, y])
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Vector<2>> {
        (0..n).map(|_| v2(rng.random_range(-spread..spread), rng.random_range(-spread..spread))).collect()
    }

    fn fd_check(f: impl Fn(&[Vector<2>]) -> f64, grad: &[Vector<2>], pts: &[Vector<2>], tol: f64) {
        let h = 1e-6;
        for i in 0..pts.len() {
            for k in 0..2 {
                let mut p = pts.to_vec();
                p[i].0[k] += h;
                let mut m = pts.to_vec();
                m[i].0[k] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let g = grad[i].0[k];
                assert!((fd - g).abs() <= tol * fd.abs().max(1.0), "{i},{k}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn chamfer_examples() {
        let a = [v2(0.0, 0.0)];
        let b = [v2(3.0, 4.0)];
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 10.0);
        assert_eq!(chamfer_distance(&[v2(0.0, 0.0), v2(1.0, 0.0)], &[v2(0.0, 0.0)]).unwrap(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cloud(&mut rng, 20, 1.0);
        assert_eq!(chamfer_distance(&c, &c).unwrap(), 0.0);
        assert_eq!(chamfer_distance::<2>(&[], &b), Err(LossError::EmptySet));
    }

    #[test]
    fn trajectory_loss_examples() {
        let s1 = vec![v2(0.0, 0.0), v2(1.0, 0.0)];
        let g1 = vec![v2(0.0, 0.0)];
        let s2 = vec![v2(0.0, 0.0), v2(1.0, 0.0), v2(2.0, 0.0)];
        let g2 = vec![v2(0.0, 0.0)];
        // CD = 1 + 0 = 1 for the second pair; (0 + 1 + 2)/3 + 0 = 1
        let cd2 = chamfer_distance(&s2, &g2).unwrap();
        assert_eq!(cd2, 1.0);
        let s3 = vec![v2(0.0, 0.0), v2(1.0, 0.0), v2(2.0, 0.0), v2(3.0, 0.0)];
        let cd3 = chamfer_distance(&s3, &g2).unwrap();
        assert_eq!(cd3, 1.5);
        assert_eq!(trajectory_goal_loss(&[s1.clone(), s3], &[g1.clone(), g2]).unwrap(), 2.0);
        assert_eq!(trajectory_goal_loss(&[s1.clone()], &[g1.clone()]).unwrap(), chamfer_distance(&s1, &g1).unwrap());
        assert_eq!(trajectory_goal_loss(&[g1.clone()], &[g1.clone()]).unwrap(), 0.0);
        assert_eq!(trajectory_goal_loss(&[s1], &[]), Err(LossError::LengthMismatch { expected: 0, got: 1 }));
    }

    #[test]
    fn target_and_mixing_examples() {
        let g = v2(1.0, 1.0);
        assert_eq!(target_point_loss(&[g, g], &g).unwrap(), 0.0);
        assert_eq!(target_point_loss(&[v2(3.0, 1.0)], &g).unwrap(), 2.0);
        assert_eq!(target_point_loss(&[v2(2.0, 1.0), v2(1.0, 3.0), v2(-2.0, 1.0)], &g).unwrap(), 6.0);
        assert_eq!(target_point_loss::<2>(&[], &g), Err(LossError::EmptySet));
        assert_eq!(mixing_spread_loss(&[g, g, g]).unwrap(), 0.0);
        assert_eq!(mixing_spread_loss(&[v2(0.0, 0.0), v2(0.0, 1.5)]).unwrap(), -3.0);
        assert_eq!(mixing_spread_loss(&[g]), Err(LossError::TooFewParticles { needed: 2, got: 1 }));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = cloud(&mut rng, 12, 1.0);
        let b = cloud(&mut rng, 9, 1.0);
        let mut g = vec![Vector::zeros(); a.len()];
        chamfer_distance_vjp(&a, &b, 1.0, &mut g);
        fd_check(|p| chamfer_distance(p, &b).unwrap(), &g, &a, 1e-5);

        let goal = v2(0.2, -0.3);
        let mut g = vec![Vector::zeros(); a.len()];
        target_point_loss_vjp(&a, &goal, 1.0, &mut g);
        fd_check(|p| target_point_loss(p, &goal).unwrap(), &g, &a, 1e-5);

        let mut g = vec![Vector::zeros(); a.len()];
        mixing_spread_loss_vjp(&a, 1.0, &mut g);
        fd_check(|p| mixing_spread_loss(p).unwrap(), &g, &a, 1e-5);

        let pts = cloud(&mut rng, 40, 0.5);
        let prev: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..2.0)).collect();
        let kernel = AttractionKernel::with_default_tau(&prev, 0.4);
        let mut g = vec![Vector::zeros(); pts.len()];
        attraction_loss_vjp(&pts, &prev, &kernel, 1.0, &mut g);
        fd_check(|p| attraction_loss(p, &prev, &kernel), &g, &pts, 1e-5);
    }

    #[test]
    fn attraction_examples() {
        let k = AttractionKernel { tau: 0.1, radius: 1.0 };
        assert_eq!(attraction_loss(&[v2(0.0, 0.0)], &[1.0], &k), 0.0);
        let pts = [v2(0.0, 0.0), v2(0.5, 0.0), v2(-0.5, 0.0)];
        let w = attraction_weights(&pts, &[3.0, 1.0, 1.0], &k);
        assert_eq!(w[0].len(), 2);
        assert!((w[0][0].1 - 0.5).abs() < 1e-15 && (w[0][1].1 - 0.5).abs() < 1e-15);
        let w = attraction_weights(&pts, &[3.0, 0.0, 10.0], &k);
        assert_eq!(w[0][0].1, 1.0);
        assert!(w[0][1].1 < 1e-40);
        let far = [v2(0.0, 0.0), v2(5.0, 0.0)];
        assert!(attraction_weights(&far, &[0.0, 0.0], &k).iter().all(|w| w.is_empty()));
    }

    #[test]
    fn air_sensor_examples() {
        let mut cfg = GasConfig::<2>::new([12, 12], 1.0 / 12.0);
        cfg.ambient_temperature = 0.0;
        let layout = SensorLayout::rooms(
            [
                (Room::UpperLeft, v2(0.1, 0.55), v2(0.45, 0.9)),
                (Room::Right, v2(0.55, 0.1), v2(0.9, 0.9)),
                (Room::LowerLeft, v2(0.1, 0.1), v2(0.45, 0.45)),
            ],
            20.0,
            30.0,
        );
        assert_eq!(layout.sensors.len(), 27);
        let mut gas = cfg.initial_state();
        gas.temperature.iter_mut().for_each(|t| *t = 20.0);
        assert_eq!(air_sensor_loss(&cfg, &gas, &layout).unwrap(), 90.0);
        // target field per room
        let cells = cfg.cells();
        for i in 0..cells.len() {
            let x = cfg.cell_center(&cells.coords(i));
            gas.temperature[i] = if x.0[0] < 0.5 && x.0[1] < 0.5 { 30.0 } else { 20.0 };
        }
        assert!(air_sensor_loss(&cfg, &gas, &layout).unwrap() < 1e-12);
        gas.temperature.iter_mut().for_each(|t| *t += 0.25);
        assert!((air_sensor_loss(&cfg, &gas, &layout).unwrap() - 27.0 * 0.25).abs() < 1e-12);
        let mut bad = layout.clone();
        bad.sensors[4].position = v2(2.0, 0.5);
        assert_eq!(air_sensor_loss(&cfg, &gas, &bad), Err(LossError::SensorOutsideDomain { sensor: 4 }));
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward_from_loss(5.0, 0.0, 1.0), -5.0);
        assert_eq!(reward_from_loss(0.0, 7.0, 2.0), 7.0);
        let ls = [3.0f64, 1.0, 2.0];
        let best_l = ls.iter().cloned().enumerate().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        let best_r = ls.iter().map(|l| reward_from_loss(*l, 4.0, 0.5)).enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        assert_eq!(best_l, best_r);
    }

    fn pts_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
        proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..30)
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric(a in pts_strategy(), b in pts_strategy()) {
            let a: Vec<_> = a.into_iter().map(|(x, y)| v2(x, y)).collect();
            let b: Vec<_> = b.into_iter().map(|(x, y)| v2(x, y)).collect();
            prop_assert_eq!(chamfer_distance(&a, &b).unwrap(), chamfer_distance(&b, &a).unwrap());
        }

        #[test]
        fn spread_and_attraction_are_translation_invariant(a in pts_strategy(), tx in -3.0f64..3.0, ty in -3.0f64..3.0) {
            let p: Vec<_> = a.iter().map(|(x, y)| v2(*x, *y)).collect();
            let q: Vec<_> = p.iter().map(|v| *v + v2(tx, ty)).collect();
            let l0 = mixing_spread_loss(&p).unwrap();
            prop_assert!((l0 - mixing_spread_loss(&q).unwrap()).abs() <= 1e-9 * l0.abs().max(1.0));
            let prev: Vec<f64> = (0..p.len()).map(|i| (i % 5) as f64 * 0.3).collect();
            let k = AttractionKernel { tau: 0.2, radius: 0.6 };
            let wp = attraction_weights(&p, &prev, &k);
            for ws in &wp {
                if !ws.is_empty() {
                    let s: f64 = ws.iter().map(|x| x.1).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    prop_assert!(ws.iter().all(|x| x.1 >= 0.0));
                }
            }
            // neighbor sets can flip under float rounding at the radius; compare when they agree
            let wq = attraction_weights(&q, &prev, &k);
            let same = wp.iter().zip(&wq).all(|(a, b)| a.iter().map(|x| x.0).eq(b.iter().map(|x| x.0)));
            if same {
                let la = attraction_loss(&p, &prev, &k);
                prop_assert!((la - attraction_loss(&q, &prev, &k)).abs() <= 1e-9 * la.max(1.0));
            }
        }

        #[test]
        fn attraction_prefers_lower_loss(d in 0.05f64..0.9, l1 in 0.0f64..5.0, gap in 0.01f64..5.0) {
            let k = AttractionKernel { tau: 0.3, radius: 1.0 };
            let pts = [v2(0.0, 0.0), v2(d, 0.0), v2(-d, 0.0)];
            let w = attraction_weights(&pts, &[0.0, l1, l1 + gap], &k);
            prop_assert!(w[0][0].1 > w[0][1].1);
        }
    }
}
