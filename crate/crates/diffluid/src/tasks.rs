//! Built-in task scenes: gradient-check scenes for every material kind and
//! for gas, the free-particle carrier, and the two optimization toys.

use std::time::Instant;

use diffluid_core::autodiff::{finite_difference_gradient, grad_trajectory, rollout_loss, GradReport};
use diffluid_core::checkpoint::CheckpointStore;
use diffluid_core::gas::{GasConfig, GasSource, ProjectionSolve};
use diffluid_core::materials::{MaterialKind, MaterialParams, YieldParams};
use diffluid_core::objectives::{LossSpec, LossTerm, Room, Schedule, SensorLayout};
use diffluid_core::optimize::{ActionTrajectory, DpConfig, ExpandSchedule};
use diffluid_core::scene::{build_scene, BodySpec, EffectorSpec, Scene, SceneSpec, SimConfig, SimState};
use diffluid_core::sdf::{CompoundSdf, Pose, SdfPrimitive, Shape};
use diffluid_core::{SimError, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::validate::retain_particles;

type V2 = Vector<2>;

#[derive(Clone, Debug, PartialEq)]
pub struct DpSettings {
    pub config: DpConfig,
    pub schedule: ExpandSchedule,
    pub attraction_weight: f64,
    pub attraction_body: usize,
}

/// A scene, its loss and a starting action trajectory.
#[derive(Clone, Debug)]
pub struct Task {
    pub name: String,
    pub scene: Scene<2>,
    pub initial: SimState<2>,
    pub loss: LossSpec<2>,
    pub init: ActionTrajectory,
}

impl Task {
    pub fn horizon(&self) -> usize {
        self.init.horizon()
    }

    /// Full-horizon loss of a trajectory.
    pub fn evaluate(&self, traj: &ActionTrajectory) -> Result<f64, SimError> {
        rollout_loss(&self.scene, &self.initial, &traj.expand(), &self.loss).map(|(l, _)| l)
    }

    /// Loss as a function of the masked segment parameters.
    pub fn evaluate_params(&self, params: &[f64]) -> Result<f64, SimError> {
        let mut t = self.init.clone();
        t.set_params(params);
        self.evaluate(&t)
    }

    /// Adjoint gradient with respect to the masked segment parameters.
    pub fn gradient(&self, stride: usize) -> Result<(f64, Vec<f64>), SimError> {
        let mut store = CheckpointStore::new(stride);
        let g = grad_trajectory(&self.scene, &self.initial, &self.init.expand(), &self.loss, &mut store)?;
        Ok((g.loss, self.init.reduce_gradient(&g.gradient)))
    }

    /// Defaults for gradient-based optimization of this task.
    pub fn dp_settings(&self) -> DpSettings {
        let mut schedule = ExpandSchedule::new(self.horizon());
        // the toys plateau slowly; a looser rule lets the window reach the
        // horizon within a 200-iteration budget
        schedule.patience = 10;
        schedule.improvement_threshold = 1e-2;
        DpSettings { config: DpConfig::new(200, 0.05), schedule, attraction_weight: 0.1, attraction_body: 0 }
    }

    /// The task loss plus the attraction term of `settings`, if enabled.
    pub fn dp_loss(&self, settings: &DpSettings) -> LossSpec<2> {
        if settings.attraction_weight > 0.0 {
            self.loss.clone().with(settings.attraction_weight, LossTerm::attraction(&self.scene, settings.attraction_body, Schedule::Final))
        } else {
            self.loss.clone()
        }
    }

    /// Adjoint gradient against central differences.
    pub fn gradcheck(&self, eps: f64) -> Result<GradReport, SimError> {
        let start = Instant::now();
        let (loss, g) = self.gradient(16)?;
        let fd = finite_difference_gradient(|p| self.evaluate_params(p), &self.init.params(), eps)?;
        let mut r = GradReport::new(loss, g, Some(fd));
        r.wall_time = start.elapsed().as_secs_f64();
        Ok(r)
    }
}

fn rect(center: [f64; 2], half: [f64; 2]) -> SdfPrimitive<2> {
    SdfPrimitive::new(Shape::Box { half_extents: Vector(half) }, Pose::from_translation(Vector(center)))
}

fn disk(center: [f64; 2], radius: f64) -> SdfPrimitive<2> {
    SdfPrimitive::new(Shape::Sphere { radius }, Pose::from_translation(Vector(center)))
}

const PLANAR: [bool; 6] = [true, true, false, false, false, true];

/// Trajectory with `n` segments of `len` substeps, bounded to `±bound` m/s
/// and `±spin` rad/s.
fn planar_trajectory(n: usize, len: usize, values: Vec<[f64; 6]>, bound: f64, spin: f64) -> ActionTrajectory {
    let mut t = ActionTrajectory::constant(n, len, [0.0; 6], PLANAR, bound);
    t.lower[5] = -spin;
    t.upper[5] = spin;
    t.values = values;
    t
}

fn random_actions(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<[f64; 6]> {
    (0..n)
        .map(|_| [rng.random_range(-scale..scale), rng.random_range(-scale..scale), 0.0, 0.0, 0.0, rng.random_range(-scale..scale)])
        .collect()
}

/// One particle riding a sticky box effector, without gravity. The final
/// position is linear in the actions.
pub fn free_particle(goal: V2) -> Task {
    let mut cfg = SimConfig::new(32, 1.0, 1e-3);
    cfg.gravity = V2::zeros();
    let mut spec = SceneSpec::new(cfg).with_preset("water");
    spec.bodies.push(BodySpec::shape("particle", "water", rect([0.5, 0.5], [0.05, 0.05]), 1));
    let mut e = EffectorSpec::new("carrier", CompoundSdf::single(rect([0.0, 0.0], [0.2, 0.2])), Pose::from_translation(Vector([0.5, 0.5])));
    e.friction = f64::INFINITY;
    e.action_mask = [true, true, false, false, false, false];
    spec.effectors.push(e);
    let (mut scene, mut initial) = build_scene(&spec).expect("free-particle scene");
    scene.info.truncate(1);
    scene.bodies[0].particles = 0..1;
    initial.particles.truncate(1);
    initial.particles[0].x = Vector([0.5, 0.5]);
    // squared distance to the goal
    scene.info[0].rest = goal;
    let mut init = ActionTrajectory::constant(4, 25, [0.0; 6], [true, true, false, false, false, false], 2.0);
    init.values = vec![[0.3, -0.2, 0.0, 0.0, 0.0, 0.0], [0.1, 0.4, 0.0, 0.0, 0.0, 0.0], [-0.2, 0.1, 0.0, 0.0, 0.0, 0.0], [0.5, 0.0, 0.0, 0.0, 0.0, 0.0]];
    Task {
        name: "free_particle".into(),
        scene,
        initial,
        loss: LossSpec::single(LossTerm::RestAnchor { body: 0, schedule: Schedule::Final }),
        init,
    }
}

/// `2(x_T − g)·len·dt` per segment for the free-particle task.
pub fn free_particle_closed_form(task: &Task) -> Result<Vec<f64>, SimError> {
    let (_, end) = rollout_loss(&task.scene, &task.initial, &task.init.expand(), &task.loss)?;
    let r = (end.particles[0].x - task.scene.info[0].rest) * 2.0;
    let per = task.init.segment_length as f64 * task.scene.config.dt;
    Ok(task.init.values.iter().flat_map(|_| [r.0[0] * per, r.0[1] * per]).collect())
}

fn material_for(kind: MaterialKind) -> MaterialParams {
    match kind {
        MaterialKind::Elastic => MaterialParams::preset("floating_object").unwrap(),
        MaterialKind::Plastic => {
            let mut m = MaterialParams::new("dough", MaterialKind::Plastic, 416.67, 277.78, 1.0);
            m.yield_params = YieldParams { theta_c: 0.025, theta_s: 0.0075, sigma_y: 1.0 };
            m
        }
        MaterialKind::Liquid => MaterialParams::preset("water").unwrap(),
        MaterialKind::ViscousLiquid => MaterialParams::preset("frothed_milk").unwrap(),
        MaterialKind::NonNewtonian => {
            let mut m = MaterialParams::preset("ice_cream").unwrap();
            m.yield_params.sigma_y = 5.0;
            m
        }
        MaterialKind::Rigid => MaterialParams::preset("transport_object").unwrap(),
    }
}

/// A randomized body of one material kind pushed by a paddle.
pub fn material_scene(kind: MaterialKind, seed: u64) -> Task {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SimConfig::new(32, 1.0, 5e-4);
    let mut spec = SceneSpec::new(cfg);
    spec.seed = seed;
    let m = material_for(kind);
    let name = m.name.clone();
    spec.materials.push(m);
    let c = [rng.random_range(0.45..0.6), rng.random_range(0.3..0.45)];
    let (shape, half_width) = if rng.random_bool(0.5) {
        let r = rng.random_range(0.06..0.09);
        (disk(c, r), r)
    } else {
        let h = [rng.random_range(0.05..0.09), rng.random_range(0.04..0.07)];
        (rect(c, h), h[0])
    };
    let mut body = BodySpec::shape("body", &name, shape, 4);
    body.velocity = Vector([rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]);
    if let diffluid_core::scene::BodySource::Shape { jitter, .. } = &mut body.source {
        *jitter = 0.5;
    }
    spec.bodies.push(body);
    let mut paddle = EffectorSpec::new(
        "paddle",
        CompoundSdf::single(rect([0.0, 0.0], [0.03, rng.random_range(0.08..0.12)])),
        Pose::from_translation(Vector([c[0] - half_width - 0.08, c[1] + rng.random_range(-0.03..0.03)])),
    );
    paddle.friction = rng.random_range(0.1..0.5);
    paddle.action_mask = PLANAR;
    spec.effectors.push(paddle);
    let (scene, initial) = build_scene(&spec).expect("material scene");
    let mut values = random_actions(&mut rng, 4, 0.5);
    for v in &mut values {
        v[0] += 0.8;
    }
    let goal = Vector([rng.random_range(0.6..0.8), rng.random_range(0.3..0.6)]);
    let loss = LossSpec::single(LossTerm::TargetPoint { body: 0, goal, schedule: Schedule::Every(20) })
        .with(0.5, LossTerm::RestAnchor { body: 0, schedule: Schedule::Final });
    Task { name: format!("material_{}", kind.name()), scene, initial, loss, init: planar_trajectory(4, 20, values, 2.0, 6.0) }
}

/// Three rooms of sensors filling a square gas domain of side `side`.
fn room_layout(side: f64, t_cool: f64, t_warm: f64) -> SensorLayout<2> {
    let s = side;
    SensorLayout::rooms(
        [
            (Room::UpperLeft, Vector([0.15 * s, 0.55 * s]), Vector([0.45 * s, 0.85 * s])),
            (Room::Right, Vector([0.55 * s, 0.15 * s]), Vector([0.85 * s, 0.85 * s])),
            (Room::LowerLeft, Vector([0.15 * s, 0.15 * s]), Vector([0.45 * s, 0.45 * s])),
        ],
        t_cool,
        t_warm,
    )
}

/// Gas-only room with a movable heater; sensors want the lower-left room warm
/// and the other two cool.
pub fn gas_heating(seed: u64) -> Task {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = SimConfig::new(8, 1.0, 5e-3);
    cfg.gravity = V2::zeros();
    let mut spec = SceneSpec::new(cfg);
    let mut g = GasConfig::new([20, 20], 0.05);
    g.solve = ProjectionSolve::jacobi(30);
    g.beta_temp = 1.5;
    g.kappa_smoke = 0.2;
    spec.gas = Some(g);
    let mut heater = EffectorSpec::new(
        "heater",
        CompoundSdf::single(disk([0.0, 0.0], 0.06)),
        Pose::from_translation(Vector([rng.random_range(0.3..0.7), rng.random_range(0.2..0.4)])),
    );
    heater.contact = false;
    heater.action_mask = PLANAR;
    heater.gas_source = Some(GasSource {
        offset: V2::zeros(),
        radius: 0.15,
        strength: 0.3,
        temperature: Some(1.0),
        smoke: Some(0.5),
        velocity: Some(Vector([0.0, 0.5])),
    });
    spec.effectors.push(heater);
    let (scene, initial) = build_scene(&spec).expect("gas heating scene");
    let mut values = random_actions(&mut rng, 4, 0.5);
    for v in &mut values {
        v[5] *= 2.0;
    }
    let loss = LossSpec::single(LossTerm::AirSensors { layout: room_layout(1.0, 0.0, 0.3), schedule: Schedule::Every(15) });
    Task { name: "gas_heating".into(), scene, initial, loss, init: planar_trajectory(4, 15, values, 2.0, 6.0) }
}

/// Paddle in a water tank pushing a floating disk toward a goal on the surface.
pub fn toy_gathering(seed: u64) -> Task {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SimConfig::new(32, 1.0, 5e-4);
    let mut spec = SceneSpec::new(cfg).with_preset("water").with_preset("floating_object");
    spec.seed = seed;
    let float = disk([0.4, 0.3], 0.045);
    spec.bodies.push(BodySpec::shape("float", "floating_object", float.clone(), 4));
    spec.bodies.push(BodySpec::shape("water", "water", rect([0.5, 0.2], [0.38, 0.1]), 4));
    let mut paddle = EffectorSpec::new("paddle", CompoundSdf::single(rect([0.0, 0.0], [0.02, 0.08])), Pose::from_translation(Vector([0.24, 0.3])));
    paddle.friction = 0.2;
    paddle.action_mask = PLANAR;
    spec.effectors.push(paddle);
    let (mut scene, mut initial) = build_scene(&spec).expect("gathering scene");
    let keep: Vec<bool> = (0..initial.particles.len())
        .map(|i| scene.info[i].body == 0 || float.sample(&initial.particles[i].x).distance > 0.01)
        .collect();
    retain_particles(&mut scene, &mut initial, &keep);
    let goal = Vector([0.62, 0.3]);
    let values = random_actions(&mut rng, 10, 0.1);
    let loss = LossSpec::single(LossTerm::TargetPoint { body: 0, goal, schedule: Schedule::Final });
    Task { name: "toy_gathering".into(), scene, initial, loss, init: planar_trajectory(10, 60, values, 2.0, 6.0) }
}

/// Glass holding a light liquid over a heavy one. The light layer should end
/// on the ground to the right while the heavy layer stays put.
pub fn toy_pouring(seed: u64) -> Task {
    toy_pouring_with(seed, 10, 40)
}

pub fn toy_pouring_with(seed: u64, segments: usize, segment_length: usize) -> Task {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SimConfig::new(32, 1.0, 1e-3);
    let mut spec = SceneSpec::new(cfg).with_preset("light_liquid").with_preset("heavy_liquid");
    spec.seed = seed;
    let center = [0.35, 0.3];
    spec.bodies.push(BodySpec::shape("light", "light_liquid", rect([center[0], center[1] + 0.135], [0.1, 0.035]), 4));
    spec.bodies.push(BodySpec::shape("heavy", "heavy_liquid", rect([center[0], center[1] + 0.065], [0.1, 0.035]), 4));
    let glass = CompoundSdf {
        parts: vec![
            rect([0.0, 0.0], [0.14, 0.02]),
            rect([-0.12, 0.11], [0.02, 0.13]),
            rect([0.12, 0.11], [0.02, 0.13]),
        ],
    };
    let mut cup = EffectorSpec::new("glass", glass, Pose::from_translation(Vector(center)));
    cup.friction = 0.0;
    cup.action_mask = PLANAR;
    spec.effectors.push(cup);
    let (scene, initial) = build_scene(&spec).expect("pouring scene");
    let values = random_actions(&mut rng, segments, 0.1);
    let goal = Vector([0.75, 0.12]);
    let loss = LossSpec::single(LossTerm::TargetPoint { body: 0, goal, schedule: Schedule::Final })
        .with(1.0, LossTerm::RestAnchor { body: 1, schedule: Schedule::Final });
    Task { name: "toy_pouring".into(), scene, initial, loss, init: planar_trajectory(segments, segment_length, values, 1.0, 3.0) }
}

/// Scenes of the gradient-agreement check: one per material kind and a gas-only room.
pub fn gradcheck_suite(seed: u64) -> Vec<Task> {
    let mut tasks: Vec<Task> = MaterialKind::ALL.into_iter().enumerate().map(|(i, k)| material_scene(k, seed * 31 + i as u64)).collect();
    tasks.push(gas_heating(seed));
    tasks
}

pub fn by_name(name: &str, seed: u64) -> Option<Task> {
    Some(match name {
        "free_particle" => free_particle(Vector([0.62, 0.47])),
        "gas_heating" => gas_heating(seed),
        "toy_gathering" => toy_gathering(seed),
        "toy_pouring" => toy_pouring(seed),
        _ => {
            let kind = MaterialKind::from_name(name.strip_prefix("material_")?)?;
            material_scene(kind, seed)
        }
    })
}

pub const TASK_NAMES: [&str; 4] = ["free_particle", "gas_heating", "toy_gathering", "toy_pouring"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_particle_matches_closed_form() {
        let t = free_particle(Vector([0.62, 0.47]));
        let (_, g) = t.gradient(8).unwrap();
        let want = free_particle_closed_form(&t).unwrap();
        let err = diffluid_core::autodiff::max_rel_error(&g, &want);
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn pouring_gradient_matches_finite_differences() {
        let t = toy_pouring_with(0, 5, 40);
        assert_eq!(t.horizon(), 200);
        let r = t.gradcheck(1e-6).unwrap();
        assert!(r.max_rel_error.unwrap() <= 1e-3, "{:?}", r.max_rel_error);
    }

    #[test]
    fn task_scenes_are_small() {
        for t in gradcheck_suite(1) {
            assert!(t.initial.particles.len() <= 500, "{} has {}", t.name, t.initial.particles.len());
            assert!(t.horizon() <= 200);
            assert!(t.loss.validate(&t.scene).is_ok());
        }
        for name in TASK_NAMES {
            let t = by_name(name, 0).unwrap();
            assert!(t.loss.validate(&t.scene).is_ok(), "{name}");
        }
        assert!(by_name("material_rigid", 0).is_some());
        assert!(by_name("nope", 0).is_none());
    }
}
