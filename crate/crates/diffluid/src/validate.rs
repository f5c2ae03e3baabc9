//! Physical validation suites. Each builds a small 2D scene, runs it and
//! checks one quantitative proxy of the phenomenon.

use std::fmt;
use std::time::Instant;

use diffluid_core::gas::{GasConfig, GasSource, GasState, ProjectionSolve};
use diffluid_core::materials::{MaterialKind, MaterialParams, YieldParams};
use diffluid_core::mpm::{metrics, step};
use diffluid_core::scene::{build_scene, BodySpec, EffectorSpec, Scene, SceneSpec, SimConfig, SimState};
use diffluid_core::sdf::{CompoundSdf, Pose, SdfPrimitive, Shape};
use diffluid_core::{SimError, Vector};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;

pub type V2 = Vector<2>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Momentum,
    Volume,
    Buoyancy,
    Divergence,
    Karman,
    Magnus,
    RayleighTaylor,
    DamBreak,
    Bounce,
}

impl Suite {
    pub const ALL: [Suite; 9] = [
        Suite::Momentum,
        Suite::Volume,
        Suite::Buoyancy,
        Suite::Divergence,
        Suite::Karman,
        Suite::Magnus,
        Suite::RayleighTaylor,
        Suite::DamBreak,
        Suite::Bounce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Momentum => "momentum",
            Suite::Volume => "volume",
            Suite::Buoyancy => "buoyancy",
            Suite::Divergence => "divergence",
            Suite::Karman => "karman",
            Suite::Magnus => "magnus",
            Suite::RayleighTaylor => "rayleigh_taylor",
            Suite::DamBreak => "dam_break",
            Suite::Bounce => "bounce",
        }
    }

    pub fn from_name(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn run(self) -> Result<SuiteReport, SimError> {
        let start = Instant::now();
        let mut r = match self {
            Suite::Momentum => momentum()?,
            Suite::Volume => volume()?,
            Suite::Buoyancy => buoyancy()?,
            Suite::Divergence => divergence()?,
            Suite::Karman => karman()?,
            Suite::Magnus => magnus()?,
            Suite::RayleighTaylor => rayleigh_taylor()?,
            Suite::DamBreak => dam_break()?,
            Suite::Bounce => bounce()?,
        };
        r.wall_time = start.elapsed().as_secs_f64();
        Ok(r)
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    /// The check in words, with its threshold.
    pub criterion: String,
    pub measured: Vec<(String, f64)>,
    /// Sampled series behind the check.
    pub series: Vec<f64>,
    pub wall_time: f64,
}

impl SuiteReport {
    fn new(suite: Suite, passed: bool, criterion: &str, measured: Vec<(&str, f64)>, series: Vec<f64>) -> Self {
        SuiteReport {
            suite,
            passed,
            criterion: criterion.into(),
            measured: measured.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            series,
            wall_time: 0.0,
        }
    }

    pub fn value(&self, key: &str) -> Option<f64> {
        self.measured.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

fn rect(center: [f64; 2], half: [f64; 2]) -> SdfPrimitive<2> {
    SdfPrimitive::new(Shape::Box { half_extents: Vector(half) }, Pose::from_translation(Vector(center)))
}

fn disk(center: [f64; 2], radius: f64) -> SdfPrimitive<2> {
    SdfPrimitive::new(Shape::Sphere { radius }, Pose::from_translation(Vector(center)))
}

fn run(scene: &Scene<2>, mut state: SimState<2>, n: usize, mut observe: impl FnMut(&SimState<2>)) -> Result<SimState<2>, SimError> {
    for _ in 0..n {
        state = step(scene, &state, &[0.0; 6])?;
        observe(&state);
    }
    Ok(state)
}

fn body_com(scene: &Scene<2>, state: &SimState<2>, body: usize) -> (V2, V2) {
    let mut m = 0.0;
    let mut x = V2::zeros();
    let mut v = V2::zeros();
    for i in scene.bodies[body].particles.clone() {
        let w = scene.info[i].mass;
        m += w;
        x += state.particles[i].x * w;
        v += state.particles[i].v * w;
    }
    (x * (1.0 / m), v * (1.0 / m))
}

fn elastic(name: &str, rho: f64) -> MaterialParams {
    MaterialParams::new(name, MaterialKind::Elastic, 416.67, 277.78, rho)
}

/// Two equal elastic blocks, one at rest, collide head-on without gravity.
pub fn momentum_scene() -> (Scene<2>, SimState<2>) {
    let mut cfg = SimConfig::new(48, 1.0, 5e-4);
    cfg.gravity = V2::zeros();
    let mut spec = SceneSpec::new(cfg);
    spec.materials.push(elastic("block", 1.0));
    let mut a = BodySpec::shape("a", "block", rect([0.3, 0.5], [0.06, 0.06]), 4);
    a.velocity = Vector([1.0, 0.0]);
    spec.bodies.push(a);
    spec.bodies.push(BodySpec::shape("b", "block", rect([0.6, 0.5], [0.06, 0.06]), 4));
    build_scene(&spec).expect("momentum scene")
}

fn momentum() -> Result<SuiteReport, SimError> {
    let (scene, state) = momentum_scene();
    let p0 = metrics(&scene, &state).momentum;
    let mut worst = 0.0f64;
    let mut series = Vec::new();
    let end = run(&scene, state, 1000, |s| {
        let p = metrics(&scene, s).momentum;
        let d = (p - p0).norm() / p0.norm();
        worst = worst.max(d);
        if s.substep % 50 == 0 {
            series.push(d);
        }
    })?;
    let (_, va) = body_com(&scene, &end, 0);
    let (_, vb) = body_com(&scene, &end, 1);
    // the struck block carries at least 40% of the initial momentum
    let exchanged = vb.0[0] >= 0.4 * 1.0;
    Ok(SuiteReport::new(
        Suite::Momentum,
        worst <= 1e-9 && exchanged,
        "max |Δp|/|p0| <= 1e-9 over 1000 substeps and the struck block ends with >= 40% of the striker's initial velocity",
        vec![("max_relative_drift", worst), ("struck_velocity", vb.0[0]), ("striker_velocity", va.0[0])],
        series,
    ))
}

/// Cells holding at least `min_count` particles.
fn occupied_cells(scene: &Scene<2>, state: &SimState<2>, min_count: usize) -> usize {
    let dx = scene.config.dx();
    let n = scene.config.grid_resolution;
    let mut count = vec![0usize; n * n];
    for p in &state.particles {
        let i = (p.x.0[0] / dx) as usize;
        let j = (p.x.0[1] / dx) as usize;
        count[i.min(n - 1) * n + j.min(n - 1)] += 1;
    }
    count.iter().filter(|c| **c >= min_count).count()
}

/// A water column resting on the floor.
pub fn volume_scene() -> (Scene<2>, SimState<2>) {
    let cfg = SimConfig::new(32, 1.0, 5e-4);
    let mut spec = SceneSpec::new(cfg).with_preset("water");
    spec.bodies.push(BodySpec::shape("water", "water", rect([0.5, 0.25], [0.3, 0.15]), 4));
    build_scene(&spec).expect("volume scene")
}

fn volume() -> Result<SuiteReport, SimError> {
    let (scene, state) = volume_scene();
    let c0 = occupied_cells(&scene, &state, 2) as f64;
    let mut worst = 0.0f64;
    let mut series = Vec::new();
    run(&scene, state, 10_000, |s| {
        if s.substep % 100 == 0 {
            let c = occupied_cells(&scene, s, 2) as f64;
            worst = worst.max((c - c0).abs() / c0);
            series.push(c);
        }
    })?;
    Ok(SuiteReport::new(
        Suite::Volume,
        worst <= 0.10,
        "count of cells holding >= 2 particles (half the seeding density) within ±10% of the initial count over 10000 substeps",
        vec![("initial_cells", c0), ("max_relative_deviation", worst)],
        series,
    ))
}

/// A light elastic block released at the bottom of a water pool.
pub fn buoyancy_scene() -> (Scene<2>, SimState<2>) {
    let cfg = SimConfig::new(48, 1.0, 4e-4);
    let mut spec = SceneSpec::new(cfg).with_preset("water");
    spec.materials.push(elastic("float", 0.5));
    let block = rect([0.5, 0.16], [0.06, 0.06]);
    spec.bodies.push(BodySpec::shape("float", "float", block.clone(), 4));
    spec.bodies.push(BodySpec::shape("water", "water", rect([0.5, 0.3], [0.42, 0.24]), 4));
    let (mut scene, mut state) = build_scene(&spec).expect("buoyancy scene");
    // carve the block out of the pool
    let keep: Vec<bool> = (0..state.particles.len())
        .map(|i| scene.info[i].body == 0 || block.sample(&state.particles[i].x).distance > 0.0)
        .collect();
    retain_particles(&mut scene, &mut state, &keep);
    (scene, state)
}

/// Removes particles with `keep[i] == false`, fixing body ranges.
pub fn retain_particles(scene: &mut Scene<2>, state: &mut SimState<2>, keep: &[bool]) {
    let mut info = Vec::new();
    let mut particles = Vec::new();
    for b in &mut scene.bodies {
        let start = info.len();
        for i in b.particles.clone() {
            if keep[i] {
                info.push(scene.info[i].clone());
                particles.push(state.particles[i]);
            }
        }
        b.particles = start..info.len();
    }
    scene.info = info;
    state.particles = particles;
}

fn buoyancy() -> Result<SuiteReport, SimError> {
    let (scene, state) = buoyancy_scene();
    // heights averaged over 250-substep blocks to filter pressure waves
    let block = 250;
    let mut heights = Vec::new();
    let mut acc = 0.0;
    run(&scene, state, 10 * block, |s| {
        acc += body_com(&scene, s, 0).0 .0[1];
        if s.substep % block == 0 {
            heights.push(acc / block as f64);
            acc = 0.0;
        }
    })?;
    // the first block covers the settling transient
    let tail = &heights[1..];
    let rising = tail.windows(2).all(|w| w[1] > w[0]);
    Ok(SuiteReport::new(
        Suite::Buoyancy,
        rising,
        "center-of-mass height, averaged over 250-substep blocks, strictly increasing after the first block",
        vec![("initial_height", heights[0]), ("final_height", *heights.last().unwrap())],
        heights,
    ))
}

fn gas_only(res: [usize; 2], cell: f64, dt: f64, gas: GasConfig<2>, effectors: Vec<EffectorSpec<2>>) -> (Scene<2>, SimState<2>) {
    let mut cfg = SimConfig::new(8, 1.0, dt);
    cfg.gravity = V2::zeros();
    let mut spec = SceneSpec::new(cfg);
    let mut g = gas;
    g.resolution = res;
    g.cell_size = cell;
    spec.gas = Some(g);
    spec.effectors = effectors;
    build_scene(&spec).expect("gas scene")
}

/// Hot plume from a moving heater with a solid paddle sweeping the room.
pub fn divergence_scene() -> (Scene<2>, SimState<2>) {
    let mut g = GasConfig::new([32, 32], 1.0 / 32.0);
    g.solve = ProjectionSolve::cg(400, 1e-6);
    g.beta_temp = 2.0;
    let mut heater = EffectorSpec::new("heater", CompoundSdf::single(disk([0.0, 0.0], 0.05)), Pose::from_translation(Vector([0.3, 0.2])));
    heater.contact = false;
    heater.gas_source = Some(GasSource { offset: V2::zeros(), radius: 0.08, strength: 0.5, temperature: Some(1.0), smoke: Some(1.0), velocity: None });
    heater.scripted_linear = Vector([0.2, 0.0]);
    let mut paddle = EffectorSpec::new("paddle", CompoundSdf::single(rect([0.0, 0.0], [0.02, 0.12])), Pose::from_translation(Vector([0.7, 0.6])));
    paddle.gas_solid = true;
    paddle.scripted_angular = [0.0, 0.0, 2.0];
    gas_only([32, 32], 1.0 / 32.0, 5e-3, g, vec![heater, paddle])
}

fn divergence() -> Result<SuiteReport, SimError> {
    let (scene, state) = divergence_scene();
    let cfg = scene.gas.clone().unwrap();
    let mut worst = 0.0f64;
    let mut series = Vec::new();
    run(&scene, state, 200, |s| {
        let d = s.gas.as_ref().unwrap().max_divergence(&cfg);
        worst = worst.max(d);
        if s.substep % 10 == 0 {
            series.push(d);
        }
    })?;
    Ok(SuiteReport::new(
        Suite::Divergence,
        worst <= 1e-4,
        "max post-projection divergence <= 1e-4 over 200 steps",
        vec![("max_divergence", worst)],
        series,
    ))
}

/// Channel flow past a fixed cylinder.
fn channel(spin: f64, offset: f64) -> (Scene<2>, SimState<2>, V2) {
    let u = 1.0;
    let (nx, ny) = (96, 48);
    let h = 1.0 / 48.0;
    let mut g = GasConfig::new([nx, ny], h);
    g.solve = ProjectionSolve::cg(2000, 1e-5);
    g.beta_temp = 0.0;
    g.wall_velocity = [[u, u], [0.0, 0.0]];
    g.initial_velocity = Vector([u, 0.0]);
    let center = Vector([0.45, 0.5 + offset]);
    let mut cyl = EffectorSpec::new("cylinder", CompoundSdf::single(disk([0.0, 0.0], 0.08)), Pose::from_translation(center));
    cyl.gas_solid = true;
    cyl.contact = false;
    cyl.scripted_angular = [0.0, 0.0, spin];
    let (s, st) = gas_only([nx, ny], h, 4e-3, g, vec![cyl]);
    (s, st, center)
}

fn probe(cfg: &GasConfig<2>, gas: &GasState<2>, x: V2) -> V2 {
    gas.velocity_at(cfg, &x)
}

/// Strongest nonzero frequency of a mean-removed series and its power share.
pub fn dominant_frequency(series: &[f64], sample_dt: f64) -> (f64, f64) {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = series.iter().map(|x| Complex::new(x - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let power: Vec<f64> = buf[1..n / 2].iter().map(|c| c.norm_sqr()).collect();
    let total: f64 = power.iter().sum();
    let (k, p) = power.iter().enumerate().fold((0, 0.0), |a, (i, p)| if *p > a.1 { (i, *p) } else { a });
    ((k + 1) as f64 / (n as f64 * sample_dt), if total > 0.0 { p / total } else { 0.0 })
}

fn karman() -> Result<SuiteReport, SimError> {
    // a slightly off-center cylinder breaks the symmetry
    let (scene, state, center) = channel(0.0, 0.01);
    let cfg = scene.gas.clone().unwrap();
    let dt = scene.config.dt;
    let at = center + Vector([0.35, 0.0]);
    let mut series = Vec::new();
    let warmup = 500;
    run(&scene, state, 3000, |s| {
        if s.substep > warmup {
            series.push(probe(&cfg, s.gas.as_ref().unwrap(), at).0[1]);
        }
    })?;
    let (freq, share) = dominant_frequency(&series, dt);
    let amp = series.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let strouhal = freq * 0.16 / 1.0;
    Ok(SuiteReport::new(
        Suite::Karman,
        freq > 0.0 && share >= 0.2 && amp > 1e-2,
        "wake cross-velocity has a dominant nonzero frequency holding >= 20% of the spectral power, amplitude > 0.01",
        vec![("frequency", freq), ("power_share", share), ("amplitude", amp), ("strouhal", strouhal)],
        series,
    ))
}

/// Mean cross-stream gas velocity in a box behind the cylinder.
fn wake_deflection(spin: f64) -> Result<f64, SimError> {
    let (scene, state, center) = channel(spin, 0.0);
    let cfg = scene.gas.clone().unwrap();
    let end = run(&scene, state, 400, |_| {})?;
    let gas = end.gas.as_ref().unwrap();
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..8 {
        for j in 0..8 {
            let x = center + Vector([0.12 + 0.03 * i as f64, -0.1 + 0.2 * j as f64 / 7.0]);
            sum += probe(&cfg, gas, x).0[1];
            n += 1.0;
        }
    }
    Ok(sum / n)
}

fn magnus() -> Result<SuiteReport, SimError> {
    let rates = [4.0, 8.0, 16.0];
    let mut measured = Vec::new();
    let mut series = Vec::new();
    let still = wake_deflection(0.0)?;
    // the body is pushed opposite to the deflected wake
    let mut ball = Vec::new();
    for (k, &w) in rates.iter().enumerate() {
        let plus = -(wake_deflection(w)? - still);
        let minus = -(wake_deflection(-w)? - still);
        series.push(plus);
        series.push(minus);
        ball.push((plus, minus));
        measured.push((["deflection_rate1", "deflection_rate2", "deflection_rate3"][k], plus));
    }
    // counter-clockwise spin in a +x stream is pushed toward -y
    let signs = ball.iter().all(|(p, m)| *p < 0.0 && *m > 0.0);
    let growing = ball.windows(2).all(|w| w[1].0.abs() > w[0].0.abs() && w[1].1.abs() > w[0].1.abs());
    measured.push(("no_spin_wake", still));
    Ok(SuiteReport::new(
        Suite::Magnus,
        signs && growing,
        "deflection sign follows spin sign and its magnitude grows over three spin rates",
        measured,
        series,
    ))
}

/// Two liquids with a perturbed interface; `heavy_on_top` picks the unstable case.
pub fn rayleigh_taylor_scene(heavy_on_top: bool) -> (Scene<2>, SimState<2>) {
    let cfg = SimConfig::new(48, 1.0, 4e-4);
    let mut spec = SceneSpec::new(cfg).with_preset("heavy_liquid").with_preset("light_liquid");
    let (top, bottom) = if heavy_on_top { ("heavy_liquid", "light_liquid") } else { ("light_liquid", "heavy_liquid") };
    let pool = rect([0.5, 0.35], [0.45, 0.3]);
    spec.bodies.push(BodySpec::shape("top", top, pool.clone(), 4));
    spec.bodies.push(BodySpec::shape("bottom", bottom, pool, 4));
    let (mut scene, mut state) = build_scene(&spec).expect("rayleigh-taylor scene");
    let n = scene.info.len() / 2;
    // single-mode perturbation of the interface at y = 0.35
    let interface = |x: f64| 0.35 + 0.01 * (2.0 * std::f64::consts::PI * (x - 0.05) / 0.45).cos();
    let keep: Vec<bool> = (0..state.particles.len())
        .map(|i| {
            let p = state.particles[i].x;
            let above = p.0[1] > interface(p.0[0]);
            if i < n {
                above
            } else {
                !above
            }
        })
        .collect();
    retain_particles(&mut scene, &mut state, &keep);
    (scene, state)
}

/// RMS vertical distance of the top body's lowest particles per column from the flat interface.
fn interface_deviation(scene: &Scene<2>, state: &SimState<2>) -> f64 {
    let bins = 16;
    let mut lowest = vec![f64::INFINITY; bins];
    for i in scene.bodies[0].particles.clone() {
        let x = state.particles[i].x;
        let b = (((x.0[0] - 0.05) / 0.9) * bins as f64).clamp(0.0, (bins - 1) as f64) as usize;
        lowest[b] = lowest[b].min(x.0[1]);
    }
    let finite: Vec<f64> = lowest.into_iter().filter(|v| v.is_finite()).collect();
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / finite.len() as f64).sqrt()
}

fn rayleigh_taylor() -> Result<SuiteReport, SimError> {
    let mut finals = [0.0; 2];
    let mut initial = 0.0;
    let mut series = Vec::new();
    for (k, heavy_on_top) in [true, false].into_iter().enumerate() {
        let (scene, state) = rayleigh_taylor_scene(heavy_on_top);
        if heavy_on_top {
            initial = interface_deviation(&scene, &state);
        }
        let end = run(&scene, state, 2500, |s| {
            if heavy_on_top && s.substep % 100 == 0 {
                series.push(interface_deviation(&scene, s));
            }
        })?;
        finals[k] = interface_deviation(&scene, &end);
    }
    Ok(SuiteReport::new(
        Suite::RayleighTaylor,
        finals[0] > 2.0 * initial && finals[0] > 2.0 * finals[1],
        "heavy-over-light interface deviation more than doubles and ends above twice the stable layering's",
        vec![("initial_deviation", initial), ("unstable_final", finals[0]), ("stable_final", finals[1])],
        series,
    ))
}

/// A water column released in the corner of the box.
pub fn dam_break_scene() -> (Scene<2>, SimState<2>) {
    let cfg = SimConfig::new(32, 1.0, 1e-3);
    let mut spec = SceneSpec::new(cfg).with_preset("water");
    spec.bodies.push(BodySpec::shape("water", "water", rect([0.16, 0.2], [0.1, 0.15]), 4));
    build_scene(&spec).expect("dam-break scene")
}

fn dam_break() -> Result<SuiteReport, SimError> {
    let (scene, state) = dam_break_scene();
    let mut peak = 0.0f64;
    let mut series = Vec::new();
    let mut finite = true;
    let end = run(&scene, state, 2000, |s| {
        let m = metrics(&scene, s);
        finite &= m.kinetic_energy.is_finite() && s.particles.iter().all(|p| p.x.is_finite() && p.v.is_finite());
        peak = peak.max(m.kinetic_energy);
        if s.substep % 20 == 0 {
            series.push(m.kinetic_energy);
        }
    })?;
    let last = metrics(&scene, &end).kinetic_energy;
    Ok(SuiteReport::new(
        Suite::DamBreak,
        finite && last < 0.1 * peak,
        "no NaN over 2000 substeps and final kinetic energy below 10% of its peak",
        vec![("peak_kinetic_energy", peak), ("final_kinetic_energy", last), ("ratio", last / peak)],
        series,
    ))
}

/// A plastic disk dropped on the floor; `theta` is its yield clamp.
pub fn bounce_scene(theta: f64) -> (Scene<2>, SimState<2>) {
    let cfg = SimConfig::new(32, 1.0, 4e-4);
    let mut spec = SceneSpec::new(cfg);
    let mut m = MaterialParams::new("ball", MaterialKind::Plastic, 416.67, 277.78, 1.0);
    m.yield_params = YieldParams { theta_c: theta, theta_s: theta, sigma_y: 1.0 };
    spec.materials.push(m);
    spec.bodies.push(BodySpec::shape("ball", "ball", disk([0.5, 0.4], 0.1), 4));
    build_scene(&spec).expect("bounce scene")
}

/// Largest kinetic energy after the ball first moves upward.
fn rebound_energy(theta: f64) -> Result<f64, SimError> {
    let (scene, state) = bounce_scene(theta);
    let mass = scene.total_mass();
    let mut rebounding = false;
    let mut best = 0.0f64;
    run(&scene, state, 2500, |s| {
        let (_, v) = body_com(&scene, s, 0);
        if v.0[1] > 0.0 {
            rebounding = true;
        }
        if rebounding {
            best = best.max(0.5 * mass * v.norm_squared());
        }
    })?;
    Ok(best)
}

fn bounce() -> Result<SuiteReport, SimError> {
    let thetas = [0.2, 0.05, 0.01];
    let energies = thetas.iter().map(|t| rebound_energy(*t)).collect::<Result<Vec<_>, _>>()?;
    let decreasing = energies.windows(2).all(|w| w[1] < w[0]);
    Ok(SuiteReport::new(
        Suite::Bounce,
        decreasing,
        "rebound kinetic energy strictly decreasing as the plastic clamp tightens (θ = 0.2, 0.05, 0.01)",
        vec![("loose", energies[0]), ("medium", energies[1]), ("tight", energies[2])],
        energies,
    ))
}
