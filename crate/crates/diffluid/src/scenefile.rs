//! TOML scene files for 2D scenes.
//!
//! A file either names a built-in task (`task = "toy_pouring"`) or spells out
//! a scene block by block. Vectors are `[x, y]` arrays; 2D action values are
//! `[vx, vy, omega]` triples. A minimal scene:
//!
//! ```toml
//! [sim]
//! grid_resolution = 32
//! dt = 1e-3
//!
//! [[materials]]
//! preset = "water"
//!
//! [[bodies]]
//! name = "column"
//! material = "water"
//! shape = { type = "box", center = [0.2, 0.25], half_extents = [0.1, 0.15] }
//! ```
//!
//! Optional blocks: `[[effectors]]` (with `[[effectors.parts]]` shapes and an
//! optional `[effectors.gas_source]`), `[gas]`, `[[loss]]`, `[actions]`,
//! `[optimizer]` and `[reward]`. Unknown keys are rejected.

use std::fmt;

use diffluid_core::gas::{GasConfig, GasSource, ProjectionSolve};
use diffluid_core::linalg::rotation_exp;
use diffluid_core::materials::{MaterialKind, MaterialParams};
use diffluid_core::objectives::{LossSpec, LossTerm, Room, Schedule, SensorLayout};
use diffluid_core::optimize::{ActionTrajectory, DpConfig, ExpandSchedule};
use diffluid_core::scene::{build_scene, BodySource, BodySpec, ContactModel, EffectorSpec, EmitterSpec, Scene, SceneSpec, SimConfig, SimState};
use diffluid_core::sdf::{CompoundSdf, Pose, SdfPrimitive, Shape};
use diffluid_core::Vector;
use serde::{Deserialize, Serialize};

use crate::tasks::{self, DpSettings};

type V2 = Vector<2>;

/// Parse or validation failure, located by line (when known) and field path.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFileError {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl SceneFileError {
    fn at(field: impl Into<String>, message: impl Into<String>) -> Self {
        SceneFileError { line: None, field: field.into(), message: message.into() }
    }
}

impl fmt::Display for SceneFileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: ")?,
            None => {}
        }
        if !self.field.is_empty() {
            write!(f, "{}: ", self.field)?;
        }
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for SceneFileError {}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    /// Name of a built-in task; excludes the scene blocks.
    pub task: Option<String>,
    pub seed: Option<u64>,
    pub sim: Option<SimBlock>,
    #[serde(default)]
    pub materials: Vec<MaterialBlock>,
    #[serde(default)]
    pub bodies: Vec<BodyBlock>,
    #[serde(default)]
    pub effectors: Vec<EffectorBlock>,
    pub gas: Option<GasBlock>,
    #[serde(default)]
    pub loss: Vec<LossBlock>,
    pub actions: Option<ActionsBlock>,
    pub optimizer: Option<OptimizerBlock>,
    pub reward: Option<RewardBlock>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    pub grid_resolution: usize,
    pub dt: f64,
    #[serde(default = "one")]
    pub domain_size: f64,
    pub domain_min: Option<[f64; 2]>,
    pub substeps_per_step: Option<usize>,
    pub gravity: Option<[f64; 2]>,
    /// `"soft"` (default) or `"hard"`.
    pub contact: Option<String>,
    pub contact_threshold: Option<f64>,
    pub cfl_factor: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialBlock {
    pub preset: Option<String>,
    pub name: Option<String>,
    pub kind: Option<String>,
    pub mu: Option<f64>,
    pub lambda: Option<f64>,
    pub rho: Option<f64>,
    pub theta_c: Option<f64>,
    pub theta_s: Option<f64>,
    pub sigma_y: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeBlock {
    Box {
        #[serde(default)]
        center: [f64; 2],
        half_extents: [f64; 2],
        #[serde(default)]
        angle: f64,
    },
    Sphere {
        #[serde(default)]
        center: [f64; 2],
        radius: f64,
    },
    Capsule {
        #[serde(default)]
        center: [f64; 2],
        a: [f64; 2],
        b: [f64; 2],
        radius: f64,
        #[serde(default)]
        angle: f64,
    },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EmitterBlock {
    pub effector: String,
    #[serde(default)]
    pub start_substep: usize,
    pub interval: usize,
    pub batches: usize,
    pub offsets: Vec<[f64; 2]>,
    pub exit_velocity: [f64; 2],
    pub volume: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BodyBlock {
    pub name: String,
    pub material: String,
    pub shape: Option<ShapeBlock>,
    pub emitter: Option<EmitterBlock>,
    #[serde(default = "four")]
    pub particles_per_cell: usize,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
}

fn four() -> usize {
    4
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GasSourceBlock {
    #[serde(default)]
    pub offset: [f64; 2],
    pub radius: f64,
    pub strength: f64,
    pub temperature: Option<f64>,
    pub smoke: Option<f64>,
    pub velocity: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EffectorBlock {
    pub name: String,
    pub parts: Vec<ShapeBlock>,
    #[serde(default)]
    pub position: [f64; 2],
    #[serde(default)]
    pub angle: f64,
    #[serde(default)]
    pub friction: f64,
    #[serde(default = "yes")]
    pub contact: bool,
    #[serde(default)]
    pub gas_solid: bool,
    /// `[vx, vy, omega]` components that follow the actions.
    #[serde(default = "planar")]
    pub action_mask: [bool; 3],
    #[serde(default)]
    pub scripted_velocity: [f64; 2],
    #[serde(default)]
    pub scripted_angular: f64,
    pub gas_source: Option<GasSourceBlock>,
}

fn yes() -> bool {
    true
}

fn planar() -> [bool; 3] {
    [true; 3]
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GasBlock {
    pub resolution: [usize; 2],
    pub cell_size: f64,
    #[serde(default)]
    pub origin: [f64; 2],
    #[serde(default)]
    pub ambient_temperature: f64,
    #[serde(default)]
    pub kappa_smoke: f64,
    #[serde(default = "one")]
    pub beta_temp: f64,
    #[serde(default)]
    pub wall_velocity: [[f64; 2]; 2],
    #[serde(default)]
    pub impact_strength: f64,
    /// `"jacobi"` (default) or `"cg"`.
    pub solver: Option<String>,
    pub iterations: Option<usize>,
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub initial_velocity: [f64; 2],
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RoomBlock {
    /// `upper_left`, `right` or `lower_left`.
    pub room: String,
    pub min: [f64; 2],
    pub max: [f64; 2],
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GoalBlock {
    pub index: usize,
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LossBlock {
    /// `target_point`, `rest_anchor`, `mixing_spread`, `chamfer`, `air_sensors` or `attraction`.
    pub kind: String,
    #[serde(default = "one")]
    pub weight: f64,
    pub body: Option<String>,
    pub goal: Option<[f64; 2]>,
    #[serde(default)]
    pub goals: Vec<GoalBlock>,
    /// Evaluate every n-th state; the final state when absent.
    pub every: Option<usize>,
    pub at: Option<Vec<usize>>,
    #[serde(default)]
    pub rooms: Vec<RoomBlock>,
    pub t_cool: Option<f64>,
    pub t_warm: Option<f64>,
    pub radius: Option<f64>,
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ActionsBlock {
    pub segments: usize,
    pub segment_length: usize,
    #[serde(default = "two")]
    pub bound: f64,
    #[serde(default = "six")]
    pub angular_bound: f64,
    #[serde(default = "planar")]
    pub mask: [bool; 3],
    /// One `[vx, vy, omega]` per segment; zeros when empty.
    #[serde(default)]
    pub values: Vec<[f64; 3]>,
}

fn two() -> f64 {
    2.0
}

fn six() -> f64 {
    6.0
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerBlock {
    pub method: Option<String>,
    pub iterations: Option<usize>,
    pub step_size: Option<f64>,
    pub checkpoint_stride: Option<usize>,
    /// Weight of the attraction term added for `dp`; 0 disables it.
    pub attraction_weight: Option<f64>,
    pub attraction_body: Option<String>,
    pub initial_window: Option<usize>,
    pub growth_factor: Option<f64>,
    pub patience: Option<usize>,
    pub improvement_threshold: Option<f64>,
    pub sigma0: Option<f64>,
    pub population: Option<usize>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RewardBlock {
    pub c1: f64,
    pub c2: f64,
}

impl Default for RewardBlock {
    fn default() -> Self {
        RewardBlock { c1: 0.0, c2: 1.0 }
    }
}

/// Optimizer settings with defaults filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSettings {
    pub method: String,
    pub dp: DpSettings,
    pub sigma0: f64,
    pub population: Option<usize>,
}

/// A scene ready to run.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub name: String,
    pub seed: u64,
    pub scene: Scene<2>,
    pub initial: SimState<2>,
    pub loss: Option<LossSpec<2>>,
    pub actions: Option<ActionTrajectory>,
    pub optimizer: Option<OptimizerSettings>,
    pub reward: RewardBlock,
}

impl LoadedScene {
    /// The task loss plus the attraction term used by `dp`, if enabled.
    pub fn dp_loss(&self) -> Option<LossSpec<2>> {
        let loss = self.loss.clone()?;
        let o = self.optimizer.as_ref()?;
        if o.dp.attraction_weight > 0.0 {
            Some(loss.with(o.dp.attraction_weight, LossTerm::attraction(&self.scene, o.dp.attraction_body, Schedule::Final)))
        } else {
            Some(loss)
        }
    }
}

fn v(a: [f64; 2]) -> V2 {
    Vector(a)
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Parses TOML into the raw schema; syntax and type errors carry a line.
pub fn parse_scene_file(source: &str) -> Result<SceneFile, SceneFileError> {
    toml::from_str(source).map_err(|e: toml::de::Error| {
        let line = e.span().map(|s| line_of(source, s.start));
        let field = match e.span() {
            Some(s) => {
                let text = &source[s.start..s.end.min(source.len())];
                text.lines().next().unwrap_or("").trim().chars().take(40).collect()
            }
            None => String::new(),
        };
        SceneFileError { line, field, message: e.message().trim().to_string() }
    })
}

/// Parses and builds a scene. `seed` overrides the file's seed.
pub fn load_scene(source: &str, seed: Option<u64>) -> Result<LoadedScene, SceneFileError> {
    let file = parse_scene_file(source)?;
    build_scene_file(&file, seed).map_err(|mut e| {
        if e.line.is_none() {
            e.line = locate(source, &e.field);
        }
        e
    })
}

/// Best-effort line of a field path such as `bodies[1].material`: the line
/// of the n-th `[[bodies]]` header, then the first `material` key after it.
fn locate(source: &str, field: &str) -> Option<usize> {
    let mut parts = field.split('.');
    let head = parts.next()?;
    let (table, index) = match head.split_once('[') {
        Some((t, rest)) => (t, rest.trim_end_matches(']').parse::<usize>().ok()?),
        None => (head, 0),
    };
    let headers = [format!("[[{table}]]"), format!("[{table}]")];
    let lines: Vec<&str> = source.lines().collect();
    let start = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| headers.iter().any(|h| l.trim() == h))
        .nth(index)
        .map(|(i, _)| i)?;
    if let Some(key) = parts.next() {
        let key = key.split('[').next().unwrap_or(key);
        for (i, l) in lines.iter().enumerate().skip(start + 1) {
            let t = l.trim();
            if t.starts_with("[[") && headers.iter().all(|h| !t.starts_with(&h[..h.len() - 1])) && !t.starts_with(&format!("[[{table}.")) {
                break;
            }
            if t.split('=').next().map(str::trim) == Some(key) {
                return Some(i + 1);
            }
        }
    }
    Some(start + 1)
}

pub fn build_scene_file(file: &SceneFile, seed_override: Option<u64>) -> Result<LoadedScene, SceneFileError> {
    let seed = seed_override.or(file.seed).unwrap_or(0);
    let reward = file.reward.unwrap_or_default();
    if !(reward.c2 > 0.0) {
        return Err(SceneFileError::at("reward.c2", "must be positive"));
    }
    if let Some(name) = &file.task {
        let scene_blocks = file.sim.is_some()
            || !file.materials.is_empty()
            || !file.bodies.is_empty()
            || !file.effectors.is_empty()
            || file.gas.is_some()
            || !file.loss.is_empty()
            || file.actions.is_some();
        if scene_blocks {
            return Err(SceneFileError::at("task", "a built-in task cannot be combined with scene blocks"));
        }
        let t = tasks::by_name(name, seed)
            .ok_or_else(|| SceneFileError::at("task", format!("unknown task '{name}' (known: {})", tasks::TASK_NAMES.join(", "))))?;
        let optimizer = Some(optimizer_settings(file.optimizer.as_ref(), t.dp_settings(), &[])?);
        return Ok(LoadedScene {
            name: t.name,
            seed,
            scene: t.scene,
            initial: t.initial,
            loss: Some(t.loss),
            actions: Some(t.init),
            optimizer,
            reward,
        });
    }

    let sim = file.sim.as_ref().ok_or_else(|| SceneFileError::at("sim", "missing [sim] block"))?;
    let mut spec = SceneSpec::new(sim_config(sim)?);
    spec.seed = seed;
    for (i, m) in file.materials.iter().enumerate() {
        spec.materials.push(material(m).map_err(|(f, msg)| SceneFileError::at(format!("materials[{i}].{f}"), msg))?);
    }
    let mut effector_names = Vec::new();
    for (i, e) in file.effectors.iter().enumerate() {
        spec.effectors.push(effector(e).map_err(|(f, msg)| SceneFileError::at(format!("effectors[{i}].{f}"), msg))?);
        effector_names.push(e.name.clone());
    }
    let mut body_names = Vec::new();
    for (i, b) in file.bodies.iter().enumerate() {
        if !spec.materials.iter().any(|m| m.name == b.material) {
            if MaterialParams::preset(&b.material).is_some() {
                spec = spec.with_preset(&b.material);
            } else {
                return Err(SceneFileError::at(format!("bodies[{i}].material"), format!("unknown material '{}'", b.material)));
            }
        }
        spec.bodies.push(body(b, &effector_names).map_err(|(f, msg)| SceneFileError::at(format!("bodies[{i}].{f}"), msg))?);
        body_names.push(b.name.clone());
    }
    if let Some(g) = &file.gas {
        spec.gas = Some(gas(g).map_err(|(f, msg)| SceneFileError::at(format!("gas.{f}"), msg))?);
    }
    let (scene, initial) = build_scene(&spec).map_err(|e| SceneFileError::at("", format!("{e}")))?;

    let loss = if file.loss.is_empty() {
        None
    } else {
        let mut terms = Vec::new();
        for (i, l) in file.loss.iter().enumerate() {
            let term = loss_term(l, &body_names, &scene).map_err(|(f, msg)| SceneFileError::at(format!("loss[{i}].{f}"), msg))?;
            terms.push((l.weight, term));
        }
        let mut it = terms.into_iter();
        let (w0, t0) = it.next().expect("non-empty");
        let mut spec = LossSpec::single(t0);
        spec.terms[0].weight = w0;
        for (w, t) in it {
            spec = spec.with(w, t);
        }
        spec.validate(&scene).map_err(|e| SceneFileError::at("loss", format!("{e}")))?;
        Some(spec)
    };
    let actions = match &file.actions {
        Some(a) => Some(trajectory(a).map_err(|(f, msg)| SceneFileError::at(format!("actions.{f}"), msg))?),
        None => None,
    };
    let optimizer = match (&actions, &file.optimizer) {
        (Some(a), o) => {
            let h = a.horizon();
            let base = DpSettings { config: DpConfig::new(200, 0.05), schedule: ExpandSchedule::new(h), attraction_weight: 0.1, attraction_body: 0 };
            Some(optimizer_settings(o.as_ref(), base, &body_names)?)
        }
        (None, Some(_)) => return Err(SceneFileError::at("optimizer", "an [actions] block is required to optimize")),
        (None, None) => None,
    };
    Ok(LoadedScene {
        name: "scene".into(),
        seed,
        scene,
        initial,
        loss,
        actions,
        optimizer,
        reward,
    })
}

type FieldResult<T> = Result<T, (&'static str, String)>;

fn positive(field: &'static str, x: f64) -> FieldResult<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err((field, format!("must be positive, got {x}")))
    }
}

fn sim_config(s: &SimBlock) -> Result<SimConfig<2>, SceneFileError> {
    let err = |f: &str, m: String| SceneFileError::at(format!("sim.{f}"), m);
    if s.grid_resolution < 4 {
        return Err(err("grid_resolution", "must be at least 4".into()));
    }
    positive("dt", s.dt).map_err(|(f, m)| err(f, m))?;
    positive("domain_size", s.domain_size).map_err(|(f, m)| err(f, m))?;
    let mut c = SimConfig::new(s.grid_resolution, s.domain_size, s.dt);
    if let Some(m) = s.domain_min {
        c.domain_min = v(m);
    }
    if let Some(n) = s.substeps_per_step {
        if n == 0 {
            return Err(err("substeps_per_step", "must be at least 1".into()));
        }
        c.substeps_per_step = n;
    }
    if let Some(g) = s.gravity {
        c.gravity = v(g);
    }
    let threshold = s.contact_threshold.unwrap_or(3.0);
    c.contact = match s.contact.as_deref() {
        None | Some("soft") => ContactModel::Soft { threshold: positive("contact_threshold", threshold).map_err(|(f, m)| err(f, m))? },
        Some("hard") => ContactModel::Hard,
        Some(other) => return Err(err("contact", format!("expected \"soft\" or \"hard\", got \"{other}\""))),
    };
    if let Some(f) = s.cfl_factor {
        c.cfl_factor = positive("cfl_factor", f).map_err(|(f, m)| err(f, m))?;
    }
    Ok(c)
}

fn material(m: &MaterialBlock) -> FieldResult<MaterialParams> {
    let mut p = match &m.preset {
        Some(name) => MaterialParams::preset(name).ok_or(("preset", format!("unknown preset '{name}'")))?,
        None => {
            let name = m.name.as_ref().ok_or(("name", "a custom material needs a name".to_string()))?;
            let kind = m.kind.as_ref().ok_or(("kind", "a custom material needs a kind".to_string()))?;
            let kind = MaterialKind::from_name(kind).ok_or(("kind", format!("unknown material kind '{kind}'")))?;
            MaterialParams::new(name, kind, 0.0, 0.0, 1.0)
        }
    };
    if let Some(n) = &m.name {
        p.name = n.clone();
    }
    if let Some(k) = &m.kind {
        p.kind = MaterialKind::from_name(k).ok_or(("kind", format!("unknown material kind '{k}'")))?;
    }
    p.mu = m.mu.unwrap_or(p.mu);
    p.lambda = m.lambda.unwrap_or(p.lambda);
    p.rho = m.rho.unwrap_or(p.rho);
    p.yield_params.theta_c = m.theta_c.unwrap_or(p.yield_params.theta_c);
    p.yield_params.theta_s = m.theta_s.unwrap_or(p.yield_params.theta_s);
    p.yield_params.sigma_y = m.sigma_y.unwrap_or(p.yield_params.sigma_y);
    p.validate().map_err(|e| ("", e))?;
    Ok(p)
}

fn rotated(center: [f64; 2], angle: f64) -> Pose<2> {
    Pose { translation: v(center), rotation: rotation_exp::<2>(&[0.0, 0.0, angle]) }
}

fn primitive(s: &ShapeBlock) -> FieldResult<SdfPrimitive<2>> {
    Ok(match s {
        ShapeBlock::Box { center, half_extents, angle } => {
            if half_extents.iter().any(|h| !(*h > 0.0)) {
                return Err(("half_extents", "must be positive".into()));
            }
            SdfPrimitive::new(Shape::Box { half_extents: v(*half_extents) }, rotated(*center, *angle))
        }
        ShapeBlock::Sphere { center, radius } => {
            SdfPrimitive::new(Shape::Sphere { radius: positive("radius", *radius)? }, Pose::from_translation(v(*center)))
        }
        ShapeBlock::Capsule { center, a, b, radius, angle } => SdfPrimitive::new(
            Shape::Capsule { a: v(*a), b: v(*b), radius: positive("radius", *radius)? },
            rotated(*center, *angle),
        ),
    })
}

fn mask6(m: [bool; 3]) -> [bool; 6] {
    [m[0], m[1], false, false, false, m[2]]
}

fn effector(e: &EffectorBlock) -> FieldResult<EffectorSpec<2>> {
    if e.parts.is_empty() {
        return Err(("parts", "an effector needs at least one shape".into()));
    }
    let parts = e.parts.iter().map(primitive).collect::<FieldResult<Vec<_>>>().map_err(|(_, m)| ("parts", m))?;
    let mut s = EffectorSpec::new(&e.name, CompoundSdf { parts }, rotated(e.position, e.angle));
    if !(e.friction >= 0.0) {
        return Err(("friction", "must be non-negative".into()));
    }
    s.friction = e.friction;
    s.contact = e.contact;
    s.gas_solid = e.gas_solid;
    s.action_mask = mask6(e.action_mask);
    s.scripted_linear = v(e.scripted_velocity);
    s.scripted_angular = [0.0, 0.0, e.scripted_angular];
    if let Some(g) = &e.gas_source {
        if !(g.strength > 0.0 && g.strength <= 1.0) {
            return Err(("gas_source.strength", "must be in (0, 1]".into()));
        }
        s.gas_source = Some(GasSource {
            offset: v(g.offset),
            radius: positive("gas_source.radius", g.radius)?,
            strength: g.strength,
            temperature: g.temperature,
            smoke: g.smoke,
            velocity: g.velocity.map(v),
        });
    }
    Ok(s)
}

fn body(b: &BodyBlock, effectors: &[String]) -> FieldResult<BodySpec<2>> {
    let source = match (&b.shape, &b.emitter) {
        (Some(s), None) => BodySource::Shape { shape: primitive(s).map_err(|(_, m)| ("shape", m))?, particles_per_cell: b.particles_per_cell, jitter: b.jitter },
        (None, Some(e)) => {
            let effector = effectors.iter().position(|n| *n == e.effector).ok_or(("emitter.effector", format!("unknown effector '{}'", e.effector)))?;
            BodySource::Emitter(EmitterSpec {
                effector,
                start_substep: e.start_substep,
                interval: e.interval,
                batches: e.batches,
                offsets: e.offsets.iter().copied().map(v).collect(),
                exit_velocity: v(e.exit_velocity),
                volume: positive("emitter.volume", e.volume)?,
            })
        }
        _ => return Err(("shape", "give exactly one of `shape` and `emitter`".into())),
    };
    Ok(BodySpec { name: b.name.clone(), material: b.material.clone(), source, velocity: v(b.velocity) })
}

fn gas(g: &GasBlock) -> FieldResult<GasConfig<2>> {
    let mut c = GasConfig::new(g.resolution, positive("cell_size", g.cell_size)?);
    c.origin = v(g.origin);
    c.ambient_temperature = g.ambient_temperature;
    c.kappa_smoke = g.kappa_smoke;
    c.beta_temp = g.beta_temp;
    c.wall_velocity = g.wall_velocity;
    c.impact_strength = g.impact_strength;
    c.initial_velocity = v(g.initial_velocity);
    c.solve = match g.solver.as_deref() {
        None | Some("jacobi") => ProjectionSolve::jacobi(g.iterations.unwrap_or(40)),
        Some("cg") => ProjectionSolve::cg(g.iterations.unwrap_or(500), g.tolerance.unwrap_or(1e-6)),
        Some(other) => return Err(("solver", format!("expected \"jacobi\" or \"cg\", got \"{other}\""))),
    };
    c.validate().map_err(|e| ("", format!("{e}")))?;
    Ok(c)
}

fn schedule(l: &LossBlock) -> FieldResult<Schedule> {
    match (l.every, &l.at) {
        (None, None) => Ok(Schedule::Final),
        (Some(0), None) => Err(("every", "must be at least 1".into())),
        (Some(n), None) => Ok(Schedule::Every(n)),
        (None, Some(at)) => Ok(Schedule::At(at.clone())),
        _ => Err(("every", "give at most one of `every` and `at`".into())),
    }
}

fn room(name: &str) -> Option<Room> {
    match name {
        "upper_left" => Some(Room::UpperLeft),
        "right" => Some(Room::Right),
        "lower_left" => Some(Room::LowerLeft),
        _ => None,
    }
}

fn loss_term(l: &LossBlock, bodies: &[String], scene: &Scene<2>) -> FieldResult<LossTerm<2>> {
    let body = || -> FieldResult<usize> {
        let name = l.body.as_ref().ok_or(("body", format!("`{}` needs a body", l.kind)))?;
        bodies.iter().position(|b| b == name).ok_or(("body", format!("unknown body '{name}'")))
    };
    let sched = schedule(l)?;
    Ok(match l.kind.as_str() {
        "target_point" => {
            let goal = l.goal.ok_or(("goal", "target_point needs a goal".to_string()))?;
            LossTerm::TargetPoint { body: body()?, goal: v(goal), schedule: sched }
        }
        "rest_anchor" => LossTerm::RestAnchor { body: body()?, schedule: sched },
        "mixing_spread" => LossTerm::MixingSpread { body: body()?, schedule: sched },
        "chamfer" => {
            if l.goals.is_empty() {
                return Err(("goals", "chamfer needs at least one goal set".into()));
            }
            LossTerm::TrajectoryChamfer {
                body: body()?,
                goals: l.goals.iter().map(|g| (g.index, g.points.iter().copied().map(v).collect())).collect(),
            }
        }
        "air_sensors" => {
            if l.rooms.len() != 3 {
                return Err(("rooms", format!("air_sensors needs exactly 3 rooms, got {}", l.rooms.len())));
            }
            let mut boxes = Vec::new();
            for r in &l.rooms {
                let which = room(&r.room).ok_or(("rooms", format!("unknown room '{}'", r.room)))?;
                boxes.push((which, v(r.min), v(r.max)));
            }
            let boxes: [_; 3] = boxes.try_into().expect("three rooms");
            let layout = SensorLayout::rooms(boxes, l.t_cool.unwrap_or(0.0), l.t_warm.unwrap_or(1.0));
            LossTerm::AirSensors { layout, schedule: sched }
        }
        "attraction" => {
            let mut t = LossTerm::attraction(scene, body()?, sched);
            if let LossTerm::Attraction { radius, tau, .. } = &mut t {
                if let Some(r) = l.radius {
                    *radius = positive("radius", r)?;
                }
                *tau = l.tau;
            }
            t
        }
        other => return Err(("kind", format!("unknown loss kind '{other}'"))),
    })
}

fn trajectory(a: &ActionsBlock) -> FieldResult<ActionTrajectory> {
    if a.segments == 0 || a.segment_length == 0 {
        return Err(("segments", "segments and segment_length must be at least 1".into()));
    }
    if !a.values.is_empty() && a.values.len() != a.segments {
        return Err(("values", format!("expected {} values, got {}", a.segments, a.values.len())));
    }
    let mut t = ActionTrajectory::constant(a.segments, a.segment_length, [0.0; 6], mask6(a.mask), positive("bound", a.bound)?);
    t.lower[5] = -positive("angular_bound", a.angular_bound)?;
    t.upper[5] = a.angular_bound;
    for (dst, src) in t.values.iter_mut().zip(&a.values) {
        *dst = [src[0], src[1], 0.0, 0.0, 0.0, src[2]];
    }
    Ok(t)
}

/// The `[actions]` block that reproduces a 2D trajectory.
pub fn actions_block(t: &ActionTrajectory) -> ActionsBlock {
    ActionsBlock {
        segments: t.n_segments(),
        segment_length: t.segment_length,
        bound: t.upper[0],
        angular_bound: t.upper[5],
        mask: [t.mask[0], t.mask[1], t.mask[5]],
        values: t.values.iter().map(|a| [a[0], a[1], a[5]]).collect(),
    }
}

/// Reads an `[actions]` block from a trajectory file.
pub fn load_trajectory(source: &str) -> Result<ActionTrajectory, SceneFileError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct TrajectoryFile {
        actions: ActionsBlock,
    }
    let f: TrajectoryFile = toml::from_str(source).map_err(|e: toml::de::Error| SceneFileError {
        line: e.span().map(|s| line_of(source, s.start)),
        field: "actions".into(),
        message: e.message().trim().to_string(),
    })?;
    trajectory(&f.actions).map_err(|(f, m)| SceneFileError::at(format!("actions.{f}"), m))
}

pub fn trajectory_toml(t: &ActionTrajectory) -> String {
    #[derive(Serialize)]
    struct TrajectoryFile {
        actions: ActionsBlock,
    }
    toml::to_string(&TrajectoryFile { actions: actions_block(t) }).expect("trajectory serializes")
}

/// Overrides `base` with the keys present in the `[optimizer]` block.
/// `bodies` names the scene's bodies; built-in tasks pass none.
fn optimizer_settings(o: Option<&OptimizerBlock>, base: DpSettings, bodies: &[String]) -> Result<OptimizerSettings, SceneFileError> {
    let d = OptimizerBlock::default();
    let o = o.unwrap_or(&d);
    let err = |f: &str, m: String| SceneFileError::at(format!("optimizer.{f}"), m);
    let method = o.method.clone().unwrap_or_else(|| "dp".into());
    if !METHODS.contains(&method.as_str()) {
        return Err(err("method", format!("unknown method '{method}' (known: {})", METHODS.join(", "))));
    }
    let mut dp = base;
    let horizon = dp.schedule.horizon;
    if let Some(n) = o.iterations {
        dp.config.iterations = n;
    }
    if let Some(lr) = o.step_size {
        dp.config.step_size = positive("step_size", lr).map_err(|(f, m)| err(f, m))?;
    }
    if let Some(s) = o.checkpoint_stride {
        if s == 0 {
            return Err(err("checkpoint_stride", "must be at least 1".into()));
        }
        dp.config.checkpoint_stride = s;
    }
    if let Some(w) = o.initial_window {
        if w == 0 || w > horizon {
            return Err(err("initial_window", format!("must be in 1..={horizon}")));
        }
        dp.schedule.window = w;
        dp.schedule.initial_window = w;
    }
    if let Some(g) = o.growth_factor {
        if !(g > 1.0) {
            return Err(err("growth_factor", "must exceed 1".into()));
        }
        dp.schedule.growth_factor = g;
    }
    if let Some(p) = o.patience {
        if p == 0 {
            return Err(err("patience", "must be at least 1".into()));
        }
        dp.schedule.patience = p;
    }
    dp.schedule.improvement_threshold = o.improvement_threshold.unwrap_or(dp.schedule.improvement_threshold);
    if let Some(w) = o.attraction_weight {
        if !(w >= 0.0) {
            return Err(err("attraction_weight", "must be non-negative".into()));
        }
        dp.attraction_weight = w;
    }
    if let Some(name) = &o.attraction_body {
        dp.attraction_body = bodies.iter().position(|b| b == name).ok_or_else(|| err("attraction_body", format!("unknown body '{name}'")))?;
    }
    let sigma0 = positive("sigma0", o.sigma0.unwrap_or(0.3)).map_err(|(f, m)| err(f, m))?;
    Ok(OptimizerSettings { method, dp, sigma0, population: o.population })
}

pub const METHODS: [&str; 3] = ["dp", "dp-hard", "cma-es"];
