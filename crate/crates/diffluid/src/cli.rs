//! Command implementations behind the `diffluid` binary.
//!
//! Exit codes: 0 pass, 1 check failure, 2 usage error, 3 engine error.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use diffluid_core::autodiff::{finite_difference_gradient, grad_trajectory, rollout_loss, GradReport};
use diffluid_core::checkpoint::CheckpointStore;
use diffluid_core::mpm::step;
use diffluid_core::objectives::reward_from_loss;
use diffluid_core::optimize::{cma_es_minimize, default_population, optimize_dp, optimize_dp_hard, ActionTrajectory, IterationRecord, OptimizeError};
use diffluid_core::SimError;
use serde::Serialize;

use crate::artifacts::{write_grad_table, write_json, write_snapshot, FrameWriter, HistoryWriter, MetricsWriter, RunManifest, Tagged};
use crate::scenefile::{load_scene, load_trajectory, trajectory_toml, LoadedScene, SceneFileError, METHODS};
use crate::validate::Suite;

/// Default output root when `--out` is absent.
pub const OUT_ENV: &str = "DIFFLUID_OUT";

/// Gradient checks fail above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "diffluid", version, about = "Differentiable multi-material fluid simulation")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: $DIFFLUID_OUT/<command>-<hash>, or ./runs/...).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Bit-reproducible engine mode.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scene forward and export frames and metrics.
    Simulate(SimulateArgs),
    /// Run validation suites and write JSON reports.
    Validate(ValidateArgs),
    /// Compare adjoint gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Optimize a scene's action trajectory.
    Optimize(OptimizeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Steps to run (each is `substeps_per_step` substeps). Defaults to the
    /// action horizon, or 100 without actions.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Trajectory file replacing the scene's `[actions]` block.
    #[arg(long)]
    pub actions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Suite name, or `all`.
    #[arg(default_value = "all")]
    pub suite: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// dp, dp-hard or cma-es (default: the scene's optimizer block).
    #[arg(long)]
    pub method: Option<String>,
    /// Iterations for dp and dp-hard, objective evaluations for cma-es.
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Scene { path: PathBuf, error: SceneFileError },
    Engine(String),
    Io(io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Scene { .. } => 2,
            CliError::Engine(_) | CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Scene { path, error } => write!(f, "{}: {error}", path.display()),
            CliError::Engine(m) => write!(f, "engine error: {m}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Engine(e.to_string())
    }
}

impl From<OptimizeError> for CliError {
    fn from(e: OptimizeError) -> Self {
        CliError::Engine(e.to_string())
    }
}

/// Whether the command's own check passed.
pub type Outcome = Result<bool, CliError>;

pub fn exit_code(outcome: &Outcome) -> i32 {
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => e.exit_code(),
    }
}

pub fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Validate(a) => validate(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
        Command::Optimize(a) => optimize(cli, a),
    }
}

fn read_scene(path: &Path, seed: Option<u64>) -> Result<(String, LoadedScene), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read scene {}: {e}", path.display())))?;
    let scene = load_scene(&text, seed).map_err(|error| CliError::Scene { path: path.into(), error })?;
    Ok((text, scene))
}

fn output_dir(cli: &Cli, command: &str, hash: &str) -> PathBuf {
    match &cli.out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            root.join(format!("{command}-{}", &hash[..12]))
        }
    }
}

/// Builds the manifest, picks the output directory and writes the manifest there.
fn start(cli: &Cli, command: &str, scene: Option<&Path>, seed: u64, inputs: &[(&str, String)]) -> Result<(RunManifest, PathBuf), CliError> {
    let probe = RunManifest::new(command, scene, seed, cli.deterministic, Path::new(""), inputs);
    let dir = output_dir(cli, command, &probe.config_hash);
    let manifest = RunManifest::new(command, scene, seed, cli.deterministic, &dir, inputs);
    manifest.write(&dir)?;
    Ok((manifest, dir))
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Outcome {
    let (text, loaded) = read_scene(&a.scene, cli.seed)?;
    let actions_text = match &a.actions {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read actions {}: {e}", p.display())))?),
        None => None,
    };
    let trajectory = match &actions_text {
        Some(t) => Some(load_trajectory(t).map_err(|error| CliError::Scene { path: a.actions.clone().unwrap_or_default(), error })?),
        None => loaded.actions.clone(),
    };
    let per_step = loaded.scene.config.substeps_per_step;
    let steps = a.steps.unwrap_or_else(|| trajectory.as_ref().map_or(100, |t| t.horizon().div_ceil(per_step)));
    let inputs = [("scene", text), ("steps", steps.to_string()), ("actions", actions_text.unwrap_or_default())];
    let (manifest, dir) = start(cli, "simulate", Some(&a.scene), loaded.seed, &inputs)?;
    let hash = &manifest.config_hash;

    let actions = trajectory.map(|t| t.expand()).unwrap_or_default();
    let frames = FrameWriter::new(&dir, hash)?;
    let mut metrics = MetricsWriter::new(&dir.join("metrics.csv"), hash)?;
    let scene = &loaded.scene;
    let mut state = loaded.initial.clone();
    metrics.write(0, scene, &state)?;
    for s in 1..=steps {
        for _ in 0..per_step {
            let act = actions.get(state.substep).copied().unwrap_or([0.0; 6]);
            state = match step(scene, &state, &act) {
                Ok(next) => next,
                Err(e) => {
                    metrics.finish()?;
                    return Err(e.into());
                }
            };
        }
        frames.write(s, scene, &state)?;
        metrics.write(s, scene, &state)?;
    }
    metrics.finish()?;
    write_snapshot(&dir.join("final_state.bin"), &state)?;
    println!("simulate: {steps} steps ({} substeps), {} particles -> {}", state.substep, state.particles.len(), dir.display());
    Ok(true)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    suite: &'a str,
    passed: bool,
    criterion: &'a str,
    measured: serde_json::Map<String, serde_json::Value>,
    series: &'a [f64],
}

fn validate(cli: &Cli, a: &ValidateArgs) -> Outcome {
    let suites: Vec<Suite> = if a.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![Suite::from_name(&a.suite).ok_or_else(|| {
            let known: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
            CliError::Usage(format!("unknown suite '{}' (known: all, {})", a.suite, known.join(", ")))
        })?]
    };
    let seed = cli.seed.unwrap_or(0);
    let (manifest, dir) = start(cli, "validate", None, seed, &[("suite", a.suite.clone())])?;
    let mut all = true;
    for s in suites {
        let r = s.run()?;
        let measured = r.measured.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect();
        let file = ReportFile { suite: s.name(), passed: r.passed, criterion: &r.criterion, measured, series: &r.series };
        write_json(&dir.join(format!("validate_{}.json", s.name())), &Tagged { manifest: &manifest.config_hash, value: file })?;
        let values: Vec<String> = r.measured.iter().map(|(k, v)| format!("{k}={v:.4e}")).collect();
        println!("{:<16} {}  {}  [{:.1}s]", s.name(), if r.passed { "PASS" } else { "FAIL" }, values.join(" "), r.wall_time);
        all &= r.passed;
    }
    Ok(all)
}

#[derive(Serialize)]
struct GradFile<'a> {
    loss: f64,
    gradient: &'a [f64],
    fd_gradient: Option<&'a [f64]>,
    max_rel_error: Option<f64>,
    eps: f64,
    tolerance: f64,
}

fn require_task(loaded: &LoadedScene) -> Result<(&diffluid_core::objectives::LossSpec<2>, &ActionTrajectory), CliError> {
    match (&loaded.loss, &loaded.actions) {
        (Some(l), Some(t)) => Ok((l, t)),
        _ => Err(CliError::Usage("the scene needs [[loss]] and [actions] blocks".into())),
    }
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Outcome {
    if !(a.eps > 0.0) {
        return Err(CliError::Usage("--eps must be positive".into()));
    }
    let (text, loaded) = read_scene(&a.scene, cli.seed)?;
    let (loss, traj) = require_task(&loaded)?;
    let (manifest, dir) = start(cli, "gradcheck", Some(&a.scene), loaded.seed, &[("scene", text), ("eps", a.eps.to_string())])?;
    let start_time = Instant::now();
    let scene = &loaded.scene;
    let mut store = CheckpointStore::new(16);
    let g = grad_trajectory(scene, &loaded.initial, &traj.expand(), loss, &mut store)?;
    let adjoint = traj.reduce_gradient(&g.gradient);
    let fd = finite_difference_gradient(
        |p| {
            let mut t = traj.clone();
            t.set_params(p);
            rollout_loss(scene, &loaded.initial, &t.expand(), loss).map(|(l, _)| l)
        },
        &traj.params(),
        a.eps,
    )?;
    let mut report = GradReport::new(g.loss, adjoint, Some(fd));
    report.wall_time = start_time.elapsed().as_secs_f64();
    let fd = report.fd_gradient.as_deref().unwrap_or(&[]);
    write_grad_table(&dir.join("gradcheck.csv"), &manifest.config_hash, &report.gradient, fd)?;
    let file = GradFile {
        loss: report.loss,
        gradient: &report.gradient,
        fd_gradient: report.fd_gradient.as_deref(),
        max_rel_error: report.max_rel_error,
        eps: a.eps,
        tolerance: GRADCHECK_TOLERANCE,
    };
    write_json(&dir.join("gradreport.json"), &Tagged { manifest: &manifest.config_hash, value: file })?;
    let err = report.max_rel_error.unwrap_or(f64::INFINITY);
    let passed = err <= GRADCHECK_TOLERANCE;
    println!(
        "gradcheck: {} parameters, loss {:.6e}, max_rel_error {err:.3e} ({}) [{:.1}s]",
        report.gradient.len(),
        report.loss,
        if passed { "PASS" } else { "FAIL" },
        report.wall_time
    );
    Ok(passed)
}

#[derive(Serialize)]
struct OptimizeFile<'a> {
    method: &'a str,
    budget: usize,
    initial_loss: f64,
    final_loss: f64,
    reward: f64,
    c1: f64,
    c2: f64,
    iterations: usize,
    aborted: bool,
}

fn optimize(cli: &Cli, a: &OptimizeArgs) -> Outcome {
    let (text, loaded) = read_scene(&a.scene, cli.seed)?;
    let (loss, init) = require_task(&loaded)?;
    let settings = loaded.optimizer.clone().ok_or_else(|| CliError::Usage("the scene has no optimizer settings".into()))?;
    let method = a.method.clone().unwrap_or_else(|| settings.method.clone());
    if !METHODS.contains(&method.as_str()) {
        return Err(CliError::Usage(format!("unknown method '{method}' (known: {})", METHODS.join(", "))));
    }
    let budget = a.budget.unwrap_or(match method.as_str() {
        "cma-es" => 1000,
        _ => settings.dp.config.iterations,
    });
    if budget == 0 {
        return Err(CliError::Usage("--budget must be positive".into()));
    }
    let inputs = [("scene", text), ("method", method.clone()), ("budget", budget.to_string())];
    let (manifest, dir) = start(cli, "optimize", Some(&a.scene), loaded.seed, &inputs)?;
    let hash = &manifest.config_hash;
    let scene = &loaded.scene;
    let initial = &loaded.initial;
    let initial_loss = rollout_loss(scene, initial, &init.expand(), loss)?.0;
    let mut history = HistoryWriter::new(&dir.join("history.csv"), hash)?;
    let clock = Instant::now();
    let mut write_error = None;

    let (best, best_loss, iterations, aborted) = match method.as_str() {
        "dp" | "dp-hard" => {
            let mut cfg = settings.dp.config.clone();
            cfg.iterations = budget;
            let mut on_iteration = |r: &IterationRecord| {
                if let Err(e) = history.record(r, clock.elapsed().as_secs_f64()) {
                    write_error.get_or_insert(e);
                }
            };
            let result = if method == "dp" {
                let dp_loss = loaded.dp_loss().expect("task has a loss");
                optimize_dp(scene, initial, &dp_loss, init, settings.dp.schedule.clone(), &cfg, &mut on_iteration)
            } else {
                optimize_dp_hard(scene, initial, loss, init, &cfg, &mut on_iteration)
            }?;
            (result.best, result.best_loss, result.history.len(), result.aborted)
        }
        _ => {
            let x0 = init.params();
            let lambda = settings.population.unwrap_or_else(|| default_population(x0.len()));
            let eval = |xs: &[Vec<f64>]| -> Vec<f64> {
                xs.iter()
                    .map(|x| {
                        let mut t = init.clone();
                        t.set_params(x);
                        rollout_loss(scene, initial, &t.expand(), loss).map_or(f64::NAN, |(l, _)| l)
                    })
                    .collect()
            };
            let r = cma_es_minimize(eval, &x0, settings.sigma0, lambda, budget, loaded.seed)?;
            for g in &r.history {
                if let Err(e) = history.write(g.generation, init.horizon(), g.best, f64::NAN, clock.elapsed().as_secs_f64()) {
                    write_error.get_or_insert(e);
                }
            }
            let mut best = init.clone();
            best.set_params(&r.x_best);
            (best, r.f_best, r.history.len(), false)
        }
    };
    if let Some(e) = write_error {
        return Err(e.into());
    }
    fs::write(dir.join("trajectory.toml"), trajectory_toml(&best))?;
    let reward = reward_from_loss(best_loss, loaded.reward.c1, loaded.reward.c2);
    let file = OptimizeFile {
        method: &method,
        budget,
        initial_loss,
        final_loss: best_loss,
        reward,
        c1: loaded.reward.c1,
        c2: loaded.reward.c2,
        iterations,
        aborted,
    };
    write_json(&dir.join("result.json"), &Tagged { manifest: hash, value: file })?;
    println!(
        "optimize {method}: loss {initial_loss:.6e} -> {best_loss:.6e}, reward {reward:.6e}, {iterations} iterations{} [{:.1}s]",
        if aborted { " (aborted: diverging)" } else { "" },
        clock.elapsed().as_secs_f64()
    );
    Ok(!aborted)
}
