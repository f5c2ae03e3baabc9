use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenes() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenes")
}

fn tmp(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("diffluid-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    d
}

fn diffluid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffluid")).current_dir(scenes()).env_remove("DIFFLUID_OUT").args(args).output().unwrap()
}

fn run_in(out: &Path, args: &[&str]) -> Output {
    let mut full = vec!["--deterministic", "--out", out.to_str().unwrap()];
    full.extend_from_slice(args);
    diffluid(&full)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Data rows of a CSV written by the CLI (manifest comment and header skipped).
fn rows(path: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# manifest "));
    lines.next().unwrap();
    lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect()
}

#[test]
fn empty_scene_writes_header_only_frames() {
    let out = tmp("empty");
    let o = run_in(&out, &["simulate", "--scene", "empty.toml", "--steps", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for s in 1..=10 {
        let f = out.join(format!("frames/frame_{s:05}.csv"));
        assert!(rows(&f).is_empty());
        assert!(out.join(format!("frames/frame_{s:05}.json")).exists());
    }
    assert!(!out.join("frames/frame_00011.csv").exists());
    assert_eq!(rows(&out.join("metrics.csv")).len(), 11);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["engine_mode"], "deterministic");
    fs::remove_dir_all(&out).unwrap();
}

#[test]
fn dam_break_stays_finite_and_reruns_identically() {
    let out = tmp("dam");
    let o = run_in(&out, &["simulate", "--scene", "dam_break.toml", "--steps", "200"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = rows(&out.join("metrics.csv"));
    assert_eq!(metrics.len(), 201);
    assert!(metrics.iter().flatten().all(|x| x.is_finite()));
    // mass is conserved
    assert!((metrics[200][3] - metrics[0][3]).abs() <= 1e-12 * metrics[0][3]);
    let last = rows(&out.join("frames/frame_00200.csv"));
    assert!(!last.is_empty() && last.iter().flatten().all(|x| x.is_finite()));

    let first = fs::read(out.join("frames/frame_00200.csv")).unwrap();
    let state = fs::read(out.join("final_state.bin")).unwrap();
    let o = run_in(&out, &["simulate", "--scene", "dam_break.toml", "--steps", "200"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(out.join("frames/frame_00200.csv")).unwrap(), first);
    assert_eq!(fs::read(out.join("final_state.bin")).unwrap(), state);
    fs::remove_dir_all(&out).unwrap();
}

#[test]
fn bad_scene_reports_line_and_exits_2() {
    let dir = tmp("bad");
    fs::create_dir_all(&dir).unwrap();
    let scene = dir.join("bad.toml");
    fs::write(&scene, "[sim]\ngrid_resolution = 16\ndt = 1e-3\nwobble = 1\n").unwrap();
    let o = run_in(&dir.join("out"), &["simulate", "--scene", scene.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
    assert!(!dir.join("out").exists());

    let o = run_in(&dir.join("out"), &["simulate", "--scene", "no_such_scene.toml"]);
    assert_eq!(code(&o), 2);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn usage_errors_exit_2() {
    let out = tmp("usage");
    assert_eq!(code(&run_in(&out, &["validate", "no_such_suite"])), 2);
    assert_eq!(code(&diffluid(&["frobnicate"])), 2);
    assert_eq!(code(&run_in(&out, &["optimize", "--scene", "toy_pouring.toml", "--method", "sgd"])), 2);
    assert_eq!(code(&run_in(&out, &["gradcheck", "--scene", "empty.toml"])), 2);
    assert_eq!(code(&diffluid(&["--help"])), 0);
    let _ = fs::remove_dir_all(&out);
}

#[test]
fn engine_failure_exits_3() {
    let dir = tmp("engine");
    fs::create_dir_all(&dir).unwrap();
    let scene = dir.join("crush.toml");
    // a stiff block thrown into the floor with a timestep far past stability
    fs::write(
        &scene,
        r#"
[sim]
grid_resolution = 16
dt = 0.05

[[materials]]
name = "stiff"
kind = "elastic"
mu = 1e7
lambda = 1e7
rho = 1.0

[[bodies]]
name = "block"
material = "stiff"
shape = { type = "box", center = [0.5, 0.5], half_extents = [0.2, 0.2] }
velocity = [0.0, -50.0]
"#,
    )
    .unwrap();
    let o = run_in(&dir.join("out"), &["simulate", "--scene", scene.to_str().unwrap(), "--steps", "50"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("engine error"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn gradcheck_free_particle_passes() {
    let out = tmp("grad");
    let o = run_in(&out, &["gradcheck", "--scene", "free_particle.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("gradreport.json")).unwrap()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() <= 1e-3);
    assert_eq!(report["manifest"].as_str().unwrap().len(), 64);
    assert_eq!(rows(&out.join("gradcheck.csv")).len(), 8);
    fs::remove_dir_all(&out).unwrap();
}

#[test]
fn optimize_then_replay_the_trajectory() {
    let out = tmp("opt");
    let o = run_in(&out, &["optimize", "--scene", "free_particle.toml", "--method", "dp", "--budget", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = rows(&out.join("history.csv"));
    assert_eq!(history.len(), 5);
    assert_eq!(history.iter().map(|r| r[0] as usize).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["method"], "dp");
    assert!(result["final_loss"].as_f64().unwrap() <= result["initial_loss"].as_f64().unwrap());

    let replay = out.join("replay");
    let traj = out.join("trajectory.toml");
    let o = run_in(&replay, &["simulate", "--scene", "free_particle.toml", "--actions", traj.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(replay.join("final_state.bin").exists());
    fs::remove_dir_all(&out).unwrap();
}

#[test]
fn cma_es_history_has_generation_rows() {
    let out = tmp("cma");
    let o = run_in(&out, &["--seed", "3", "optimize", "--scene", "free_particle.toml", "--method", "cma-es", "--budget", "40"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.lines().count() >= 3);
    assert!(history.lines().nth(2).unwrap().contains("NaN"));
    fs::remove_dir_all(&out).unwrap();
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let root = tmp("env");
    let o = Command::new(env!("CARGO_BIN_EXE_diffluid"))
        .current_dir(scenes())
        .env("DIFFLUID_OUT", &root)
        .args(["simulate", "--scene", "empty.toml", "--steps", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dirs: Vec<_> = fs::read_dir(&root).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].starts_with("simulate-") && dirs[0].len() == "simulate-".len() + 12, "{dirs:?}");
    fs::remove_dir_all(&root).unwrap();
}

#[test]
fn validate_writes_a_report_without_timing() {
    let out = tmp("validate");
    let o = run_in(&out, &["validate", "divergence"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("validate_divergence.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report.get("wall_time").is_none());
    fs::remove_dir_all(&out).unwrap();
}

#[test]
fn bundled_scenes_load_and_run() {
    let mut names: Vec<String> = fs::read_dir(scenes()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert!(names.len() >= 7, "{names:?}");
    for name in names {
        let out = tmp(&format!("bundled-{name}"));
        let o = run_in(&out, &["simulate", "--scene", &name, "--steps", "2"]);
        assert_eq!(code(&o), 0, "{name}: {}", stderr(&o));
        let _ = fs::remove_dir_all(&out);
    }
}
