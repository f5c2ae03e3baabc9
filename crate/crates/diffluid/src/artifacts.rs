//! Run artifacts: the manifest, frame tables, field sidecars, metric and
//! history series, and snapshot files.
//!
//! Every CSV starts with a `# manifest <hash>` comment line and every JSON
//! file carries a `manifest` field, so outputs can be traced to their run.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use diffluid_core::checkpoint::{decode_state, encode_state};
use diffluid_core::mpm::metrics;
use diffluid_core::optimize::IterationRecord;
use diffluid_core::scene::{Scene, SimState};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub scene_path: Option<String>,
    pub seed: u64,
    /// `deterministic` or `fast`.
    pub engine_mode: String,
    pub output_dir: String,
    pub engine_version: String,
    /// SHA-256 over everything that determines the outputs; the output
    /// directory is excluded so reruns elsewhere hash the same.
    pub config_hash: String,
}

impl RunManifest {
    /// `inputs` are the command's remaining settings and the scene text.
    pub fn new(command: &str, scene_path: Option<&Path>, seed: u64, deterministic: bool, output_dir: &Path, inputs: &[(&str, String)]) -> Self {
        let engine_mode = if deterministic { "deterministic" } else { "fast" };
        let mut h = Sha256::new();
        for (k, v) in [("command", command), ("engine_mode", engine_mode), ("engine_version", ENGINE_VERSION)] {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([0]);
        }
        h.update(seed.to_le_bytes());
        for (k, v) in inputs {
            h.update(k.as_bytes());
            h.update([0]);
            h.update((v.len() as u64).to_le_bytes());
            h.update(v.as_bytes());
        }
        let config_hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        RunManifest {
            command: command.into(),
            scene_path: scene_path.map(|p| p.display().to_string()),
            seed,
            engine_mode: engine_mode.into(),
            output_dir: output_dir.display().to_string(),
            engine_version: ENGINE_VERSION.into(),
            config_hash,
        }
    }

    /// Creates the output directory and writes `manifest.json`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("manifest.json"), self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    s.push('\n');
    fs::write(path, s)
}

/// JSON value tagged with the manifest hash.
#[derive(Serialize)]
pub struct Tagged<'a, T: Serialize> {
    pub manifest: &'a str,
    #[serde(flatten)]
    pub value: T,
}

fn csv_header(w: &mut impl Write, hash: &str, columns: &str) -> io::Result<()> {
    writeln!(w, "# manifest {hash}")?;
    writeln!(w, "{columns}")
}

/// `frames/frame_NNNNN.csv` (one row per active particle) and
/// `frames/frame_NNNNN.json` (gas field slices, empty without gas).
pub struct FrameWriter {
    dir: PathBuf,
    hash: String,
}

#[derive(Serialize)]
struct FieldSlices<'a> {
    step: usize,
    substep: usize,
    time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gas: Option<GasSlices<'a>>,
}

#[derive(Serialize)]
struct GasSlices<'a> {
    resolution: [usize; 2],
    cell_size: f64,
    origin: [f64; 2],
    smoke: &'a [f64],
    temperature: &'a [f64],
    /// Cell-centered velocity, row-major with x fastest.
    velocity_x: Vec<f64>,
    velocity_y: Vec<f64>,
}

impl FrameWriter {
    pub fn new(out: &Path, hash: &str) -> io::Result<Self> {
        let dir = out.join("frames");
        fs::create_dir_all(&dir)?;
        Ok(FrameWriter { dir, hash: hash.into() })
    }

    pub fn write(&self, step: usize, scene: &Scene<2>, state: &SimState<2>) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join(format!("frame_{step:05}.csv")))?);
        csv_header(&mut w, &self.hash, "particle,body,x,y,vx,vy")?;
        for (i, (p, info)) in state.particles.iter().zip(&scene.info).enumerate() {
            if !info.active_at(state.substep) {
                continue;
            }
            writeln!(w, "{i},{},{},{},{},{}", info.body, p.x.0[0], p.x.0[1], p.v.0[0], p.v.0[1])?;
        }
        w.flush()?;

        let gas = match (&scene.gas, &state.gas) {
            (Some(cfg), Some(g)) => {
                let [nx, ny] = cfg.resolution;
                let (fx, fy) = (cfg.faces(0), cfg.faces(1));
                let mut vx = Vec::with_capacity(nx * ny);
                let mut vy = Vec::with_capacity(nx * ny);
                for j in 0..ny {
                    for i in 0..nx {
                        vx.push(0.5 * (g.u[0][fx.index(&[i, j])] + g.u[0][fx.index(&[i + 1, j])]));
                        vy.push(0.5 * (g.u[1][fy.index(&[i, j])] + g.u[1][fy.index(&[i, j + 1])]));
                    }
                }
                Some(GasSlices {
                    resolution: cfg.resolution,
                    cell_size: cfg.cell_size,
                    origin: cfg.origin.0,
                    smoke: &g.smoke,
                    temperature: &g.temperature,
                    velocity_x: vx,
                    velocity_y: vy,
                })
            }
            _ => None,
        };
        let slices = FieldSlices { step, substep: state.substep, time: state.time, gas };
        write_json(&self.dir.join(format!("frame_{step:05}.json")), &Tagged { manifest: &self.hash, value: slices })
    }
}

/// `metrics.csv`: mass, momentum and kinetic energy per step.
pub struct MetricsWriter {
    w: BufWriter<File>,
}

impl MetricsWriter {
    pub fn new(path: &Path, hash: &str) -> io::Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        csv_header(&mut w, hash, "step,substep,time,mass,momentum_x,momentum_y,kinetic_energy,max_speed")?;
        Ok(MetricsWriter { w })
    }

    pub fn write(&mut self, step: usize, scene: &Scene<2>, state: &SimState<2>) -> io::Result<()> {
        let m = metrics(scene, state);
        writeln!(
            self.w,
            "{step},{},{},{},{},{},{},{}",
            state.substep, state.time, m.total_mass, m.momentum.0[0], m.momentum.0[1], m.kinetic_energy, m.max_speed
        )
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.w.flush()
    }
}

/// `history.csv`, flushed after every row so an aborted run keeps its prefix.
pub struct HistoryWriter {
    w: File,
}

impl HistoryWriter {
    pub fn new(path: &Path, hash: &str) -> io::Result<Self> {
        let mut w = File::create(path)?;
        csv_header(&mut w, hash, "iteration,window,loss,grad_norm,wall_time")?;
        Ok(HistoryWriter { w })
    }

    pub fn write(&mut self, iteration: usize, window: usize, loss: f64, grad_norm: f64, wall_time: f64) -> io::Result<()> {
        writeln!(self.w, "{iteration},{window},{loss},{grad_norm},{wall_time:.3}")
    }

    pub fn record(&mut self, r: &IterationRecord, wall_time: f64) -> io::Result<()> {
        self.write(r.iteration, r.window, r.loss, r.grad_norm, wall_time)
    }
}

/// `gradcheck.csv`: one row per parameter.
pub fn write_grad_table(path: &Path, hash: &str, adjoint: &[f64], fd: &[f64]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    csv_header(&mut w, hash, "param,adjoint,finite_difference,rel_error")?;
    for (i, (g, f)) in adjoint.iter().zip(fd).enumerate() {
        let rel = diffluid_core::autodiff::max_rel_error(&[*g], &[*f]);
        writeln!(w, "{i},{g},{f},{rel}")?;
    }
    w.flush()
}

/// Snapshot file: the versioned binary encoding of a 2D state.
pub fn write_snapshot(path: &Path, state: &SimState<2>) -> io::Result<()> {
    fs::write(path, encode_state(state))
}

pub fn read_snapshot(path: &Path) -> io::Result<SimState<2>> {
    let bytes = fs::read(path)?;
    decode_state(&bytes, 0).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{e:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("diffluid-artifacts-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        d
    }

    #[test]
    fn hash_ignores_output_dir_but_not_inputs() {
        let a = RunManifest::new("simulate", None, 1, true, Path::new("/a"), &[("scene", "x".into())]);
        let b = RunManifest::new("simulate", None, 1, true, Path::new("/b"), &[("scene", "x".into())]);
        let c = RunManifest::new("simulate", None, 2, true, Path::new("/a"), &[("scene", "x".into())]);
        let d = RunManifest::new("simulate", None, 1, true, Path::new("/a"), &[("scene", "y".into())]);
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, c.config_hash);
        assert_ne!(a.config_hash, d.config_hash);
        assert_eq!(a.config_hash.len(), 64);
    }

    #[test]
    fn snapshot_round_trips() {
        let t = crate::tasks::gas_heating(0);
        let d = tmp("snap");
        fs::create_dir_all(&d).unwrap();
        let p = d.join("s.bin");
        write_snapshot(&p, &t.initial).unwrap();
        assert_eq!(read_snapshot(&p).unwrap(), t.initial);
        fs::write(&p, b"nope").unwrap();
        assert!(read_snapshot(&p).is_err());
        fs::remove_dir_all(&d).unwrap();
    }
}
