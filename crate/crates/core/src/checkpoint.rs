//! Snapshot encoding and the strided checkpoint store.
//!
//! Snapshot layout (little endian): magic `DFSN`, format version `u32`,
//! dimension `u32`, substep `u64`, time `f64`, particle count `u64` followed by
//! `x, v, F, C` per particle, effector count `u64` followed by translation,
//! rotation, linear velocity and 3 angular components per effector, then a
//! gas flag byte and, if set, `D` face arrays, smoke, temperature (each a `u64`
//! length plus `f64`s) and the solid flags (`u64` length plus one byte each).

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::CheckpointError;
use crate::gas::GasState;
use crate::linalg::{Matrix, Vector};
use crate::scene::{EffectorState, Particle, SimState};
use crate::sdf::Pose;

const MAGIC: &[u8; 4] = b"DFSN";
pub const SNAPSHOT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vector<const D: usize>(&mut self, v: &Vector<D>) {
        for x in v.0 {
            self.f64(x);
        }
    }
    fn matrix<const D: usize>(&mut self, m: &Matrix<D>) {
        for row in m.0 {
            for x in row {
                self.f64(x);
            }
        }
    }
    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    index: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Corrupt { index: self.index, reason: "truncated snapshot" }),
        }
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize, CheckpointError> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() {
            return Err(CheckpointError::Corrupt { index: self.index, reason: "length exceeds snapshot size" });
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vector<const D: usize>(&mut self) -> Result<Vector<D>, CheckpointError> {
        let mut v = Vector::zeros();
        for k in 0..D {
            v.0[k] = self.f64()?;
        }
        Ok(v)
    }
    fn matrix<const D: usize>(&mut self) -> Result<Matrix<D>, CheckpointError> {
        let mut m = Matrix::zeros();
        for i in 0..D {
            for j in 0..D {
                m.0[i][j] = self.f64()?;
            }
        }
        Ok(m)
    }
    fn floats(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Serializes a state bit-exactly.
pub fn encode_state<const D: usize>(state: &SimState<D>) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(64 + state.particles.len() * (2 * D + 2 * D * D) * 8));
    w.0.extend_from_slice(MAGIC);
    w.u32(SNAPSHOT_VERSION);
    w.u32(D as u32);
    w.u64(state.substep as u64);
    w.f64(state.time);
    w.u64(state.particles.len() as u64);
    for p in &state.particles {
        w.vector(&p.x);
        w.vector(&p.v);
        w.matrix(&p.f);
        w.matrix(&p.c);
    }
    w.u64(state.effectors.len() as u64);
    for e in &state.effectors {
        w.vector(&e.pose.translation);
        w.matrix(&e.pose.rotation);
        w.vector(&e.linear_velocity);
        for a in e.angular_velocity {
            w.f64(a);
        }
    }
    match &state.gas {
        None => w.0.push(0),
        Some(g) => {
            w.0.push(1);
            for a in 0..D {
                w.floats(&g.u[a]);
            }
            w.floats(&g.smoke);
            w.floats(&g.temperature);
            w.u64(g.solid.len() as u64);
            w.0.extend(g.solid.iter().map(|b| *b as u8));
        }
    }
    w.0
}

/// Inverse of [`encode_state`]. `index` only labels errors.
pub fn decode_state<const D: usize>(bytes: &[u8], index: usize) -> Result<SimState<D>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0, index };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::Corrupt { index, reason: "bad magic" });
    }
    if r.u32()? != SNAPSHOT_VERSION {
        return Err(CheckpointError::Corrupt { index, reason: "unsupported snapshot version" });
    }
    if r.u32()? as usize != D {
        return Err(CheckpointError::Corrupt { index, reason: "dimension mismatch" });
    }
    let substep = r.u64()? as usize;
    let time = r.f64()?;
    let n = r.len()?;
    let mut particles = Vec::with_capacity(n);
    for _ in 0..n {
        particles.push(Particle { x: r.vector()?, v: r.vector()?, f: r.matrix()?, c: r.matrix()? });
    }
    let ne = r.len()?;
    let mut effectors = Vec::with_capacity(ne);
    for _ in 0..ne {
        let translation = r.vector()?;
        let rotation = r.matrix()?;
        let linear_velocity = r.vector()?;
        let angular_velocity = [r.f64()?, r.f64()?, r.f64()?];
        effectors.push(EffectorState { pose: Pose { translation, rotation }, linear_velocity, angular_velocity });
    }
    let gas = match r.take(1)?[0] {
        0 => None,
        1 => {
            let mut u: [Vec<f64>; D] = core::array::from_fn(|_| Vec::new());
            for f in u.iter_mut() {
                *f = r.floats()?;
            }
            let smoke = r.floats()?;
            let temperature = r.floats()?;
            let ns = r.len()?;
            let solid = r.take(ns)?.iter().map(|b| *b != 0).collect();
            Some(GasState { u, smoke, temperature, solid })
        }
        _ => return Err(CheckpointError::Corrupt { index, reason: "bad gas flag" }),
    };
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt { index, reason: "trailing bytes" });
    }
    Ok(SimState { substep, time, particles, effectors, gas })
}

/// Strided snapshots of a trajectory, held as encoded bytes.
#[derive(Clone, Debug, Default)]
pub struct CheckpointStore {
    stride: usize,
    snapshots: BTreeMap<usize, Vec<u8>>,
}

impl CheckpointStore {
    pub fn new(stride: usize) -> Self {
        CheckpointStore { stride: stride.max(1), snapshots: BTreeMap::new() }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Number of snapshots a horizon of `t` substeps retains.
    pub fn expected_count(t: usize, stride: usize) -> usize {
        t.div_ceil(stride) + 1
    }

    /// Saves `state` as trajectory index `index`, which must be a multiple of
    /// the stride or the final index `horizon`.
    pub fn save<const D: usize>(&mut self, index: usize, state: &SimState<D>, horizon: usize) -> Result<(), CheckpointError> {
        if index % self.stride != 0 && index != horizon {
            return Err(CheckpointError::Misaligned { index, stride: self.stride });
        }
        self.snapshots.insert(index, encode_state(state));
        Ok(())
    }

    pub fn restore<const D: usize>(&self, index: usize) -> Result<SimState<D>, CheckpointError> {
        let bytes = self.snapshots.get(&index).ok_or(CheckpointError::Missing { index })?;
        decode_state(bytes, index)
    }

    /// Latest saved index at or before `index`.
    pub fn latest_at_or_before(&self, index: usize) -> Option<usize> {
        self.snapshots.range(..=index).next_back().map(|(k, _)| *k)
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.snapshots.keys().copied()
    }

    pub fn clear(&mut self) {
        self.snapshots.clear();
    }
}
