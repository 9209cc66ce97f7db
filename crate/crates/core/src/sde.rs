//! SDE systems with polynomial drift and diagonal noise, simulated with the
//! explicit Euler–Maruyama scheme.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{self, purpose, RngStream, StableParams};

pub const MAX_DIM: usize = 3;

/// Default internal step of the simulator.
pub const DEFAULT_DT_SIM: f64 = 1e-3;

/// `coef * x1^p1 * x2^p2 * x3^p3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub powers: [u8; MAX_DIM],
}

impl Monomial {
    pub const fn new(coef: f64, powers: [u8; MAX_DIM]) -> Self {
        Self { coef, powers }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let mut v = self.coef;
        for (xi, &p) in x.iter().zip(&self.powers) {
            v *= xi.powi(p as i32);
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseKind {
    Brownian,
    Stable { alpha: StableParams },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Increment enters as `scale * dW`.
    Additive,
    /// Increment enters as `scale * x_i * dW` (left-point evaluation).
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseTerm {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub coupling: Coupling,
    pub scale: f64,
}

impl NoiseTerm {
    pub fn brownian(scale: f64) -> Self {
        Self {
            kind: NoiseKind::Brownian,
            coupling: Coupling::Additive,
            scale,
        }
    }

    pub fn stable(alpha: StableParams, coupling: Coupling) -> Self {
        Self {
            kind: NoiseKind::Stable { alpha },
            coupling,
            scale: 1.0,
        }
    }
}

/// Drift polynomial per component plus a diagonal noise specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeSystem {
    pub key: String,
    pub dim: usize,
    pub drift: Vec<Vec<Monomial>>,
    pub noise: Vec<NoiseTerm>,
}

/// Keys of the built-in catalog.
pub const BUILTIN_KEYS: [&str; 5] = ["ex1", "ex2", "ex3", "ex4", "ex5"];

const X1: [u8; 3] = [1, 0, 0];
const X2: [u8; 3] = [0, 1, 0];
const X1_CUBED: [u8; 3] = [3, 0, 0];
const X2_CUBED: [u8; 3] = [0, 3, 0];
const X1X2: [u8; 3] = [1, 1, 0];
const X1X3: [u8; 3] = [1, 0, 1];

fn m(coef: f64, powers: [u8; 3]) -> Monomial {
    Monomial::new(coef, powers)
}

impl SdeSystem {
    pub fn new(key: impl Into<String>, drift: Vec<Vec<Monomial>>, noise: Vec<NoiseTerm>) -> Result<Self> {
        let dim = drift.len();
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::invalid(format!("system dimension must be 1..={MAX_DIM}, got {dim}")));
        }
        if noise.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: noise.len() });
        }
        if noise.iter().any(|n| !n.scale.is_finite()) {
            return Err(Error::invalid("noise scale must be finite"));
        }
        Ok(Self { key: key.into(), dim, drift, noise })
    }

    /// One of the five reference systems, `"ex1"` .. `"ex5"`.
    pub fn builtin(key: &str) -> Result<Self> {
        let alpha = StableParams::new(1.5)?;
        let levy_mult = NoiseTerm::stable(alpha, Coupling::Linear);
        let levy_add = NoiseTerm::stable(alpha, Coupling::Additive);
        let bm = NoiseTerm::brownian(1.0);
        let ex4_drift = vec![vec![m(4.0, X1), m(-1.0, X1_CUBED)], vec![m(-1.0, X1X2)]];
        let (drift, noise) = match key {
            "ex1" => (ex4_drift, vec![levy_mult; 2]),
            "ex2" => (
                vec![
                    vec![m(4.0, X1), m(-1.0, X1_CUBED)],
                    vec![m(-1.0, X1X2)],
                    vec![m(1.0, X1X3)],
                ],
                vec![levy_mult; 3],
            ),
            "ex3" => (
                vec![
                    vec![m(8.0, X1), m(-1.0, X1_CUBED)],
                    vec![m(8.0, X2), m(-1.0, X2_CUBED)],
                ],
                vec![bm; 2],
            ),
            "ex4" => (ex4_drift, vec![bm; 2]),
            "ex5" => (
                vec![
                    vec![m(1.0, X1), m(-1.0, X1_CUBED)],
                    vec![m(1.0, X2), m(-1.0, X2_CUBED)],
                ],
                vec![levy_add; 2],
            ),
            other => return Err(Error::invalid(format!("unknown system {other:?}"))),
        };
        Self::new(key, drift, noise)
    }

    /// Initial law used with this built-in system by default.
    pub fn default_initial_law(&self) -> InitialLaw {
        match self.key.as_str() {
            "ex4" | "ex5" => InitialLaw::ScaledNormal { c: 0.5 },
            _ => InitialLaw::StandardNormal,
        }
    }

    pub fn is_brownian(&self) -> bool {
        self.noise.iter().all(|n| matches!(n.kind, NoiseKind::Brownian))
    }

    /// Same system with every noise coefficient multiplied by `factor`.
    pub fn with_noise_scaled(mut self, factor: f64) -> Self {
        for n in &mut self.noise {
            n.scale *= factor;
        }
        self
    }

    pub fn drift_eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.drift_into(x, &mut out);
        out
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, terms) in out.iter_mut().zip(&self.drift) {
            *o = terms.iter().map(|t| t.eval(x)).sum();
        }
    }

    /// One Euler–Maruyama step from `x`, all coefficients at the pre-step state.
    ///
    /// Returns `Err(Error::Numerical)` when the new state is not finite.
    pub fn em_step(&self, x: &[f64], dt: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
        let mut out = x.to_vec();
        self.em_step_in_place(&mut out, dt, rng)?;
        Ok(out)
    }

    fn em_step_in_place(&self, x: &mut [f64], dt: f64, rng: &mut RngStream) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let mut f = [0.0; MAX_DIM];
        self.drift_into(x, &mut f[..self.dim]);
        let mut dw = [0.0; MAX_DIM];
        for (d, term) in dw.iter_mut().zip(&self.noise) {
            *d = match term.kind {
                NoiseKind::Brownian => noise::gaussian_increment(dt, rng)?,
                NoiseKind::Stable { alpha } => noise::stable_increment(alpha, dt, rng)?,
            };
        }
        for i in 0..self.dim {
            let term = &self.noise[i];
            let g = match term.coupling {
                Coupling::Additive => term.scale,
                Coupling::Linear => term.scale * x[i],
            };
            x[i] += f[i] * dt + g * dw[i];
        }
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numerical("state escaped to a non-finite value".into()))
        }
    }
}

/// Law of the initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialLaw {
    StandardNormal,
    /// N(0, c I).
    ScaledNormal { c: f64 },
    PointMass { x0: Vec<f64> },
}

impl InitialLaw {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            InitialLaw::ScaledNormal { c } if !(*c > 0.0 && c.is_finite()) => {
                Err(Error::invalid(format!("initial covariance scale must be > 0, got {c}")))
            }
            InitialLaw::PointMass { x0 } if x0.len() != dim => {
                Err(Error::DimensionMismatch { expected: dim, got: x0.len() })
            }
            _ => Ok(()),
        }
    }

    pub fn draw(&self, dim: usize, rng: &mut RngStream) -> Vec<f64> {
        match self {
            InitialLaw::StandardNormal => (0..dim).map(|_| rng.standard_normal()).collect(),
            InitialLaw::ScaledNormal { c } => {
                let s = c.sqrt();
                (0..dim).map(|_| s * rng.standard_normal()).collect()
            }
            InitialLaw::PointMass { x0 } => x0.clone(),
        }
    }
}

/// Time window and step sizes of a simulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSchedule {
    pub t0: f64,
    pub t1: f64,
    pub dt_sim: f64,
    pub snapshot_dt: f64,
}

impl SimSchedule {
    pub fn new(t0: f64, t1: f64, dt_sim: f64, snapshot_dt: f64) -> Result<Self> {
        let s = Self { t0, t1, dt_sim, snapshot_dt };
        s.layout()?;
        Ok(s)
    }

    /// `(steps per snapshot, number of snapshots)`.
    pub fn layout(&self) -> Result<(usize, usize)> {
        if !(self.t1 > self.t0) {
            return Err(Error::invalid(format!("t1 = {} must exceed t0 = {}", self.t1, self.t0)));
        }
        if !(self.dt_sim > 0.0) || !(self.snapshot_dt > 0.0) {
            return Err(Error::invalid("time steps must be positive"));
        }
        let per = integer_ratio(self.snapshot_dt, self.dt_sim)
            .ok_or_else(|| Error::invalid("snapshot_dt must be an integer multiple of dt_sim"))?;
        let intervals = integer_ratio(self.t1 - self.t0, self.snapshot_dt)
            .ok_or_else(|| Error::invalid("t1 - t0 must be an integer multiple of snapshot_dt"))?;
        Ok((per, intervals + 1))
    }

    pub fn times(&self) -> Vec<f64> {
        let (_, m) = self.layout().expect("validated schedule");
        (0..m).map(|j| self.t0 + j as f64 * self.snapshot_dt).collect()
    }
}

fn integer_ratio(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let n = r.round();
    (n >= 1.0 && (r - n).abs() <= 1e-9 * n).then_some(n as usize)
}

/// Provenance recorded with a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: String,
    pub seed: u64,
    pub dt_sim: f64,
    pub initial_law: InitialLaw,
    pub resampled_paths: usize,
}

/// Point clouds of `n` samples in `R^dim` at each of `m` increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotDataset {
    pub dim: usize,
    pub times: Vec<f64>,
    /// `snapshots[j]` holds `n * dim` coordinates, sample-major.
    pub snapshots: Vec<Vec<f64>>,
    pub meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
struct DatasetSidecar {
    dim: usize,
    n: usize,
    times: Vec<f64>,
    #[serde(flatten)]
    meta: DatasetMeta,
}

impl SnapshotDataset {
    pub fn new(dim: usize, times: Vec<f64>, snapshots: Vec<Vec<f64>>, meta: DatasetMeta) -> Result<Self> {
        if times.len() != snapshots.len() || times.is_empty() {
            return Err(Error::invalid("need one snapshot per time and at least one time"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("snapshot times must be strictly increasing"));
        }
        let len = snapshots[0].len();
        if len == 0 || len % dim != 0 {
            return Err(Error::invalid("snapshot length must be a positive multiple of dim"));
        }
        for s in &snapshots {
            if s.len() != len {
                return Err(Error::invalid("every snapshot must hold the same number of points"));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("snapshot points must be finite"));
            }
        }
        Ok(Self { dim, times, snapshots, meta })
    }

    pub fn n(&self) -> usize {
        self.snapshots[0].len() / self.dim
    }

    pub fn m(&self) -> usize {
        self.times.len()
    }

    pub fn point(&self, j: usize, i: usize) -> &[f64] {
        &self.snapshots[j][i * self.dim..(i + 1) * self.dim]
    }

    /// CSV with header `t,x1,...,xD`, one row per (snapshot, sample).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for d in 1..=self.dim {
            write!(out, ",x{d}").unwrap();
        }
        out.push('\n');
        for (j, t) in self.times.iter().enumerate() {
            for i in 0..self.n() {
                write!(out, "{t}").unwrap();
                for v in self.point(j, i) {
                    write!(out, ",{v}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn sidecar_json(&self) -> Result<String> {
        let side = DatasetSidecar {
            dim: self.dim,
            n: self.n(),
            times: self.times.clone(),
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string_pretty(&side)? + "\n")
    }

    /// Parses the CSV layout written by [`to_csv`](Self::to_csv). Rows are
    /// grouped by their `t` value; metadata comes from the optional sidecar.
    pub fn from_csv(text: &str, sidecar: Option<&str>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty dataset csv".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"t") || cols.len() < 2 {
            return Err(Error::Format("dataset header must start with `t`".into()));
        }
        let dim = cols.len() - 1;
        let mut times: Vec<f64> = Vec::new();
        let mut snapshots: Vec<Vec<f64>> = Vec::new();
        for (row, line) in lines.enumerate() {
            let vals = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("row {}: {e}", row + 2)))?;
            if vals.len() != dim + 1 {
                return Err(Error::Format(format!("row {} has {} columns", row + 2, vals.len())));
            }
            let t = vals[0];
            match times.iter().position(|&s| s == t) {
                Some(j) => snapshots[j].extend_from_slice(&vals[1..]),
                None => {
                    times.push(t);
                    snapshots.push(vals[1..].to_vec());
                }
            }
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let times = order.iter().map(|&j| times[j]).collect();
        let snapshots = order.iter().map(|&j| std::mem::take(&mut snapshots[j])).collect();
        let meta = match sidecar {
            Some(json) => serde_json::from_str::<DatasetSidecar>(json)?.meta,
            None => DatasetMeta {
                system: "unknown".into(),
                seed: 0,
                dt_sim: f64::NAN,
                initial_law: InitialLaw::StandardNormal,
                resampled_paths: 0,
            },
        };
        Self::new(dim, times, snapshots, meta)
    }
}

const MAX_ATTEMPTS: u64 = 1000;

/// Simulates one path, recording the state every `per` steps, or returns
/// `None` if it escaped.
fn run_path(
    system: &SdeSystem,
    law: &InitialLaw,
    sched: &SimSchedule,
    rng: &mut RngStream,
    mut on_step: impl FnMut(&[f64], &[f64]),
    record: &mut [f64],
) -> Option<()> {
    let (per, m) = sched.layout().expect("validated schedule");
    let dim = system.dim;
    let mut x = law.draw(dim, rng);
    let mut prev = x.clone();
    record[..dim].copy_from_slice(&x);
    for j in 1..m {
        for _ in 0..per {
            prev.copy_from_slice(&x);
            system.em_step_in_place(&mut x, sched.dt_sim, rng).ok()?;
            on_step(&prev, &x);
        }
        record[j * dim..(j + 1) * dim].copy_from_slice(&x);
    }
    Some(())
}

/// Simulates `n_paths` independent paths and records them at the snapshot
/// times. Path `i` draws its initial state and noise from its own stream;
/// a path that escapes is redrawn on a fresh stream.
pub fn simulate_paths(
    system: &SdeSystem,
    law: &InitialLaw,
    n_paths: usize,
    sched: &SimSchedule,
    seed: u64,
) -> Result<SnapshotDataset> {
    law.validate(system.dim)?;
    if n_paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    let (_, m) = sched.layout()?;
    let dim = system.dim;
    let mut snapshots = vec![vec![0.0; n_paths * dim]; m];
    let mut record = vec![0.0; m * dim];
    let mut resampled = 0;
    for i in 0..n_paths {
        let mut attempt = 0;
        loop {
            let mut rng = RngStream::derived(seed, purpose::PATHS, &[i as u64, attempt]);
            if run_path(system, law, sched, &mut rng, |_, _| {}, &mut record).is_some() {
                break;
            }
            attempt += 1;
            resampled += 1;
            if attempt >= MAX_ATTEMPTS {
                return Err(Error::Numerical(format!("path {i} escaped {MAX_ATTEMPTS} times")));
            }
        }
        for (j, snap) in snapshots.iter_mut().enumerate() {
            snap[i * dim..(i + 1) * dim].copy_from_slice(&record[j * dim..(j + 1) * dim]);
        }
    }
    if resampled > 0 {
        log::warn!("{}: resampled {resampled} escaped paths", system.key);
    }
    let meta = DatasetMeta {
        system: system.key.clone(),
        seed,
        dt_sim: sched.dt_sim,
        initial_law: law.clone(),
        resampled_paths: resampled,
    };
    SnapshotDataset::new(dim, sched.times(), snapshots, meta)
}

/// Consecutive fine-step states `(x_start, x_end)` sharing one step `dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionPairs {
    pub dim: usize,
    pub dt: f64,
    pub starts: Vec<f64>,
    pub ends: Vec<f64>,
}

impl TransitionPairs {
    pub fn new(dim: usize, dt: f64, starts: Vec<f64>, ends: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid("transition dt must be positive"));
        }
        if starts.len() != ends.len() || starts.len() % dim != 0 {
            return Err(Error::invalid("starts and ends must hold the same number of points"));
        }
        if starts.iter().chain(&ends).any(|v| !v.is_finite()) {
            return Err(Error::invalid("transition points must be finite"));
        }
        Ok(Self { dim, dt, starts, ends })
    }

    pub fn len(&self) -> usize {
        self.starts.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.starts.chunks(self.dim).zip(self.ends.chunks(self.dim))
    }

    /// CSV with header `x1,..,xD,y1,..,yD,dt`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let d = self.dim;
        let names: Vec<String> = (1..=d)
            .map(|k| format!("x{k}"))
            .chain((1..=d).map(|k| format!("y{k}")))
            .collect();
        writeln!(out, "{},dt", names.join(",")).unwrap();
        for (a, b) in self.iter() {
            for v in a.iter().chain(b) {
                write!(out, "{v},").unwrap();
            }
            writeln!(out, "{}", self.dt).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty pairs csv".into()))?;
        let ncols = header.split(',').count();
        if ncols < 3 || ncols % 2 == 0 {
            return Err(Error::Format("pairs header must be x1..xD,y1..yD,dt".into()));
        }
        let dim = (ncols - 1) / 2;
        let (mut starts, mut ends, mut dt) = (Vec::new(), Vec::new(), None);
        for (row, line) in lines.enumerate() {
            let vals = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("row {}: {e}", row + 2)))?;
            if vals.len() != ncols {
                return Err(Error::Format(format!("row {} has {} columns", row + 2, vals.len())));
            }
            let row_dt = vals[2 * dim];
            match dt {
                None => dt = Some(row_dt),
                Some(d) if d != row_dt => {
                    return Err(Error::Format("all pairs must share one dt".into()))
                }
                _ => {}
            }
            starts.extend_from_slice(&vals[..dim]);
            ends.extend_from_slice(&vals[dim..2 * dim]);
        }
        let dt = dt.ok_or_else(|| Error::Format("pairs csv has no rows".into()))?;
        Self::new(dim, dt, starts, ends)
    }
}

/// Streams every fine-step transition of `n_paths` simulated paths into
/// `sink(start, end)`. Escaped paths are redrawn before any of their
/// transitions are emitted. Returns the number of redrawn paths.
pub fn for_each_transition(
    system: &SdeSystem,
    law: &InitialLaw,
    n_paths: usize,
    sched: &SimSchedule,
    seed: u64,
    mut sink: impl FnMut(&[f64], &[f64]),
) -> Result<usize> {
    law.validate(system.dim)?;
    let (per, m) = sched.layout()?;
    let dim = system.dim;
    let steps = per * (m - 1);
    let mut buf = Vec::with_capacity(2 * dim * steps);
    let mut record = vec![0.0; m * dim];
    let mut resampled = 0;
    for i in 0..n_paths {
        let mut attempt = 0;
        loop {
            buf.clear();
            let mut rng = RngStream::derived(seed, purpose::PATHS, &[i as u64, attempt]);
            let ok = run_path(
                system,
                law,
                sched,
                &mut rng,
                |a, b| {
                    buf.extend_from_slice(a);
                    buf.extend_from_slice(b);
                },
                &mut record,
            );
            if ok.is_some() {
                break;
            }
            attempt += 1;
            resampled += 1;
            if attempt >= MAX_ATTEMPTS {
                return Err(Error::Numerical(format!("path {i} escaped {MAX_ATTEMPTS} times")));
            }
        }
        for pair in buf.chunks(2 * dim) {
            sink(&pair[..dim], &pair[dim..]);
        }
    }
    Ok(resampled)
}

/// Collects [`for_each_transition`] into memory.
pub fn simulate_transitions(
    system: &SdeSystem,
    law: &InitialLaw,
    n_paths: usize,
    sched: &SimSchedule,
    seed: u64,
) -> Result<TransitionPairs> {
    let (mut starts, mut ends) = (Vec::new(), Vec::new());
    for_each_transition(system, law, n_paths, sched, seed, |a, b| {
        starts.extend_from_slice(a);
        ends.extend_from_slice(b);
    })?;
    TransitionPairs::new(system.dim, sched.dt_sim, starts, ends)
}
