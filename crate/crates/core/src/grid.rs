//! Uniform rectangular grids of density values.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node layout of a uniform grid with equal spacing on both axes.
///
/// Node `(i, j)` sits at `(x_min + i h, y_min + j h)`; values are stored
/// row-major with `j` (the y index) outermost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub y_min: f64,
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(x_min: f64, y_min: f64, h: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) || !x_min.is_finite() || !y_min.is_finite() {
            return Err(Error::invalid(format!("bad grid origin/spacing ({x_min}, {y_min}, {h})")));
        }
        if nx < 2 || ny < 2 {
            return Err(Error::invalid(format!("grid needs at least 2x2 nodes, got {nx}x{ny}")));
        }
        Ok(Self { x_min, y_min, h, nx, ny })
    }

    /// Grid over `[lo, hi]^2` with spacing `h`; `hi - lo` must be a multiple of `h`.
    pub fn square(lo: f64, hi: f64, h: f64) -> Result<Self> {
        Self::rect([lo, hi], [lo, hi], h)
    }

    pub fn rect(xb: [f64; 2], yb: [f64; 2], h: f64) -> Result<Self> {
        let count = |lo: f64, hi: f64| -> Result<usize> {
            let cells = (hi - lo) / h;
            let r = cells.round();
            if !(cells > 0.0) || (cells - r).abs() > 1e-6 * r.max(1.0) {
                return Err(Error::invalid(format!(
                    "extent [{lo}, {hi}] is not a positive multiple of h = {h}"
                )));
            }
            Ok(r as usize + 1)
        };
        Self::new(xb[0], yb[0], h, count(xb[0], xb[1])?, count(yb[0], yb[1])?)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.h
    }

    pub fn y(&self, j: usize) -> f64 {
        self.y_min + j as f64 * self.h
    }

    pub fn x_max(&self) -> f64 {
        self.x(self.nx - 1)
    }

    pub fn y_max(&self) -> f64 {
        self.y(self.ny - 1)
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn cell_area(&self) -> f64 {
        self.h * self.h
    }

    /// Index of the node whose cell `[x - h/2, x + h/2)` contains `p`.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let fi = ((p[0] - self.x_min) / self.h + 0.5).floor();
        let fj = ((p[1] - self.y_min) / self.h + 0.5).floor();
        if fi >= 0.0 && fj >= 0.0 && (fi as usize) < self.nx && (fj as usize) < self.ny {
            Some((fi as usize, fj as usize))
        } else {
            None
        }
    }

    /// All node coordinates in storage order.
    pub fn nodes(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.ny).flat_map(move |j| (0..self.nx).map(move |i| [self.x(i), self.y(j)]))
    }

    pub fn congruent(&self, other: &GridSpec) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && (self.h - other.h).abs() <= 1e-12 * self.h
            && (self.x_min - other.x_min).abs() <= 1e-9 * self.h
            && (self.y_min - other.y_min).abs() <= 1e-9 * self.h
    }
}

/// Density values on a [`GridSpec`] at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    pub time: f64,
    values: Vec<f64>,
}

/// JSON sidecar written next to each grid CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSidecar {
    pub bounds: [[f64; 2]; 2],
    pub h: f64,
    pub time: f64,
    pub mass: f64,
}

impl DensityGrid {
    pub fn new(spec: GridSpec, time: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::DimensionMismatch {
                expected: spec.len(),
                got: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("density values must be finite and >= 0, found {v}")));
        }
        Ok(Self { spec, time, values })
    }

    pub fn zeros(spec: GridSpec, time: f64) -> Self {
        Self {
            spec,
            time,
            values: vec![0.0; spec.len()],
        }
    }

    pub fn from_fn(spec: GridSpec, time: f64, mut f: impl FnMut([f64; 2]) -> f64) -> Result<Self> {
        let values = spec.nodes().map(&mut f).collect();
        Self::new(spec, time, values)
    }

    /// Discretized centered Gaussian with isotropic variance `var`.
    pub fn gaussian(spec: GridSpec, time: f64, var: f64) -> Self {
        let norm = 1.0 / (2.0 * std::f64::consts::PI * var);
        let values = spec
            .nodes()
            .map(|[x, y]| norm * (-(x * x + y * y) / (2.0 * var)).exp())
            .collect();
        Self { spec, time, values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.spec.index(i, j)]
    }

    /// Riemann sum of the node values times the cell area.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.spec.cell_area()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Node with the largest value, ties broken by storage order.
    pub fn argmax(&self) -> [f64; 2] {
        let mut best = 0;
        for (k, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = k;
            }
        }
        [self.spec.x(best % self.spec.nx), self.spec.y(best / self.spec.nx)]
    }

    pub fn sidecar(&self) -> GridSidecar {
        GridSidecar {
            bounds: [
                [self.spec.x_min, self.spec.x_max()],
                [self.spec.y_min, self.spec.y_max()],
            ],
            h: self.spec.h,
            time: self.time,
            mass: self.mass(),
        }
    }

    /// CSV with a header row of x coordinates and a leading y column.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 24);
        out.push_str("y\\x");
        for i in 0..self.spec.nx {
            write!(out, ",{}", self.spec.x(i)).unwrap();
        }
        out.push('\n');
        for j in 0..self.spec.ny {
            write!(out, "{}", self.spec.y(j)).unwrap();
            for i in 0..self.spec.nx {
                write!(out, ",{}", self.at(i, j)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, sidecar: &GridSidecar) -> Result<Self> {
        let spec = GridSpec::rect(sidecar.bounds[0], sidecar.bounds[1], sidecar.h)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty grid csv".into()))?;
        let ncols = header.split(',').count() - 1;
        if ncols != spec.nx {
            return Err(Error::Format(format!(
                "grid csv has {ncols} columns, sidecar implies {}",
                spec.nx
            )));
        }
        let mut values = Vec::with_capacity(spec.len());
        for (j, line) in lines.enumerate() {
            let mut cells = line.split(',');
            cells.next();
            for cell in cells {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::Format(format!("bad value {cell:?} in grid row {j}"))
                })?;
                values.push(v);
            }
        }
        Self::new(spec, sidecar.time, values)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`; returns both paths.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<[PathBuf; 2]> {
        fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{stem}.csv"));
        let json = dir.join(format!("{stem}.json"));
        fs::write(&csv, self.to_csv())?;
        fs::write(&json, serde_json::to_string_pretty(&self.sidecar())? + "\n")?;
        Ok([csv, json])
    }

    pub fn load(csv: &Path) -> Result<Self> {
        let sidecar: GridSidecar = serde_json::from_str(&fs::read_to_string(csv.with_extension("json"))?)?;
        Self::from_csv(&fs::read_to_string(csv)?, &sidecar)
    }

    /// Loads every grid in `dir` (by sidecar), ordered by time.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv") && p.with_extension("json").exists())
            .collect();
        paths.sort();
        let mut grids = paths.iter().map(|p| Self::load(p)).collect::<Result<Vec<_>>>()?;
        grids.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(grids)
    }
}

/// File stem used for a grid at time `t`, e.g. `t0.3500`.
pub fn time_stem(t: f64) -> String {
    format!("t{t:.4}")
}
