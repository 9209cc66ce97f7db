//! Kramers–Moyal identification of drift and diffusion from fine-step
//! transition pairs of Brownian-driven paths.
//!
//! Pairs are binned by their start point on a 2-D grid of square bins
//! centred on the nodes of a [`GridSpec`]. Each bin keeps raw sums of the
//! increments and of their outer products, so accumulators over disjoint
//! pair sets merge by addition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpe::Coefficients;
use crate::grid::GridSpec;
use crate::sde::TransitionPairs;

pub const DEFAULT_BIN_WIDTH: f64 = 0.2;
pub const DEFAULT_MIN_COUNT: u64 = 10;
/// Increments farther than this many robust standard deviations from the
/// median count as tail events.
pub const TAIL_SIGMAS: f64 = 10.0;
/// Tail fraction above which the Brownian assumption is flagged.
pub const TAIL_FRACTION_LIMIT: f64 = 1e-4;
/// Increments kept for the tail diagnostic.
const TAIL_SAMPLE: usize = 1 << 20;
/// Normal-consistency factor of the median absolute deviation.
const MAD_TO_SD: f64 = 1.482_602_218_505_602;

/// Per-bin sums of increments.
#[derive(Clone, Debug, PartialEq)]
pub struct KmAccumulator {
    pub bins: GridSpec,
    pub dt: f64,
    count: Vec<u64>,
    /// `Σ Δ` per bin, two components.
    sum1: Vec<[f64; 2]>,
    /// `Σ ΔΔᵀ` per bin as `[xx, xy, yy]`.
    sum2: Vec<[f64; 3]>,
    outside: u64,
    tail_sample: Vec<f64>,
}

impl KmAccumulator {
    pub fn new(bins: GridSpec, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be > 0, got {dt}")));
        }
        let n = bins.len();
        Ok(Self {
            bins,
            dt,
            count: vec![0; n],
            sum1: vec![[0.0; 2]; n],
            sum2: vec![[0.0; 3]; n],
            outside: 0,
            tail_sample: Vec::new(),
        })
    }

    pub fn push(&mut self, start: &[f64], end: &[f64]) -> Result<()> {
        if start.len() != 2 || end.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: start.len().max(end.len()),
            });
        }
        let d = [end[0] - start[0], end[1] - start[1]];
        if self.tail_sample.len() < TAIL_SAMPLE {
            self.tail_sample.extend_from_slice(&d);
        }
        let Some((i, j)) = self.bins.locate([start[0], start[1]]) else {
            self.outside += 1;
            return Ok(());
        };
        let k = self.bins.index(i, j);
        self.count[k] += 1;
        self.sum1[k][0] += d[0];
        self.sum1[k][1] += d[1];
        self.sum2[k][0] += d[0] * d[0];
        self.sum2[k][1] += d[0] * d[1];
        self.sum2[k][2] += d[1] * d[1];
        Ok(())
    }

    pub fn extend(&mut self, pairs: &TransitionPairs) -> Result<()> {
        if (pairs.dt - self.dt).abs() > 1e-12 * self.dt {
            return Err(Error::Incongruent(format!("pairs dt {} differs from {}", pairs.dt, self.dt)));
        }
        for (a, b) in pairs.iter() {
            self.push(a, b)?;
        }
        Ok(())
    }

    /// Adds the sums of `other`, which must use the same bins and step.
    pub fn merge(&mut self, other: &KmAccumulator) -> Result<()> {
        if !self.bins.congruent(&other.bins) || self.dt != other.dt {
            return Err(Error::Incongruent("accumulators use different bins or dt".into()));
        }
        for k in 0..self.count.len() {
            self.count[k] += other.count[k];
            for c in 0..2 {
                self.sum1[k][c] += other.sum1[k][c];
            }
            for c in 0..3 {
                self.sum2[k][c] += other.sum2[k][c];
            }
        }
        self.outside += other.outside;
        let room = TAIL_SAMPLE.saturating_sub(self.tail_sample.len());
        self.tail_sample.extend(other.tail_sample.iter().take(room));
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.count
    }

    pub fn total(&self) -> u64 {
        self.count.iter().sum::<u64>() + self.outside
    }

    pub fn outside(&self) -> u64 {
        self.outside
    }

    /// Fraction of sampled increment components beyond
    /// [`TAIL_SIGMAS`] robust standard deviations of the median.
    pub fn tail_fraction(&self) -> f64 {
        if self.tail_sample.is_empty() {
            return 0.0;
        }
        let mut v = self.tail_sample.clone();
        let med = median(&mut v);
        let mut dev: Vec<f64> = self.tail_sample.iter().map(|x| (x - med).abs()).collect();
        let sd = MAD_TO_SD * median(&mut dev);
        if sd == 0.0 {
            return 0.0;
        }
        let far = dev.iter().filter(|d| **d > TAIL_SIGMAS * sd).count();
        far as f64 / dev.len() as f64
    }

    fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let frac = self.tail_fraction();
        if frac > TAIL_FRACTION_LIMIT {
            w.push(format!(
                "HEAVY-TAIL WARNING: {:.3e} of increments lie beyond {TAIL_SIGMAS} robust standard deviations \
                 (Gaussian level is ~1e-22); the data look jump-driven and Kramers-Moyal estimates assume Brownian noise",
                frac
            ));
        }
        if self.outside > 0 {
            w.push(format!("{} of {} pairs started outside the bin grid", self.outside, self.total()));
        }
        w
    }

    fn finish(&self, kind: FieldKind, min_count: u64) -> Result<BinnedField> {
        let n = self.bins.len();
        let comps = kind.components();
        let mut values = vec![0.0; n * comps];
        let mut valid = vec![false; n];
        for k in 0..n {
            let c = self.count[k];
            if c < min_count.max(1) {
                continue;
            }
            valid[k] = true;
            let scale = 1.0 / (c as f64 * self.dt);
            let out = &mut values[k * comps..(k + 1) * comps];
            match kind {
                FieldKind::Drift => {
                    out[0] = self.sum1[k][0] * scale;
                    out[1] = self.sum1[k][1] * scale;
                }
                FieldKind::Diffusion => {
                    out[0] = self.sum2[k][0] * scale;
                    out[1] = self.sum2[k][1] * scale;
                    out[2] = self.sum2[k][2] * scale;
                }
            }
        }
        if !valid.iter().any(|v| *v) {
            return Err(Error::InsufficientData(format!(
                "no bin reached {min_count} pairs ({} pairs, {} outside the bins)",
                self.total(),
                self.outside
            )));
        }
        let warnings = self.warnings();
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(BinnedField {
            kind,
            bins: self.bins,
            min_count,
            values,
            counts: self.count.clone(),
            valid,
            warnings,
        })
    }

    /// Per-bin mean of `Δ / dt`.
    pub fn drift(&self, min_count: u64) -> Result<BinnedField> {
        self.finish(FieldKind::Drift, min_count)
    }

    /// Per-bin mean of `ΔΔᵀ / dt`.
    pub fn diffusion(&self, min_count: u64) -> Result<BinnedField> {
        self.finish(FieldKind::Diffusion, min_count)
    }

    /// Standard error of each drift component in bin `k`.
    pub fn drift_standard_error(&self, k: usize) -> Option<[f64; 2]> {
        let c = self.count[k];
        if c < 2 {
            return None;
        }
        let n = c as f64;
        let dt2 = self.dt * self.dt;
        let se = |s1: f64, s2: f64| {
            let var = ((s2 / n - (s1 / n).powi(2)) / dt2).max(0.0) * n / (n - 1.0);
            (var / n).sqrt()
        };
        Some([se(self.sum1[k][0], self.sum2[k][0]), se(self.sum1[k][1], self.sum2[k][2])])
    }
}

fn median(v: &mut [f64]) -> f64 {
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Bin grid covering the central 99% of the start points `starts` (flat
/// 2-D pairs) in each coordinate, aligned to multiples of `width`.
pub fn default_bins(starts: &[f64], width: f64) -> Result<GridSpec> {
    if starts.is_empty() || starts.len() % 2 != 0 {
        return Err(Error::InsufficientData("need a nonempty list of 2-D start points".into()));
    }
    if !(width > 0.0) {
        return Err(Error::invalid(format!("bin width must be > 0, got {width}")));
    }
    let mut bounds = [[0.0; 2]; 2];
    for (c, b) in bounds.iter_mut().enumerate() {
        let mut v: Vec<f64> = starts.iter().skip(c).step_by(2).copied().collect();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
        b[0] = (q(0.005) / width).floor() * width;
        b[1] = (q(0.995) / width).ceil() * width;
        if b[1] - b[0] < width {
            b[1] = b[0] + width;
        }
    }
    GridSpec::rect(bounds[0], bounds[1], width)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// Two components `(f₁, f₂)`.
    Drift,
    /// Three components `(A₁₁, A₁₂, A₂₂)` of the symmetric matrix.
    Diffusion,
}

impl FieldKind {
    pub fn components(self) -> usize {
        match self {
            FieldKind::Drift => 2,
            FieldKind::Diffusion => 3,
        }
    }
}

/// Binned vector or matrix field with a validity mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinnedField {
    pub kind: FieldKind,
    /// Bin centres; each bin is the cell `[x ± w/2) × [y ± w/2)`.
    pub bins: GridSpec,
    pub min_count: u64,
    /// Bin-major components; zero in invalid bins.
    pub values: Vec<f64>,
    pub counts: Vec<u64>,
    pub valid: Vec<bool>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl BinnedField {
    /// Field sampled from `f` at every bin centre, all bins valid.
    pub fn from_fn(kind: FieldKind, bins: GridSpec, mut f: impl FnMut([f64; 2]) -> Vec<f64>) -> Result<Self> {
        let comps = kind.components();
        let mut values = Vec::with_capacity(bins.len() * comps);
        for x in bins.nodes() {
            let v = f(x);
            if v.len() != comps {
                return Err(Error::DimensionMismatch { expected: comps, got: v.len() });
            }
            values.extend(v);
        }
        Ok(Self {
            kind,
            bins,
            min_count: 0,
            values,
            counts: vec![0; bins.len()],
            valid: vec![true; bins.len()],
            warnings: Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.bins.len();
        let comps = self.kind.components();
        if self.values.len() != n * comps || self.counts.len() != n || self.valid.len() != n {
            return Err(Error::Format("field arrays do not match the bin grid".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("field values must be finite".into()));
        }
        Ok(())
    }

    pub fn value(&self, k: usize) -> Option<&[f64]> {
        let c = self.kind.components();
        self.valid[k].then(|| &self.values[k * c..(k + 1) * c])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Fraction of the bins inside `domain` that are valid.
    pub fn coverage(&self, domain: &GridSpec) -> f64 {
        let (mut inside, mut ok) = (0usize, 0usize);
        for (k, [x, y]) in self.bins.nodes().enumerate() {
            if x >= domain.x_min && x <= domain.x_max() && y >= domain.y_min && y <= domain.y_max() {
                inside += 1;
                ok += self.valid[k] as usize;
            }
        }
        if inside == 0 {
            0.0
        } else {
            ok as f64 / inside as f64
        }
    }

    /// Smallest eigenvalue of the symmetrized matrix in bin `k`.
    pub fn min_eigenvalue(&self, k: usize) -> Option<f64> {
        if self.kind != FieldKind::Diffusion {
            return None;
        }
        let v = self.value(k)?;
        let (a, b, c) = (v[0], v[1], v[2]);
        let mean = 0.5 * (a + c);
        let r = (0.25 * (a - c).powi(2) + b * b).sqrt();
        Some(mean - r)
    }

    /// Index of the valid bin nearest to `x`.
    fn nearest_valid(&self, x: [f64; 2]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, [bx, by]) in self.bins.nodes().enumerate() {
            if self.valid[k] {
                let d = (bx - x[0]).powi(2) + (by - x[1]).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
        }
        best.1
    }

    /// Bilinear interpolation between bin centres when all four surrounding
    /// bins are valid, otherwise the value of the nearest valid bin.
    pub fn interpolate(&self, x: [f64; 2]) -> Vec<f64> {
        let b = &self.bins;
        let c = self.kind.components();
        let fx = (x[0] - b.x_min) / b.h;
        let fy = (x[1] - b.y_min) / b.h;
        let (i0, j0) = (fx.floor(), fy.floor());
        if i0 >= 0.0 && j0 >= 0.0 && (i0 as usize) + 1 < b.nx && (j0 as usize) + 1 < b.ny {
            let (i, j) = (i0 as usize, j0 as usize);
            let ks = [b.index(i, j), b.index(i + 1, j), b.index(i, j + 1), b.index(i + 1, j + 1)];
            if ks.iter().all(|&k| self.valid[k]) {
                let (u, v) = (fx - i0, fy - j0);
                let w = [(1.0 - u) * (1.0 - v), u * (1.0 - v), (1.0 - u) * v, u * v];
                let mut out = vec![0.0; c];
                for (&k, &wk) in ks.iter().zip(&w) {
                    for (o, val) in out.iter_mut().zip(&self.values[k * c..(k + 1) * c]) {
                        *o += wk * val;
                    }
                }
                return out;
            }
        }
        let k = self.nearest_valid(x);
        self.values[k * c..(k + 1) * c].to_vec()
    }
}

/// Drift and diffusion estimated from one pair set.
pub fn estimate_drift(pairs: &TransitionPairs, bins: GridSpec, min_count: u64) -> Result<BinnedField> {
    let mut acc = KmAccumulator::new(bins, pairs.dt)?;
    acc.extend(pairs)?;
    acc.drift(min_count)
}

pub fn estimate_diffusion(pairs: &TransitionPairs, bins: GridSpec, min_count: u64) -> Result<BinnedField> {
    let mut acc = KmAccumulator::new(bins, pairs.dt)?;
    acc.extend(pairs)?;
    acc.diffusion(min_count)
}

/// Minimum share of valid bins over the solver domain.
pub const MIN_COVERAGE: f64 = 0.6;

/// Continuous coefficient functions built from binned estimates.
///
/// Interpolated values are precomputed on a lookup of the bin grid so that
/// evaluation away from the data (nearest-valid fallback) is cheap.
#[derive(Clone, Debug)]
pub struct KmCoefficients {
    drift: BinnedField,
    diffusion: BinnedField,
    nearest: Vec<usize>,
}

/// Wraps the binned fields for the finite-difference solver. The valid bins
/// must cover at least [`MIN_COVERAGE`] of the bins that lie inside `domain`.
pub fn km_fpe_coefficients(drift: BinnedField, diffusion: BinnedField, domain: &GridSpec) -> Result<KmCoefficients> {
    drift.validate()?;
    diffusion.validate()?;
    if drift.kind != FieldKind::Drift || diffusion.kind != FieldKind::Diffusion {
        return Err(Error::invalid("expected a drift field and a diffusion field"));
    }
    if !drift.bins.congruent(&diffusion.bins) || drift.valid != diffusion.valid {
        return Err(Error::Incongruent("drift and diffusion fields use different bins".into()));
    }
    let cov = drift.coverage(domain);
    if cov < MIN_COVERAGE {
        return Err(Error::InsufficientData(format!(
            "valid bins cover {:.1}% of the solver domain, need {:.0}%",
            100.0 * cov,
            100.0 * MIN_COVERAGE
        )));
    }
    let nearest = drift.bins.nodes().map(|x| drift.nearest_valid(x)).collect();
    Ok(KmCoefficients { drift, diffusion, nearest })
}

impl KmCoefficients {
    fn eval(&self, field: &BinnedField, x: [f64; 2]) -> Vec<f64> {
        let b = &field.bins;
        let inside = x[0] >= b.x_min && x[0] <= b.x_max() && x[1] >= b.y_min && x[1] <= b.y_max();
        if inside {
            return field.interpolate(x);
        }
        // Outside the bins: nearest valid bin of the clamped point.
        let cx = x[0].clamp(b.x_min, b.x_max());
        let cy = x[1].clamp(b.y_min, b.y_max());
        let (i, j) = b.locate([cx, cy]).expect("clamped point lies on the grid");
        let k = self.nearest[b.index(i, j)];
        let c = field.kind.components();
        field.values[k * c..(k + 1) * c].to_vec()
    }

    pub fn drift_field(&self) -> &BinnedField {
        &self.drift
    }

    pub fn diffusion_field(&self) -> &BinnedField {
        &self.diffusion
    }
}

impl Coefficients for KmCoefficients {
    fn drift(&self, x: [f64; 2]) -> [f64; 2] {
        let v = self.eval(&self.drift, x);
        [v[0], v[1]]
    }

    fn diffusion(&self, x: [f64; 2]) -> [[f64; 2]; 2] {
        let v = self.eval(&self.diffusion, x);
        [[v[0], v[1]], [v[1], v[2]]]
    }
}

/// Serialized pair of fields written by the CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmFields {
    pub dt: f64,
    pub pairs: u64,
    pub tail_fraction: f64,
    pub drift: BinnedField,
    pub diffusion: BinnedField,
}

impl KmFields {
    pub fn from_accumulator(acc: &KmAccumulator, min_count: u64) -> Result<Self> {
        Ok(Self {
            dt: acc.dt,
            pairs: acc.total(),
            tail_fraction: acc.tail_fraction(),
            drift: acc.drift(min_count)?,
            diffusion: acc.diffusion(min_count)?,
        })
    }
}
