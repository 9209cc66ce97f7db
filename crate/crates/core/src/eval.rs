//! Density grids from flows and samples, grid comparisons and mode finding.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::grid::{DensityGrid, GridSpec};
use crate::scalar::Scalar;

/// Held-out evaluation times between the training snapshots.
pub const HELD_OUT_TIMES: [f64; 4] = [0.03, 0.33, 0.63, 0.93];

/// Default relative threshold for [`mode_count`].
pub const DEFAULT_MODE_THRESHOLD: f64 = 0.2;

/// `exp(log_density)` of a 2-D flow at every node of `spec`.
pub fn flow_density_grid<T: Scalar>(model: &FlowModel<T>, spec: GridSpec, t: f64) -> Result<DensityGrid> {
    if model.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: model.dim(),
        });
    }
    let pts: Vec<T> = spec.nodes().flat_map(|[x, y]| [T::of(x), T::of(y)]).collect();
    let times = vec![T::of(t); spec.len()];
    let logp = model.log_density_batch(&pts, &times)?;
    let values = logp.iter().map(|v| v.as_f64().exp()).collect();
    DensityGrid::new(spec, t, values)
}

/// Box-count histogram together with the number of samples that fell
/// outside the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub grid: DensityGrid,
    pub total: usize,
    pub outside: usize,
}

impl Histogram {
    pub fn captured_fraction(&self) -> f64 {
        1.0 - self.outside as f64 / self.total as f64
    }
}

/// Histogram of 2-D `samples` (flat `x, y` pairs): each node owns the cell
/// `[x ± h/2) × [y ± h/2)` and holds `count / (N h²)`.
pub fn histogram_density(samples: &[f64], spec: GridSpec, time: f64) -> Result<Histogram> {
    if samples.is_empty() || samples.len() % 2 != 0 {
        return Err(Error::invalid("samples must be a nonempty list of 2-D points"));
    }
    let total = samples.len() / 2;
    let mut counts = vec![0u64; spec.len()];
    let mut outside = 0;
    for p in samples.chunks_exact(2) {
        match spec.locate([p[0], p[1]]) {
            Some((i, j)) => counts[spec.index(i, j)] += 1,
            None => outside += 1,
        }
    }
    let norm = 1.0 / (total as f64 * spec.cell_area());
    let values = counts.iter().map(|&c| c as f64 * norm).collect();
    Ok(Histogram {
        grid: DensityGrid::new(spec, time, values)?,
        total,
        outside,
    })
}

/// Strict local maxima above a fraction of the global maximum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Modes {
    pub count: usize,
    /// Node coordinates of each mode, by decreasing density.
    pub locations: Vec<[f64; 2]>,
}

/// Nodes strictly greater than each of their (up to eight) neighbours and
/// at least `rel_threshold` times the grid maximum.
pub fn mode_count(grid: &DensityGrid, rel_threshold: f64) -> Result<Modes> {
    if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
        return Err(Error::invalid(format!("rel_threshold must lie in (0, 1), got {rel_threshold}")));
    }
    let spec = grid.spec;
    let floor = rel_threshold * grid.max();
    let mut found: Vec<(f64, [f64; 2])> = Vec::new();
    for j in 0..spec.ny {
        for i in 0..spec.nx {
            let v = grid.at(i, j);
            if v <= 0.0 || v < floor {
                continue;
            }
            let mut strict = true;
            'nb: for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ii, jj) = (i as i64 + di, j as i64 + dj);
                    if ii < 0 || jj < 0 || ii >= spec.nx as i64 || jj >= spec.ny as i64 {
                        continue;
                    }
                    if grid.at(ii as usize, jj as usize) >= v {
                        strict = false;
                        break 'nb;
                    }
                }
            }
            if strict {
                found.push((v, [spec.x(i), spec.y(j)]));
            }
        }
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(Modes {
        count: found.len(),
        locations: found.into_iter().map(|(_, p)| p).collect(),
    })
}

/// Error summaries of two congruent grid sequences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub times: Vec<f64>,
    /// `Σ |a - b| h²` per time.
    pub l1: Vec<f64>,
    /// `max |a - b|` per time.
    pub max: Vec<f64>,
    pub mass_a: Vec<f64>,
    pub mass_b: Vec<f64>,
    /// Largest node value of each grid.
    pub peak_a: Vec<f64>,
    pub peak_b: Vec<f64>,
    pub modes_a: Vec<Modes>,
    pub modes_b: Vec<Modes>,
    pub mode_threshold: f64,
}

impl ComparisonReport {
    /// CSV with columns `t,l1,max,mass_a,mass_b,peak_a,peak_b`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("t,l1,max,mass_a,mass_b,peak_a,peak_b\n");
        for k in 0..self.times.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.times[k], self.l1[k], self.max[k], self.mass_a[k], self.mass_b[k], self.peak_a[k], self.peak_b[k]
            )
            .unwrap();
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Pointwise `|a - b|` per time plus the summary report.
pub fn compare(a: &[DensityGrid], b: &[DensityGrid], mode_threshold: f64) -> Result<(ComparisonReport, Vec<DensityGrid>)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Incongruent(format!(
            "sequences hold {} and {} grids",
            a.len(),
            b.len()
        )));
    }
    let mut report = ComparisonReport {
        mode_threshold,
        ..Default::default()
    };
    let mut diffs = Vec::with_capacity(a.len());
    for (ga, gb) in a.iter().zip(b) {
        if !ga.spec.congruent(&gb.spec) {
            return Err(Error::Incongruent(format!("grids at t = {} differ in layout", ga.time)));
        }
        if (ga.time - gb.time).abs() > 1e-9 * ga.time.abs().max(1.0) {
            return Err(Error::Incongruent(format!("times {} and {} differ", ga.time, gb.time)));
        }
        let d: Vec<f64> = ga.values().iter().zip(gb.values()).map(|(x, y)| (x - y).abs()).collect();
        let diff = DensityGrid::new(ga.spec, ga.time, d)?;
        report.times.push(ga.time);
        report.l1.push(diff.mass());
        report.max.push(diff.max());
        report.mass_a.push(ga.mass());
        report.mass_b.push(gb.mass());
        report.peak_a.push(ga.max());
        report.peak_b.push(gb.max());
        report.modes_a.push(mode_count(ga, mode_threshold)?);
        report.modes_b.push(mode_count(gb, mode_threshold)?);
        diffs.push(diff);
    }
    Ok((report, diffs))
}

/// Binary 8-bit PGM image of a grid, top row = largest y. Values are scaled
/// by `scale_max` (the grid maximum when `None`).
pub fn to_pgm(grid: &DensityGrid, scale_max: Option<f64>) -> Vec<u8> {
    let spec = grid.spec;
    let top = scale_max.unwrap_or_else(|| grid.max());
    let mut out = format!("P5\n{} {}\n255\n", spec.nx, spec.ny).into_bytes();
    for j in (0..spec.ny).rev() {
        for i in 0..spec.nx {
            let v = if top > 0.0 { grid.at(i, j) / top } else { 0.0 };
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{MaskSchedule, NetShape};
    use std::f64::consts::PI;

    fn spec() -> GridSpec {
        GridSpec::square(-10.0, 10.0, 0.2).unwrap()
    }

    #[test]
    fn identity_flow_gives_standard_normal() {
        let model = FlowModel::<f64>::build_default(2, 0).unwrap();
        let g = flow_density_grid(&model, spec(), 0.4).unwrap();
        assert!((g.at(50, 50) - 1.0 / (2.0 * PI)).abs() < 1e-12);
        assert!((g.mass() - 1.0).abs() < 0.002);
        let g32 = flow_density_grid(&FlowModel::<f32>::build_default(2, 0).unwrap(), spec(), 0.4).unwrap();
        assert!((g32.at(50, 50) - g.at(50, 50)).abs() < 1e-6);
    }

    #[test]
    fn identity_flow_mass_on_fine_grid() {
        let model = FlowModel::<f64>::build(2, &MaskSchedule::Alternating { layers: 2 }, NetShape::default(), 0).unwrap();
        let g = flow_density_grid(&model, GridSpec::square(-10.0, 10.0, 0.1).unwrap(), 0.0).unwrap();
        assert!((g.mass() - 1.0).abs() < 0.005);
    }

    #[test]
    fn histogram_single_cell_and_empty_cells() {
        let s = GridSpec::square(-1.0, 1.0, 0.5).unwrap();
        let h = histogram_density(&[0.1, 0.1, -0.2, 0.2, 0.0, 0.0], s, 0.0).unwrap();
        let (i, j) = s.locate([0.0, 0.0]).unwrap();
        assert_eq!(h.grid.at(i, j), 1.0 / 0.25);
        assert_eq!(h.grid.values().iter().filter(|v| **v == 0.0).count(), s.len() - 1);
        let h = histogram_density(&[5.0, 0.0, 0.0, 0.0], s, 0.0).unwrap();
        assert_eq!(h.outside, 1);
        assert!((h.grid.mass() - 0.5).abs() < 1e-15);
        assert_eq!(h.captured_fraction(), 0.5);
    }

    #[test]
    fn histogram_of_normal_samples() {
        let mut rng = crate::noise::RngStream::new(4, 0);
        let pts: Vec<f64> = (0..2_000_000).map(|_| rng.standard_normal()).collect();
        let h = histogram_density(&pts, spec(), 0.0).unwrap();
        assert!((h.grid.at(50, 50) - 0.159).abs() < 0.01);
    }

    #[test]
    fn single_gaussian_has_one_mode() {
        let g = DensityGrid::gaussian(spec(), 0.0, 0.7);
        let m = mode_count(&g, 0.2).unwrap();
        assert_eq!(m.count, 1);
        assert_eq!(m.locations[0], [0.0, 0.0]);
        assert!(mode_count(&g, 1.0).is_err());
    }

    #[test]
    fn four_bumps_four_modes() {
        let g = DensityGrid::from_fn(spec(), 1.0, |[x, y]| {
            let b = |cx: f64, cy: f64| (-((x - cx).powi(2) + (y - cy).powi(2)) / 0.3).exp();
            b(1.0, 1.0) + b(-1.0, 1.0) + b(1.0, -1.0) + 0.9 * b(-1.0, -1.0)
        })
        .unwrap();
        let m = mode_count(&g, 0.2).unwrap();
        assert_eq!(m.count, 4);
        assert!(m.locations.contains(&[-1.0, -1.0]));
        assert_eq!(*m.locations.last().unwrap(), [-1.0, -1.0]);
    }

    #[test]
    fn comparison_properties() {
        let s = spec();
        let a: Vec<DensityGrid> = [0.25, 0.5].iter().map(|&t| DensityGrid::gaussian(s, t, 0.5 + t)).collect();
        let b: Vec<DensityGrid> = [0.25, 0.5].iter().map(|&t| DensityGrid::gaussian(s, t, 0.6 + t)).collect();
        let c: Vec<DensityGrid> = [0.25, 0.5].iter().map(|&t| DensityGrid::gaussian(s, t, 0.8 + t)).collect();
        let (same, _) = compare(&a, &a, 0.2).unwrap();
        assert!(same.l1.iter().chain(&same.max).all(|v| *v == 0.0));
        let (ab, _) = compare(&a, &b, 0.2).unwrap();
        let (ba, _) = compare(&b, &a, 0.2).unwrap();
        assert_eq!(ab.l1, ba.l1);
        assert_eq!(ab.max, ba.max);
        let (bc, _) = compare(&b, &c, 0.2).unwrap();
        let (ac, _) = compare(&a, &c, 0.2).unwrap();
        for k in 0..2 {
            assert!(ac.max[k] <= ab.max[k] + bc.max[k]);
        }
        assert!(compare(&a, &b[..1], 0.2).is_err());
        let shifted = vec![DensityGrid::gaussian(s, 0.3, 0.8), DensityGrid::gaussian(s, 0.5, 1.0)];
        assert!(compare(&a, &shifted, 0.2).is_err());
        let csv = ab.curves_csv();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn rediscretization_error_is_small() {
        // The Gaussian sampled on a grid of spacing h/2, restricted back to
        // the coarse nodes, against the coarse sampling.
        let coarse = spec();
        let fine = GridSpec::square(-10.0, 10.0, 0.1).unwrap();
        for t in [0.25, 1.0] {
            let a = DensityGrid::gaussian(coarse, t, 0.5 + t);
            let f = DensityGrid::gaussian(fine, t, 0.5 + t);
            let restricted: Vec<f64> = (0..coarse.ny)
                .flat_map(|j| (0..coarse.nx).map(move |i| (i, j)))
                .map(|(i, j)| f.at(2 * i, 2 * j))
                .collect();
            let b = DensityGrid::new(coarse, t, restricted).unwrap();
            let (r, _) = compare(&[a], &[b], 0.2).unwrap();
            assert!(r.max[0] < 1e-3, "{}", r.max[0]);
        }
    }

    #[test]
    fn pgm_header_and_size() {
        let g = DensityGrid::gaussian(GridSpec::square(-1.0, 1.0, 0.5).unwrap(), 0.0, 1.0);
        let img = to_pgm(&g, None);
        let header = b"P5\n5 5\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 25);
        assert_eq!(img[header.len() + 12], 255);
    }
}
