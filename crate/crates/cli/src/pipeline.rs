//! The end-to-end experiment: simulate, train, evaluate on grids, and (where
//! the system allows it) compare against finite-difference and
//! Kramers–Moyal references. Each stage is also callable on its own.

use std::path::Path;

use serde::Serialize;
use tnf_core::eval::{compare, flow_density_grid, histogram_density, mode_count, ComparisonReport, Modes};
use tnf_core::flow::{Checkpoint, FlowModel, MaskSchedule, NetShape};
use tnf_core::fpe::{self, Advection, Coefficients, FpeProblem, FpeSolution, JumpSpec, SystemCoefficients};
use tnf_core::km::{self, KmAccumulator, KmFields};
use tnf_core::noise::{purpose, RngStream};
use tnf_core::sde::{self, InitialLaw, SdeSystem, SimSchedule, SnapshotDataset};
use tnf_core::train::{train, StopReason, TrainConfig};
use tnf_core::{DensityGrid, GridSpec};

use crate::config::{ExperimentConfig, ModelConfig};
use crate::io::{samples_csv, Artifacts, Manifest};
use crate::{CliError, Result};

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Discretized initial law of a 2-D system on `spec`.
pub fn initial_grid(law: &InitialLaw, spec: GridSpec, t0: f64) -> Result<DensityGrid> {
    match law {
        InitialLaw::StandardNormal => Ok(DensityGrid::gaussian(spec, t0, 1.0)),
        InitialLaw::ScaledNormal { c } => Ok(DensityGrid::gaussian(spec, t0, *c)),
        InitialLaw::PointMass { .. } => Err(CliError::Usage(
            "a point-mass initial law has no grid representation; use a normal law for finite-difference solves".into(),
        )),
    }
}

/// Discretization choices shared by every finite-difference solve of a run.
#[derive(Clone, Copy, Debug)]
pub struct FdSettings {
    pub spec: GridSpec,
    pub t0: f64,
    pub dt: f64,
    pub advection: Advection,
}

impl FdSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            spec: cfg.grid.spec()?,
            t0: cfg.dataset.t0,
            dt: cfg.fpe.dt,
            advection: cfg.fpe.advection,
        })
    }
}

/// Finite-difference solution for the given coefficients from `law`.
pub fn solve_fpe(
    coeffs: &dyn Coefficients,
    jumps: Option<JumpSpec>,
    law: &InitialLaw,
    fd: &FdSettings,
    times: &[f64],
) -> Result<FpeSolution> {
    let init = initial_grid(law, fd.spec, fd.t0)?;
    let problem = FpeProblem::new(coeffs, init, fd.dt, times.to_vec(), jumps)?.with_advection(fd.advection)?;
    let sol = match jumps {
        Some(_) => fpe::solve_nonlocal_fpe(&problem)?,
        None => fpe::solve_local_fpe(&problem)?,
    };
    if sol.diagnostics.total_clipped > 0.0 {
        log::warn!(
            "clipping removed {:.3e} of mass (most negative value {:.3e})",
            sol.diagnostics.total_clipped,
            sol.diagnostics.min_before_clip
        );
    }
    Ok(sol)
}

/// Finite-difference solution of the system's own Fokker–Planck equation.
pub fn solve_system_fpe(system: &SdeSystem, law: &InitialLaw, fd: &FdSettings, times: &[f64]) -> Result<FpeSolution> {
    let coeffs = SystemCoefficients::new(system)?;
    solve_fpe(&coeffs, coeffs.jumps(), law, fd, times)
}

/// Finite-difference solution with Kramers–Moyal coefficients.
pub fn solve_km_fpe(fields: &KmFields, law: &InitialLaw, fd: &FdSettings, times: &[f64]) -> Result<FpeSolution> {
    let coeffs = km::km_fpe_coefficients(fields.drift.clone(), fields.diffusion.clone(), &fd.spec)?;
    solve_fpe(&coeffs, None, law, fd, times)
}

/// Sorted union of the snapshot times and the held-out times inside the
/// simulated window.
pub fn evaluation_times(sched: &SimSchedule, held_out: &[f64]) -> Vec<f64> {
    let mut times = sched.times();
    for &t in held_out {
        if t >= sched.t0 && t <= sched.t1 && !times.iter().any(|s| (s - t).abs() < 1e-12) {
            times.push(t);
        }
    }
    times.sort_by(f64::total_cmp);
    times
}

/// Accumulates Kramers–Moyal sums over freshly simulated fine-step pairs.
/// Bins come from the quantiles of a first pass over a subsample.
pub fn km_accumulate(system: &SdeSystem, law: &InitialLaw, n_paths: usize, sched: &SimSchedule, seed: u64, bin: f64) -> Result<KmAccumulator> {
    const STRIDE: usize = 97;
    let mut starts = Vec::new();
    let mut k = 0usize;
    sde::for_each_transition(system, law, n_paths, sched, seed, |a, _| {
        if k % STRIDE == 0 {
            starts.extend_from_slice(a);
        }
        k += 1;
    })?;
    let bins = km::default_bins(&starts, bin)?;
    let mut acc = KmAccumulator::new(bins, sched.dt_sim)?;
    let mut err = None;
    sde::for_each_transition(system, law, n_paths, sched, seed, |a, b| {
        if err.is_none() {
            err = acc.push(a, b).err();
        }
    })?;
    match err {
        Some(e) => Err(e.into()),
        None => Ok(acc),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: usize,
    best_iteration: usize,
    best_val_nll: Option<f64>,
    final_val_nll: Option<f64>,
    stop: StopReason,
    lr_halvings: usize,
    n_params: usize,
}

#[derive(Serialize)]
struct DensitySummary {
    times: Vec<f64>,
    mass: Vec<f64>,
    peak: Vec<f64>,
    modes: Vec<Modes>,
}

#[derive(Serialize)]
struct KmSummary {
    pairs: u64,
    tail_fraction: f64,
    coverage: f64,
    valid_bins: usize,
    warnings: Vec<String>,
}

/// Runs every stage of `config` into `out`, returning the manifest that is
/// also written to `out/manifest.json`. A failing stage aborts the run with
/// its name; files already written are kept and still listed in the
/// manifest.
pub fn run_pipeline(config: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let cfg = config.clone().normalize()?;
    let mut art = Artifacts::new(out);
    let outcome = run_stages(&cfg, &mut art);
    let manifest = art.finish()?;
    outcome.map(|()| manifest)
}

fn run_stages(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    art.write("config.json", cfg.to_json()?)?;
    let system = cfg.sde()?;
    let law = cfg.dataset.initial_law.clone().expect("normalized");
    let sched = cfg.dataset.schedule()?;

    let data = stage(
        "simulate",
        simulate_stage(&system, &law, cfg.dataset.n, &sched, cfg.dataset.seed, art),
    )?;
    let model = stage("train", train_stage(&cfg.model, &cfg.train, &data, "dataset.csv", &TrainFiles::default(), art))?;
    stage(
        "sample",
        sample_stage(&model, &data.times, cfg.eval.samples_per_time, cfg.eval.seed, art),
    )?;
    if system.dim != 2 {
        log::info!("{}-D system: grid stages skipped", system.dim);
        return Ok(());
    }
    let spec = cfg.grid.spec()?;
    let times = evaluation_times(&sched, &cfg.eval.held_out_times);
    let flow = stage("density", (|| {
        let flow = density_stage(&model, spec, &times, cfg.eval.mode_threshold, art)?;
        histogram_stage(&data, spec, art)?;
        Ok(flow)
    })())?;
    if cfg.fpe.enabled != Some(true) {
        return Ok(());
    }
    let fd = FdSettings::from_config(cfg)?;
    let truth = stage("fpe", (|| {
        let sol = solve_system_fpe(&system, &law, &fd, &times)?;
        write_solution(art, "fpe", &sol)?;
        let (report, diffs) = compare(&sol.grids, &flow, cfg.eval.mode_threshold)?;
        write_comparison(art, "report", &report, &diffs)?;
        Ok(sol.grids)
    })())?;
    if cfg.km.enabled == Some(true) {
        stage("km", (|| {
            let fields = km_stage(&system, &law, &sched, cfg, spec, art)?;
            let sol = solve_km_fpe(&fields, &law, &fd, &times)?;
            write_solution(art, "km", &sol)?;
            let (report, diffs) = compare(&truth, &sol.grids, cfg.eval.mode_threshold)?;
            write_comparison(art, "report_km", &report, &diffs)
        })())?;
    }
    Ok(())
}

/// Simulates the snapshot dataset into `dataset.csv` and its sidecar.
pub fn simulate_stage(
    system: &SdeSystem,
    law: &InitialLaw,
    n: usize,
    sched: &SimSchedule,
    seed: u64,
    art: &mut Artifacts,
) -> Result<SnapshotDataset> {
    let data = sde::simulate_paths(system, law, n, sched, seed)?;
    if data.meta.resampled_paths > 0 {
        log::warn!("{} paths escaped and were redrawn", data.meta.resampled_paths);
    }
    art.write("dataset.csv", data.to_csv())?;
    art.write("dataset.json", data.sidecar_json()?)?;
    Ok(data)
}

/// Names of the files written by [`train_stage`], relative to the artifact
/// root.
#[derive(Clone, Debug)]
pub struct TrainFiles {
    pub model: String,
    pub loss: String,
    pub summary: String,
}

impl Default for TrainFiles {
    fn default() -> Self {
        Self {
            model: "model.json".into(),
            loss: "loss.csv".into(),
            summary: "train_summary.json".into(),
        }
    }
}

/// Trains a fresh flow on `data`, writing the checkpoint, the loss history
/// and a summary.
pub fn train_stage(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &SnapshotDataset,
    dataset_name: &str,
    files: &TrainFiles,
    art: &mut Artifacts,
) -> Result<FlowModel<f64>> {
    let shape = NetShape {
        hidden: model_cfg.hidden,
        depth: model_cfg.depth,
    };
    let schedule = match &model_cfg.schedule {
        Some(s) => s.clone(),
        None => MaskSchedule::default_for(data.dim)?,
    };
    let model = FlowModel::<f64>::build(data.dim, &schedule, shape, model_cfg.seed)?;
    let n_params = model.n_params();
    let report = train(model, data, train_cfg)?;
    let ckpt = Checkpoint::from_model(&report.model, report.meta(train_cfg.seed, Some(dataset_name.into())));
    art.write(&files.model, ckpt.to_json()?)?;
    art.write(&files.loss, report.history.to_csv())?;
    art.write_json(
        &files.summary,
        &TrainSummary {
            iterations: report.iterations,
            best_iteration: report.best_iteration,
            best_val_nll: report.best_val_nll,
            final_val_nll: report.final_val_nll,
            stop: report.stop,
            lr_halvings: report.lr_halvings,
            n_params,
        },
    )?;
    Ok(report.model)
}

/// Draws `n` flow samples at each time into `samples.csv`.
pub fn sample_stage(model: &FlowModel<f64>, times: &[f64], n: usize, seed: u64, art: &mut Artifacts) -> Result<()> {
    let mut rows = Vec::with_capacity(times.len());
    for (j, &t) in times.iter().enumerate() {
        let mut rng = RngStream::derived(seed, purpose::SAMPLE, &[j as u64]);
        rows.push((t, model.sample(t, n, &mut rng)?));
    }
    art.write("samples.csv", samples_csv(model.dim(), &rows))?;
    Ok(())
}

/// Flow densities on the grid at each time, written to `grids/flow/` with a
/// `density_summary.json` of masses, peaks and modes.
pub fn density_stage(
    model: &FlowModel<f64>,
    spec: GridSpec,
    times: &[f64],
    mode_threshold: f64,
    art: &mut Artifacts,
) -> Result<Vec<DensityGrid>> {
    let mut grids = Vec::with_capacity(times.len());
    let mut summary = DensitySummary {
        times: times.to_vec(),
        mass: Vec::new(),
        peak: Vec::new(),
        modes: Vec::new(),
    };
    for &t in times {
        let g = flow_density_grid(model, spec, t)?;
        summary.mass.push(g.mass());
        summary.peak.push(g.max());
        summary.modes.push(mode_count(&g, mode_threshold)?);
        art.write_grid("grids/flow", &g, None)?;
        grids.push(g);
    }
    art.write_json("density_summary.json", &summary)?;
    Ok(grids)
}

/// Histograms of the training snapshots, written to `grids/data/`.
pub fn histogram_stage(data: &SnapshotDataset, spec: GridSpec, art: &mut Artifacts) -> Result<()> {
    for (j, &t) in data.times.iter().enumerate() {
        let h = histogram_density(&data.snapshots[j], spec, t)?;
        art.write_grid("grids/data", &h.grid, None)?;
    }
    Ok(())
}

/// Grids under `grids/{name}/` and diagnostics in `{name}_diagnostics.json`.
pub fn write_solution(art: &mut Artifacts, name: &str, sol: &FpeSolution) -> Result<()> {
    art.write_json(&format!("{name}_diagnostics.json"), &sol.diagnostics)?;
    for g in &sol.grids {
        art.write_grid(&format!("grids/{name}"), g, None)?;
    }
    Ok(())
}

/// `{name}.json`, `{name}_curves.csv` and difference grids under
/// `grids/{name}_diff/`.
pub fn write_comparison(art: &mut Artifacts, name: &str, report: &ComparisonReport, diffs: &[DensityGrid]) -> Result<()> {
    art.write(&format!("{name}.json"), report.to_json()?)?;
    art.write(&format!("{name}_curves.csv"), report.curves_csv())?;
    for d in diffs {
        art.write_grid(&format!("grids/{name}_diff"), d, None)?;
    }
    Ok(())
}

/// Estimates drift and diffusion fields into `km_fields.json` with a
/// `km_summary.json` of coverage on `domain`.
pub fn km_stage(
    system: &SdeSystem,
    law: &InitialLaw,
    sched: &SimSchedule,
    cfg: &ExperimentConfig,
    domain: GridSpec,
    art: &mut Artifacts,
) -> Result<KmFields> {
    let acc = km_accumulate(system, law, cfg.km.n_paths, sched, cfg.km.seed, cfg.km.bin)?;
    let fields = KmFields::from_accumulator(&acc, cfg.km.min_count)?;
    art.write_json("km_fields.json", &fields)?;
    let mut warnings = fields.drift.warnings.clone();
    warnings.extend(fields.diffusion.warnings.iter().cloned());
    warnings.dedup();
    art.write_json(
        "km_summary.json",
        &KmSummary {
            pairs: fields.pairs,
            tail_fraction: fields.tail_fraction,
            coverage: fields.drift.coverage(&domain),
            valid_bins: fields.drift.valid_count(),
            warnings,
        },
    )?;
    Ok(fields)
}
