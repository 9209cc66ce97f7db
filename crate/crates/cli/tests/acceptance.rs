//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pipeline outputs are kept under
//! `$CARGO_TARGET_TMPDIR/acceptance` for inspection.

use std::error::Error;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use tnf_cli::{parse_config, run_pipeline, ExperimentConfig};
use tnf_core::eval::{compare, mode_count, Modes};
use tnf_core::flow::{FlowModel, MaskSchedule, NetShape};
use tnf_core::fpe::{solve_local_fpe, ConstantDiffusion, FpeProblem};
use tnf_core::km::KmFields;
use tnf_core::noise::{sample_standard_stable, RngStream, StableParams};
use tnf_core::sde::{simulate_paths, SdeSystem, SimSchedule};
use tnf_core::train::{grad_nll, nll_loss, train, Batch, TrainConfig};
use tnf_core::{DensityGrid, GridSpec};

type Res<T> = Result<T, Box<dyn Error>>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Res<Verdict> {
    Ok(Verdict { pass, detail })
}

fn recipe(key: &str) -> Res<ExperimentConfig> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes").join(format!("{key}.json"));
    Ok(parse_config(&std::fs::read_to_string(path)?)?)
}

fn out_root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

/// Runs a recipe into `dir`, replacing earlier output.
fn run_recipe(cfg: &ExperimentConfig, dir: &Path) -> Res<Duration> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    let start = Instant::now();
    run_pipeline(cfg, dir)?;
    Ok(start.elapsed())
}

fn grids(dir: &Path, name: &str) -> Res<Vec<DensityGrid>> {
    Ok(DensityGrid::load_dir(&dir.join("grids").join(name))?)
}

fn rng(seed: u64) -> RngStream {
    RngStream::new(seed, 0xacce)
}

fn uniform(r: &mut RngStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * r.open01()
}

/// Model with every parameter perturbed, so no layer is the identity.
fn perturbed(dim: usize, layers: usize, hidden: usize, seed: u64, spread: f64) -> Res<FlowModel<f64>> {
    let schedule = if dim == 2 {
        MaskSchedule::Alternating { layers }
    } else {
        MaskSchedule::default_for(dim)?
    };
    let mut m = FlowModel::<f64>::build(dim, &schedule, NetShape { hidden, depth: 3 }, seed)?;
    let mut r = rng(seed);
    for net in m.nets_mut() {
        for p in net.params_mut() {
            *p += uniform(&mut r, -spread, spread);
        }
    }
    Ok(m)
}

/// Briefly trained default-shape model on simulated data of `key`.
fn trained(key: &str) -> Res<FlowModel<f64>> {
    let sys = SdeSystem::builtin(key)?;
    let sched = SimSchedule::new(0.0, 1.0, 1e-3, 0.05)?;
    let data = simulate_paths(&sys, &sys.default_initial_law(), 200, &sched, 11)?;
    let cfg = TrainConfig {
        max_iters: 300,
        batch_size: Some(256),
        ..TrainConfig::default()
    };
    Ok(train(FlowModel::<f64>::build_default(sys.dim, 11)?, &data, &cfg)?.model)
}

fn test_models() -> Res<Vec<(String, FlowModel<f64>)>> {
    Ok(vec![
        ("built 2-D".into(), perturbed(2, 8, 32, 1, 0.3)?),
        ("built 3-D".into(), perturbed(3, 6, 32, 2, 0.3)?),
        ("trained 2-D".into(), trained("ex4")?),
        ("trained 3-D".into(), trained("ex2")?),
    ])
}

fn random_point(r: &mut RngStream, dim: usize) -> (Vec<f64>, f64) {
    ((0..dim).map(|_| uniform(r, -4.0, 4.0)).collect(), uniform(r, 0.0, 1.0))
}

fn c1_invertibility(models: &[(String, FlowModel<f64>)]) -> Res<Verdict> {
    let mut worst = 0.0f64;
    for (k, (_, m)) in models.iter().enumerate() {
        let mut r = rng(100 + k as u64);
        for _ in 0..10_000 {
            let (x, t) = random_point(&mut r, m.dim());
            let (z, _) = m.forward(&x, t)?;
            let back = m.inverse(&z, t)?;
            for (a, b) in back.iter().zip(&x) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    verdict(worst < 1e-10, format!("max round-trip error {worst:.2e} (limit 1e-10) over 4 models x 1e4 points"))
}

fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if p != c {
            a.swap(p, c);
            det = -det;
        }
        det *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    det
}

fn c2_logdet(models: &[(String, FlowModel<f64>)]) -> Res<Verdict> {
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (k, (_, m)) in models.iter().enumerate() {
        let d = m.dim();
        let mut r = rng(200 + k as u64);
        for _ in 0..100 {
            let (x, t) = random_point(&mut r, d);
            let (_, logdet) = m.forward(&x, t)?;
            let mut jac = vec![vec![0.0; d]; d];
            for c in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += eps;
                xm[c] -= eps;
                let (zp, _) = m.forward(&xp, t)?;
                let (zm, _) = m.forward(&xm, t)?;
                for (row, (a, b)) in jac.iter_mut().zip(zp.iter().zip(&zm)) {
                    row[c] = (a - b) / (2.0 * eps);
                }
            }
            worst = worst.max((determinant(jac).abs().ln() - logdet).abs());
        }
    }
    verdict(worst < 1e-5, format!("max |logdet - ln|det J_fd|| {worst:.2e} (limit 1e-5) over 4 models x 100 points"))
}

fn c3_gradient() -> Res<Verdict> {
    let m = perturbed(2, 2, 4, 3, 0.5)?;
    let mut r = rng(300);
    let n = 16;
    let pts = (0..2 * n).map(|_| uniform(&mut r, -2.0, 2.0)).collect();
    let ts = (0..n).map(|_| uniform(&mut r, 0.0, 1.0)).collect();
    let batch = Batch::new(2, pts, ts)?;
    let (_, grad) = grad_nll(&m, &batch)?;
    let eps = 1e-5;
    let (mut worst, mut count) = (0.0f64, 0usize);
    for (k, block) in grad.blocks.iter().enumerate() {
        for (i, g) in block.iter().enumerate() {
            let eval = |delta: f64| -> Res<f64> {
                let mut mm = m.clone();
                mm.nets_mut().nth(k).unwrap().params_mut()[i] += delta;
                Ok(nll_loss(&mm, &batch)?.sum)
            };
            let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            worst = worst.max((fd - g).abs() / g.abs().max(fd.abs()).max(1e-6));
            count += 1;
        }
    }
    verdict(worst < 1e-4, format!("worst relative error {worst:.2e} (limit 1e-4) over {count} parameters"))
}

fn c4_stable() -> Res<Verdict> {
    let mut worst = 0.0f64;
    for (s, alpha) in [0.8, 1.0, 1.5, 1.9].into_iter().enumerate() {
        let p = StableParams::new(alpha)?;
        let mut r = rng(400 + s as u64);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_standard_stable(p, &mut r)).collect();
        for u in [0.5, 1.0, 2.0] {
            let cf = xs.iter().map(|x| (u * x).cos()).sum::<f64>() / xs.len() as f64;
            worst = worst.max((cf - (-f64::powf(u, alpha)).exp()).abs());
        }
    }
    verdict(worst <= 0.01, format!("max |ECF - exp(-|u|^a)| {worst:.4} (limit 0.01) over 4 alphas x 3 u"))
}

fn c5_heat() -> Res<Verdict> {
    let spec = GridSpec::square(-10.0, 10.0, 0.2)?;
    let init = DensityGrid::gaussian(spec, 0.0, 0.5);
    let times = vec![0.25, 0.5, 1.0];
    let problem = FpeProblem::new(&ConstantDiffusion([[1.0, 0.0], [0.0, 1.0]]), init, 1e-4, times, None)?;
    let sol = solve_local_fpe(&problem)?;
    let errs: Vec<f64> = sol
        .grids
        .iter()
        .map(|g| {
            let exact = DensityGrid::gaussian(spec, g.time, 0.5 + g.time);
            g.values().iter().zip(exact.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .collect();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    verdict(worst < 1e-3, format!("max error at t=0.25,0.5,1: {:.2e}, {:.2e}, {:.2e} (limit 1e-3)", errs[0], errs[1], errs[2]))
}

fn c6_mass(ex4: &Path) -> Res<Verdict> {
    let flow = grids(ex4, "flow")?;
    let held = [0.03, 0.33, 0.63, 0.93];
    let n_held = flow.iter().filter(|g| held.iter().any(|t| (g.time - t).abs() < 1e-9)).count();
    let masses: Vec<f64> = flow.iter().map(DensityGrid::mass).collect();
    let lo = masses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = masses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ok = flow.len() == 25 && n_held == 4 && lo >= 0.95 && hi <= 1.01;
    verdict(ok, format!("{} times ({n_held} held out), mass in [{lo:.4}, {hi:.4}] (limit [0.95, 1.01])", flow.len()))
}

/// Each expected location matched to a distinct mode within one cell.
fn modes_near(modes: &Modes, expected: &[[f64; 2]], h: f64) -> bool {
    if modes.count != expected.len() {
        return false;
    }
    let mut used = vec![false; modes.locations.len()];
    expected.iter().all(|e| {
        let hit = modes
            .locations
            .iter()
            .enumerate()
            .position(|(k, l)| !used[k] && (l[0] - e[0]).abs() <= h + 1e-9 && (l[1] - e[1]).abs() <= h + 1e-9);
        if let Some(k) = hit {
            used[k] = true;
        }
        hit.is_some()
    })
}

fn fmt_modes(m: &Modes) -> String {
    let locs: Vec<String> = m.locations.iter().map(|l| format!("({:.1}, {:.1})", l[0], l[1])).collect();
    format!("{} [{}]", m.count, locs.join(" "))
}

/// Worst per-snapshot `max |a - b| / max a` and whether every snapshot is
/// below `limit`.
fn error_ratio(a: &[DensityGrid], b: &[DensityGrid]) -> Res<(f64, usize)> {
    let (report, _) = compare(a, b, 0.2)?;
    let ratios: Vec<f64> = report.max.iter().zip(&report.peak_a).map(|(m, p)| m / p).collect();
    let (k, worst) = ratios
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, f64::NAN));
    Ok((worst, k))
}

/// Relative threshold for the ex4 mode check. The secondary mode of the
/// reference solution at (-2, 0) is about 0.13-0.14 of the peak, below the
/// 0.2 default.
const EX4_MODE_THRESHOLD: f64 = 0.1;

fn ex4_part(name: &str, truth: &[DensityGrid], other: &[DensityGrid], h: f64) -> Res<(bool, String)> {
    let (worst, k) = error_ratio(truth, other)?;
    let last = other.last().ok_or("no grids")?;
    let ref_last = truth.last().ok_or("no grids")?;
    let m = mode_count(last, EX4_MODE_THRESHOLD)?;
    let mr = mode_count(ref_last, EX4_MODE_THRESHOLD)?;
    let expected = [[2.0, 0.0], [-2.0, 0.0]];
    let ok = worst < 0.25 && modes_near(&m, &expected, h) && modes_near(&mr, &expected, h);
    Ok((
        ok,
        format!(
            "{name}: worst max-err/peak {worst:.3} at t={:.2} (limit 0.25), modes at t=1 {} vs FD {}",
            truth[k].time,
            fmt_modes(&m),
            fmt_modes(&mr)
        ),
    ))
}

fn c7_ex4(ex4: &Path, elapsed: Duration) -> Res<Verdict> {
    let truth = grids(ex4, "fpe")?;
    let h = truth[0].spec.h;
    let (flow_ok, flow) = ex4_part("flow", &truth, &grids(ex4, "flow")?, h)?;
    let (km_ok, km) = ex4_part("KM", &truth, &grids(ex4, "km")?, h)?;
    let fast = elapsed < Duration::from_secs(30 * 60);
    verdict(
        flow_ok && km_ok && fast,
        format!("{flow}; {km}; runtime {:.0} s (limit 1800)", elapsed.as_secs_f64()),
    )
}

fn c8_ex5(ex5: &Path, elapsed: Duration) -> Res<Verdict> {
    let truth = grids(ex5, "fpe")?;
    let flow = grids(ex5, "flow")?;
    let h = truth[0].spec.h;
    let (worst, k) = error_ratio(&truth, &flow)?;
    let curve_written = ex5.join("report_curves.csv").exists();
    let m = mode_count(flow.last().ok_or("no grids")?, 0.2)?;
    let expected = [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
    let ok = curve_written && worst < 0.25 && modes_near(&m, &expected, h) && elapsed < Duration::from_secs(3600);
    verdict(
        ok,
        format!(
            "worst max-err/peak {worst:.3} at t={:.2} (limit 0.25), modes at t=1 {}, runtime {:.0} s (limit 3600)",
            truth[k].time,
            fmt_modes(&m),
            elapsed.as_secs_f64()
        ),
    )
}

fn c9_ex3(ex3: &Path) -> Res<Verdict> {
    let flow = grids(ex3, "flow")?;
    let h = flow[0].spec.h;
    let first = mode_count(&flow[0], 0.2)?;
    let last = mode_count(flow.last().ok_or("no grids")?, 0.2)?;
    let r = 8f64.sqrt();
    let expected = [[r, r], [r, -r], [-r, r], [-r, -r]];
    let ok = first.count == 1 && modes_near(&last, &expected, h);
    verdict(ok, format!("modes at t=0: {}, at t=1: {}", fmt_modes(&first), fmt_modes(&last)))
}

fn c10_km(ex4: &Path) -> Res<Verdict> {
    let cfg = recipe("ex4")?;
    let fields: KmFields = serde_json::from_str(&std::fs::read_to_string(ex4.join("km_fields.json"))?)?;
    let sys = SdeSystem::builtin("ex4")?;
    let bins = fields.drift.bins;
    let (mut sq, mut n) = (0.0, 0usize);
    let mut worst_diff = 0.0f64;
    let mut n_diff = 0usize;
    for j in 0..bins.ny {
        for i in 0..bins.nx {
            let k = bins.index(i, j);
            let x = [bins.x(i), bins.y(j)];
            if x[0].abs() <= 3.0 && x[1].abs() <= 3.0 {
                if let Some(v) = fields.drift.value(k) {
                    let f = sys.drift_eval(&x);
                    sq += (v[0] - f[0]).powi(2) + (v[1] - f[1]).powi(2);
                    n += 1;
                }
            }
            if fields.diffusion.counts[k] >= 200 {
                if let Some(a) = fields.diffusion.value(k) {
                    let dev = [a[0] - 1.0, a[1], a[2] - 1.0].into_iter().map(f64::abs).fold(0.0, f64::max);
                    worst_diff = worst_diff.max(dev);
                    n_diff += 1;
                }
            }
        }
    }
    let rmse = (sq / n.max(1) as f64).sqrt();
    let ok = cfg.km.n_paths == 10_000 && n > 0 && n_diff > 0 && rmse < 0.3 && worst_diff <= 0.1;
    verdict(
        ok,
        format!(
            "{} paths, drift RMSE {rmse:.3} over {n} bins in [-3,3]^2 (limit 0.3), max |A - I| {worst_diff:.3} over {n_diff} bins with >= 200 samples (limit 0.1)",
            cfg.km.n_paths
        ),
    )
}

fn c11_determinism() -> Res<Verdict> {
    let mut notes = Vec::new();
    let mut ok = true;
    for key in ["ex1", "ex2", "ex3", "ex4", "ex5"] {
        let mut cfg = recipe(key)?;
        cfg.train.max_iters = 30;
        let dirs = [out_root().join("det").join(key).join("a"), out_root().join("det").join(key).join("b")];
        for d in &dirs {
            run_recipe(&cfg, d)?;
        }
        let read = |d: &Path| std::fs::read(d.join("manifest.json"));
        let (a, b) = (read(&dirs[0])?, read(&dirs[1])?);
        let manifest = tnf_cli::Manifest::load(&dirs[0].join("manifest.json"))?;
        let has = |p: &str| manifest.files.iter().any(|e| e.path.starts_with(p));
        let mut needed = vec!["model.json"];
        if key != "ex1" && key != "ex2" {
            needed.extend(["grids/flow/", "grids/fpe/", "report.json"]);
        }
        let same = a == b && needed.iter().all(|p| has(p));
        ok &= same;
        notes.push(format!("{key} {} files {}", manifest.files.len(), if same { "identical" } else { "DIFFER" }));
    }
    verdict(ok, notes.join(", "))
}

fn report(results: &mut Vec<bool>, n: usize, name: &str, r: Res<Verdict>) {
    let (pass, detail) = match r {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {n:>2} {:<4} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    results.push(pass);
}

fn main() {
    let root = out_root();
    let mut results = Vec::new();
    let run = |key: &str| -> Res<(PathBuf, Duration)> {
        let dir = root.join(key);
        eprintln!("running recipe {key} into {}", dir.display());
        let elapsed = run_recipe(&recipe(key)?, &dir)?;
        Ok((dir, elapsed))
    };
    let models = test_models();
    match &models {
        Ok(m) => {
            report(&mut results, 1, "invertibility", c1_invertibility(m));
            report(&mut results, 2, "log-det exactness", c2_logdet(m));
        }
        Err(e) => {
            report(&mut results, 1, "invertibility", Err(e.to_string().into()));
            report(&mut results, 2, "log-det exactness", Err(e.to_string().into()));
        }
    }
    report(&mut results, 3, "gradient check", c3_gradient());
    report(&mut results, 4, "stable sampler", c4_stable());
    report(&mut results, 5, "local FD heat oracle", c5_heat());
    let ex4 = run("ex4");
    let ex5 = run("ex5");
    let ex3 = run("ex3");

    let on = |r: &Res<(PathBuf, Duration)>| -> Res<(PathBuf, Duration)> {
        r.as_ref().map(|(p, d)| (p.clone(), *d)).map_err(|e| e.to_string().into())
    };
    report(&mut results, 6, "ex4 flow normalization", on(&ex4).and_then(|(d, _)| c6_mass(&d)));
    report(&mut results, 7, "ex4 pipeline", on(&ex4).and_then(|(d, t)| c7_ex4(&d, t)));
    report(&mut results, 8, "ex5 pipeline", on(&ex5).and_then(|(d, t)| c8_ex5(&d, t)));
    report(&mut results, 9, "ex3 multimodality", on(&ex3).and_then(|(d, _)| c9_ex3(&d)));
    report(&mut results, 10, "KM identification", on(&ex4).and_then(|(d, _)| c10_km(&d)));
    report(&mut results, 11, "determinism", c11_determinism());

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
