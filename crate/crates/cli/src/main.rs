use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tnf_cli::config::{GridConfig, ModelConfig};
use tnf_cli::io::{load_dataset, read_text};
use tnf_cli::pipeline::{self, evaluation_times, FdSettings};
use tnf_cli::{validate_config, Artifacts, CliError, ExperimentConfig, Result};
use tnf_core::eval::{compare, DEFAULT_MODE_THRESHOLD, HELD_OUT_TIMES};
use tnf_core::flow::{Checkpoint, FlowModel};
use tnf_core::km::{self, KmAccumulator, KmFields, DEFAULT_BIN_WIDTH, DEFAULT_MIN_COUNT};
use tnf_core::sde::{self, SdeSystem, SimSchedule, TransitionPairs};
use tnf_core::train::TrainConfig;
use tnf_core::{fpe, DensityGrid};

/// Temporal normalizing flows for SDE snapshot data.
#[derive(Parser, Debug)]
#[command(name = "tnf", version, about)]
struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Log filter (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info", value_name = "LEVEL")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate snapshot data (or fine-step transition pairs) of a system.
    Simulate(SimulateArgs),
    /// Train a flow on a dataset CSV.
    Train(TrainArgs),
    /// Evaluate a trained flow's density on a grid.
    Density(DensityArgs),
    /// Draw samples from a trained flow.
    Sample(SampleArgs),
    /// Solve the Fokker–Planck equation by finite differences.
    Fpe(FpeArgs),
    /// Estimate drift and diffusion fields from transition pairs.
    Km(KmArgs),
    /// Compare two directories of density grids.
    Compare(CompareArgs),
    /// Run a full experiment from a configuration file.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct SystemArgs {
    /// Configuration file; its dataset section supplies the defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Built-in system key (ex1..ex5), overriding the configuration.
    #[arg(long, value_name = "KEY")]
    system: Option<String>,
    /// Final time.
    #[arg(long)]
    t1: Option<f64>,
    /// Time between snapshots.
    #[arg(long)]
    snapshot_dt: Option<f64>,
    /// Euler–Maruyama step.
    #[arg(long)]
    dt_sim: Option<f64>,
}

impl SystemArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.system) {
            (Some(path), _) => validate_config(path)?,
            (None, Some(key)) => ExperimentConfig::minimal(key),
            (None, None) => return Err(CliError::Usage("pass --system or --config".into())),
        };
        if let Some(key) = &self.system {
            if self.config.is_some() && key != &cfg.system {
                cfg.dataset.initial_law = None;
                cfg.fpe.enabled = None;
                cfg.km.enabled = None;
                cfg.model.schedule = None;
            }
            cfg.system = key.clone();
        }
        if let Some(t1) = self.t1 {
            cfg.dataset.t1 = t1;
        }
        if let Some(s) = self.snapshot_dt {
            cfg.dataset.snapshot_dt = s;
        }
        if let Some(dt) = self.dt_sim {
            cfg.dataset.dt_sim = dt;
        }
        cfg.normalize()
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    system: SystemArgs,
    /// Paths per snapshot.
    #[arg(long)]
    n: Option<usize>,
    /// Write every fine-step transition of this many paths to `pairs.csv`
    /// instead of snapshots.
    #[arg(long, value_name = "PATHS")]
    pairs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset CSV (its `.json` sidecar is read when present).
    #[arg(long, value_name = "CSV")]
    data: PathBuf,
    /// Experiment configuration (model and train sections are used) or a
    /// bare training configuration.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Loss history CSV when --out names the model file.
    #[arg(long, value_name = "CSV")]
    loss_out: Option<PathBuf>,
    /// Iteration cap.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Minibatch size; all points when absent.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Grid covers [-W, W]^2.
    #[arg(long, default_value_t = fpe::DEFAULT_HALF_WIDTH, value_name = "W")]
    half_width: f64,
    /// Grid spacing.
    #[arg(long, default_value_t = fpe::DEFAULT_H)]
    h: f64,
    /// Evaluation times, comma separated. Defaults to the 21 snapshot times
    /// on [0, 1] and the held-out times.
    #[arg(long, value_delimiter = ',', value_name = "T,..")]
    times: Vec<f64>,
}

impl GridArgs {
    fn spec(&self) -> Result<tnf_core::GridSpec> {
        let g = GridConfig {
            half_width: self.half_width,
            h: self.h,
        };
        g.spec().map_err(|e| CliError::Usage(format!("grid: {e}")))
    }

    fn times(&self) -> Result<Vec<f64>> {
        if self.times.is_empty() {
            let sched = SimSchedule::new(0.0, 1.0, sde::DEFAULT_DT_SIM, 0.05)?;
            return Ok(evaluation_times(&sched, &HELD_OUT_TIMES));
        }
        let mut t = self.times.clone();
        if t.iter().any(|v| !v.is_finite()) || t.windows(2).any(|w| w[1] < w[0]) {
            return Err(CliError::Usage("--times must be finite and non-decreasing".into()));
        }
        t.dedup();
        Ok(t)
    }
}

#[derive(Args, Debug)]
struct DensityArgs {
    /// Trained model JSON.
    #[arg(long, value_name = "JSON")]
    model: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    /// Relative threshold for mode detection.
    #[arg(long, default_value_t = DEFAULT_MODE_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Trained model JSON.
    #[arg(long, value_name = "JSON")]
    model: PathBuf,
    /// Sample times, comma separated.
    #[arg(long, value_delimiter = ',', required = true, value_name = "T,..")]
    times: Vec<f64>,
    /// Samples per time.
    #[arg(long, default_value_t = 500)]
    n: usize,
}

#[derive(Args, Debug)]
struct FpeArgs {
    /// Built-in system (2-D, additive noise) supplying the initial law and,
    /// without --km, the coefficients.
    #[arg(long, value_name = "KEY")]
    system: String,
    /// Use the drift and diffusion fields of a `km_fields.json`.
    #[arg(long, value_name = "JSON")]
    km: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
    /// Final output time; with this flag the outputs are every 0.05 up to it
    /// (and --times is ignored).
    #[arg(long)]
    t1: Option<f64>,
    /// Time step.
    #[arg(long, default_value_t = fpe::DEFAULT_DT)]
    dt: f64,
    /// Drift flux discretization.
    #[arg(long, value_enum, default_value_t = AdvectionArg::Upwind)]
    advection: AdvectionArg,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum AdvectionArg {
    Upwind,
    ExponentialFitting,
}

impl From<AdvectionArg> for fpe::Advection {
    fn from(a: AdvectionArg) -> Self {
        match a {
            AdvectionArg::Upwind => fpe::Advection::Upwind,
            AdvectionArg::ExponentialFitting => fpe::Advection::ExponentialFitting,
        }
    }
}

#[derive(Args, Debug)]
struct KmArgs {
    #[command(flatten)]
    system: SystemArgs,
    /// Read transition pairs from this CSV instead of simulating.
    #[arg(long, visible_alias = "data", value_name = "CSV", conflicts_with = "system")]
    pairs: Option<PathBuf>,
    /// Simulated paths.
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    /// Bin width.
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
    bin: f64,
    /// Minimum pairs per valid bin.
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    min_count: u64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Directory of reference grids.
    #[arg(long, value_name = "DIR")]
    a: PathBuf,
    /// Directory of grids compared against the reference.
    #[arg(long, value_name = "DIR")]
    b: PathBuf,
    /// Relative threshold for mode detection.
    #[arg(long, default_value_t = DEFAULT_MODE_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment configuration (see recipes/).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Print the normalized configuration and exit.
    #[arg(long)]
    check: bool,
}

fn out_dir(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))
}

fn load_model(path: &Path) -> Result<FlowModel<f64>> {
    Ok(Checkpoint::from_json(&read_text(path)?)?.to_model()?)
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let mut cfg = a.system.resolve()?;
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
    }
    if let Some(n) = a.n {
        cfg.dataset.n = n;
        cfg = cfg.normalize()?;
    }
    let out = out_dir(&cli.out)?;
    let mut art = Artifacts::new(out);
    let system = cfg.sde()?;
    let law = cfg.dataset.initial_law.clone().expect("normalized");
    let sched = cfg.dataset.schedule()?;
    match a.pairs {
        Some(paths) => {
            let pairs = sde::simulate_transitions(&system, &law, paths, &sched, cfg.dataset.seed)?;
            art.write("pairs.csv", pairs.to_csv())?;
        }
        None => {
            pipeline::simulate_stage(&system, &law, cfg.dataset.n, &sched, cfg.dataset.seed, &mut art)?;
        }
    }
    art.finish()?;
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let (mut model_cfg, mut train_cfg) = match &a.config {
        Some(p) => {
            let text = read_text(p)?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
            if value.get("system").is_some() {
                let c = validate_config(p)?;
                (c.model, c.train)
            } else {
                let t: TrainConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
                (ModelConfig::default(), t)
            }
        }
        None => (ModelConfig::default(), TrainConfig::default()),
    };
    if let Some(seed) = cli.seed {
        model_cfg.seed = seed;
        train_cfg.seed = seed;
    }
    if let Some(it) = a.max_iters {
        train_cfg.max_iters = it;
    }
    if a.batch_size.is_some() {
        train_cfg.batch_size = a.batch_size;
    }
    if let Some(lr) = a.lr {
        train_cfg.learning_rate = lr;
    }
    train_cfg.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
    let data = load_dataset(&a.data)?;
    if model_cfg.schedule.as_ref().is_some_and(|s| s.masks(data.dim).is_err()) {
        model_cfg.schedule = None;
    }
    let out = out_dir(&cli.out)?;
    let name = a.data.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    // `--out model.json` names the checkpoint; otherwise `--out` is a directory.
    let (mut art, files) = if out.extension().is_some_and(|e| e == "json") {
        let model = out.to_string_lossy().into_owned();
        let loss = match &a.loss_out {
            Some(p) => p.to_string_lossy().into_owned(),
            None => out.with_file_name("loss.csv").to_string_lossy().into_owned(),
        };
        let files = pipeline::TrainFiles {
            summary: out.with_extension("summary.json").to_string_lossy().into_owned(),
            model,
            loss,
        };
        let manifest = out.with_extension("manifest.json").to_string_lossy().into_owned();
        (Artifacts::with_manifest(".", &manifest), files)
    } else {
        if a.loss_out.is_some() {
            return Err(CliError::Usage("--loss-out needs --out to name the model file".into()));
        }
        (Artifacts::new(out), pipeline::TrainFiles::default())
    };
    pipeline::train_stage(&model_cfg, &train_cfg, &data, &name, &files, &mut art)?;
    art.finish()?;
    Ok(())
}

fn density(cli: &Cli, a: &DensityArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    if model.dim() != 2 {
        return Err(CliError::Usage(format!("density grids need a 2-D model, got {}-D", model.dim())));
    }
    let mut art = Artifacts::new(out_dir(&cli.out)?);
    pipeline::density_stage(&model, a.grid.spec()?, &a.grid.times()?, a.threshold, &mut art)?;
    art.finish()?;
    Ok(())
}

fn sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let mut art = Artifacts::new(out_dir(&cli.out)?);
    pipeline::sample_stage(&model, &a.times, a.n, cli.seed.unwrap_or(0), &mut art)?;
    art.finish()?;
    Ok(())
}

fn fpe_cmd(cli: &Cli, a: &FpeArgs) -> Result<()> {
    let system = SdeSystem::builtin(&a.system).map_err(|e| CliError::Usage(e.to_string()))?;
    let law = system.default_initial_law();
    let fd = FdSettings {
        spec: a.grid.spec()?,
        t0: 0.0,
        dt: a.dt,
        advection: a.advection.into(),
    };
    let times = match a.t1 {
        Some(t1) => SimSchedule::new(0.0, t1, a.dt, 0.05).map_err(|e| CliError::Usage(format!("--t1: {e}")))?.times(),
        None => a.grid.times()?,
    };
    let sol = match &a.km {
        Some(path) => {
            let fields: KmFields = serde_json::from_str(&read_text(path)?)?;
            pipeline::solve_km_fpe(&fields, &law, &fd, &times)?
        }
        None => pipeline::solve_system_fpe(&system, &law, &fd, &times)?,
    };
    let mut art = Artifacts::new(out_dir(&cli.out)?);
    pipeline::write_solution(&mut art, "fpe", &sol)?;
    art.finish()?;
    Ok(())
}

fn km_cmd(cli: &Cli, a: &KmArgs) -> Result<()> {
    let acc = match &a.pairs {
        Some(path) => {
            let pairs = TransitionPairs::from_csv(&read_text(path)?)?;
            if pairs.dim != 2 {
                return Err(CliError::Usage(format!("need 2-D pairs, got {}-D", pairs.dim)));
            }
            let bins = km::default_bins(&pairs.starts, a.bin)?;
            let mut acc = KmAccumulator::new(bins, pairs.dt)?;
            acc.extend(&pairs)?;
            acc
        }
        None => {
            let cfg = a.system.resolve()?;
            let system = cfg.sde()?;
            if system.dim != 2 {
                return Err(CliError::Usage("km needs a 2-D system".into()));
            }
            let law = cfg.dataset.initial_law.clone().expect("normalized");
            let sched = cfg.dataset.schedule()?;
            pipeline::km_accumulate(&system, &law, a.paths, &sched, cli.seed.unwrap_or(1), a.bin)?
        }
    };
    let fields = KmFields::from_accumulator(&acc, a.min_count)?;
    let mut art = Artifacts::new(out_dir(&cli.out)?);
    art.write_json("km_fields.json", &fields)?;
    art.finish()?;
    Ok(())
}

fn compare_cmd(cli: &Cli, a: &CompareArgs) -> Result<()> {
    let load = |p: &Path| -> Result<Vec<DensityGrid>> {
        let g = DensityGrid::load_dir(p)?;
        if g.is_empty() {
            return Err(CliError::Usage(format!("{}: no grids found", p.display())));
        }
        Ok(g)
    };
    let (ga, gb) = (load(&a.a)?, load(&a.b)?);
    let (report, diffs) = compare(&ga, &gb, a.threshold)?;
    let mut art = Artifacts::new(out_dir(&cli.out)?);
    pipeline::write_comparison(&mut art, "report", &report, &diffs)?;
    art.finish()?;
    Ok(())
}

fn run(cli: &Cli, a: &RunArgs) -> Result<()> {
    let mut cfg = validate_config(&a.config)?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if a.check {
        print!("{}", cfg.to_json()?);
        return Ok(());
    }
    let out = match (&cli.out, &cfg.out_dir) {
        (Some(o), _) | (None, Some(o)) => o.clone(),
        (None, None) => return Err(CliError::Usage("--out is required when the config has no out_dir".into())),
    };
    let manifest = pipeline::run_pipeline(&cfg, &out)?;
    log::info!("{} files written to {}", manifest.files.len(), out.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Density(a) => density(cli, a),
        Command::Sample(a) => sample(cli, a),
        Command::Fpe(a) => fpe_cmd(cli, a),
        Command::Km(a) => km_cmd(cli, a),
        Command::Compare(a) => compare_cmd(cli, a),
        Command::Run(a) => run(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
