//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tnf_core::eval::{DEFAULT_MODE_THRESHOLD, HELD_OUT_TIMES};
use tnf_core::flow::{MaskSchedule, NetShape};
use tnf_core::km::{DEFAULT_BIN_WIDTH, DEFAULT_MIN_COUNT};
use tnf_core::sde::{InitialLaw, SdeSystem, SimSchedule, BUILTIN_KEYS, DEFAULT_DT_SIM};
use tnf_core::train::TrainConfig;
use tnf_core::{fpe, GridSpec};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub t0: f64,
    pub t1: f64,
    pub snapshot_dt: f64,
    pub dt_sim: f64,
    pub seed: u64,
    /// Defaults to the system's own initial law.
    pub initial_law: Option<InitialLaw>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 500,
            t0: 0.0,
            t1: 1.0,
            snapshot_dt: 0.05,
            dt_sim: DEFAULT_DT_SIM,
            seed: 0,
            initial_law: None,
        }
    }
}

impl DatasetConfig {
    pub fn schedule(&self) -> tnf_core::Result<SimSchedule> {
        SimSchedule::new(self.t0, self.t1, self.dt_sim, self.snapshot_dt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub depth: usize,
    /// Defaults to 8 alternating layers in 2-D and 6 cyclic layers in 3-D.
    pub schedule: Option<MaskSchedule>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let shape = NetShape::default();
        Self {
            hidden: shape.hidden,
            depth: shape.depth,
            schedule: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub half_width: f64,
    pub h: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            half_width: fpe::DEFAULT_HALF_WIDTH,
            h: fpe::DEFAULT_H,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> tnf_core::Result<GridSpec> {
        GridSpec::square(-self.half_width, self.half_width, self.h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpeConfig {
    /// Defaults to on for systems the solver handles (2-D additive noise).
    pub enabled: Option<bool>,
    pub dt: f64,
    pub advection: fpe::Advection,
}

impl Default for FpeConfig {
    fn default() -> Self {
        Self {
            enabled: None,
            dt: fpe::DEFAULT_DT,
            advection: fpe::Advection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmConfig {
    /// Defaults to on for 2-D Brownian systems with the FD stage enabled.
    pub enabled: Option<bool>,
    pub n_paths: usize,
    pub bin: f64,
    pub min_count: u64,
    pub seed: u64,
}

impl Default for KmConfig {
    fn default() -> Self {
        Self {
            enabled: None,
            n_paths: 10_000,
            bin: DEFAULT_BIN_WIDTH,
            min_count: DEFAULT_MIN_COUNT,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub held_out_times: Vec<f64>,
    pub mode_threshold: f64,
    /// Flow samples drawn per training time into `samples.csv`.
    pub samples_per_time: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            held_out_times: HELD_OUT_TIMES.to_vec(),
            mode_threshold: DEFAULT_MODE_THRESHOLD,
            samples_per_time: 500,
            seed: 2,
        }
    }
}

/// One end-to-end experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: String,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub fpe: FpeConfig,
    #[serde(default)]
    pub km: KmConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn minimal(system: &str) -> Self {
        Self {
            system: system.into(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            grid: GridConfig::default(),
            fpe: FpeConfig::default(),
            km: KmConfig::default(),
            eval: EvalConfig::default(),
            out_dir: None,
        }
    }

    pub fn sde(&self) -> tnf_core::Result<SdeSystem> {
        SdeSystem::builtin(&self.system)
    }

    /// Applies a `--seed` override to every seeded stage.
    pub fn reseed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.km.seed = seed.wrapping_add(1);
        self.eval.seed = seed.wrapping_add(2);
    }

    /// Fills the automatic choices and checks every range.
    pub fn normalize(mut self) -> Result<Self, CliError> {
        if !BUILTIN_KEYS.contains(&self.system.as_str()) {
            return Err(CliError::Config(format!(
                "unknown system {:?}; expected one of {}",
                self.system,
                BUILTIN_KEYS.join(", ")
            )));
        }
        let sys = self.sde()?;
        let range = |ok: bool, msg: String| if ok { Ok(()) } else { Err(CliError::Config(msg)) };
        let d = &mut self.dataset;
        range(d.n >= 2, format!("dataset.n must be at least 2, got {}", d.n))?;
        d.schedule().map_err(|e| CliError::Config(format!("dataset: {e}")))?;
        let law = d.initial_law.get_or_insert_with(|| sys.default_initial_law());
        law.validate(sys.dim).map_err(|e| CliError::Config(format!("dataset.initial_law: {e}")))?;
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        range(self.model.hidden >= 1 && self.model.depth >= 1, "model.hidden and model.depth must be at least 1".into())?;
        let schedule = match self.model.schedule.take() {
            Some(s) => s,
            None => MaskSchedule::default_for(sys.dim)?,
        };
        schedule
            .masks(sys.dim)
            .map_err(|e| CliError::Config(format!("model.schedule: {e}")))?;
        self.model.schedule = Some(schedule);
        self.grid.spec().map_err(|e| CliError::Config(format!("grid: {e}")))?;
        range(self.fpe.dt > 0.0, format!("fpe.dt must be > 0, got {}", self.fpe.dt))?;
        let fd_capable = fpe::SystemCoefficients::new(&sys).is_ok();
        let fpe_on = *self.fpe.enabled.get_or_insert(fd_capable);
        if fpe_on && !fd_capable {
            return Err(CliError::Config(format!(
                "fpe.enabled: system {:?} is outside the finite-difference solver's scope",
                self.system
            )));
        }
        let km_capable = fpe_on && sys.is_brownian();
        let km_on = *self.km.enabled.get_or_insert(km_capable);
        if km_on && sys.dim != 2 {
            return Err(CliError::Config("km.enabled requires a 2-D system".into()));
        }
        range(self.km.bin > 0.0, format!("km.bin must be > 0, got {}", self.km.bin))?;
        range(self.km.n_paths >= 1, "km.n_paths must be at least 1".into())?;
        let e = &self.eval;
        range(
            e.mode_threshold > 0.0 && e.mode_threshold < 1.0,
            format!("eval.mode_threshold must lie in (0, 1), got {}", e.mode_threshold),
        )?;
        range(
            e.held_out_times.iter().all(|t| t.is_finite()),
            "eval.held_out_times must be finite".into(),
        )?;
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Reads, defaults and validates a configuration file.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.normalize()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_reference_settings() {
        let c = parse_config(r#"{"system":"ex1"}"#).unwrap();
        assert_eq!(c.dataset.n, 500);
        assert_eq!(c.dataset.snapshot_dt, 0.05);
        assert_eq!(c.dataset.schedule().unwrap().times().len(), 21);
        assert_eq!(c.train.learning_rate, 0.005);
        assert_eq!((c.model.hidden, c.model.depth), (32, 3));
        assert_eq!(c.model.schedule, Some(MaskSchedule::Alternating { layers: 8 }));
        assert_eq!(c.fpe.enabled, Some(false));
        assert_eq!(c.km.enabled, Some(false));
        let ex4 = parse_config(r#"{"system":"ex4"}"#).unwrap();
        assert_eq!(ex4.fpe.enabled, Some(true));
        assert_eq!(ex4.km.enabled, Some(true));
        assert_eq!(ex4.dataset.initial_law, Some(InitialLaw::ScaledNormal { c: 0.5 }));
        let ex5 = parse_config(r#"{"system":"ex5"}"#).unwrap();
        assert_eq!((ex5.fpe.enabled, ex5.km.enabled), (Some(true), Some(false)));
    }

    #[test]
    fn precise_errors() {
        let e = parse_config(r#"{"system":"ex9"}"#).unwrap_err().to_string();
        assert!(e.contains("unknown system"), "{e}");
        let e = parse_config(r#"{"system":"ex1","train":{"learning_rate":-1}}"#).unwrap_err().to_string();
        assert!(e.contains("learning_rate"), "{e}");
        let e = parse_config(r#"{"system":"ex1","bogus":1}"#).unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        let e = parse_config(r#"{"system":"ex1","fpe":{"enabled":true}}"#).unwrap_err().to_string();
        assert!(e.contains("fpe.enabled"), "{e}");
    }

    #[test]
    fn normalized_config_round_trips() {
        let c = parse_config(r#"{"system":"ex2"}"#).unwrap();
        let again = parse_config(&c.to_json().unwrap()).unwrap();
        assert_eq!(c, again);
    }
}
