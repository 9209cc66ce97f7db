//! Reproducible random streams and the increments that drive the SDEs.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::Open01;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Purpose tags mixed into stream ids so that simulation, initialization and
/// sampling never share a stream even when they share a seed.
pub mod purpose {
    pub const PATHS: u64 = 0x5041_5448;
    pub const INIT: u64 = 0x494e_4954;
    pub const SAMPLE: u64 = 0x534d_504c;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const BATCH: u64 = 0x4241_5443;
}

/// SplitMix64 finalizer; used to turn structured ids into well spread stream ids.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a stream id from a purpose tag and an index path.
pub fn stream_id(purpose: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix64(purpose), |acc, &p| mix64(acc ^ mix64(p)))
}

/// A counter-based random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose 64-bit stream selector gives independent
/// sequences for distinct ids under one key.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    /// Stream for `purpose` at index path `parts` under `seed`.
    pub fn derived(seed: u64, purpose: u64, parts: &[u64]) -> Self {
        Self::new(seed, stream_id(purpose, parts))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        self.rng.sample(Open01)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn exp1(&mut self) -> f64 {
        self.rng.sample(Exp1)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Stability index of a symmetric α-stable law, restricted to (0, 2).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct StableParams {
    alpha: f64,
}

impl StableParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 2.0 {
            Ok(Self { alpha })
        } else {
            Err(Error::invalid(format!(
                "stability index must lie in (0, 2), got {alpha}"
            )))
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl TryFrom<f64> for StableParams {
    type Error = Error;

    fn try_from(alpha: f64) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<StableParams> for f64 {
    fn from(p: StableParams) -> f64 {
        p.alpha
    }
}

/// One draw from the standard symmetric α-stable law, characteristic
/// function `exp(-|u|^α)`, by the Chambers–Mallows–Stuck transform.
pub fn sample_standard_stable(params: StableParams, rng: &mut RngStream) -> f64 {
    let alpha = params.alpha;
    let v = PI * (rng.open01() - 0.5);
    if alpha == 1.0 {
        return v.tan();
    }
    let w = rng.exp1();
    let cos_v = v.cos();
    (alpha * v).sin() / cos_v.powf(1.0 / alpha)
        * ((v - alpha * v).cos() / w).powf((1.0 - alpha) / alpha)
}

/// Increment of a standard symmetric α-stable motion over `dt`.
pub fn stable_increment(params: StableParams, dt: f64, rng: &mut RngStream) -> Result<f64> {
    check_dt(dt)?;
    Ok(stable_scale(params, dt) * sample_standard_stable(params, rng))
}

/// Self-similarity factor `dt^(1/α)`.
pub fn stable_scale(params: StableParams, dt: f64) -> f64 {
    dt.powf(1.0 / params.alpha)
}

/// Brownian increment, a draw from N(0, dt).
pub fn gaussian_increment(dt: f64, rng: &mut RngStream) -> Result<f64> {
    check_dt(dt)?;
    Ok(dt.sqrt() * rng.standard_normal())
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("time step must be positive, got {dt}")))
    }
}
