use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::coupling::{mask_complement, CouplingLayer};
use crate::flow::mlp::Mlp;
use crate::noise::{purpose, RngStream};
use crate::scalar::Scalar;

/// Which coordinates each layer passes through, in application order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskSchedule {
    /// Two dimensions: pass-through sets `{0}, {1}, {0}, ...`.
    Alternating { layers: usize },
    /// Three dimensions: pass-through sets `{0,1}, {0,2}, {1,2}, ...`.
    Cyclic { layers: usize },
    Custom { masks: Vec<Vec<usize>> },
}

impl MaskSchedule {
    /// Eight alternating layers in 2-D, six cyclic layers in 3-D.
    pub fn default_for(dim: usize) -> Result<Self> {
        match dim {
            2 => Ok(Self::Alternating { layers: 8 }),
            3 => Ok(Self::Cyclic { layers: 6 }),
            _ => Err(Error::invalid(format!("flows are built for 2 or 3 dimensions, got {dim}"))),
        }
    }

    pub fn masks(&self, dim: usize) -> Result<Vec<Vec<usize>>> {
        let masks: Vec<Vec<usize>> = match self {
            Self::Alternating { layers } if dim == 2 => (0..*layers).map(|k| vec![k % 2]).collect(),
            Self::Cyclic { layers } if dim == 3 => {
                const CYCLE: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];
                (0..*layers).map(|k| CYCLE[k % 3].to_vec()).collect()
            }
            Self::Custom { masks } => masks.clone(),
            other => {
                return Err(Error::invalid(format!("schedule {other:?} does not apply to dim {dim}")))
            }
        };
        if masks.is_empty() {
            return Err(Error::invalid("a flow needs at least one layer"));
        }
        for m in &masks {
            mask_complement(dim, m)?;
        }
        Ok(masks)
    }
}

/// Architecture of the scale and shift networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub hidden: usize,
    pub depth: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self { hidden: 32, depth: 3 }
    }
}

/// Stack of time-conditioned coupling layers over a standard normal reference.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<T> {
    dim: usize,
    schedule: MaskSchedule,
    layers: Vec<CouplingLayer<T>>,
    /// Time interval the model was fitted on, if known.
    pub time_span: Option<[f64; 2]>,
}

impl<T: Scalar> FlowModel<T> {
    /// Freshly initialized model; every coupling starts as the identity.
    pub fn build(dim: usize, schedule: &MaskSchedule, shape: NetShape, seed: u64) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::invalid(format!("flows are built for 2 or 3 dimensions, got {dim}")));
        }
        if shape.hidden == 0 || shape.depth == 0 {
            return Err(Error::invalid("networks need at least one hidden unit and layer"));
        }
        let masks = schedule.masks(dim)?;
        let mut layers = Vec::with_capacity(masks.len());
        for (k, cond) in masks.into_iter().enumerate() {
            let nb = dim - cond.len();
            let mut dims = vec![cond.len() + 1];
            dims.extend(std::iter::repeat_n(shape.hidden, shape.depth));
            dims.push(nb);
            let mu = Mlp::init(&dims, &mut RngStream::derived(seed, purpose::INIT, &[k as u64, 0]))?;
            let nu = Mlp::init(&dims, &mut RngStream::derived(seed, purpose::INIT, &[k as u64, 1]))?;
            layers.push(CouplingLayer::new(dim, cond, mu, nu)?);
        }
        Ok(Self {
            dim,
            schedule: schedule.clone(),
            layers,
            time_span: None,
        })
    }

    /// Default architecture for `dim`.
    pub fn build_default(dim: usize, seed: u64) -> Result<Self> {
        Self::build(dim, &MaskSchedule::default_for(dim)?, NetShape::default(), seed)
    }

    pub fn from_layers(dim: usize, schedule: MaskSchedule, layers: Vec<CouplingLayer<T>>) -> Result<Self> {
        let masks = schedule.masks(dim)?;
        if masks.len() != layers.len() {
            return Err(Error::DimensionMismatch {
                expected: masks.len(),
                got: layers.len(),
            });
        }
        for (m, l) in masks.iter().zip(&layers) {
            if l.dim() != dim || l.cond() != m.as_slice() {
                return Err(Error::invalid("layer masks disagree with the schedule"));
            }
        }
        Ok(Self {
            dim,
            schedule,
            layers,
            time_span: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn schedule(&self) -> &MaskSchedule {
        &self.schedule
    }

    pub fn layers(&self) -> &[CouplingLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer<T>] {
        &mut self.layers
    }

    /// Networks in the canonical order `mu_0, nu_0, mu_1, nu_1, ...`.
    pub fn nets(&self) -> impl Iterator<Item = &Mlp<T>> {
        self.layers.iter().flat_map(|l| [&l.mu, &l.nu])
    }

    pub fn nets_mut(&mut self) -> impl Iterator<Item = &mut Mlp<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.mu, &mut l.nu])
    }

    pub fn n_params(&self) -> usize {
        self.nets().map(|n| n.params().len()).sum()
    }

    fn warn_outside_span(&self, t: &[T]) {
        if let Some([lo, hi]) = self.time_span {
            let tol = 1e-9 * (hi - lo).abs().max(1.0);
            if t.iter().any(|s| s.as_f64() < lo - tol || s.as_f64() > hi + tol) {
                log::warn!("evaluating flow outside its fitted time span [{lo}, {hi}]");
            }
        }
    }

    /// Normalizing direction for one point: `(z, log|det J|)`.
    pub fn forward(&self, x: &[T], t: T) -> Result<(Vec<T>, T)> {
        let (z, ld) = self.forward_batch(x, &[t])?;
        Ok((z, ld[0]))
    }

    /// Batched normalizing direction; rows of `x` pair with entries of `t`.
    pub fn forward_batch(&self, x: &[T], t: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.warn_outside_span(t);
        let mut z = x.to_vec();
        let mut total = vec![T::zero(); t.len()];
        for layer in &self.layers {
            let (next, ld) = layer.forward_batch(&z, t)?;
            z = next;
            for (a, b) in total.iter_mut().zip(ld) {
                *a += b;
            }
        }
        Ok((z, total))
    }

    /// Generative direction for one point.
    pub fn inverse(&self, z: &[T], t: T) -> Result<Vec<T>> {
        self.inverse_batch(z, &[t])
    }

    pub fn inverse_batch(&self, z: &[T], t: &[T]) -> Result<Vec<T>> {
        self.warn_outside_span(t);
        let mut x = z.to_vec();
        for layer in self.layers.iter().rev() {
            x = layer.inverse_batch(&x, t)?;
        }
        Ok(x)
    }

    /// `log p(x, t)` by change of variables to the reference normal.
    pub fn log_density(&self, x: &[T], t: T) -> Result<T> {
        Ok(self.log_density_batch(x, &[t])?[0])
    }

    pub fn log_density_batch(&self, x: &[T], t: &[T]) -> Result<Vec<T>> {
        let (z, ld) = self.forward_batch(x, t)?;
        Ok(z.chunks_exact(self.dim)
            .zip(ld)
            .map(|(zr, l)| log_normal(zr) + l)
            .collect())
    }

    /// `n` draws from the model at time `t`, row-major `n x dim`.
    pub fn sample(&self, t: T, n: usize, rng: &mut RngStream) -> Result<Vec<T>> {
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let z: Vec<T> = (0..n * self.dim).map(|_| T::of(rng.standard_normal())).collect();
        self.inverse_batch(&z, &vec![t; n])
    }
}

/// Standard normal log-density in `z.len()` dimensions.
pub fn log_normal<T: Scalar>(z: &[T]) -> T {
    let sq: T = z.iter().map(|v| *v * *v).sum();
    let d = T::of(z.len() as f64);
    -T::of(0.5) * sq - d * T::of(0.5 * (2.0 * PI).ln())
}
