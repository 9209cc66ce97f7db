use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::coupling::CouplingLayer;
use crate::flow::mlp::Mlp;
use crate::flow::model::{FlowModel, MaskSchedule};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized network: per-layer row-major `(in, out)` weights and biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetRecord {
    pub dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    /// Pass-through coordinates (0-based).
    pub mask: Vec<usize>,
    pub mu: NetRecord,
    pub nu: NetRecord,
}

/// Provenance of a trained model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub time_span: Option<[f64; 2]>,
    pub iterations: usize,
    pub best_iteration: usize,
    pub best_val_nll: Option<f64>,
    pub seed: u64,
    pub dataset: Option<String>,
}

/// On-disk JSON form of a [`FlowModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub dim: usize,
    pub schedule: MaskSchedule,
    pub layers: Vec<LayerRecord>,
    pub train_meta: TrainMeta,
}

fn record<T: Scalar>(net: &Mlp<T>) -> NetRecord {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..net.n_layers() {
        let (w, b) = net.layer(l);
        weights.push(w.iter().map(|v| v.as_f64()).collect());
        biases.push(b.iter().map(|v| v.as_f64()).collect());
    }
    NetRecord {
        dims: net.dims().to_vec(),
        weights,
        biases,
    }
}

fn restore<T: Scalar>(rec: &NetRecord) -> Result<Mlp<T>> {
    let mut net = Mlp::<T>::zeros(&rec.dims)?;
    if rec.weights.len() != net.n_layers() || rec.biases.len() != net.n_layers() {
        return Err(Error::Format("network record has the wrong number of layers".into()));
    }
    for l in 0..net.n_layers() {
        let (w, b) = net.layer_mut(l);
        if rec.weights[l].len() != w.len() || rec.biases[l].len() != b.len() {
            return Err(Error::Format(format!("layer {l} has the wrong parameter count")));
        }
        for (dst, src) in w.iter_mut().zip(&rec.weights[l]).chain(b.iter_mut().zip(&rec.biases[l])) {
            if !src.is_finite() {
                return Err(Error::Format("non-finite parameter in checkpoint".into()));
            }
            *dst = T::of(*src);
        }
    }
    Ok(net)
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &FlowModel<T>, mut meta: TrainMeta) -> Self {
        if meta.time_span.is_none() {
            meta.time_span = model.time_span;
        }
        Self {
            version: CHECKPOINT_VERSION,
            dim: model.dim(),
            schedule: model.schedule().clone(),
            layers: model
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    mask: l.cond().to_vec(),
                    mu: record(&l.mu),
                    nu: record(&l.nu),
                })
                .collect(),
            train_meta: meta,
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<FlowModel<T>> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", self.version)));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| CouplingLayer::new(self.dim, l.mask.clone(), restore(&l.mu)?, restore(&l.nu)?))
            .collect::<Result<Vec<_>>>()?;
        let mut model = FlowModel::from_layers(self.dim, self.schedule.clone(), layers)?;
        model.time_span = self.train_meta.time_span;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
