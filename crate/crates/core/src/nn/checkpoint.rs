//! Versioned JSON checkpoint container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, Model};
use crate::adapt::DomainStatsRegistry;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "odil-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model configuration, every parameter tensor, every batchnorm state, the
/// run seed and optionally the per-domain statistics registry.
///
/// `from_json(to_json(c)) == c` bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    /// Digest of the experiment configuration that produced this checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub model: Model,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<DomainStatsRegistry>,
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64, registry: Option<DomainStatsRegistry>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed,
            config_digest: None,
            model,
            registry,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("not a checkpoint: format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        if let Some(reg) = &ckpt.registry {
            reg.check_signature(&ckpt.model.bn_signature())?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn bits_differ(a: &[f64], b: &[f64]) -> bool {
    a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits())
}

fn tensor_differs(a: &Tensor, b: &Tensor) -> bool {
    !a.bit_eq(b)
}

/// Bitwise differences between two checkpoints, one entry per changed field,
/// e.g. `layer 1 running_mean`. An empty list means identical.
pub fn diff_checkpoints(a: &Checkpoint, b: &Checkpoint) -> Vec<String> {
    let mut out = Vec::new();
    if a.seed != b.seed {
        out.push("seed".into());
    }
    if a.model.config() != b.model.config() {
        out.push("config".into());
        return out;
    }
    for (idx, (la, lb)) in a.model.layers().iter().zip(b.model.layers()).enumerate() {
        let mut note = |field: &str, differs: bool| {
            if differs {
                out.push(format!("layer {idx} {field}"));
            }
        };
        match (la, lb) {
            (Layer::Dense(x), Layer::Dense(y)) => {
                note("weight", tensor_differs(&x.weight, &y.weight));
                note("bias", tensor_differs(&x.bias, &y.bias));
            }
            (Layer::Conv2d(x), Layer::Conv2d(y)) => {
                note("weight", tensor_differs(&x.weight, &y.weight));
                note("bias", tensor_differs(&x.bias, &y.bias));
                note("padding", x.padding != y.padding);
            }
            (Layer::BatchNorm(x), Layer::BatchNorm(y)) => {
                note("gamma", tensor_differs(&x.gamma, &y.gamma));
                note("beta", tensor_differs(&x.beta, &y.beta));
                note("running_mean", bits_differ(x.running_mean(), y.running_mean()));
                note("running_var", bits_differ(x.running_var(), y.running_var()));
                note("eps", x.eps().to_bits() != y.eps().to_bits());
                note("momentum", x.momentum().to_bits() != y.momentum().to_bits());
            }
            (Layer::Relu, Layer::Relu) | (Layer::GlobalAvgPool, Layer::GlobalAvgPool) => {}
            _ => note("kind", true),
        }
    }
    if a.registry != b.registry {
        out.push("registry".into());
    }
    out
}
