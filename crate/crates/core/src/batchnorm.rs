//! Batch normalization with explicit running statistics.
//!
//! Inputs carry channels on axis 1: `(N, C)` for feature vectors or
//! `(N, C, H, W)` for feature maps. Batch moments are taken per channel over
//! the batch and all spatial positions, using population (biased) variance,
//! and the running statistics follow an exponential moving average with
//! momentum `alpha`:
//!
//! ```text
//! y      = gamma * (x - mean) / sqrt(var + eps) + beta
//! mean^  = alpha * mean_batch + (1 - alpha) * mean^
//! var^   = alpha * var_batch  + (1 - alpha) * var^
//! ```

use serde::{Deserialize, Serialize};

use crate::adapt::TaskId;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    eps: f64,
    momentum: f64,
}

/// Values retained by a train-mode forward for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

fn layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape.get(1).copied().unwrap_or(0);
    let s: usize = shape.iter().skip(2).product();
    (n, c, s)
}

impl BnState {
    /// Identity-initialized state: `gamma = 1`, `beta = 0`, running mean 0, running variance 1.
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("batchnorm needs at least one channel".into()));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("batchnorm eps must be > 0, got {eps}")));
        }
        check_momentum(momentum)?;
        Ok(Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps,
            momentum,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn set_momentum(&mut self, momentum: f64) -> Result<()> {
        check_momentum(momentum)?;
        self.momentum = momentum;
        Ok(())
    }

    /// Overwrites the running statistics. Variances must be finite and non-negative.
    pub fn set_running_stats(&mut self, mean: &[f64], var: &[f64]) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::SignatureMismatch(format!(
                "expected {} channels, got mean {} / var {}",
                self.channels(),
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("running statistics must be finite with var >= 0".into()));
        }
        self.running_mean.copy_from_slice(mean);
        self.running_var.copy_from_slice(var);
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, s) = layout(x.shape());
        if x.shape().len() < 2 || c != self.channels() {
            return Err(Error::Shape(format!(
                "batchnorm over {} channels got input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok((n, c, s))
    }

    /// Per-channel batch mean and population variance over batch and spatial axes.
    pub fn batch_moments(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, c, s) = self.check_input(x)?;
        let population = n * s;
        if population < 2 {
            return Err(Error::DegenerateBatch { layer: 0, population });
        }
        let data = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * s;
                sum += data[base..base + s].iter().sum::<f64>();
            }
            let m = sum / population as f64;
            let mut sq = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * s;
                sq += data[base..base + s].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = sq / population as f64;
        }
        Ok((mean, var))
    }

    /// Train-mode forward: normalizes with batch moments and folds them into the
    /// running statistics.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let (mean, var) = self.batch_moments(x)?;
        let (n, c, s) = layout(x.shape());
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let data = x.data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    let h = (data[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = gamma[ch] * h + beta[ch];
                }
            }
        }
        let a = self.momentum;
        for ch in 0..c {
            self.running_mean[ch] = a * mean[ch] + (1.0 - a) * self.running_mean[ch];
            self.running_var[ch] = (a * var[ch] + (1.0 - a) * self.running_var[ch]).max(0.0);
        }
        let cache = BnCache {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
        };
        Ok((Tensor::new(x.shape().to_vec(), out)?, cache))
    }

    /// Eval-mode forward using the running statistics. Never mutates state.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, s) = self.check_input(x)?;
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        let scale: Vec<f64> = (0..c)
            .map(|ch| gamma[ch] / (self.running_var[ch] + self.eps).sqrt())
            .collect();
        let data = x.data();
        let mut out = vec![0.0; data.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                let m = self.running_mean[ch];
                for j in base..base + s {
                    out[j] = scale[ch] * (data[j] - m) + beta[ch];
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Gradients `(dx, dgamma, dbeta)` for a train-mode forward.
    pub fn backward(&self, cache: &BnCache, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        if dy.shape() != cache.shape.as_slice() {
            return Err(Error::Shape(format!(
                "batchnorm upstream gradient {:?} vs forward {:?}",
                dy.shape(),
                cache.shape
            )));
        }
        let (n, c, s) = layout(&cache.shape);
        let m = (n * s) as f64;
        let g = dy.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    dgamma[ch] += g[j] * cache.xhat[j];
                    dbeta[ch] += g[j];
                }
            }
        }
        let gamma = self.gamma.data();
        let mut dx = vec![0.0; g.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                let k = gamma[ch] * cache.inv_std[ch] / m;
                for j in base..base + s {
                    dx[j] = k * (m * g[j] - dbeta[ch] - cache.xhat[j] * dgamma[ch]);
                }
            }
        }
        Ok((
            Tensor::new(cache.shape.clone(), dx)?,
            Tensor::from_vec(dgamma),
            Tensor::from_vec(dbeta),
        ))
    }
}

fn check_momentum(momentum: f64) -> Result<()> {
    if momentum > 0.0 && momentum <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("batchnorm momentum must be in (0, 1], got {momentum}")))
    }
}

/// Running statistics of one batchnorm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// How a snapshot came to exist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SnapshotOrigin {
    /// Statistics accumulated while training the base model.
    Base,
    /// Statistics produced by forward-only adaptation.
    Adapted {
        policy: String,
        chosen_step: usize,
        total_steps: usize,
    },
    Manual,
}

/// Frozen copy of every batchnorm layer's running statistics, labelled with a task id.
///
/// Fields are private; a snapshot cannot change after creation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnSnapshot {
    task_id: TaskId,
    layers: Vec<BnStats>,
    origin: SnapshotOrigin,
}

impl BnSnapshot {
    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn layers(&self) -> &[BnStats] {
        &self.layers
    }

    pub fn origin(&self) -> &SnapshotOrigin {
        &self.origin
    }

    /// Channel count of each batchnorm layer, in model order.
    pub fn signature(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.running_mean.len()).collect()
    }

    /// Bitwise comparison of the stored statistics.
    pub fn stats_bit_eq(&self, other: &BnSnapshot) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                bits(&a.running_mean) == bits(&b.running_mean) && bits(&a.running_var) == bits(&b.running_var)
            })
    }
}

/// Copies the running statistics of every batchnorm layer of `model`.
pub fn bn_snapshot(model: &Model, task_id: TaskId, origin: SnapshotOrigin) -> BnSnapshot {
    let layers = model
        .bn_layers()
        .map(|bn| BnStats {
            running_mean: bn.running_mean.clone(),
            running_var: bn.running_var.clone(),
        })
        .collect();
    BnSnapshot {
        task_id,
        layers,
        origin,
    }
}

/// Overwrites every batchnorm layer's running statistics with `snapshot`.
/// Leaves `gamma`, `beta`, momentum and all other parameters untouched.
pub fn bn_restore(model: &mut Model, snapshot: &BnSnapshot) -> Result<()> {
    let expected = model.bn_signature();
    if expected != snapshot.signature() {
        return Err(Error::SignatureMismatch(format!(
            "model batchnorm channels {expected:?}, snapshot {:?}",
            snapshot.signature()
        )));
    }
    for (bn, stats) in model.bn_layers_mut().zip(&snapshot.layers) {
        bn.set_running_stats(&stats.running_mean, &stats.running_var)?;
    }
    Ok(())
}
