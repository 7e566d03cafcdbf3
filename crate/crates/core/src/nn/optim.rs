use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Gradients, Model, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One classical-momentum SGD step over aligned slices:
/// `v <- m*v + g; p <- p - lr*v`.
///
/// All gradients are checked before anything is written, so a non-finite
/// gradient aborts the step without touching parameters or velocities.
pub fn sgd_update(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    velocities: Option<&mut [&mut Tensor]>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} params vs {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("param {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
    }
    match velocities {
        Some(vs) => {
            if vs.len() != params.len() {
                return Err(Error::Shape("velocity buffers do not align with params".into()));
            }
            for ((p, g), v) in params.iter_mut().zip(grads).zip(vs.iter_mut()) {
                for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vv = momentum * *vv + gv;
                    *pv -= lr * *vv;
                }
            }
        }
        None => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
    }
    Ok(())
}

/// SGD with classical (non-Nesterov) momentum.
///
/// Velocity buffers are created lazily at zero, keyed by parameter, and only
/// when `momentum > 0`.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(&id)
    }

    /// Applies `grads` to the matching parameters of `model`.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        for (id, g) in &grads.entries {
            let p = model
                .param(*id)
                .ok_or_else(|| Error::Config(format!("no parameter {id:?}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("{id:?}: {:?} vs {:?}", p.shape(), g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {id:?}")));
            }
        }
        for (id, g) in &grads.entries {
            let p = model.param_mut(*id).expect("checked above");
            if self.momentum > 0.0 {
                let v = self
                    .velocity
                    .entry(*id)
                    .or_insert_with(|| Tensor::zeros(g.shape()));
                sgd_update(&mut [p], &[g], Some(&mut [v]), self.lr, self.momentum)?;
            } else {
                sgd_update(&mut [p], &[g], None, self.lr, 0.0)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

/// Per-epoch learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn cosine(lr_max: f64, lr_min: f64, total_epochs: usize) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            lr_max,
            lr_min,
            total_epochs,
        }
    }

    /// Learning rate for `epoch`, `lr_min + (lr_max - lr_min)(1 + cos(pi*epoch/total))/2`
    /// for the cosine kind.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if self.total_epochs == 0 {
            return Err(Error::Config("schedule total_epochs must be >= 1".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "schedule needs 0 <= lr_min <= lr_max, lr_max > 0 (got {}, {})",
                self.lr_min, self.lr_max
            )));
        }
        if epoch > self.total_epochs {
            return Err(Error::Config(format!(
                "epoch {epoch} beyond schedule length {}",
                self.total_epochs
            )));
        }
        Ok(match self.kind {
            ScheduleKind::Constant => self.lr_max,
            ScheduleKind::Cosine => {
                let t = PI * epoch as f64 / self.total_epochs as f64;
                self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + t.cos())
            }
        })
    }
}

/// Cosine learning rate at `epoch`.
pub fn cosine_lr(epoch: usize, schedule: &LrSchedule) -> Result<f64> {
    LrSchedule {
        kind: ScheduleKind::Cosine,
        ..*schedule
    }
    .lr_at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn plain_step() {
        let mut p = scalar(1.0);
        sgd_update(&mut [&mut p], &[&scalar(1.0)], None, 0.1, 0.0).unwrap();
        assert_eq!(p.data()[0], 0.9);
    }

    #[test]
    fn momentum_unrolled_by_hand() {
        let mut p = scalar(0.0);
        let mut v = scalar(0.0);
        let g = scalar(1.0);
        for _ in 0..2 {
            sgd_update(&mut [&mut p], &[&g], Some(&mut [&mut v]), 1.0, 0.9).unwrap();
        }
        // v1 = 1, p1 = -1; v2 = 0.9 + 1 = 1.9, p2 = -2.9
        assert!((v.data()[0] - 1.9).abs() < 1e-15);
        assert!((p.data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Tensor::from_vec(vec![0.3, -2.0]);
        let before = p.clone();
        let mut v = Tensor::zeros(&[2]);
        sgd_update(&mut [&mut p], &[&Tensor::zeros(&[2])], Some(&mut [&mut v]), 0.5, 0.9).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = Tensor::from_vec(vec![1.0, 1.0]);
        let g = Tensor::from_vec(vec![0.5, f64::NAN]);
        assert!(sgd_update(&mut [&mut p], &[&g], None, 0.1, 0.0).is_err());
        assert_eq!(p.data(), &[1.0, 1.0]);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = LrSchedule::cosine(0.0001, 0.0, 120);
        assert_eq!(cosine_lr(0, &s).unwrap(), 0.0001);
        assert!(cosine_lr(120, &s).unwrap().abs() < 1e-20);
        assert!((cosine_lr(60, &s).unwrap() - 0.00005).abs() < 1e-15);
        let zero = LrSchedule::cosine(0.1, 0.0, 0);
        assert!(cosine_lr(0, &zero).is_err());
        assert!(cosine_lr(121, &s).is_err());
    }

    #[test]
    fn optimizer_validates_hyperparams() {
        assert!(Sgd::new(0.0, 0.9).is_err());
        assert!(Sgd::new(0.1, 1.0).is_err());
        assert!(Sgd::new(0.1, 0.0).is_ok());
    }
}
