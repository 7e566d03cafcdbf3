//! Forward-only adaptation of batchnorm statistics with adaptive momentum,
//! per-domain statistics registry, and task-conditioned inference.
//!
//! Adapting to a new domain never runs a backward pass. Starting from the base
//! statistics, each of the `K` adaptation samples is forwarded in train mode
//! with the batchnorm momentum set to `alpha_k`, where
//!
//! ```text
//! alpha_k = omega * alpha_{k-1} + delta
//! ```
//!
//! The resulting statistics are frozen into a [`BnSnapshot`] and stored under
//! the domain's task id. Inference restores the snapshot for the requested task
//! before an eval-mode forward, so earlier domains are never affected by later
//! ones.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batchnorm::{bn_restore, bn_snapshot, BnSnapshot, SnapshotOrigin};
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::tensor::Tensor;

/// Domain identifier supplied alongside test samples. Task 1 is the base domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl TaskId {
    pub const BASE: TaskId = TaskId(1);
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Adaptive momentum schedule `alpha_k = decay * alpha_{k-1} + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumSchedule {
    /// `alpha_0`.
    pub initial: f64,
    /// `omega`, in (0, 1).
    pub decay: f64,
    /// `delta`, in (0, initial).
    pub offset: f64,
    /// Number of adaptation samples `K`.
    pub samples: usize,
}

impl MomentumSchedule {
    /// `alpha_0 = 0.1, omega = 0.94, delta = 0.05`. The sequence rises toward
    /// `delta / (1 - omega) ~= 0.833`.
    pub fn standard(samples: usize) -> Self {
        Self {
            initial: 0.1,
            decay: 0.94,
            offset: 0.05,
            samples,
        }
    }

    /// `alpha_0 = 0.1, omega = 0.94, delta = 0.005`: a sequence that decays toward
    /// `~0.0833`.
    pub fn decaying(samples: usize) -> Self {
        Self {
            offset: 0.005,
            ..Self::standard(samples)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial <= 1.0) {
            return Err(Error::Config(format!("alpha_0 must be in (0, 1], got {}", self.initial)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("decay must be in (0, 1), got {}", self.decay)));
        }
        if !(self.offset > 0.0 && self.offset < self.initial) {
            return Err(Error::Config(format!(
                "offset must satisfy 0 < offset < alpha_0, got {}",
                self.offset
            )));
        }
        if self.samples == 0 {
            return Err(Error::Config("schedule needs K >= 1".into()));
        }
        Ok(())
    }

    /// `delta / (1 - omega)`, the limit of the sequence.
    pub fn fixed_point(&self) -> f64 {
        self.offset / (1.0 - self.decay)
    }
}

/// `[alpha_1, ..., alpha_K]` by iterating the recurrence.
pub fn momentum_sequence(schedule: &MomentumSchedule) -> Result<Vec<f64>> {
    schedule.validate()?;
    let mut alpha = schedule.initial;
    Ok((0..schedule.samples)
        .map(|_| {
            alpha = alpha * schedule.decay + schedule.offset;
            alpha
        })
        .collect())
}

/// Which of the `K` candidate statistics is kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionPolicy {
    /// Statistics after the last sample. Needs no labels.
    FinalK,
    /// Candidate with the best accuracy on the labelled adaptation samples;
    /// ties go to the later candidate.
    BestLabeled,
}

impl SelectionPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionPolicy::FinalK => "final-k",
            SelectionPolicy::BestLabeled => "best-labeled",
        }
    }
}

/// How each adaptation sample becomes a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AdaptBatch {
    /// The sample alone; spatial positions provide the normalization population.
    SingleSample,
    /// `copies` noisy replicas of the sample.
    ReplicateWithNoise { copies: usize, sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub schedule: MomentumSchedule,
    pub selection: SelectionPolicy,
    pub batch: AdaptBatch,
    /// Seeds replica noise; unused for single-sample batches.
    #[serde(default)]
    pub seed: u64,
}

impl AdaptationConfig {
    pub fn new(schedule: MomentumSchedule) -> Self {
        Self {
            schedule,
            selection: SelectionPolicy::FinalK,
            batch: AdaptBatch::SingleSample,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if let AdaptBatch::ReplicateWithNoise { copies, sigma } = self.batch {
            if copies < 2 {
                return Err(Error::Config(format!("replicate-with-noise needs >= 2 copies, got {copies}")));
            }
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!("replica noise sigma must be >= 0, got {sigma}")));
            }
        }
        if momentum_sequence(&self.schedule)?.iter().any(|&a| a > 1.0) {
            return Err(Error::Config("momentum schedule exceeds 1".into()));
        }
        Ok(())
    }
}

/// One adaptation sample: a single input (no batch dimension) and an optional label.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptSample {
    pub input: Tensor,
    pub label: Option<usize>,
}

/// Insertion-ordered map from task id to frozen batchnorm statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainStatsRegistry {
    entries: Vec<BnSnapshot>,
}

impl DomainStatsRegistry {
    /// Registry holding the model's current statistics as task 1.
    pub fn from_base(model: &Model) -> Self {
        Self {
            entries: vec![bn_snapshot(model, TaskId::BASE, SnapshotOrigin::Base)],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, task: TaskId) -> bool {
        self.entries.iter().any(|s| s.task_id() == task)
    }

    pub fn get(&self, task: TaskId) -> Result<&BnSnapshot> {
        self.entries
            .iter()
            .find(|s| s.task_id() == task)
            .ok_or(Error::UnknownTask(task))
    }

    pub fn base(&self) -> Result<&BnSnapshot> {
        self.get(TaskId::BASE)
    }

    pub fn task_ids(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.entries.iter().map(BnSnapshot::task_id)
    }

    pub fn snapshots(&self) -> &[BnSnapshot] {
        &self.entries
    }

    pub fn insert(&mut self, snapshot: BnSnapshot) -> Result<()> {
        if self.contains(snapshot.task_id()) {
            return Err(Error::DuplicateTask(snapshot.task_id()));
        }
        if let Some(first) = self.entries.first() {
            if first.signature() != snapshot.signature() {
                return Err(Error::SignatureMismatch(format!(
                    "registry holds {:?}, snapshot {:?}",
                    first.signature(),
                    snapshot.signature()
                )));
            }
        }
        self.entries.push(snapshot);
        Ok(())
    }

    pub(crate) fn check_signature(&self, signature: &[usize]) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.entries {
            if s.signature() != signature {
                return Err(Error::SignatureMismatch(format!(
                    "task {} has {:?}, model {signature:?}",
                    s.task_id(),
                    s.signature()
                )));
            }
            if !seen.insert(s.task_id()) {
                return Err(Error::DuplicateTask(s.task_id()));
            }
        }
        Ok(())
    }
}

fn batch_of(sample: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(sample.shape());
    Tensor::new(shape, sample.data().to_vec())
}

fn replicate(sample: &Tensor, copies: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut shape = vec![copies];
    shape.extend_from_slice(sample.shape());
    let mut data = Vec::with_capacity(copies * sample.len());
    for _ in 0..copies {
        data.extend(sample.data().iter().map(|v| v + noise.sample(rng)));
    }
    Tensor::new(shape, data)
}

/// Adapts the batchnorm statistics of `model` to a new domain from `samples`
/// and stores the selected statistics in `registry` under `task_id`.
///
/// Only batchnorm running statistics change; on return the model holds the
/// new task's statistics. Every other piece of model state, including the
/// batchnorm momentum, is left bit-identical. On error the model is restored to
/// its state before the call.
pub fn adapt_domain(
    model: &mut Model,
    registry: &mut DomainStatsRegistry,
    task_id: TaskId,
    samples: &[AdaptSample],
    config: &AdaptationConfig,
) -> Result<BnSnapshot> {
    config.validate()?;
    if registry.contains(task_id) {
        return Err(Error::DuplicateTask(task_id));
    }
    if samples.len() != config.schedule.samples {
        return Err(Error::Config(format!(
            "schedule expects K = {} samples, got {}",
            config.schedule.samples,
            samples.len()
        )));
    }
    if config.selection == SelectionPolicy::BestLabeled && samples.iter().any(|s| s.label.is_none()) {
        return Err(Error::Config("best-labeled selection needs every adaptation sample labelled".into()));
    }
    let base = registry.base()?.clone();

    let entry_stats = bn_snapshot(model, task_id, SnapshotOrigin::Manual);
    let entry_momenta: Vec<f64> = model.bn_layers().map(|bn| bn.momentum()).collect();
    let result = run_adaptation(model, &base, task_id, samples, config);
    for (bn, &m) in model.bn_layers_mut().zip(&entry_momenta) {
        bn.set_momentum(m).expect("momentum was valid before");
    }
    match result {
        Ok(snapshot) => {
            bn_restore(model, &snapshot)?;
            registry.insert(snapshot.clone())?;
            Ok(snapshot)
        }
        Err(e) => {
            bn_restore(model, &entry_stats).expect("restoring entry statistics");
            Err(e)
        }
    }
}

fn run_adaptation(
    model: &mut Model,
    base: &BnSnapshot,
    task_id: TaskId,
    samples: &[AdaptSample],
    config: &AdaptationConfig,
) -> Result<BnSnapshot> {
    bn_restore(model, base)?;
    let alphas = momentum_sequence(&config.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::from(task_id.0));

    let labelled = match config.selection {
        SelectionPolicy::BestLabeled => {
            let inputs: Vec<Tensor> = samples.iter().map(|s| batch_of(&s.input)).collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = inputs.iter().collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label.expect("checked")).collect();
            Some((Tensor::concat(&refs)?, labels))
        }
        SelectionPolicy::FinalK => None,
    };

    let mut best: Option<(usize, usize, BnSnapshot)> = None;
    for (k, (sample, &alpha)) in samples.iter().zip(&alphas).enumerate() {
        model.set_bn_momentum(alpha)?;
        let batch = match config.batch {
            AdaptBatch::SingleSample => batch_of(&sample.input)?,
            AdaptBatch::ReplicateWithNoise { copies, sigma } => replicate(&sample.input, copies, sigma, &mut rng)?,
        };
        model.forward(&batch, Mode::Train)?;
        model.clear_cache();

        let step = k + 1;
        let origin = SnapshotOrigin::Adapted {
            policy: config.selection.name().into(),
            chosen_step: step,
            total_steps: samples.len(),
        };
        match &labelled {
            None => {
                if step == samples.len() {
                    best = Some((0, step, bn_snapshot(model, task_id, origin)));
                }
            }
            Some((inputs, labels)) => {
                let preds = model.predict(inputs, inputs.batch())?;
                let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
                if best.as_ref().is_none_or(|(c, _, _)| correct >= *c) {
                    best = Some((correct, step, bn_snapshot(model, task_id, origin)));
                }
            }
        }
    }
    let (_, _, snapshot) = best.expect("K >= 1");
    Ok(snapshot)
}

/// Restores the statistics registered for `task_id` and classifies `inputs`
/// (a batch) in eval mode. The model keeps that task's statistics afterwards.
pub fn infer_with_task(
    model: &mut Model,
    registry: &DomainStatsRegistry,
    task_id: TaskId,
    inputs: &Tensor,
) -> Result<Vec<usize>> {
    let snapshot = registry.get(task_id)?;
    bn_restore(model, snapshot)?;
    model.predict(inputs, 256)
}

/// Batchnorm statistics recomputed from an entire dataset in one pass: each
/// layer's running statistics become the exact moments of its input over all
/// of `inputs`, with upstream layers normalized by their own full-data moments.
pub fn full_data_statistics(model: &Model, inputs: &Tensor, task_id: TaskId) -> Result<BnSnapshot> {
    let mut scratch = model.clone();
    scratch.set_bn_momentum(1.0)?;
    scratch.forward(inputs, Mode::Train)?;
    scratch.clear_cache();
    Ok(bn_snapshot(&scratch, task_id, SnapshotOrigin::Manual))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_schedule_first_terms() {
        let seq = momentum_sequence(&MomentumSchedule::standard(2)).unwrap();
        assert!((seq[0] - 0.144).abs() < 1e-15);
        assert!((seq[1] - 0.18536).abs() < 1e-15);
    }

    #[test]
    fn decaying_preset_decreases() {
        let s = MomentumSchedule::decaying(50);
        let seq = momentum_sequence(&s).unwrap();
        assert!(seq.windows(2).all(|w| w[1] < w[0]));
        assert!((s.fixed_point() - 0.005 / 0.06).abs() < 1e-15);
    }

    #[test]
    fn tiny_decay_collapses_to_offset() {
        let s = MomentumSchedule {
            initial: 0.1,
            decay: 1e-9,
            offset: 0.05,
            samples: 20,
        };
        for a in momentum_sequence(&s).unwrap() {
            assert!((a - 0.05).abs() < 1e-8);
        }
    }

    #[test]
    fn schedule_bounds() {
        let ok = MomentumSchedule::standard(10);
        assert!(ok.validate().is_ok());
        for bad in [
            MomentumSchedule { decay: 1.0, ..ok },
            MomentumSchedule { decay: 0.0, ..ok },
            MomentumSchedule { offset: 0.1, ..ok },
            MomentumSchedule { offset: 0.0, ..ok },
            MomentumSchedule { samples: 0, ..ok },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn replicate_needs_two_copies() {
        let mut cfg = AdaptationConfig::new(MomentumSchedule::standard(3));
        cfg.batch = AdaptBatch::ReplicateWithNoise { copies: 1, sigma: 0.1 };
        assert!(cfg.validate().is_err());
        cfg.batch = AdaptBatch::ReplicateWithNoise { copies: 2, sigma: 0.1 };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn schedule_above_one_is_rejected() {
        let cfg = AdaptationConfig::new(MomentumSchedule {
            initial: 0.1,
            decay: 0.99,
            offset: 0.05,
            samples: 200,
        });
        assert!(cfg.validate().is_err());
    }
}
