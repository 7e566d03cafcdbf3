//! Incremental-learning protocols run over a domain stream: Base, FE, FT,
//! Disjoint, Joint and ODIL.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_domain, infer_with_task, AdaptSample, AdaptationConfig, DomainStatsRegistry, TaskId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, AccuracyMatrix};
use crate::nn::{softmax_cross_entropy, Checkpoint, LrSchedule, Mode, Model, Sgd};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Base,
    Fe,
    Ft,
    Disjoint,
    Joint,
    Odil,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Base,
        StrategyKind::Fe,
        StrategyKind::Ft,
        StrategyKind::Disjoint,
        StrategyKind::Joint,
        StrategyKind::Odil,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Base => "base",
            StrategyKind::Fe => "fe",
            StrategyKind::Ft => "ft",
            StrategyKind::Disjoint => "disjoint",
            StrategyKind::Joint => "joint",
            StrategyKind::Odil => "odil",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the strategy runs gradient training at incremental steps.
    pub fn trains(&self) -> bool {
        matches!(self, StrategyKind::Fe | StrategyKind::Ft | StrategyKind::Disjoint | StrategyKind::Joint)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Training budget at each incremental step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    /// A single pass over the current domain's training data.
    Online,
    /// The configured number of offline epochs.
    Offline,
}

impl Budget {
    pub fn name(&self) -> &'static str {
        match self {
            Budget::Online => "online",
            Budget::Offline => "offline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "online" => Some(Budget::Online),
            "offline" => Some(Budget::Offline),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub budget: Budget,
}

impl Strategy {
    pub fn new(kind: StrategyKind, budget: Budget) -> Self {
        Self { kind, budget }
    }

    /// Budget label used in reports; budget-free strategies report `none`.
    pub fn budget_label(&self) -> &'static str {
        if self.kind.trains() {
            self.budget.name()
        } else {
            "none"
        }
    }

    pub fn label(&self) -> String {
        format!("{}_{}", self.kind, self.budget_label())
    }
}

/// SGD hyperparameters and epoch budgets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate at incremental steps.
    pub lr: f64,
    /// Learning rate of runs that start from the untrained shared initial
    /// checkpoint: base training, Disjoint and Joint.
    pub scratch_lr: f64,
    #[serde(default)]
    pub lr_min: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub base_epochs: usize,
    pub offline_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            scratch_lr: 1e-2,
            lr_min: 0.0,
            momentum: 0.9,
            batch_size: 32,
            base_epochs: 120,
            offline_epochs: 120,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        for lr in [self.lr, self.scratch_lr] {
            Sgd::new(lr, self.momentum)?;
            LrSchedule::cosine(lr, self.lr_min, 1).lr_at(0)?;
        }
        Ok(())
    }

    /// The same settings with `scratch_lr` as the learning rate.
    pub fn from_scratch(&self) -> TrainConfig {
        TrainConfig { lr: self.scratch_lr, ..*self }
    }

    pub fn epochs(&self, budget: Budget) -> usize {
        match budget {
            Budget::Online => 1,
            Budget::Offline => self.offline_epochs,
        }
    }
}

/// Which parameters receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Only the terminal classifier layer.
    ClassifierOnly,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub epochs: usize,
    pub steps: usize,
    /// How many times each training sample was used.
    pub visits: Vec<u32>,
    pub final_loss: Option<f64>,
}

/// Mini-batch SGD over `data` for `epochs` epochs, reshuffling each epoch from
/// `seed`. The cosine schedule spans exactly these epochs.
pub fn train_epochs(
    model: &mut Model,
    data: &Dataset,
    epochs: usize,
    cfg: &TrainConfig,
    trainable: Trainable,
    seed: u64,
) -> Result<TrainStats> {
    if data.is_empty() {
        return Err(Error::data(None, "empty training set"));
    }
    let mut stats = TrainStats {
        visits: vec![0; data.len()],
        ..Default::default()
    };
    if epochs == 0 {
        return Ok(stats);
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let schedule = LrSchedule::cosine(cfg.lr, cfg.lr_min, epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = match trainable {
        Trainable::All => 0,
        Trainable::ClassifierOnly => model.classifier_index(),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        opt.set_lr(schedule.lr_at(epoch)?)?;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.samples.gather(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let logits = model.forward(&x, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            let grads = model.backward_from(&grad, first)?;
            opt.step(model, &grads)?;
            for &i in chunk {
                stats.visits[i] += 1;
            }
            stats.steps += 1;
            stats.final_loss = Some(loss);
        }
        stats.epochs += 1;
    }
    Ok(stats)
}

/// Trains the base model on the first domain, starting from a copy of `init`.
pub fn train_base(init: &Model, train: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<(Model, TrainStats)> {
    cfg.validate()?;
    let mut model = init.clone();
    let base_cfg = cfg.from_scratch();
    let stats = train_epochs(&mut model, train, cfg.base_epochs, &base_cfg, Trainable::All, seed)?;
    Ok((model, stats))
}

/// One domain of a stream, ready to be learned and evaluated.
#[derive(Clone, Debug)]
pub struct StreamDomain {
    pub id: u32,
    pub name: String,
    pub classes: Vec<usize>,
    pub train: Option<Dataset>,
    /// Evaluation set.
    pub test: Dataset,
    /// Adaptation samples (`K = per_class * classes`).
    pub adapt: Vec<AdaptSample>,
}

/// Shared inputs of every strategy run in one experiment.
#[derive(Clone, Debug)]
pub struct RunContext<'a> {
    /// Shared initial checkpoint (untrained).
    pub init: &'a Model,
    /// Model trained on the first domain.
    pub base: &'a Model,
    pub train: TrainConfig,
    /// Adaptation settings; `schedule.samples` is set per domain from its sample count.
    pub adaptation: AdaptationConfig,
    pub seed: u64,
}

/// Where a step's model came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lineage {
    Base,
    Init,
    Previous,
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub domain: u32,
    pub lineage: Lineage,
    pub trained: Option<TrainStats>,
    /// Predictions on each seen domain's evaluation set, in step order.
    pub predictions: Vec<Vec<usize>>,
    pub checkpoint: Checkpoint,
}

#[derive(Clone, Debug)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub domains: Vec<u32>,
    pub matrix: AccuracyMatrix,
    pub steps: Vec<StepRecord>,
    pub notes: Vec<String>,
}

fn step_seed(seed: u64, kind: StrategyKind, step: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64 + 1) << 32) | step as u64);
    rand::Rng::random(&mut rng)
}

fn check_vocabulary(stream: &[StreamDomain], classes: usize) -> Result<()> {
    for d in stream {
        if let Some(c) = d.classes.iter().find(|&&c| c >= classes) {
            return Err(Error::Config(format!(
                "domain {} uses class {c}, outside the model's {classes} classes",
                d.id
            )));
        }
    }
    Ok(())
}

/// Runs `strategy` over `stream` and fills the accuracy matrix.
///
/// Step 1 is the base model on the first domain for every strategy. Strategies
/// that train skip domains without a training split; Base and ODIL visit every
/// domain.
pub fn run_strategy(strategy: Strategy, stream: &[StreamDomain], ctx: &RunContext<'_>) -> Result<StrategyRun> {
    let first = stream.first().ok_or_else(|| Error::Config("empty domain stream".into()))?;
    check_vocabulary(stream, ctx.base.classes())?;
    ctx.train.validate()?;

    let kind = strategy.kind;
    let mut notes = Vec::new();
    match kind {
        StrategyKind::Fe | StrategyKind::Ft => notes.push(
            "train-mode forwards refresh batchnorm running statistics; evaluation uses the current statistics".into(),
        ),
        StrategyKind::Odil => notes.push(format!(
            "selection={} alpha0={} omega={} delta={}",
            ctx.adaptation.selection.name(),
            ctx.adaptation.schedule.initial,
            ctx.adaptation.schedule.decay,
            ctx.adaptation.schedule.offset
        )),
        _ => {}
    }
    if kind.trains() {
        notes.push(format!(
            "budget={} epochs={}",
            strategy.budget.name(),
            ctx.train.epochs(strategy.budget)
        ));
    }

    let mut model = ctx.base.clone();
    let mut registry = (kind == StrategyKind::Odil).then(|| DomainStatsRegistry::from_base(ctx.base));
    let mut seen: Vec<&StreamDomain> = Vec::new();
    let mut matrix = AccuracyMatrix::new();
    let mut steps = Vec::new();

    for domain in std::iter::once(first).chain(stream.iter().skip(1)) {
        let step = seen.len() + 1;
        let mut trained = None;
        let mut lineage = Lineage::Base;
        if step > 1 {
            if kind.trains() && domain.train.is_none() {
                notes.push(format!("domain {} skipped: no training split", domain.id));
                continue;
            }
            lineage = Lineage::Previous;
            let seed = step_seed(ctx.seed, kind, step);
            let epochs = ctx.train.epochs(strategy.budget);
            match kind {
                StrategyKind::Base => {}
                StrategyKind::Fe | StrategyKind::Ft => {
                    let which = if kind == StrategyKind::Fe { Trainable::ClassifierOnly } else { Trainable::All };
                    let train = domain.train.as_ref().expect("checked");
                    trained = Some(train_epochs(&mut model, train, epochs, &ctx.train, which, seed)?);
                }
                StrategyKind::Disjoint | StrategyKind::Joint => {
                    model = ctx.init.clone();
                    lineage = Lineage::Init;
                    let pool = if kind == StrategyKind::Joint {
                        let parts: Vec<&Dataset> = seen
                            .iter()
                            .chain(std::iter::once(&domain))
                            .filter_map(|d| d.train.as_ref())
                            .collect();
                        Dataset::union(&parts)?
                    } else {
                        domain.train.clone().expect("checked")
                    };
                    trained = Some(train_epochs(&mut model, &pool, epochs, &ctx.train.from_scratch(), Trainable::All, seed)?);
                }
                StrategyKind::Odil => {
                    let mut cfg = ctx.adaptation;
                    cfg.schedule.samples = domain.adapt.len();
                    let reg = registry.as_mut().expect("odil registry");
                    adapt_domain(&mut model, reg, TaskId(domain.id), &domain.adapt, &cfg)?;
                }
            }
        }
        seen.push(domain);

        let mut row = Vec::with_capacity(seen.len());
        let mut predictions = Vec::with_capacity(seen.len());
        for (s, d) in seen.iter().enumerate() {
            let preds = match &registry {
                Some(reg) => {
                    let task = if s == 0 { TaskId::BASE } else { TaskId(d.id) };
                    infer_with_task(&mut model, reg, task, &d.test.samples)?
                }
                None => model.predict(&d.test.samples, 256)?,
            };
            row.push(accuracy(&preds, &d.test.labels)?);
            predictions.push(preds);
        }
        matrix.push_row(row)?;
        steps.push(StepRecord {
            step,
            domain: domain.id,
            lineage,
            trained,
            predictions,
            checkpoint: Checkpoint::new(model.clone(), ctx.seed, registry.clone()),
        });
    }

    Ok(StrategyRun {
        strategy,
        domains: seen.iter().map(|d| d.id).collect(),
        matrix,
        steps,
        notes,
    })
}
