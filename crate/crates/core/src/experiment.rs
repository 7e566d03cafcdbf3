//! Experiment driver: declarative configuration, data generation, strategy
//! runs over seeds, and report files.
//!
//! Every output file is stamped with the configuration digest and the seed.
//! Wall-clock timestamps go only to the `run.log` sidecar, so reruns with an
//! equal configuration and seed produce byte-identical outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{AdaptationConfig, MomentumSchedule, TaskId};
use crate::data::{
    export_dataset_pair, gen_synthetic_domain, load_feature_dir, select_adaptation_samples, BenchmarkSpec, Dataset,
    DomainSpec, FeatureManifest, Severity, ShiftSpec, SCENE_VOCABULARY,
};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::nn::{Checkpoint, Model, ModelConfig};
use crate::strategies::{run_strategy, train_base, Budget, RunContext, Strategy, StrategyKind, StrategyRun, StreamDomain, TrainConfig};

/// Where a stream domain comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DomainSource {
    Synthetic(DomainSpec),
    /// Precomputed features. A relative path is resolved against the
    /// directory of the configuration file.
    Manifest {
        path: PathBuf,
        name: String,
        #[serde(default = "one")]
        adapt_per_class: usize,
    },
}

fn one() -> usize {
    1
}

/// Full description of an experiment. Missing fields take the reference values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub benchmark: BenchmarkSpec,
    pub stream: Vec<DomainSource>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub strategies: Vec<Strategy>,
    /// `schedule.samples` is replaced by each domain's adaptation sample count.
    pub adaptation: AdaptationConfig,
    /// Drop adaptation samples drawn from a test split from that domain's
    /// evaluation set, for every strategy.
    pub exclude_adaptation_samples: bool,
    pub output_dir: PathBuf,
}

fn synthetic(
    id: u32,
    name: &str,
    classes: Vec<usize>,
    severity: Severity,
    sizes: (usize, usize),
    components: usize,
    adapt_per_class: usize,
) -> DomainSource {
    DomainSource::Synthetic(DomainSpec {
        id,
        name: name.into(),
        classes,
        shift: ShiftSpec::Preset { severity },
        components,
        train_size: sizes.0,
        test_size: sizes.1,
        test_only: sizes.0 == 0,
        adapt_per_class,
        seed: 0,
    })
}

/// The reference six-domain stream: a pooled six-component base domain, three
/// mild/moderate shifts, a test-only domain and a severe four-class domain.
pub fn default_stream() -> Vec<DomainSource> {
    let all: Vec<usize> = (0..10).collect();
    vec![
        synthetic(1, "base-6-sites", all.clone(), Severity::Mild, (360, 180), 6, 1),
        synthetic(2, "site-a", all.clone(), Severity::Mild, (80, 60), 1, 1),
        synthetic(3, "site-b", all.clone(), Severity::Mild, (80, 60), 1, 1),
        synthetic(4, "site-c", all.clone(), Severity::Moderate, (80, 60), 1, 1),
        synthetic(5, "site-d", all, Severity::Moderate, (0, 60), 1, 1),
        // bus, metro, metro_station, park
        synthetic(6, "site-e", vec![1, 2, 3, 4], Severity::Severe, (240, 80), 1, 2),
    ]
}

/// Every strategy; training strategies under both budgets.
pub fn default_strategies() -> Vec<Strategy> {
    let mut out = vec![Strategy::new(StrategyKind::Base, Budget::Offline)];
    for kind in [StrategyKind::Fe, StrategyKind::Ft, StrategyKind::Disjoint, StrategyKind::Joint] {
        for budget in [Budget::Online, Budget::Offline] {
            out.push(Strategy::new(kind, budget));
        }
    }
    out.push(Strategy::new(StrategyKind::Odil, Budget::Offline));
    out
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            benchmark: BenchmarkSpec::default(),
            stream: default_stream(),
            model: ModelConfig::reference((16, 32), 10),
            train: TrainConfig::default(),
            strategies: default_strategies(),
            adaptation: AdaptationConfig::new(MomentumSchedule::standard(10)),
            exclude_adaptation_samples: false,
            output_dir: PathBuf::from("odil-out"),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON configuration and resolves relative manifest paths against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for source in &mut cfg.stream {
            if let DomainSource::Manifest { path, .. } = source {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.adaptation.validate()?;
        if self.stream.is_empty() {
            return Err(Error::Config("empty domain stream".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies selected".into()));
        }
        let mut ids = Vec::new();
        for source in &self.stream {
            match source {
                DomainSource::Synthetic(spec) => {
                    spec.validate(&self.benchmark)?;
                    ids.push(spec.id);
                    if self.model.input_shape != self.benchmark.input_shape() {
                        return Err(Error::Config(format!(
                            "model input {:?} does not match benchmark samples {:?}",
                            self.model.input_shape,
                            self.benchmark.input_shape()
                        )));
                    }
                    if self.benchmark.num_classes != self.model.classes {
                        return Err(Error::Config(format!(
                            "benchmark has {} classes, model {}",
                            self.benchmark.num_classes, self.model.classes
                        )));
                    }
                }
                DomainSource::Manifest { adapt_per_class, .. } => {
                    if *adapt_per_class == 0 {
                        return Err(Error::Config("adapt_per_class must be >= 1".into()));
                    }
                }
            }
        }
        if let DomainSource::Synthetic(first) = &self.stream[0] {
            if first.test_only {
                return Err(Error::Config("the first domain needs a training split".into()));
            }
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(Error::Config("domain ids must be unique".into()));
        }
        if ids.iter().skip(1).any(|&id| id == TaskId::BASE.0) {
            return Err(Error::Config(format!("domain id {} is reserved for the first domain", TaskId::BASE)));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, excluding the seed and the output
    /// directory.
    pub fn digest(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("seed");
            obj.remove("output_dir");
        }
        let canonical = serde_json::to_string(&value)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }

    pub fn vocabulary(&self) -> Vec<String> {
        if self.benchmark.num_classes == SCENE_VOCABULARY.len() {
            SCENE_VOCABULARY.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.benchmark.num_classes).map(|c| format!("class{c}")).collect()
        }
    }
}

/// Independent seed for one purpose of one run.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"odil-seed");
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// One row of the stream summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRow {
    pub domain: u32,
    pub name: String,
    pub train: usize,
    pub test: usize,
    /// Adaptation sample count; `None` for the first domain.
    pub k: Option<usize>,
    /// Adaptation samples drawn from the test split.
    pub adapt_from_test: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub config_digest: String,
    pub seed: u64,
    pub rows: Vec<StreamRow>,
}

impl StreamSummary {
    /// Text table: one column per domain, rows for train, test and K.
    pub fn to_table(&self) -> String {
        let mut out = format!("# config_digest={} seed={}\n", self.config_digest, self.seed);
        let _ = write!(out, "{:<8}", "split");
        for r in &self.rows {
            let _ = write!(out, "{:>8}", format!("D{}", r.domain));
        }
        out.push('\n');
        let line = |label: &str, cell: &dyn Fn(&StreamRow) -> String| {
            let mut l = format!("{label:<8}");
            for r in &self.rows {
                let _ = write!(l, "{:>8}", cell(r));
            }
            l.push('\n');
            l
        };
        out += &line("train", &|r| if r.train == 0 { "-".into() } else { r.train.to_string() });
        out += &line("test", &|r| r.test.to_string());
        out += &line("K", &|r| match r.k {
            Some(k) if r.adapt_from_test => format!("{k}*"),
            Some(k) => k.to_string(),
            None => "-".into(),
        });
        if self.rows.iter().any(|r| r.adapt_from_test) {
            out.push_str("* adaptation samples drawn from the test split\n");
        }
        out
    }

    pub fn k_column(&self) -> Vec<Option<usize>> {
        self.rows.iter().map(|r| r.k).collect()
    }
}

/// Materialized stream for one seed.
#[derive(Clone, Debug)]
pub struct Stream {
    pub domains: Vec<StreamDomain>,
    pub summary: StreamSummary,
}

fn load_source(cfg: &ExperimentConfig, source: &DomainSource, seed: u64) -> Result<(u32, String, usize, Option<Dataset>, Dataset)> {
    match source {
        DomainSource::Synthetic(spec) => {
            let (train, test) = gen_synthetic_domain(spec, &cfg.benchmark, seed)?;
            Ok((spec.id, spec.name.clone(), spec.adapt_per_class, train, test))
        }
        DomainSource::Manifest { path, name, adapt_per_class } => {
            let manifest = FeatureManifest::read(path)?;
            if manifest.shape != cfg.model.input_shape {
                return Err(Error::data(
                    None,
                    format!(
                        "{}: feature shape {:?} does not match model input {:?}",
                        path.display(),
                        manifest.shape,
                        cfg.model.input_shape
                    ),
                ));
            }
            let (train, test) = load_feature_dir(&manifest)?;
            Ok((manifest.domain, name.clone(), *adapt_per_class, train, test))
        }
    }
}

/// Generates or loads every domain and selects adaptation samples.
pub fn build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<Stream> {
    cfg.validate()?;
    let mut domains = Vec::with_capacity(cfg.stream.len());
    let mut rows = Vec::with_capacity(cfg.stream.len());
    for (i, source) in cfg.stream.iter().enumerate() {
        let (id, name, per_class, train, mut test) = load_source(cfg, source, seed)?;
        if domains.iter().any(|d: &StreamDomain| d.id == id) {
            return Err(Error::Config(format!("domain id {id} appears twice")));
        }
        let (adapt, adapt_from_test) = if i == 0 {
            if train.is_none() {
                return Err(Error::Config("the first domain needs a training split".into()));
            }
            (Vec::new(), false)
        } else {
            let pool = train.as_ref().unwrap_or(&test);
            let spec_seed = match source {
                DomainSource::Synthetic(spec) => spec.seed,
                DomainSource::Manifest { .. } => 0,
            };
            let selection = select_adaptation_samples(pool, per_class, seed, spec_seed)?;
            let samples = pool.adaptation_samples(&selection.indices)?;
            if train.is_none() && cfg.exclude_adaptation_samples {
                test = test.without(&selection.indices)?;
            }
            (samples, train.is_none())
        };
        rows.push(StreamRow {
            domain: id,
            name: name.clone(),
            train: train.as_ref().map_or(0, Dataset::len),
            test: test.len(),
            k: (i > 0).then_some(adapt.len()),
            adapt_from_test,
        });
        domains.push(StreamDomain {
            id,
            name,
            classes: test.classes.clone(),
            train,
            test,
            adapt,
        });
    }
    Ok(Stream {
        domains,
        summary: StreamSummary {
            config_digest: cfg.digest()?,
            seed,
            rows,
        },
    })
}

/// The shared untrained starting point of every strategy.
pub fn init_model(cfg: &ExperimentConfig, seed: u64) -> Result<Model> {
    Model::new(cfg.model.clone(), derive_seed(seed, "init"))
}

/// Trains the base model on the stream's first domain.
pub fn base_model(cfg: &ExperimentConfig, init: &Model, stream: &Stream, seed: u64) -> Result<Model> {
    let train = stream.domains[0].train.as_ref().expect("validated first domain");
    Ok(train_base(init, train, &cfg.train, derive_seed(seed, "base"))?.0)
}

/// Runs `strategies` for one seed from given init and base models.
pub fn run_strategies(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    stream: &Stream,
    init: &Model,
    base: &Model,
    seed: u64,
) -> Result<Vec<StrategyRun>> {
    let ctx = RunContext {
        init,
        base,
        train: cfg.train,
        adaptation: cfg.adaptation,
        seed,
    };
    strategies.iter().map(|&s| run_strategy(s, &stream.domains, &ctx)).collect()
}

pub fn report_for(run: &StrategyRun, seed: u64, digest: &str) -> Result<EvalReport> {
    EvalReport::new(
        run.strategy.kind.name(),
        run.strategy.budget_label(),
        seed,
        digest,
        run.domains.clone(),
        run.matrix.clone(),
        run.notes.clone(),
    )
}

fn report_label(r: &EvalReport) -> String {
    format!("{}_{}", r.strategy, r.budget)
}

/// Per-step CSV: `strategy,step,domain,acc,avg_acc,forgetting,seed`, where
/// `acc` is the accuracy on the domain learned at that step.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = format!("# config_digest={} seed={}\n", report.config_digest, report.seed);
    out.push_str("strategy,step,domain,acc,avg_acc,forgetting,seed\n");
    for (t, row) in report.matrix.rows().iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            report_label(report),
            t + 1,
            report.domains[t],
            row[t],
            report.avg_accuracy[t],
            report.forgetting[t],
            report.seed
        );
    }
    out
}

/// Strategy-by-step average-accuracy table for one seed, one column per step.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let steps = reports.iter().map(|r| r.matrix.steps()).max().unwrap_or(0);
    let mut out = String::new();
    if let Some(r) = reports.first() {
        let _ = writeln!(out, "# config_digest={} seed={}", r.config_digest, r.seed);
    }
    out.push_str("strategy");
    for t in 1..=steps {
        let _ = write!(out, ",step{t}");
    }
    out.push('\n');
    for r in reports {
        out.push_str(&report_label(r));
        for t in 0..steps {
            match r.avg_accuracy.get(t) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per (strategy, budget, step) mean and standard deviation across seeds.
/// Columns: `strategy,budget,step,domain,avg_acc_mean,avg_acc_std,forgetting_mean,forgetting_std,seeds`.
pub fn summarize(reports: &[EvalReport]) -> String {
    type Key = (String, String, usize, u32);
    let mut groups: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in reports {
        for t in 0..r.matrix.steps() {
            let e = groups
                .entry((r.strategy.clone(), r.budget.clone(), t + 1, r.domains[t]))
                .or_default();
            e.0.push(r.avg_accuracy[t]);
            e.1.push(r.forgetting[t]);
        }
    }
    let mut out = String::new();
    if let Some(r) = reports.first() {
        let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "# config_digest={} seeds={}", r.config_digest, seeds.join(" "));
    }
    out.push_str("strategy,budget,step,domain,avg_acc_mean,avg_acc_std,forgetting_mean,forgetting_std,seeds\n");
    for ((strategy, budget, step, domain), (acc, fr)) in groups {
        let (am, asd) = mean_std(&acc);
        let (fm, fsd) = mean_std(&fr);
        let _ = writeln!(out, "{strategy},{budget},{step},{domain},{am},{asd},{fm},{fsd},{}", acc.len());
    }
    out
}

/// Exclusive lock on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".odil.lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Config(format!(
                    "{} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                )),
                _ => Error::io(&path, e),
            })?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn log_line(dir: &Path, msg: &str) {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(dir.join("run.log")) {
        let _ = writeln!(f, "{secs} {msg}");
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes every domain as feature files plus manifest under `<out>/data` and
/// the stream summary next to them.
pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<StreamSummary> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let dir = out.join("data");
    let _lock = RunLock::acquire(out)?;
    if dir.exists() {
        if !force {
            return Err(Error::Config(format!("{} already exists; pass --force to overwrite", dir.display())));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let stream = build_stream(cfg, cfg.seed)?;
    let vocabulary = cfg.vocabulary();
    for d in &stream.domains {
        let manifest = export_dataset_pair(&dir, d.train.as_ref(), &d.test, &vocabulary)?;
        let path = dir.join(format!("d{}.csv", manifest.domain));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let (magic, rest) = text.split_once('\n').unwrap_or((&text, ""));
        let stamped = format!(
            "{magic}\n# config_digest={}\n# seed={}\n{rest}",
            stream.summary.config_digest, cfg.seed
        );
        write(&path, &stamped)?;
    }
    write(&dir.join("stream.json"), &serde_json::to_string_pretty(&stream.summary)?)?;
    write(&dir.join("stream.txt"), &stream.summary.to_table())?;
    log_line(out, &format!("gen-data seed={} domains={}", cfg.seed, stream.domains.len()));
    Ok(stream.summary)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Restrict to these strategy kinds (all configured ones when empty).
    pub kinds: Vec<StrategyKind>,
    /// Restrict training strategies to this budget.
    pub budget: Option<Budget>,
    /// Number of consecutive seeds starting at the configured seed.
    pub seeds: usize,
    pub force: bool,
    /// Fail instead of training when no base checkpoint is stored.
    pub no_train: bool,
}

impl RunOptions {
    pub fn select(&self, cfg: &ExperimentConfig) -> Result<Vec<Strategy>> {
        let picked: Vec<Strategy> = cfg
            .strategies
            .iter()
            .copied()
            .filter(|s| self.kinds.is_empty() || self.kinds.contains(&s.kind))
            .filter(|s| !s.kind.trains() || self.budget.is_none_or(|b| b == s.budget))
            .collect();
        if picked.is_empty() {
            return Err(Error::Config("the strategy filter selects nothing".into()));
        }
        Ok(picked)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub reports: Vec<EvalReport>,
    pub files: Vec<PathBuf>,
}

/// Runs the selected strategies for every seed and writes reports, tables,
/// curves and checkpoints under the output directory.
pub fn cmd_run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let strategies = opts.select(cfg)?;
    let digest = cfg.digest()?;
    let out = &cfg.output_dir;
    let _lock = RunLock::acquire(out)?;
    let seeds: Vec<u64> = (0..opts.seeds.max(1) as u64).map(|i| cfg.seed + i).collect();

    let report_path = |label: &str, seed: u64| out.join("reports").join(format!("{label}_seed{seed}.json"));
    if !opts.force {
        for &seed in &seeds {
            for s in &strategies {
                let p = report_path(&s.label(), seed);
                if p.exists() {
                    return Err(Error::Config(format!("{} exists; pass --force to overwrite", p.display())));
                }
            }
        }
    }

    let mut reports = Vec::new();
    let mut files = Vec::new();
    for &seed in &seeds {
        log_line(out, &format!("run start seed={seed}"));
        let stream = build_stream(cfg, seed)?;
        let init = init_model(cfg, seed)?;
        let ckpt_dir = out.join("checkpoints");
        let base_path = ckpt_dir.join(format!("base_{}_seed{seed}.json", &digest[..16]));
        let base = if base_path.exists() {
            let ckpt = Checkpoint::load(&base_path)?;
            if *ckpt.model.config() != cfg.model || ckpt.seed != seed {
                return Err(Error::Config(format!("{} does not match this configuration", base_path.display())));
            }
            ckpt.model
        } else if opts.no_train {
            return Err(Error::Config(format!(
                "--no-train given but no base checkpoint at {}",
                base_path.display()
            )));
        } else {
            let model = base_model(cfg, &init, &stream, seed)?;
            let mut ckpt = Checkpoint::new(model.clone(), seed, None);
            ckpt.config_digest = Some(digest.clone());
            write(&base_path, &ckpt.to_json()?)?;
            files.push(base_path.clone());
            log_line(out, &format!("base trained seed={seed}"));
            model
        };

        let mut seed_reports = Vec::new();
        for strategy in &strategies {
            let run = run_strategies(cfg, std::slice::from_ref(strategy), &stream, &init, &base, seed)?.remove(0);
            let report = report_for(&run, seed, &digest)?;
            let label = strategy.label();
            for record in &run.steps {
                let mut ckpt = record.checkpoint.clone();
                ckpt.config_digest = Some(digest.clone());
                let p = ckpt_dir.join(format!("{label}_step{}_seed{seed}.json", record.step));
                write(&p, &ckpt.to_json()?)?;
                files.push(p);
            }
            let p = report_path(&label, seed);
            write(&p, &serde_json::to_string_pretty(&report)?)?;
            files.push(p);
            let p = out.join("curves").join(format!("{label}_seed{seed}.csv"));
            write(&p, &report_csv(&report))?;
            files.push(p);
            log_line(out, &format!("{label} done seed={seed}"));
            seed_reports.push(report);
        }
        let p = out.join("tables").join(format!("avg_accuracy_seed{seed}.csv"));
        write(&p, &comparison_table(&seed_reports))?;
        files.push(p);
        reports.extend(seed_reports);
    }
    if seeds.len() > 1 {
        let p = out.join("tables").join("summary.csv");
        write(&p, &summarize(&reports))?;
        files.push(p);
    }
    log_line(out, "run finished");
    Ok(RunOutcome { reports, files })
}

/// Reads reports and writes the combined per-seed table and the cross-seed
/// summary. Returns the summary text.
pub fn cmd_report(paths: &[PathBuf], allow_mixed: bool, out: Option<&Path>) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::Config("no report files given".into()));
    }
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let report: EvalReport =
            serde_json::from_str(&text).map_err(|e| Error::data(None, format!("{}: {e}", p.display())))?;
        report
            .verify()
            .map_err(|e| Error::data(None, format!("{}: {e}", p.display())))?;
        reports.push(report);
    }
    let first = reports[0].config_digest.clone();
    if !allow_mixed && reports.iter().any(|r| r.config_digest != first) {
        return Err(Error::Config(
            "reports come from different configurations; pass --allow-mixed to combine them".into(),
        ));
    }
    reports.sort_by(|a, b| (&a.strategy, &a.budget, a.seed).cmp(&(&b.strategy, &b.budget, b.seed)));
    let mut digests: Vec<&str> = reports.iter().map(|r| r.config_digest.as_str()).collect();
    digests.sort_unstable();
    digests.dedup();
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let mut long = format!("# config_digest={} seeds={}\n", digests.join(" "), seeds.join(" "));
    long.push_str("strategy,step,domain,acc,avg_acc,forgetting,seed\n");
    for r in &reports {
        for line in report_csv(r).lines().skip(2) {
            long.push_str(line);
            long.push('\n');
        }
    }
    let summary = summarize(&reports);
    if let Some(dir) = out {
        write(&dir.join("combined.csv"), &long)?;
        write(&dir.join("summary.csv"), &summary)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_k_column() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let stream = build_stream(&cfg, 3).unwrap();
        assert_eq!(
            stream.summary.k_column(),
            vec![None, Some(10), Some(10), Some(10), Some(10), Some(8)]
        );
        assert!(stream.domains[4].train.is_none());
        assert!(stream.summary.rows[4].adapt_from_test);
    }

    #[test]
    fn digest_ignores_seed_and_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seed: 9,
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let mut c = a.clone();
        c.train.offline_epochs = 3;
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn config_json_round_trip_with_defaults() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 4}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.stream, cfg.stream);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 4}"#).is_err());
    }

    #[test]
    fn exclusion_removes_test_drawn_samples() {
        let cfg = ExperimentConfig {
            exclude_adaptation_samples: true,
            ..Default::default()
        };
        let with = build_stream(&cfg, 1).unwrap();
        let without = build_stream(&ExperimentConfig::default(), 1).unwrap();
        assert_eq!(with.domains[4].test.len() + 10, without.domains[4].test.len());
        assert_eq!(with.domains[2].test.len(), without.domains[2].test.len());
    }

    #[test]
    fn filter_keeps_budget_free_strategies() {
        let cfg = ExperimentConfig::default();
        let opts = RunOptions {
            budget: Some(Budget::Online),
            ..Default::default()
        };
        let picked = opts.select(&cfg).unwrap();
        assert_eq!(picked.len(), 6);
        assert!(picked.iter().all(|s| !s.kind.trains() || s.budget == Budget::Online));
        let none = RunOptions {
            kinds: vec![StrategyKind::Joint],
            budget: Some(Budget::Online),
            ..Default::default()
        };
        assert_eq!(none.select(&cfg).unwrap().len(), 1);
    }

    #[test]
    fn mean_std_hand_values() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }
}
