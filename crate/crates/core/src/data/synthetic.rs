//! Deterministic synthetic "acoustic scene" benchmark.
//!
//! Each class owns a fixed texture (a sum of periodic gratings drawn from the
//! global seed). A sample is that texture under a random circular translation
//! plus Gaussian noise, then passed through the domain's per-channel affine
//! shift `x -> scale * x + offset`. Values are rounded to `f32` so that feature
//! files round-trip exactly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Global benchmark geometry and texture parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub side: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub gratings_per_class: usize,
    /// Per-pixel noise standard deviation of the unshifted generator.
    pub base_noise: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            side: 16,
            channels: 1,
            num_classes: 10,
            gratings_per_class: 2,
            base_noise: 1.75,
        }
    }
}

impl BenchmarkSpec {
    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.channels, self.side, self.side]
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 4 || self.channels == 0 || self.num_classes < 2 || self.gratings_per_class == 0 {
            return Err(Error::Config(format!("invalid benchmark geometry {self:?}")));
        }
        if !(self.base_noise >= 0.0 && self.base_noise.is_finite()) {
            return Err(Error::Config("base noise must be finite and >= 0".into()));
        }
        let max_f = (self.side / 4).max(1);
        let available = (max_f + 1) * (2 * max_f + 1) - (max_f + 1);
        let mut combos: usize = 1;
        for i in 0..self.gratings_per_class {
            combos = combos.saturating_mul(available.saturating_sub(i)) / (i + 1);
        }
        if combos < self.num_classes {
            return Err(Error::Config(format!(
                "side {} allows only {combos} distinct textures for {} classes",
                self.side, self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    /// `(scale range, offset range, noise multiplier)`.
    pub fn ranges(&self) -> ((f64, f64), (f64, f64), f64) {
        match self {
            Severity::Mild => ((0.9, 1.1), (-0.1, 0.1), 1.0),
            Severity::Moderate => ((0.7, 1.4), (-0.5, 0.5), 1.0),
            Severity::Severe => ((0.4, 2.5), (-1.0, 1.0), 2.0),
        }
    }
}

/// Concrete per-channel affine shift and noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise: f64,
}

impl Shift {
    pub fn identity(channels: usize, noise: f64) -> Self {
        Self {
            scale: vec![1.0; channels],
            offset: vec![0.0; channels],
            noise,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale.iter().all(|&a| a == 1.0) && self.offset.iter().all(|&b| b == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShiftSpec {
    Identity,
    /// Scale/offset drawn per component from the preset's ranges.
    Preset { severity: Severity },
    Explicit { shift: Shift },
}

/// Generation recipe for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: u32,
    pub name: String,
    pub classes: Vec<usize>,
    pub shift: ShiftSpec,
    /// Number of pooled sub-generators, each with its own shift draw.
    #[serde(default = "one")]
    pub components: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// No train split; adaptation samples come from the test split.
    #[serde(default)]
    pub test_only: bool,
    /// Adaptation samples per class.
    #[serde(default = "one")]
    pub adapt_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl DomainSpec {
    pub fn validate(&self, bench: &BenchmarkSpec) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config(format!("domain {} has no classes", self.id)));
        }
        if let Some(c) = self.classes.iter().find(|&&c| c >= bench.num_classes) {
            return Err(Error::Config(format!("domain {}: unknown class id {c}", self.id)));
        }
        let mut sorted = self.classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return Err(Error::Config(format!("domain {}: duplicate class ids", self.id)));
        }
        if self.components == 0 || self.adapt_per_class == 0 || self.test_size == 0 {
            return Err(Error::Config(format!("domain {}: sizes must be >= 1", self.id)));
        }
        if self.test_only != (self.train_size == 0) {
            return Err(Error::Config(format!(
                "domain {}: train_size must be 0 exactly when test_only",
                self.id
            )));
        }
        if let ShiftSpec::Explicit { shift } = &self.shift {
            if shift.scale.len() != bench.channels || shift.offset.len() != bench.channels {
                return Err(Error::Config(format!("domain {}: shift needs {} channels", self.id, bench.channels)));
            }
            if shift.scale.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
                return Err(Error::Config(format!("domain {}: scale entries must be > 0", self.id)));
            }
            if !(shift.noise >= 0.0 && shift.noise.is_finite()) {
                return Err(Error::Config(format!("domain {}: noise must be >= 0", self.id)));
            }
        }
        Ok(())
    }

    /// Concrete shift of every component.
    pub fn resolve_shifts(&self, bench: &BenchmarkSpec, global_seed: u64) -> Vec<Shift> {
        match &self.shift {
            ShiftSpec::Identity => vec![Shift::identity(bench.channels, bench.base_noise); self.components],
            ShiftSpec::Explicit { shift } => vec![shift.clone(); self.components],
            ShiftSpec::Preset { severity } => {
                let ((a_lo, a_hi), (b_lo, b_hi), noise_mul) = severity.ranges();
                let mut rng = Substream::Shift.rng(global_seed, self.seed, self.id);
                (0..self.components)
                    .map(|_| Shift {
                        scale: (0..bench.channels).map(|_| rng.random_range(a_lo..=a_hi)).collect(),
                        offset: (0..bench.channels).map(|_| rng.random_range(b_lo..=b_hi)).collect(),
                        noise: bench.base_noise * noise_mul,
                    })
                    .collect()
            }
        }
    }
}

/// Independent random streams. Each `(global seed, spec seed, domain, purpose)`
/// maps to a distinct ChaCha stream, so no two purposes ever share draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Substream {
    Patterns,
    Shift,
    Train,
    Test,
    Select,
}

impl Substream {
    pub fn stream_id(&self, domain: u32) -> u64 {
        let tag = match self {
            Substream::Patterns => 0,
            Substream::Shift => 1,
            Substream::Train => 2,
            Substream::Test => 3,
            Substream::Select => 4,
        };
        (u64::from(domain) << 8) | tag
    }

    pub fn rng(&self, global_seed: u64, spec_seed: u64, domain: u32) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(b"odil-substream");
        hasher.update(global_seed.to_le_bytes());
        hasher.update(spec_seed.to_le_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream_id(domain));
        rng
    }
}

/// Class textures, `(num_classes, channels * side * side)`, zero mean and unit
/// standard deviation per class.
fn class_patterns(bench: &BenchmarkSpec, global_seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Substream::Patterns.rng(global_seed, 0, 0);
    let side = bench.side;
    let max_f = (side / 4).max(1) as i64;
    let mut used: Vec<Vec<(i64, i64)>> = Vec::new();
    let mut patterns = Vec::with_capacity(bench.num_classes);
    while patterns.len() < bench.num_classes {
        let mut freqs: Vec<(i64, i64)> = (0..bench.gratings_per_class)
            .map(|_| (rng.random_range(0..=max_f), rng.random_range(-max_f..=max_f)))
            .collect();
        freqs.sort_unstable();
        let phases: Vec<f64> = (0..bench.gratings_per_class * bench.channels)
            .map(|_| rng.random_range(0.0..2.0 * PI))
            .collect();
        if freqs.iter().any(|&(fx, fy)| fx == 0 && fy <= 0) || freqs.windows(2).any(|w| w[0] == w[1]) || used.contains(&freqs)
        {
            continue;
        }
        let mut p = vec![0.0; bench.channels * side * side];
        for c in 0..bench.channels {
            for y in 0..side {
                for x in 0..side {
                    p[(c * side + y) * side + x] = freqs
                        .iter()
                        .zip(&phases[c * bench.gratings_per_class..])
                        .map(|(&(fx, fy), ph)| {
                            (2.0 * PI * (fx as f64 * x as f64 + fy as f64 * y as f64) / side as f64 + ph).cos()
                        })
                        .sum();
                }
            }
        }
        let n = p.len() as f64;
        let mean = p.iter().sum::<f64>() / n;
        let std = (p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        p.iter_mut().for_each(|v| *v = (*v - mean) / std);
        used.push(freqs);
        patterns.push(p);
    }
    patterns
}

fn sample_split(
    bench: &BenchmarkSpec,
    spec: &DomainSpec,
    patterns: &[Vec<f64>],
    shifts: &[Shift],
    split: Split,
    size: usize,
    mut rng: ChaCha8Rng,
) -> Result<Dataset> {
    let (side, ch) = (bench.side, bench.channels);
    let plane = side * side;
    let mut data = Vec::with_capacity(size * ch * plane);
    let mut labels = Vec::with_capacity(size);
    let nc = spec.classes.len();
    for i in 0..size {
        let class = spec.classes[i % nc];
        let shift = &shifts[(i / nc) % shifts.len()];
        let (dy, dx) = (rng.random_range(0..side), rng.random_range(0..side));
        let pattern = &patterns[class];
        for c in 0..ch {
            for y in 0..side {
                for x in 0..side {
                    let base = pattern[(c * side + (y + dy) % side) * side + (x + dx) % side];
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let mut v = base + shift.noise * z;
                    if !shift.is_identity() {
                        v = shift.scale[c] * v + shift.offset[c];
                    }
                    data.push(v as f32 as f64);
                }
            }
        }
        labels.push(class);
    }
    let mut shape = vec![size];
    shape.extend(bench.input_shape());
    Dataset::new(spec.id, split, spec.classes.clone(), Tensor::new(shape, data)?, labels)
}

/// Generates `(train, test)` for `spec`; `train` is `None` for test-only domains.
/// Output is a pure function of `(global_seed, bench, spec)`.
pub fn gen_synthetic_domain(
    spec: &DomainSpec,
    bench: &BenchmarkSpec,
    global_seed: u64,
) -> Result<(Option<Dataset>, Dataset)> {
    bench.validate()?;
    spec.validate(bench)?;
    let patterns = class_patterns(bench, global_seed);
    let shifts = spec.resolve_shifts(bench, global_seed);
    let train = if spec.test_only {
        None
    } else {
        let rng = Substream::Train.rng(global_seed, spec.seed, spec.id);
        Some(sample_split(bench, spec, &patterns, &shifts, Split::Train, spec.train_size, rng)?)
    };
    let rng = Substream::Test.rng(global_seed, spec.seed, spec.id);
    let test = sample_split(bench, spec, &patterns, &shifts, Split::Test, spec.test_size, rng)?;
    Ok((train, test))
}

/// The unshifted generator: `spec`'s classes and sizes with every component at
/// identity shift and base noise.
pub fn gen_base_domain(
    spec: &DomainSpec,
    bench: &BenchmarkSpec,
    global_seed: u64,
) -> Result<(Option<Dataset>, Dataset)> {
    let identity = DomainSpec {
        shift: ShiftSpec::Identity,
        ..spec.clone()
    };
    gen_synthetic_domain(&identity, bench, global_seed)
}
