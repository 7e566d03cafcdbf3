//! Domain streams: synthetic location-shift generator, feature-file ingestion,
//! and adaptation-sample selection.

mod manifest;
mod select;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use manifest::{export_dataset_pair, load_feature_dir, FeatureManifest, ManifestRow};
pub use select::{select_adaptation_samples, Selection};
pub use synthetic::{
    gen_base_domain, gen_synthetic_domain, BenchmarkSpec, DomainSpec, Severity, Shift, ShiftSpec, Substream,
};

use crate::adapt::AdaptSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scene names of the ten-class vocabulary used by the default benchmark.
pub const SCENE_VOCABULARY: [&str; 10] = [
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Materialized samples of one split of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domain: u32,
    pub split: Split,
    /// Class ids that may occur in this domain.
    pub classes: Vec<usize>,
    /// `(N, C, H, W)` samples.
    pub samples: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(domain: u32, split: Split, classes: Vec<usize>, samples: Tensor, labels: Vec<usize>) -> Result<Self> {
        if samples.batch() != labels.len() {
            return Err(Error::data(
                None,
                format!("{} samples but {} labels", samples.batch(), labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|l| !classes.contains(l)) {
            return Err(Error::data(None, format!("label {bad} outside domain classes {classes:?}")));
        }
        Ok(Self {
            domain,
            split,
            classes,
            samples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn item_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::data(None, "empty subset"));
        }
        Dataset::new(
            self.domain,
            self.split,
            self.classes.clone(),
            self.samples.gather(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Copy without the given indices.
    pub fn without(&self, excluded: &[usize]) -> Result<Dataset> {
        let keep: Vec<usize> = (0..self.len()).filter(|i| !excluded.contains(i)).collect();
        self.subset(&keep)
    }

    /// Samples at `indices` as adaptation inputs, with labels attached.
    pub fn adaptation_samples(&self, indices: &[usize]) -> Result<Vec<AdaptSample>> {
        indices
            .iter()
            .map(|&i| {
                Ok(AdaptSample {
                    input: Tensor::new(self.item_shape().to_vec(), self.samples.item(i).to_vec())?,
                    label: Some(self.labels[i]),
                })
            })
            .collect()
    }

    /// Concatenates datasets from several domains into one training pool.
    pub fn union(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::data(None, "union of zero datasets"))?;
        let samples: Vec<&Tensor> = parts.iter().map(|d| &d.samples).collect();
        let mut classes: Vec<usize> = parts.iter().flat_map(|d| d.classes.iter().copied()).collect();
        classes.sort_unstable();
        classes.dedup();
        Dataset::new(
            first.domain,
            first.split,
            classes,
            Tensor::concat(&samples)?,
            parts.iter().flat_map(|d| d.labels.iter().copied()).collect(),
        )
    }
}
