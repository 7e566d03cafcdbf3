use rand::seq::{index, SliceRandom};

use super::{Dataset, Substream};
use crate::error::{Error, Result};

/// Indices into a dataset chosen for adaptation, in presentation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
}

/// Draws `per_class` samples of every domain class uniformly without
/// replacement, then presents them in random order. Deterministic in
/// `(global_seed, dataset domain, seed)`.
pub fn select_adaptation_samples(dataset: &Dataset, per_class: usize, global_seed: u64, seed: u64) -> Result<Selection> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be >= 1".into()));
    }
    let mut rng = Substream::Select.rng(global_seed, seed, dataset.domain);
    let mut indices = Vec::with_capacity(per_class * dataset.classes.len());
    for &class in &dataset.classes {
        let members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        if members.len() < per_class {
            return Err(Error::data(
                None,
                format!(
                    "class {class} has {} sample(s) in domain {} {}, need {per_class}",
                    members.len(),
                    dataset.domain,
                    dataset.split.as_str()
                ),
            ));
        }
        let mut picked: Vec<usize> = index::sample(&mut rng, members.len(), per_class)
            .into_iter()
            .map(|j| members[j])
            .collect();
        picked.sort_unstable();
        indices.extend(picked);
    }
    indices.shuffle(&mut rng);
    Ok(Selection { indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::tensor::Tensor;

    fn dataset(labels: Vec<usize>, classes: Vec<usize>) -> Dataset {
        let n = labels.len();
        Dataset::new(3, Split::Train, classes, Tensor::zeros(&[n, 1, 2, 2]), labels).unwrap()
    }

    #[test]
    fn one_per_class() {
        let ds = dataset((0..50).map(|i| i % 10).collect(), (0..10).collect());
        let sel = select_adaptation_samples(&ds, 1, 1, 0).unwrap();
        assert_eq!(sel.indices.len(), 10);
        let mut labels: Vec<usize> = sel.indices.iter().map(|&i| ds.labels[i]).collect();
        labels.sort_unstable();
        assert_eq!(labels, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn two_per_class_reduced_vocabulary() {
        let ds = dataset((0..40).map(|i| [1, 2, 3, 4][i % 4]).collect(), vec![1, 2, 3, 4]);
        let sel = select_adaptation_samples(&ds, 2, 1, 0).unwrap();
        assert_eq!(sel.indices.len(), 8);
        let mut dedup = sel.indices.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 8);
        for class in [1, 2, 3, 4] {
            assert_eq!(sel.indices.iter().filter(|&&i| ds.labels[i] == class).count(), 2);
        }
    }

    #[test]
    fn missing_class_names_it() {
        let ds = dataset(vec![0, 0, 1, 1], vec![0, 1, 2]);
        let err = select_adaptation_samples(&ds, 1, 1, 0).unwrap_err();
        assert!(err.to_string().contains("class 2"), "{err}");
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = dataset((0..200).map(|i| i % 10).collect(), (0..10).collect());
        let a = select_adaptation_samples(&ds, 3, 5, 1).unwrap();
        let b = select_adaptation_samples(&ds, 3, 5, 1).unwrap();
        let c = select_adaptation_samples(&ds, 3, 5, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
