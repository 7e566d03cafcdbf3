//! Accuracy matrix, average accuracy and average forgetting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "need equal non-empty lengths, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Lower-triangular `A[t][s]`: accuracy on the `s`-th domain after learning
/// the `t`-th, both 1-based, `s <= t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for AccuracyMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::default();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }
}

impl From<AccuracyMatrix> for Vec<Vec<f64>> {
    fn from(m: AccuracyMatrix) -> Self {
        m.rows
    }
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends row `t = steps() + 1`, which must hold exactly `t` values in `[0, 1]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len() + 1;
        if row.len() != t {
            return Err(Error::Metric(format!("row {t} needs {t} entries, got {}", row.len())));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Metric(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `A[t][s]`, 1-based.
    pub fn get(&self, t: usize, s: usize) -> Option<f64> {
        if s == 0 || s > t {
            return None;
        }
        self.rows.get(t.checked_sub(1)?)?.get(s - 1).copied()
    }

    fn row(&self, t: usize) -> Result<&[f64]> {
        if t == 0 || t > self.rows.len() {
            return Err(Error::Metric(format!("step {t} not recorded ({} steps)", self.rows.len())));
        }
        Ok(&self.rows[t - 1])
    }
}

/// Unweighted mean of `A[t][1..=t]`.
pub fn average_accuracy(matrix: &AccuracyMatrix, t: usize) -> Result<f64> {
    let row = matrix.row(t)?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Mean over `s < t` of `A[s][s] - A[t][s]`; zero at `t = 1`. Negative values
/// indicate backward transfer.
pub fn average_forgetting(matrix: &AccuracyMatrix, t: usize) -> Result<f64> {
    let row = matrix.row(t)?;
    if t == 1 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, &now) in row.iter().enumerate().take(t - 1) {
        total += matrix.row(s + 1)?[s] - now;
    }
    Ok(total / (t - 1) as f64)
}

/// Result of running one strategy over one domain stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    /// `online`, `offline` or `none` for budget-free strategies.
    pub budget: String,
    pub seed: u64,
    pub config_digest: String,
    /// Domain id learned at each step.
    pub domains: Vec<u32>,
    pub matrix: AccuracyMatrix,
    pub avg_accuracy: Vec<f64>,
    pub forgetting: Vec<f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn new(
        strategy: &str,
        budget: &str,
        seed: u64,
        config_digest: &str,
        domains: Vec<u32>,
        matrix: AccuracyMatrix,
        notes: Vec<String>,
    ) -> Result<Self> {
        if domains.len() != matrix.steps() {
            return Err(Error::Metric(format!(
                "{} domains for {} matrix rows",
                domains.len(),
                matrix.steps()
            )));
        }
        let (avg_accuracy, forgetting) = derived(&matrix)?;
        Ok(Self {
            strategy: strategy.into(),
            budget: budget.into(),
            seed,
            config_digest: config_digest.into(),
            domains,
            matrix,
            avg_accuracy,
            forgetting,
            notes,
        })
    }

    /// Checks that the derived series are bit-exact recomputations of the matrix.
    pub fn verify(&self) -> Result<()> {
        let (acc, fr) = derived(&self.matrix)?;
        let same = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same(&acc, &self.avg_accuracy) || !same(&fr, &self.forgetting) {
            return Err(Error::Metric("derived fields disagree with the matrix".into()));
        }
        if self.domains.len() != self.matrix.steps() {
            return Err(Error::Metric("domain list does not match matrix".into()));
        }
        Ok(())
    }

    /// `A[t][t]` for every step.
    pub fn current_accuracy(&self) -> Vec<f64> {
        self.matrix.rows().iter().map(|r| *r.last().expect("non-empty row")).collect()
    }
}

fn derived(matrix: &AccuracyMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let steps = 1..=matrix.steps();
    let acc = steps.clone().map(|t| average_accuracy(matrix, t)).collect::<Result<_>>()?;
    let fr = steps.map(|t| average_forgetting(matrix, t)).collect::<Result<_>>()?;
    Ok((acc, fr))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        AccuracyMatrix::try_from(rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn average_accuracy_examples() {
        let m = matrix(&[&[0.6], &[0.6, 0.5]]);
        assert_eq!(average_accuracy(&m, 1).unwrap(), 0.6);
        assert!((average_accuracy(&m, 2).unwrap() - 0.55).abs() < 1e-15);
        let c = matrix(&[&[0.3], &[0.3, 0.3], &[0.3, 0.3, 0.3]]);
        assert!((average_accuracy(&c, 3).unwrap() - 0.3).abs() < 1e-15);
        assert!(average_accuracy(&m, 3).is_err());
    }

    #[test]
    fn forgetting_examples() {
        let m = matrix(&[&[0.6], &[0.5, 0.9]]);
        assert_eq!(average_forgetting(&m, 1).unwrap(), 0.0);
        assert!((average_forgetting(&m, 2).unwrap() - 0.1).abs() < 1e-15);
        let frozen = matrix(&[&[0.6], &[0.6, 0.4], &[0.6, 0.4, 0.2]]);
        for t in 1..=3 {
            assert_eq!(average_forgetting(&frozen, t).unwrap(), 0.0);
        }
        let improved = matrix(&[&[0.5], &[0.7, 0.9]]);
        assert!(average_forgetting(&improved, 2).unwrap() < 0.0);
    }

    #[test]
    fn rows_must_be_triangular() {
        let mut m = AccuracyMatrix::new();
        assert!(m.push_row(vec![0.5, 0.5]).is_err());
        m.push_row(vec![0.5]).unwrap();
        assert!(m.push_row(vec![0.5, 1.5]).is_err());
        assert!(serde_json::from_str::<AccuracyMatrix>("[[0.5],[0.1]]").is_err());
    }

    #[test]
    fn report_verifies_and_detects_tampering() {
        let m = matrix(&[&[0.6], &[0.5, 0.9]]);
        let mut r = EvalReport::new("ft", "online", 1, "abc", vec![1, 2], m, vec![]).unwrap();
        r.verify().unwrap();
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        back.verify().unwrap();
        assert_eq!(back, r);
        r.forgetting[1] = 0.0;
        assert!(r.verify().is_err());
    }
}
