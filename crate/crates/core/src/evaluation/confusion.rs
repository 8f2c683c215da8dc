use serde::{Deserialize, Serialize};

use crate::data::class_code;
use crate::error::{Error, Result};

/// `C×C` counts; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Contract("confusion rows must form a square matrix".into()));
        }
        Ok(ConfusionMatrix {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Contract(format!(
                "class pair ({truth}, {pred}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn diagonal(&self) -> Vec<u64> {
        (0..self.classes).map(|c| self.get(c, c)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(|r| r.to_vec()).collect()
    }

    /// Add another matrix of the same size cell by cell.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Contract(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `truth\pred,MEL,NV,...` header, then one row per true class.
    pub fn to_csv(&self) -> String {
        let codes: Vec<String> = (0..self.classes).map(class_code).collect();
        let mut out = format!("truth\\pred,{}\n", codes.join(","));
        for (c, code) in codes.iter().enumerate() {
            let cells: Vec<String> = self.row(c).iter().map(|n| n.to_string()).collect();
            out.push_str(&format!("{code},{}\n", cells.join(",")));
        }
        out
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &l) in preds.iter().zip(labels) {
        cm.record(l, p)?;
    }
    Ok(cm)
}

/// `100·trace/total` in full precision.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::UndefinedMetric("accuracy of an empty confusion matrix".into())),
        t => Ok(100.0 * cm.trace() as f64 / t as f64),
    }
}

/// Recall percent per class; `None` for classes with no true samples.
pub fn recall_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.classes())
        .map(|c| match cm.row_sum(c) {
            0 => None,
            n => Some(100.0 * cm.get(c, c) as f64 / n as f64),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let cm = confusion(&labels, &labels, 3).unwrap();
        assert_eq!(cm.trace(), 10);
        assert_eq!(cm.total(), 10);
        assert_eq!(accuracy(&cm).unwrap(), 100.0);
        assert!(recall_per_class(&cm).iter().all(|r| *r == Some(100.0)));
    }

    #[test]
    fn small_case_cells() {
        let cm = confusion(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 1], vec![0, 1]]);
    }

    #[test]
    fn contract_errors() {
        assert!(matches!(confusion(&[0], &[0, 1], 2), Err(Error::Contract(_))));
        assert!(matches!(confusion(&[2], &[0], 2), Err(Error::Contract(_))));
        assert!(matches!(accuracy(&ConfusionMatrix::new(3)), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn recall_half_and_absent() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 5], vec![0, 0]]).unwrap();
        assert_eq!(recall_per_class(&cm), vec![Some(50.0), None]);
    }

    #[test]
    fn matches_dictionary_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let preds: Vec<usize> = (0..500).map(|_| rng.gen_range(0..8)).collect();
        let labels: Vec<usize> = (0..500).map(|_| rng.gen_range(0..8)).collect();
        let cm = confusion(&preds, &labels, 8).unwrap();
        let mut oracle: HashMap<(usize, usize), u64> = HashMap::new();
        for (p, l) in preds.iter().zip(&labels) {
            *oracle.entry((*l, *p)).or_default() += 1;
        }
        for t in 0..8 {
            for p in 0..8 {
                assert_eq!(cm.get(t, p), oracle.get(&(t, p)).copied().unwrap_or(0));
            }
            let hand = cm.get(t, t) as f64 / cm.row(t).iter().sum::<u64>() as f64 * 100.0;
            assert!((recall_per_class(&cm)[t].unwrap() - hand).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_of_partial_folds_equals_whole() {
        let labels: Vec<usize> = (0..40).map(|i| (i * 7) % 4).collect();
        let preds: Vec<usize> = (0..40).map(|i| (i * 3) % 4).collect();
        let whole = confusion(&preds, &labels, 4).unwrap();
        let mut a = confusion(&preds[..17], &labels[..17], 4).unwrap();
        a.merge(&confusion(&preds[17..], &labels[17..], 4).unwrap()).unwrap();
        assert_eq!(a, whole);
    }

    #[test]
    fn csv_layout() {
        let cm = ConfusionMatrix::from_rows(&[vec![2, 0], vec![1, 3]]).unwrap();
        assert_eq!(cm.to_csv(), "truth\\pred,MEL,NV\nMEL,2,0\nNV,1,3\n");
    }
}
