//! Macro-averaged recall and the source/target gap deltas.

use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::FeatureDataset;
use crate::error::{Error, Result};
use crate::head::{HeadParams, Mode};
use crate::math::argmax;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

/// How classes without any evaluated sample enter the macro average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroSupport {
    #[default]
    Exclude,
    CountAsZero,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if let Some(r) = counts.iter().find(|r| r.len() != c) {
            return Err(Error::DimensionMismatch {
                expected: c,
                actual: r.len(),
            });
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(
        num_classes: usize,
        truth: &[usize],
        predicted: &[usize],
    ) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                actual: predicted.len(),
            });
        }
        let mut cm = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let c = self.num_classes();
        for label in [truth, predicted] {
            if label >= c {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: c,
                });
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    /// Per-class recall; `None` for classes without support.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|c| {
                let s = self.support(c);
                (s > 0).then(|| self.counts[c][c] as f64 / s as f64)
            })
            .collect()
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        let diag: u64 = (0..self.num_classes()).map(|c| self.counts[c][c]).sum();
        Ok(diag as f64 / total as f64)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes(),
                actual: other.num_classes(),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

/// Mean per-class recall over classes with support.
pub fn macro_recall(cm: &ConfusionMatrix) -> Result<f64> {
    macro_recall_with(cm, ZeroSupport::Exclude)
}

pub fn macro_recall_with(cm: &ConfusionMatrix, zero_support: ZeroSupport) -> Result<f64> {
    let recalls = cm.recalls();
    if recalls.iter().all(Option::is_none) {
        return Err(Error::EmptyDataset);
    }
    let (sum, n) = recalls
        .iter()
        .fold((0.0, 0usize), |(s, n), r| match (r, zero_support) {
            (Some(r), _) => (s + r, n + 1),
            (None, ZeroSupport::CountAsZero) => (s, n + 1),
            (None, ZeroSupport::Exclude) => (s, n),
        });
    Ok(sum / n as f64)
}

/// Eval-mode confusion matrix of `head` on `data`.
pub fn evaluate(head: &HeadParams, data: &FeatureDataset) -> Result<ConfusionMatrix> {
    if data.dim() != head.in_dim {
        return Err(Error::DimensionMismatch {
            expected: head.in_dim,
            actual: data.dim(),
        });
    }
    let mut cm = ConfusionMatrix::new(head.num_classes);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(512) {
        let out = head.forward(&data.batch(chunk), Mode::Eval)?;
        for (row, &i) in chunk.iter().enumerate() {
            cm.record(data.label(i), argmax(out.probs.row(row)))?;
        }
    }
    Ok(cm)
}

/// Macro recall of `head` on `data`; `None` when `data` is empty.
pub fn evaluate_mar(head: &HeadParams, data: &FeatureDataset) -> Result<Option<f64>> {
    if data.is_empty() {
        return Ok(None);
    }
    macro_recall(&evaluate(head, data)?).map(Some)
}

/// Target minus source, in percentage points.
pub fn s2t_diff(source_mar: f64, target_mar: f64) -> f64 {
    100.0 * (target_mar - source_mar)
}

/// Target MAR under double imbalance minus target MAR when balanced.
pub fn target_diff(target_siti: f64, target_sbtb: f64) -> f64 {
    100.0 * (target_siti - target_sbtb)
}

/// Target MAR under double imbalance minus balanced source MAR.
pub fn s2t_under_label_shift(target_siti: f64, source_sbtb: f64) -> f64 {
    100.0 * (target_siti - source_sbtb)
}

/// Source and target MAR (fractions) of one scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioMar {
    pub source: f64,
    pub target: f64,
}

/// Gap deltas in percentage points; entries need both scenarios present.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GapReport {
    pub s2t_sbtb: Option<f64>,
    pub s2t_siti: Option<f64>,
    pub target_diff: Option<f64>,
    pub s2t_under_ls: Option<f64>,
}

pub fn gap_report(sbtb: Option<ScenarioMar>, siti: Option<ScenarioMar>) -> GapReport {
    GapReport {
        s2t_sbtb: sbtb.map(|s| s2t_diff(s.source, s.target)),
        s2t_siti: siti.map(|s| s2t_diff(s.source, s.target)),
        target_diff: sbtb.zip(siti).map(|(b, i)| target_diff(i.target, b.target)),
        s2t_under_ls: sbtb
            .zip(siti)
            .map(|(b, i)| s2t_under_label_shift(i.target, b.source)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn macro_recall_examples() {
        assert_eq!(macro_recall(&cm(&[&[5, 0], &[0, 5]])).unwrap(), 1.0);
        let m = macro_recall(&cm(&[&[3, 1], &[2, 4]])).unwrap();
        assert!((m - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-15);
        assert!((m - 0.70833).abs() < 1e-5);
        assert_eq!(macro_recall(&cm(&[&[2, 0], &[0, 0]])).unwrap(), 1.0);
        assert_eq!(
            macro_recall_with(&cm(&[&[2, 0], &[0, 0]]), ZeroSupport::CountAsZero).unwrap(),
            0.5
        );
        assert_eq!(
            macro_recall(&cm(&[&[0, 0], &[0, 0]])),
            Err(Error::EmptyDataset)
        );
    }

    #[test]
    fn macro_recall_equals_accuracy_on_balanced_support() {
        let m = cm(&[&[7, 2, 1], &[0, 10, 0], &[4, 4, 2]]);
        assert!((macro_recall(&m).unwrap() - m.accuracy().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn macro_recall_is_invariant_under_class_relabeling() {
        let m = cm(&[&[7, 2, 1], &[0, 3, 0], &[4, 4, 9]]);
        let perm = [2, 0, 1];
        let mut rows = vec![vec![0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rows[perm[i]][perm[j]] = m.counts()[i][j];
            }
        }
        let p = ConfusionMatrix::from_counts(rows).unwrap();
        assert!((macro_recall(&m).unwrap() - macro_recall(&p).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn gap_deltas() {
        assert!((s2t_diff(0.826, 0.650) + 17.6).abs() < 1e-9);
        assert_eq!(s2t_diff(0.5, 0.5), 0.0);
        assert!((s2t_under_label_shift(0.781, 0.899) + 11.8).abs() < 1e-9);
        let r = gap_report(
            Some(ScenarioMar {
                source: 0.826,
                target: 0.820,
            }),
            Some(ScenarioMar {
                source: 0.787,
                target: 0.776,
            }),
        );
        assert!((r.target_diff.unwrap() + 4.4).abs() < 1e-9);
    }
}
