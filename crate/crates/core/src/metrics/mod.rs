//! Classification statistics and training-curve logs.

mod artifacts;
mod plot;

pub use artifacts::{
    confusion_to_csv, curves_to_csv, emit_artifacts, emit_curves, emit_evaluation,
    parse_confusion_csv, parse_curves_csv, report_text, ArtifactError,
};

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};
use crate::train::{EpochStats, MetricsSink};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{truth} true labels but {predicted} predictions")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("epoch {epoch} does not follow epoch {previous}")]
    EpochOrder { previous: usize, epoch: usize },
}

/// Row-wise argmax; the lowest index wins ties.
pub fn predict_class<T: Scalar>(outputs: &Tensor<T>) -> Vec<usize> {
    let cols = outputs.dims().last().copied().unwrap_or(1);
    outputs
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Square tally with rows indexed by true class and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(MetricsError::LengthMismatch {
                truth: classes,
                predicted: rows.iter().map(Vec::len).find(|&l| l != classes).unwrap_or(0),
            });
        }
        Ok(Self {
            classes,
            counts: rows.into_iter().flatten().collect(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.classes.max(1))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    pub fn column_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, predicted)).sum()
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    let mut m = ConfusionMatrix::new(classes);
    for (&t, &p) in truth.iter().zip(predicted) {
        if let Some(&label) = [t, p].iter().find(|&&l| l >= classes) {
            return Err(MetricsError::LabelOutOfRange { label, classes });
        }
        m.counts[t * classes + p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    /// trace / total.
    pub accuracy: f64,
    /// Pooled precision over all predictions; equals accuracy for single-label data.
    pub micro_precision: f64,
    /// `None` where nothing was predicted as that class.
    pub per_class_precision: Vec<Option<f64>>,
    /// `None` where the class is absent from the evaluated set.
    pub per_class_recall: Vec<Option<f64>>,
    /// Mean of the defined per-class precisions.
    pub macro_precision: Option<f64>,
}

impl EvalReport {
    /// Classes excluded from the macro mean.
    pub fn undefined_precision_classes(&self) -> Vec<usize> {
        (0..self.per_class_precision.len())
            .filter(|&c| self.per_class_precision[c].is_none())
            .collect()
    }
}

pub fn report(m: &ConfusionMatrix) -> Result<EvalReport, MetricsError> {
    let total = m.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    let per_class_precision: Vec<_> = (0..m.classes()).map(|c| ratio(m.get(c, c), m.column_sum(c))).collect();
    let per_class_recall = (0..m.classes()).map(|c| ratio(m.get(c, c), m.row_sum(c))).collect();
    let defined: Vec<f64> = per_class_precision.iter().flatten().copied().collect();
    let macro_precision = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let accuracy = m.trace() as f64 / total as f64;
    Ok(EvalReport {
        confusion: m.clone(),
        accuracy,
        micro_precision: accuracy,
        per_class_precision,
        per_class_recall,
        macro_precision,
    })
}

/// One curve row. Values are single precision so that nine significant
/// digits in text reproduce them exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_accuracy: f32,
    pub eval_accuracy: Option<f32>,
    pub eval_macro_precision: Option<f32>,
}

impl From<&EpochStats> for EpochRecord {
    fn from(s: &EpochStats) -> Self {
        Self {
            epoch: s.epoch,
            train_loss: s.train_loss as f32,
            train_accuracy: s.train_accuracy as f32,
            eval_accuracy: s.eval_accuracy.map(|v| v as f32),
            eval_macro_precision: s.eval_macro_precision.map(|v| v as f32),
        }
    }
}

/// Per-epoch records with strictly increasing epoch numbers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CurveLog {
    records: Vec<EpochRecord>,
}

impl CurveLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: EpochRecord) -> Result<(), MetricsError> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(MetricsError::EpochOrder {
                    previous: last.epoch,
                    epoch: record.epoch,
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_eval(&self) -> bool {
        self.records.iter().any(|r| r.eval_accuracy.is_some() || r.eval_macro_precision.is_some())
    }
}

impl MetricsSink for CurveLog {
    fn record(&mut self, stats: &EpochStats) {
        // the trainer emits epochs 1, 2, ... in order
        self.push(stats.into()).expect("trainer emits increasing epochs");
    }
}
