use super::TrainError;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax over the outputs, then mean negative log-likelihood.
    CategoricalCrossEntropy,
    /// Sigmoid per output, binary cross-entropy against one-hot targets,
    /// averaged over examples and classes.
    BinaryCrossEntropy,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "categorical-cross-entropy" | "categorical" => Ok(LossKind::CategoricalCrossEntropy),
            "per-class-binary-cross-entropy" | "binary" => Ok(LossKind::BinaryCrossEntropy),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::CategoricalCrossEntropy => "categorical-cross-entropy",
            LossKind::BinaryCrossEntropy => "per-class-binary-cross-entropy",
        })
    }
}

/// Mean loss over a `[N, C]` batch of logits and its gradient w.r.t. the logits.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    kind: LossKind,
) -> Result<(T, Tensor<T>), TrainError> {
    weighted_cross_entropy_loss(logits, labels, kind, None)
}

/// As [`cross_entropy_loss`], with each example's term scaled by the weight of
/// its class. The loss is still divided by the batch size.
pub fn weighted_cross_entropy_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    kind: LossKind,
    class_weights: Option<&[f64]>,
) -> Result<(T, Tensor<T>), TrainError> {
    logits.expect_rank(2, "cross entropy")?;
    let (n, c) = (logits.dims()[0], logits.dims()[1]);
    if labels.len() != n {
        return Err(TrainError::InvalidInput(format!(
            "{} labels for {n} rows of logits",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(TrainError::LabelOutOfRange { label, classes: c });
    }
    if let Some(w) = class_weights {
        if w.len() != c {
            return Err(TrainError::InvalidInput(format!(
                "{} class weights for {c} classes",
                w.len()
            )));
        }
    }

    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(n * c);
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        let weight = class_weights.map_or(1.0, |w| w[label]);
        let row: Vec<f64> = row.iter().map(|v| Scalar::to_f64(*v)).collect();
        match kind {
            LossKind::CategoricalCrossEntropy => {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
                let log_norm = max + sum_exp.ln();
                total += weight * (log_norm - row[label]);
                for (j, &z) in row.iter().enumerate() {
                    let p = (z - log_norm).exp();
                    let target = if j == label { 1.0 } else { 0.0 };
                    grad.push(T::from_f64(weight * (p - target) / n as f64));
                }
            }
            LossKind::BinaryCrossEntropy => {
                let mut row_loss = 0.0;
                for (j, &z) in row.iter().enumerate() {
                    let y = if j == label { 1.0 } else { 0.0 };
                    // max(z, 0) - z·y + ln(1 + e^-|z|)
                    row_loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                    let s = if z >= 0.0 {
                        1.0 / (1.0 + (-z).exp())
                    } else {
                        let e = z.exp();
                        e / (1.0 + e)
                    };
                    grad.push(T::from_f64(weight * (s - y) / (n * c) as f64));
                }
                total += weight * row_loss / c as f64;
            }
        }
    }
    Ok((T::from_f64(total / n as f64), Tensor::from_vec(&[n, c], grad)?))
}
