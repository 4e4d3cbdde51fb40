//! The seeded mini-batch training loop.

use log::debug;
use rand::seq::SliceRandom;

use super::config::{ClassWeighting, TrainConfig};
use super::model::Model;
use super::optim::{clip_global_norm, Optimizer};
use super::split::Labeled;
use super::TrainError;
use crate::metrics::{confusion, predict_class, report};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};

/// A training example: one `[C, H, W]` input and its class id.
pub trait Sample<T: Scalar>: Labeled {
    fn input(&self) -> &Tensor<T>;
}

impl<T: Scalar, S: Sample<T> + ?Sized> Sample<T> for &S {
    fn input(&self) -> &Tensor<T> {
        (**self).input()
    }
}

impl<T: Scalar> Labeled for (Tensor<T>, usize) {
    fn label(&self) -> usize {
        self.1
    }
}

impl<T: Scalar> Sample<T> for (Tensor<T>, usize) {
    fn input(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Statistics of one completed epoch (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Example-weighted mean of the batch losses.
    pub train_loss: f64,
    /// Fraction of examples classified correctly by the pre-update logits.
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_macro_precision: Option<f64>,
}

/// Receives per-epoch statistics in epoch order, on the training thread.
pub trait MetricsSink {
    fn record(&mut self, stats: &EpochStats);
}

impl MetricsSink for Vec<EpochStats> {
    fn record(&mut self, stats: &EpochStats) {
        self.push(stats.clone());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    pub optimizer_steps: u64,
}

/// Inverse-frequency weights `n / (classes · n_c)`; absent classes get 0.
pub fn class_weights(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l < classes {
            counts[l] += 1;
        }
    }
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                labels.len() as f64 / (classes * c) as f64
            }
        })
        .collect()
}

/// Stacks equally shaped `[C, H, W]` inputs into `[N, C, H, W]`.
pub fn stack_images<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>, TrainError> {
    let first = items
        .first()
        .ok_or_else(|| TrainError::InvalidInput("cannot stack an empty batch".into()))?;
    let dims = first.dims().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.dims() != dims.as_slice() {
            return Err(TrainError::InvalidInput(format!(
                "batch mixes input shapes {:?} and {:?}",
                dims,
                t.dims()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut batched = vec![items.len()];
    batched.extend(dims);
    Ok(Tensor::from_vec(&batched, data)?)
}

/// Class scores (`[N, classes]`) for every sample, computed `batch_size` at a time.
pub fn predict_scores<T: Scalar, S: Sample<T>>(
    model: &Model<T>,
    samples: &[S],
    batch_size: usize,
) -> Result<Tensor<T>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut data = Vec::with_capacity(samples.len() * model.num_outputs());
    for chunk in samples.chunks(batch_size.max(1)) {
        let inputs: Vec<&Tensor<T>> = chunk.iter().map(|s| s.input()).collect();
        let scores = model.scores(&stack_images(&inputs)?)?;
        data.extend_from_slice(scores.data());
    }
    Ok(Tensor::from_vec(&[samples.len(), model.num_outputs()], data)?)
}

fn check_labels<S: Labeled>(samples: &[S], classes: usize) -> Result<(), TrainError> {
    match samples.iter().map(Labeled::label).find(|&l| l >= classes) {
        Some(label) => Err(TrainError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

fn evaluate<T: Scalar, S: Sample<T>>(
    model: &Model<T>,
    samples: &[S],
    batch_size: usize,
) -> Result<(f64, Option<f64>), TrainError> {
    let scores = predict_scores(model, samples, batch_size)?;
    let truth: Vec<usize> = samples.iter().map(Labeled::label).collect();
    let cm = confusion(&truth, &predict_class(&scores), model.num_outputs())
        .map_err(|e| TrainError::InvalidInput(e.to_string()))?;
    let r = report(&cm).map_err(|e| TrainError::InvalidInput(e.to_string()))?;
    Ok((r.accuracy, r.macro_precision))
}

/// Runs `config.epochs` epochs of mini-batch training. Each epoch visits the
/// samples in an order shuffled from `(seed, epoch)`; the last batch may be
/// short. When `validation` is given, it is evaluated after every epoch.
pub fn train<T: Scalar, S: Sample<T>>(
    model: &mut Model<T>,
    samples: &[S],
    validation: Option<&[S]>,
    config: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = model.num_outputs();
    check_labels(samples, classes)?;
    if let Some(v) = validation {
        check_labels(v, classes)?;
    }
    let loss_kind = config.loss_kind();
    let labels: Vec<usize> = samples.iter().map(Labeled::label).collect();
    let weights = match config.class_weighting {
        ClassWeighting::None => None,
        ClassWeighting::InverseFrequency => Some(class_weights(&labels, classes)),
    };
    let mut optimizer = Optimizer::<T>::new(config.optimizer_kind(), config.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(config.seed, Stream::Epoch(epoch as u64 - 1)));
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let inputs: Vec<&Tensor<T>> = idx.iter().map(|&i| samples[i].input()).collect();
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let x = stack_images(&inputs)?;
            let mut outcome =
                model.loss_and_gradients(&x, &batch_labels, loss_kind, weights.as_deref())?;
            let loss = outcome.loss.to_f64();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch + 1,
                });
            }
            loss_sum += loss * idx.len() as f64;
            correct += predict_class(&outcome.logits)
                .iter()
                .zip(&batch_labels)
                .filter(|(p, t)| p == t)
                .count();
            if let Some(max_norm) = config.grad_clip {
                clip_global_norm(&mut outcome.gradients, max_norm);
            }
            optimizer.step(&mut model.params_mut(), &outcome.gradients)?;
            debug!("epoch {epoch} batch {} loss {loss:.6}", batch + 1);
        }
        let (eval_accuracy, eval_macro_precision) = match validation {
            Some(v) if !v.is_empty() => {
                let (acc, prec) = evaluate(model, v, config.batch_size)?;
                (Some(acc), prec)
            }
            _ => (None, None),
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / samples.len() as f64,
            train_accuracy: correct as f64 / samples.len() as f64,
            eval_accuracy,
            eval_macro_precision,
        };
        sink.record(&stats);
        epochs.push(stats);
    }
    Ok(TrainOutcome {
        epochs,
        optimizer_steps: optimizer.steps(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Conv2d, Dense};
    use crate::train::{HeadMode, Layer, OptimizerChoice};

    fn tiny_model(seed: u64) -> Model<f32> {
        let mut rng = stream_rng(seed, Stream::Init);
        let layers = vec![
            Layer::conv(Conv2d::init(1, 2, 3, &mut rng).unwrap(), Activation::Relu),
            Layer::MaxPool2d,
            Layer::Flatten,
            Layer::dense(Dense::init(2 * 3 * 3, 4, &mut rng).unwrap(), Activation::Identity),
        ];
        Model::new([1, 8, 8], layers, HeadMode::Softmax).unwrap()
    }

    fn toy_samples(n: usize) -> Vec<(Tensor<f32>, usize)> {
        (0..n)
            .map(|i| {
                let label = i % 4;
                let data = (0..64)
                    .map(|p| if p % 4 == label { 1.0 } else { ((p * 7 + i) % 5) as f32 * 0.05 })
                    .collect();
                (Tensor::from_vec(&[1, 8, 8], data).unwrap(), label)
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let mut model = tiny_model(1);
        let before = model.clone();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let out = train(&mut model, &toy_samples(8), None, &config, &mut log).unwrap();
        assert_eq!(model, before);
        assert!(out.epochs.is_empty() && log.is_empty());
    }

    #[test]
    fn single_example_loss_decreases_with_sgd() {
        let sample = toy_samples(1);
        let config_for = |lr| TrainConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: lr,
            optimizer: OptimizerChoice::Sgd,
            ..TrainConfig::default()
        };
        let initial = {
            let m = tiny_model(2);
            let x = stack_images(&[&sample[0].0]).unwrap();
            m.loss_and_gradients(&x, &[sample[0].1], config_for(1e-3).loss_kind(), None)
                .unwrap()
                .loss as f64
        };
        // doubling search for a learning rate that trains without diverging
        let mut lr = 1e-4;
        let mut best = f64::INFINITY;
        while lr <= 1.0 {
            let mut m = tiny_model(2);
            if let Ok(out) = train(&mut m, &sample, None, &config_for(lr), &mut Vec::new()) {
                best = best.min(out.epochs.last().unwrap().train_loss);
            }
            lr *= 2.0;
        }
        assert!(best < initial, "best {best} vs initial {initial}");
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let samples = toy_samples(20);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 6,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = tiny_model(3);
            let out = train(&mut m, &samples, Some(&samples[..8]), &config, &mut Vec::new()).unwrap();
            (m, out)
        };
        let (m1, o1) = run();
        let (m2, o2) = run();
        assert_eq!(o1, o2);
        assert_eq!(m1, m2);
        assert_eq!(o1.optimizer_steps, 12);
        assert!(o1.epochs.iter().all(|e| e.eval_accuracy.is_some()));
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let samples = toy_samples(16);
        let config = TrainConfig {
            epochs: 60,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut m = tiny_model(4);
        let out = train(&mut m, &samples, None, &config, &mut Vec::new()).unwrap();
        let first = out.epochs[0].train_loss;
        let last = out.epochs.last().unwrap().train_loss;
        assert!(last < first * 0.5, "{first} -> {last}");
    }

    #[test]
    fn rejects_bad_labels_and_empty_sets() {
        let mut m = tiny_model(5);
        let mut samples = toy_samples(4);
        samples[2].1 = 4;
        let config = TrainConfig::default();
        assert!(matches!(
            train(&mut m, &samples, None, &config, &mut Vec::new()),
            Err(TrainError::LabelOutOfRange { label: 4, classes: 4 })
        ));
        let empty: Vec<(Tensor<f32>, usize)> = Vec::new();
        assert!(matches!(
            train(&mut m, &empty, None, &config, &mut Vec::new()),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn diverging_run_reports_epoch_and_batch() {
        let mut m = tiny_model(6);
        let mut samples = toy_samples(4);
        samples[0].0.data_mut()[0] = f32::NAN;
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let err = train(&mut m, &samples, None, &config, &mut Vec::new()).unwrap_err();
        assert!(err.is_non_finite(), "{err}");
    }

    #[test]
    fn inverse_frequency_weights() {
        let w = class_weights(&[0, 0, 0, 1, 2, 2], 4);
        assert_eq!(w, vec![0.5, 1.5, 0.75, 0.0]);
    }
}
