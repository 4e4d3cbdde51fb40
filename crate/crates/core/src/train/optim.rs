use super::TrainError;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// `p ← p − lr·g`
    Sgd,
    /// `v ← β·v + g`, `p ← p − lr·v`
    Momentum { beta: f64 },
    /// Bias-corrected first/second moment estimates.
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum { .. } => "sgd-momentum",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

/// Optimizer together with its per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    learning_rate: f64,
    steps: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<(), TrainError> {
        if params.len() != grads.len() {
            return Err(TrainError::InvalidInput(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            p.expect_same_shape(g, "optimizer step")?;
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGradient { param: i });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        self.steps += 1;
        let lr = T::from_f64(self.learning_rate);

        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - lr * d;
                    }
                }
            }
            OptimizerKind::Momentum { beta } => {
                let beta = T::from_f64(beta);
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &d), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        *v = beta * *v + d;
                        *w = *w - lr * *v;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let t = self.steps as i32;
                let c1 = T::from_f64(1.0 - beta1.powi(t));
                let c2 = T::from_f64(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(epsilon));
                let one = T::one();
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &d), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *m = b1 * *m + (one - b1) * d;
                        *v = b2 * *v + (one - b2) * d * d;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| Scalar::to_f64(v) * Scalar::to_f64(v))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    fn all_kinds() -> [OptimizerKind; 3] {
        [OptimizerKind::Sgd, OptimizerKind::Momentum { beta: 0.9 }, OptimizerKind::adam()]
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = scalar(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        opt.step(&mut [&mut p], &[scalar(0.5)]).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = scalar(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Momentum { beta: 0.5 }, 0.1);
        opt.step(&mut [&mut p], &[scalar(1.0)]).unwrap();
        opt.step(&mut [&mut p], &[scalar(1.0)]).unwrap();
        // v1 = 1, v2 = 1.5
        assert!((p.data()[0] - (1.0 - 0.1 - 0.15)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for kind in all_kinds() {
            let mut p = Tensor::from_vec(&[3], vec![0.25, -1.0, 7.0]).unwrap();
            let before = p.clone();
            let mut opt = Optimizer::new(kind, 0.01);
            for _ in 0..3 {
                opt.step(&mut [&mut p], &[Tensor::zeros(&[3]).unwrap()]).unwrap();
            }
            assert_eq!(p, before, "{kind:?}");
        }
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        for g in [1e-3, 0.1, 1.0, 42.0, 1e3] {
            for sign in [1.0, -1.0] {
                let mut p = scalar(0.0);
                let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3);
                opt.step(&mut [&mut p], &[scalar(sign * g)]).unwrap();
                let update = p.data()[0].abs();
                assert!((update - 1e-3).abs() <= 1e-3 * 1e-3, "g={g}: {update}");
            }
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = scalar(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        assert!(matches!(
            opt.step(&mut [&mut p], &[scalar(f64::NAN)]),
            Err(TrainError::NonFiniteGradient { param: 0 })
        ));
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn small_step_reduces_quadratic() {
        for kind in all_kinds() {
            let mut p = scalar(1.0);
            let mut opt = Optimizer::new(kind, 1e-3);
            let grad = scalar(2.0 * p.data()[0]);
            opt.step(&mut [&mut p], &[grad]).unwrap();
            assert!(p.data()[0].powi(2) < 1.0, "{kind:?}");
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut grads = vec![scalar(3.0), scalar(4.0)];
        let before = clip_global_norm(&mut grads, 1.0);
        assert_eq!(before, 5.0);
        assert!((grads[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((grads[1].data()[0] - 0.8).abs() < 1e-12);
    }
}
