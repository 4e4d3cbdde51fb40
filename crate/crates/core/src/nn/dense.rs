use rand::Rng;

use super::init::uniform_tensor;
use super::{LayerGradients, NnError, PartialGradients, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor, TensorError};

/// Fully connected layer: `out = input · weights + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Scalar = f32> {
    weights: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    /// `weights` is `[in_features, out_features]`, `bias` is `[out_features]`.
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        weights.expect_rank(2, "dense weights")?;
        bias.expect_rank(1, "dense bias")?;
        if bias.dims()[0] != weights.dims()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "dense bias",
                lhs: weights.dims().to_vec(),
                rhs: bias.dims().to_vec(),
            }
            .into());
        }
        Ok(Self { weights, bias })
    }

    /// Uniform init with bound `sqrt(6 / (in + out))`, zero bias.
    pub fn init<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Result<Self> {
        let bound = (6.0 / ((in_features + out_features) as f64)).sqrt();
        let weights = uniform_tensor(&[in_features, out_features], bound, rng)?;
        Self::new(weights, Tensor::zeros(&[out_features])?)
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weights, &mut self.bias]
    }

    pub fn in_features(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn cast<U: Scalar>(&self) -> Dense<U> {
        Dense {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn output_dims(&self, input: &[usize]) -> Result<[usize; 2]> {
        if input.len() != 2 || input[1] != self.in_features() {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                lhs: input.to_vec(),
                rhs: self.weights.dims().to_vec(),
            }
            .into());
        }
        Ok([input[0], self.out_features()])
    }
}

pub fn dense_forward<T: Scalar>(input: &Tensor<T>, layer: &Dense<T>) -> Result<Tensor<T>> {
    let [n, u] = layer.output_dims(input.dims())?;
    let f = layer.in_features();
    let mut out = Vec::with_capacity(n * u);
    for _ in 0..n {
        out.extend_from_slice(layer.bias.data());
    }
    gemm(
        MatRef::new(input.data(), n, f),
        MatRef::new(layer.weights.data(), f, u),
        T::one(),
        &mut out,
    );
    Ok(Tensor::from_vec(&[n, u], out)?)
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    layer: &Dense<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGradients<T>> {
    let g = dense_backward_with(input, layer, upstream, true)?;
    Ok(LayerGradients {
        d_input: g
            .d_input
            .ok_or_else(|| NnError::Internal("input gradient missing".into()))?,
        d_weights: Some(g.d_weights),
        d_bias: Some(g.d_bias),
    })
}

pub(crate) fn dense_backward_with<T: Scalar>(
    input: &Tensor<T>,
    layer: &Dense<T>,
    upstream: &Tensor<T>,
    need_input: bool,
) -> Result<PartialGradients<T>> {
    let [n, u] = layer.output_dims(input.dims())?;
    if upstream.dims() != [n, u] {
        return Err(TensorError::ShapeMismatch {
            op: "dense backward",
            lhs: vec![n, u],
            rhs: upstream.dims().to_vec(),
        }
        .into());
    }
    let f = layer.in_features();

    let mut d_w = vec![T::zero(); f * u];
    gemm(
        MatRef::transposed(input.data(), n, f),
        MatRef::new(upstream.data(), n, u),
        T::zero(),
        &mut d_w,
    );

    let mut d_b = vec![T::zero(); u];
    for row in upstream.data().chunks(u) {
        for (acc, &g) in d_b.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }

    let d_input = if need_input {
        let mut d_x = vec![T::zero(); n * f];
        gemm(
            MatRef::new(upstream.data(), n, u),
            MatRef::transposed(layer.weights.data(), f, u),
            T::zero(),
            &mut d_x,
        );
        Some(Tensor::from_vec(&[n, f], d_x)?)
    } else {
        None
    };

    Ok(PartialGradients {
        d_input,
        d_weights: Tensor::from_vec(&[f, u], d_w)?,
        d_bias: Tensor::from_vec(&[u], d_b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights_pass_input_through() {
        let l = Dense::new(Tensor::<f32>::eye(3).unwrap(), Tensor::zeros(&[3]).unwrap()).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -8.0]).unwrap();
        assert_eq!(dense_forward(&x, &l).unwrap(), x);
    }

    #[test]
    fn zero_input_yields_bias_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = uniform_tensor(&[4, 2], 1.0, &mut rng).unwrap();
        let l = Dense::new(w, Tensor::from_vec(&[2], vec![0.5f32, -1.5]).unwrap()).unwrap();
        let out = dense_forward(&Tensor::zeros(&[3, 4]).unwrap(), &l).unwrap();
        assert_eq!(out.data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn random_case_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f32> = uniform_tensor(&[2, 5], 1.0, &mut rng).unwrap();
        let w: Tensor<f32> = uniform_tensor(&[5, 3], 1.0, &mut rng).unwrap();
        let b: Tensor<f32> = uniform_tensor(&[3], 1.0, &mut rng).unwrap();
        let l = Dense::new(w.clone(), b.clone()).unwrap();
        let out = dense_forward(&x, &l).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let mut acc = b.data()[j] as f64;
                for p in 0..5 {
                    acc += x.data()[i * 5 + p] as f64 * w.data()[p * 3 + j] as f64;
                }
                assert!((out.data()[i * 3 + j] as f64 - acc).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn backward_examples() {
        let l = Dense::new(
            Tensor::from_vec(&[1, 1], vec![0.7f64]).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
        )
        .unwrap();
        let x = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
        let up = Tensor::from_vec(&[1, 1], vec![-2.0]).unwrap();
        let g = dense_backward(&x, &l, &up).unwrap();
        assert_eq!(g.d_weights.unwrap().data(), &[-6.0]);
        assert_eq!(g.d_bias.unwrap().data(), &[-2.0]);
        assert_eq!(g.d_input.data(), &[-2.0 * 0.7]);

        let g = dense_backward(&x, &l, &Tensor::zeros(&[1, 1]).unwrap()).unwrap();
        assert_eq!(g.d_input.data(), &[0.0]);
        assert_eq!(g.d_weights.unwrap().data(), &[0.0]);
    }

    #[test]
    fn feature_mismatch_is_rejected() {
        let l = Dense::<f32>::init(4, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(dense_forward(&Tensor::zeros(&[1, 5]).unwrap(), &l).is_err());
        assert!(dense_backward(&Tensor::zeros(&[1, 4]).unwrap(), &l, &Tensor::zeros(&[1, 3]).unwrap()).is_err());
    }
}
