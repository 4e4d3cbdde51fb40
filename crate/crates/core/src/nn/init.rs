use rand::Rng;

use crate::tensor::{Scalar, Tensor, TensorError};

/// Tensor of i.i.d. samples from `U(-bound, bound)`.
pub fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(
    dims: &[usize],
    bound: f64,
    rng: &mut R,
) -> Result<Tensor<T>, TensorError> {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(dims, data)
}
