use crate::tensor::{Scalar, Tensor};

use super::Result;

/// Activation applied after a parametric layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    pub fn apply<T: Scalar>(self, z: Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Identity => z,
            Activation::Relu => relu_owned(z),
            Activation::Sigmoid => sigmoid(&z),
        }
    }

    /// Backpropagates through the activation given its *output*.
    ///
    /// For relu the gate `output > 0` is identical to `input > 0`.
    pub fn backward<T: Scalar>(self, output: &Tensor<T>, upstream: Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Activation::Identity => Ok(upstream),
            Activation::Relu => relu_backward(output, &upstream),
            Activation::Sigmoid => sigmoid_backward(output, &upstream),
        }
    }
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

fn relu_owned<T: Scalar>(mut z: Tensor<T>) -> Tensor<T> {
    for v in z.data_mut() {
        if *v <= T::zero() || v.is_nan() {
            *v = T::zero();
        }
    }
    z
}

/// Passes `upstream` where `input > 0`; the derivative at exactly 0 is 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(input.zip_map(upstream, |x, g| if x > T::zero() { g } else { T::zero() })?)
}

/// Logistic function, computed without overflow and kept strictly inside (0, 1).
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let one = T::one();
    let s = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let upper = one - T::epsilon() / T::from_f64(2.0);
    s.max(T::min_positive_value()).min(upper)
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(output.zip_map(upstream, |s, g| g * s * (T::one() - s))?)
}

/// Row-wise softmax of a `[N, C]` tensor.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.expect_rank(2, "softmax")?;
    let cols = logits.dims()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}
