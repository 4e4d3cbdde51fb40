//! Valid (unpadded), stride-1 2D convolution.
//!
//! Two implementations share one contract: a direct-loop reference path and an
//! im2col + GEMM path used for training. Per-item work runs in parallel; the
//! cross-item reduction of parameter gradients always happens sequentially in
//! batch order, so results do not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;

use super::init::uniform_tensor;
use super::{dims4, LayerGradients, NnError, PartialGradients, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T: Scalar = f32> {
    weights: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// `weights` is `[out, in, kh, kw]`, `bias` is `[out]`.
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        weights.expect_rank(4, "conv2d weights")?;
        bias.expect_rank(1, "conv2d bias")?;
        if bias.dims()[0] != weights.dims()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: weights.dims().to_vec(),
                rhs: bias.dims().to_vec(),
            }
            .into());
        }
        Ok(Self { weights, bias })
    }

    /// Uniform init with bound `sqrt(6 / (in·k·k + out·k·k))`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let area = kernel * kernel;
        let bound = (6.0 / ((in_channels * area + out_channels * area) as f64)).sqrt();
        let weights = uniform_tensor(&[out_channels, in_channels, kernel, kernel], bound, rng)?;
        let bias = Tensor::zeros(&[out_channels])?;
        Self::new(weights, bias)
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

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.dims()[2], self.weights.dims()[3])
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
        }
    }

    /// Output `[N, out, H-kh+1, W-kw+1]` for an `[N, in, H, W]` input.
    pub fn output_dims(&self, input: &[usize]) -> Result<[usize; 4]> {
        let (kh, kw) = self.kernel();
        if input.len() != 4 || input[1] != self.in_channels() || input[2] < kh || input[3] < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: self.weights.dims().to_vec(),
            }
            .into());
        }
        Ok([input[0], self.out_channels(), input[2] - kh + 1, input[3] - kw + 1])
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new<T: Scalar>(input: &Tensor<T>, layer: &Conv2d<T>) -> Result<Self> {
        let [n, cin, h, w] = dims4(input, "conv2d input")?;
        let [_, cout, oh, ow] = layer.output_dims(input.dims())?;
        let (kh, kw) = layer.kernel();
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
        })
    }

    fn input_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn output_dims(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }

    fn check_upstream<T: Scalar>(&self, upstream: &Tensor<T>) -> Result<()> {
        if upstream.dims() != self.output_dims() {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d backward",
                lhs: self.output_dims().to_vec(),
                rhs: upstream.dims().to_vec(),
            }
            .into());
        }
        Ok(())
    }

    /// Unfolds one item into `cols[(c, dy, dx), (y, x)]`.
    fn im2col<T: Scalar>(&self, item: &[T], cols: &mut [T]) {
        let p = self.positions();
        let mut r = 0;
        for c in 0..self.cin {
            let plane = &item[c * self.h * self.w..(c + 1) * self.h * self.w];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = &mut cols[r * p..(r + 1) * p];
                    for y in 0..self.oh {
                        let src = (y + dy) * self.w + dx;
                        row[y * self.ow..(y + 1) * self.ow]
                            .copy_from_slice(&plane[src..src + self.ow]);
                    }
                    r += 1;
                }
            }
        }
    }

    /// Scatter-adds `cols` back into an item-sized gradient buffer.
    fn col2im<T: Scalar>(&self, cols: &[T], item: &mut [T]) {
        let p = self.positions();
        let mut r = 0;
        for c in 0..self.cin {
            let plane = &mut item[c * self.h * self.w..(c + 1) * self.h * self.w];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = &cols[r * p..(r + 1) * p];
                    for y in 0..self.oh {
                        let dst = (y + dy) * self.w + dx;
                        for (d, &s) in plane[dst..dst + self.ow]
                            .iter_mut()
                            .zip(&row[y * self.ow..(y + 1) * self.ow])
                        {
                            *d = *d + s;
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Convolution forward pass via im2col + GEMM.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, layer: &Conv2d<T>) -> Result<Tensor<T>> {
    let g = Geometry::new(input, layer)?;
    let out_len = g.cout * g.positions();
    let mut out = vec![T::zero(); g.n * out_len];
    let weights = layer.weights.data();
    let bias = layer.bias.data();
    out.par_chunks_mut(out_len).enumerate().for_each_init(
        || vec![T::zero(); g.patch_len() * g.positions()],
        |cols, (n, out_item)| {
            let item = &input.data()[n * g.input_len()..(n + 1) * g.input_len()];
            g.im2col(item, cols);
            for (o, row) in out_item.chunks_mut(g.positions()).enumerate() {
                row.fill(bias[o]);
            }
            gemm(
                MatRef::new(weights, g.cout, g.patch_len()),
                MatRef::new(cols, g.patch_len(), g.positions()),
                T::one(),
                out_item,
            );
        },
    );
    Ok(Tensor::from_vec(&g.output_dims(), out)?)
}

/// Direct six-loop convolution; the reference the fast path is checked against.
pub fn conv2d_forward_reference<T: Scalar>(
    input: &Tensor<T>,
    layer: &Conv2d<T>,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, layer)?;
    let x = input.data();
    let wt = layer.weights.data();
    let mut out = vec![T::zero(); g.n * g.cout * g.positions()];
    for n in 0..g.n {
        for o in 0..g.cout {
            for y in 0..g.oh {
                for xo in 0..g.ow {
                    let mut acc = layer.bias.data()[o];
                    for c in 0..g.cin {
                        for dy in 0..g.kh {
                            for dx in 0..g.kw {
                                let xi = ((n * g.cin + c) * g.h + y + dy) * g.w + xo + dx;
                                let wi = ((o * g.cin + c) * g.kh + dy) * g.kw + dx;
                                acc = acc + x[xi] * wt[wi];
                            }
                        }
                    }
                    out[((n * g.cout + o) * g.oh + y) * g.ow + xo] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_vec(&g.output_dims(), out)?)
}

/// Per-item weight, bias and optional input gradients.
type ItemGradients<T> = (Vec<T>, Vec<T>, Option<Vec<T>>);

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    layer: &Conv2d<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGradients<T>> {
    let grads = conv2d_backward_with(input, layer, upstream, true)?;
    Ok(LayerGradients {
        d_input: grads
            .d_input
            .ok_or_else(|| NnError::Internal("input gradient missing".into()))?,
        d_weights: Some(grads.d_weights),
        d_bias: Some(grads.d_bias),
    })
}

/// Backward pass via im2col + GEMM; the input gradient is skipped when
/// `need_input` is false (first layer of a network).
pub(crate) fn conv2d_backward_with<T: Scalar>(
    input: &Tensor<T>,
    layer: &Conv2d<T>,
    upstream: &Tensor<T>,
    need_input: bool,
) -> Result<PartialGradients<T>> {
    let g = Geometry::new(input, layer)?;
    g.check_upstream(upstream)?;
    let p = g.positions();
    let k = g.patch_len();
    let weights = layer.weights.data();

    let partials: Vec<ItemGradients<T>> = (0..g.n)
        .into_par_iter()
        .map_init(
            || (vec![T::zero(); k * p], vec![T::zero(); k * p]),
            |(cols, d_cols), n| {
                let item = &input.data()[n * g.input_len()..(n + 1) * g.input_len()];
                let up = upstream.outer(n);
                g.im2col(item, cols);

                let mut d_w = vec![T::zero(); g.cout * k];
                gemm(
                    MatRef::new(up, g.cout, p),
                    MatRef::transposed(cols, k, p),
                    T::zero(),
                    &mut d_w,
                );
                let d_b = up.chunks(p).map(|row| row.iter().copied().sum()).collect();

                let d_x = need_input.then(|| {
                    gemm(
                        MatRef::transposed(weights, g.cout, k),
                        MatRef::new(up, g.cout, p),
                        T::zero(),
                        d_cols,
                    );
                    let mut d_x = vec![T::zero(); g.input_len()];
                    g.col2im(d_cols, &mut d_x);
                    d_x
                });
                (d_w, d_b, d_x)
            },
        )
        .collect();

    let mut d_weights = vec![T::zero(); g.cout * k];
    let mut d_bias = vec![T::zero(); g.cout];
    let mut d_input = need_input.then(|| Vec::with_capacity(g.n * g.input_len()));
    for (d_w, d_b, d_x) in partials {
        for (acc, v) in d_weights.iter_mut().zip(d_w) {
            *acc = *acc + v;
        }
        for (acc, v) in d_bias.iter_mut().zip(d_b) {
            *acc = *acc + v;
        }
        if let (Some(all), Some(d_x)) = (d_input.as_mut(), d_x) {
            all.extend_from_slice(&d_x);
        }
    }

    Ok(PartialGradients {
        d_input: d_input
            .map(|d| Tensor::from_vec(input.dims(), d))
            .transpose()?,
        d_weights: Tensor::from_vec(layer.weights.dims(), d_weights)?,
        d_bias: Tensor::from_vec(layer.bias.dims(), d_bias)?,
    })
}

/// Direct-loop backward pass.
pub fn conv2d_backward_reference<T: Scalar>(
    input: &Tensor<T>,
    layer: &Conv2d<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGradients<T>> {
    let g = Geometry::new(input, layer)?;
    g.check_upstream(upstream)?;
    let x = input.data();
    let wt = layer.weights.data();
    let up = upstream.data();
    let mut d_x = vec![T::zero(); x.len()];
    let mut d_w = vec![T::zero(); wt.len()];
    let mut d_b = vec![T::zero(); g.cout];
    for n in 0..g.n {
        for o in 0..g.cout {
            for y in 0..g.oh {
                for xo in 0..g.ow {
                    let u = up[((n * g.cout + o) * g.oh + y) * g.ow + xo];
                    d_b[o] = d_b[o] + u;
                    for c in 0..g.cin {
                        for dy in 0..g.kh {
                            for dx in 0..g.kw {
                                let xi = ((n * g.cin + c) * g.h + y + dy) * g.w + xo + dx;
                                let wi = ((o * g.cin + c) * g.kh + dy) * g.kw + dx;
                                d_w[wi] = d_w[wi] + u * x[xi];
                                d_x[xi] = d_x[xi] + u * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(LayerGradients {
        d_input: Tensor::from_vec(input.dims(), d_x)?,
        d_weights: Some(Tensor::from_vec(layer.weights.dims(), d_w)?),
        d_bias: Some(Tensor::from_vec(layer.bias.dims(), d_b)?),
    })
}
