use super::{dims4, NnError, Result};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Side of the square, non-overlapping pooling window (also its stride).
pub const POOL_WINDOW: usize = 2;

/// Winner positions recorded by [`maxpool2d_forward`], one flat input index per
/// output cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_dims: [usize; 4],
    output_dims: [usize; 4],
    indices: Vec<usize>,
}

impl PoolIndices {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn input_dims(&self) -> [usize; 4] {
        self.input_dims
    }
}

pub fn pool_output_dims(input: &[usize]) -> Result<[usize; 4]> {
    if input.len() != 4 || input[2] < POOL_WINDOW || input[3] < POOL_WINDOW {
        return Err(TensorError::InvalidShape {
            dims: input.to_vec(),
            reason: "max pooling needs rank 4 and spatial extents of at least 2",
        }
        .into());
    }
    Ok([
        input[0],
        input[1],
        input[2] / POOL_WINDOW,
        input[3] / POOL_WINDOW,
    ])
}

/// 2×2 stride-2 max pooling. Odd trailing rows/columns are dropped; ties go to
/// the first cell of the window in row-major order.
pub fn maxpool2d_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let input_dims = dims4(input, "maxpool2d")?;
    let output_dims = pool_output_dims(&input_dims)?;
    let [n, c, h, w] = input_dims;
    let [_, _, oh, ow] = output_dims;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut indices = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + (y * POOL_WINDOW) * w + xo * POOL_WINDOW;
                for dy in 0..POOL_WINDOW {
                    for dx in 0..POOL_WINDOW {
                        let i = base + (y * POOL_WINDOW + dy) * w + xo * POOL_WINDOW + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                indices.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec(&output_dims, out)?,
        PoolIndices {
            input_dims,
            output_dims,
            indices,
        },
    ))
}

/// Routes each upstream value to its window's winner.
pub fn maxpool2d_backward<T: Scalar>(
    indices: &PoolIndices,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    if upstream.dims() != indices.output_dims {
        return Err(TensorError::ShapeMismatch {
            op: "maxpool2d backward",
            lhs: indices.output_dims.to_vec(),
            rhs: upstream.dims().to_vec(),
        }
        .into());
    }
    if indices.indices.len() != upstream.numel() {
        return Err(NnError::Internal(format!(
            "pool index table holds {} entries for {} outputs",
            indices.indices.len(),
            upstream.numel()
        )));
    }
    let mut d_input = Tensor::zeros(&indices.input_dims)?;
    let len = d_input.numel();
    let d = d_input.data_mut();
    for (&i, &g) in indices.indices.iter().zip(upstream.data()) {
        if i >= len {
            return Err(NnError::Internal(format!(
                "pool index {i} out of range for {len} inputs"
            )));
        }
        d[i] = d[i] + g;
    }
    Ok(d_input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(dims: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(dims, v).unwrap()
    }

    #[test]
    fn max_of_four() {
        let (out, idx) = maxpool2d_forward(&t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(idx.indices(), &[3]);
        let d = maxpool2d_backward(&idx, &t(&[1, 1, 1, 1], vec![1.0])).unwrap();
        assert_eq!(d.data(), &[0.0, 0.0, 0.0, 1.0]);
        let d = maxpool2d_backward(&idx, &t(&[1, 1, 1, 1], vec![0.0])).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ties_go_to_first_cell() {
        let (out, idx) = maxpool2d_forward(&Tensor::<f64>::full(&[1, 2, 4, 4], 0.5).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        // window origins of two 4×4 planes
        assert_eq!(idx.indices(), &[0, 2, 8, 10, 16, 18, 24, 26]);
    }

    #[test]
    fn network_stack_shapes() {
        assert_eq!(pool_output_dims(&[2, 32, 198, 198]).unwrap(), [2, 32, 99, 99]);
        assert_eq!(pool_output_dims(&[2, 64, 97, 97]).unwrap(), [2, 64, 48, 48]);
        assert_eq!(pool_output_dims(&[2, 128, 21, 21]).unwrap(), [2, 128, 10, 10]);
    }

    #[test]
    fn too_small_input_is_rejected() {
        assert!(maxpool2d_forward(&Tensor::<f64>::zeros(&[1, 1, 1, 4]).unwrap()).is_err());
        assert!(maxpool2d_forward(&Tensor::<f64>::zeros(&[1, 4]).unwrap()).is_err());
    }

    #[test]
    fn corrupted_index_table_is_an_internal_error() {
        let (_, mut idx) = maxpool2d_forward(&t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        idx.indices[0] = 99;
        assert!(matches!(
            maxpool2d_backward(&idx, &t(&[1, 1, 1, 1], vec![1.0])),
            Err(NnError::Internal(_))
        ));
    }

    proptest! {
        #[test]
        fn every_cell_is_its_window_max(
            h in 2usize..9, w in 2usize..9, c in 1usize..3,
            seed in proptest::collection::vec(-10.0f64..10.0, 2 * 8 * 8)
        ) {
            let data: Vec<f64> = seed.iter().cycle().take(c * h * w).copied().collect();
            let input = t(&[1, c, h, w], data.clone());
            let (out, _) = maxpool2d_forward(&input).unwrap();
            let global = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for ch in 0..c {
                for y in 0..h / 2 {
                    for x in 0..w / 2 {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(input.get(&[0, ch, 2 * y + dy, 2 * x + dx]).unwrap());
                            }
                        }
                        let v = out.get(&[0, ch, y, x]).unwrap();
                        prop_assert_eq!(v, m);
                        prop_assert!(v <= global);
                    }
                }
            }
        }
    }
}
