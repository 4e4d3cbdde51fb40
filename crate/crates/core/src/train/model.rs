//! Layer stacks, including the 11-layer classification network.

use rand::Rng;

use super::loss::{weighted_cross_entropy_loss, LossKind};
use super::TrainError;
use crate::nn::{
    self, conv2d_backward_with, conv2d_forward, dense_backward_with, dense_forward,
    maxpool2d_backward, maxpool2d_forward, Activation, Conv2d, Dense, NnError, PoolIndices,
};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Number of output classes of the classification head.
pub const NUM_CLASSES: usize = 4;
/// Default input image side.
pub const PAPER_IMAGE_SIZE: usize = 200;
pub const INPUT_CHANNELS: usize = 3;

/// How the final four outputs are turned into class scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Independent sigmoid per output, as listed for the eleventh layer.
    Sigmoid,
    /// Raw logits followed by a softmax across classes.
    Softmax,
}

impl HeadMode {
    pub fn tag(self) -> u8 {
        match self {
            HeadMode::Sigmoid => 0,
            HeadMode::Softmax => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(HeadMode::Sigmoid),
            1 => Some(HeadMode::Softmax),
            _ => None,
        }
    }

    /// Activation stored on the final dense layer.
    pub fn final_activation(self) -> Activation {
        match self {
            HeadMode::Sigmoid => Activation::Sigmoid,
            HeadMode::Softmax => Activation::Identity,
        }
    }

    /// The loss that matches this head when none is configured.
    pub fn default_loss(self) -> LossKind {
        match self {
            HeadMode::Sigmoid => LossKind::BinaryCrossEntropy,
            HeadMode::Softmax => LossKind::CategoricalCrossEntropy,
        }
    }
}

impl std::str::FromStr for HeadMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(HeadMode::Sigmoid),
            "softmax" => Ok(HeadMode::Softmax),
            other => Err(format!("unknown head `{other}` (expected sigmoid or softmax)")),
        }
    }
}

impl std::fmt::Display for HeadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadMode::Sigmoid => "sigmoid",
            HeadMode::Softmax => "softmax",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Scalar = f32> {
    Conv2d { conv: Conv2d<T>, activation: Activation },
    MaxPool2d,
    Flatten,
    Dense { dense: Dense<T>, activation: Activation },
}

impl<T: Scalar> Layer<T> {
    pub fn conv(conv: Conv2d<T>, activation: Activation) -> Self {
        Layer::Conv2d { conv, activation }
    }

    pub fn dense(dense: Dense<T>, activation: Activation) -> Self {
        Layer::Dense { dense, activation }
    }

    pub fn kind_tag(&self) -> u8 {
        match self {
            Layer::Conv2d { .. } => 1,
            Layer::MaxPool2d => 2,
            Layer::Flatten => 3,
            Layer::Dense { .. } => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::MaxPool2d => "maxpool2d",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Conv2d { activation, .. } | Layer::Dense { activation, .. } => *activation,
            _ => Activation::Identity,
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv2d { conv, .. } => vec![conv.weights(), conv.bias()],
            Layer::Dense { dense, .. } => vec![dense.weights(), dense.bias()],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv2d { conv, .. } => conv.params_mut().into(),
            Layer::Dense { dense, .. } => dense.params_mut().into(),
            _ => Vec::new(),
        }
    }

    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        match self {
            Layer::Conv2d { conv, .. } => Ok(conv.output_dims(input)?.to_vec()),
            Layer::MaxPool2d => Ok(nn::pool_output_dims(input)?.to_vec()),
            Layer::Flatten => {
                if input.len() < 2 {
                    return Err(TensorError::RankMismatch {
                        op: "flatten",
                        expected: 4,
                        dims: input.to_vec(),
                    }
                    .into());
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            Layer::Dense { dense, .. } => Ok(dense.output_dims(input)?.to_vec()),
        }
    }

    fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv2d { conv, activation } => Layer::Conv2d {
                conv: conv.cast(),
                activation: *activation,
            },
            Layer::MaxPool2d => Layer::MaxPool2d,
            Layer::Flatten => Layer::Flatten,
            Layer::Dense { dense, activation } => Layer::Dense {
                dense: dense.cast(),
                activation: *activation,
            },
        }
    }

    /// Pre-activation output, plus pool winners when relevant.
    pub(crate) fn forward_linear(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<PoolIndices>), NnError> {
        match self {
            Layer::Conv2d { conv, .. } => Ok((conv2d_forward(x, conv)?, None)),
            Layer::MaxPool2d => {
                let (out, idx) = maxpool2d_forward(x)?;
                Ok((out, Some(idx)))
            }
            Layer::Flatten => {
                let dims = self.output_dims(x.dims())?;
                Ok((x.reshape(&dims)?, None))
            }
            Layer::Dense { dense, .. } => Ok((dense_forward(x, dense)?, None)),
        }
    }
}

/// Activations recorded by [`Model::forward_cached`].
///
/// `activations[0]` is the input and `activations[i + 1]` the output of layer
/// `i`; the last entry holds the logits (final activation not applied).
pub struct ForwardCache<T: Scalar> {
    pub activations: Vec<Tensor<T>>,
    pool: Vec<Option<PoolIndices>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.activations.last().expect("cache holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    layers: Vec<Layer<T>>,
    head: HeadMode,
    input_dims: [usize; 3],
}

impl<T: Scalar> Model<T> {
    /// Validates the shape chain and the head before accepting the stack.
    pub fn new(input_dims: [usize; 3], layers: Vec<Layer<T>>, head: HeadMode) -> Result<Self, TrainError> {
        match layers.last() {
            Some(Layer::Dense { activation, .. }) if *activation == head.final_activation() => {}
            Some(Layer::Dense { .. }) => {
                return Err(TrainError::Topology(format!(
                    "final activation does not match the {head} head"
                )))
            }
            _ => return Err(TrainError::Topology("model must end with a dense layer".into())),
        }
        let model = Self {
            layers,
            head,
            input_dims,
        };
        model.shape_chain(1)?;
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn head(&self) -> HeadMode {
        self.head
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn num_outputs(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense { dense, .. }) => dense.out_features(),
            _ => unreachable!("validated at construction"),
        }
    }

    /// Input dims followed by each layer's output dims for batch size `batch`.
    pub fn shape_chain(&self, batch: usize) -> Result<Vec<Vec<usize>>, TrainError> {
        let mut dims = vec![batch, self.input_dims[0], self.input_dims[1], self.input_dims[2]];
        let mut chain = vec![dims.clone()];
        for layer in &self.layers {
            dims = layer.output_dims(&dims)?;
            chain.push(dims.clone());
        }
        Ok(chain)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            head: self.head,
            input_dims: self.input_dims,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), TrainError> {
        let d = x.dims();
        if d.len() != 4 || d[1..] != self.input_dims {
            return Err(TrainError::Topology(format!(
                "input {:?} does not match model input [N, {}, {}, {}]",
                d, self.input_dims[0], self.input_dims[1], self.input_dims[2]
            )));
        }
        Ok(())
    }

    /// Runs every layer including its activation; the final output is sigmoid
    /// probabilities under the sigmoid head and raw logits under softmax.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TrainError> {
        let logits = self.logits(x)?;
        Ok(self.head.final_activation().apply(logits))
    }

    /// Pre-activation outputs of the final layer.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>, TrainError> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (z, _) = layer.forward_linear(&h)?;
            h = if i == last { z } else { layer.activation().apply(z) };
        }
        Ok(h)
    }

    /// Class scores: per-class sigmoid probabilities or a softmax distribution.
    pub fn scores(&self, x: &Tensor<T>) -> Result<Tensor<T>, TrainError> {
        let logits = self.logits(x)?;
        Ok(match self.head {
            HeadMode::Sigmoid => nn::sigmoid(&logits),
            HeadMode::Softmax => nn::softmax_rows(&logits)?,
        })
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<ForwardCache<T>, TrainError> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pool = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let (z, idx) = layer.forward_linear(activations.last().unwrap())?;
            activations.push(if i == last { z } else { layer.activation().apply(z) });
            pool.push(idx);
        }
        Ok(ForwardCache { activations, pool })
    }

    /// Backpropagates `d_logits` (gradient w.r.t. the final pre-activation)
    /// and returns one gradient per parameter, in [`Model::params`] order.
    pub fn backward(&self, cache: ForwardCache<T>, d_logits: Tensor<T>) -> Result<Vec<Tensor<T>>, TrainError> {
        let ForwardCache { mut activations, pool } = cache;
        let last = self.layers.len() - 1;
        let mut per_layer: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        let mut upstream = d_logits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let output = activations.pop().expect("one activation per layer");
            let input = activations.last().expect("layer input");
            if i != last {
                upstream = layer.activation().backward(&output, upstream)?;
            }
            drop(output);
            let need_input = i > 0;
            upstream = match layer {
                Layer::Conv2d { conv, .. } => {
                    let g = conv2d_backward_with(input, conv, &upstream, need_input)?;
                    per_layer[i] = vec![g.d_weights, g.d_bias];
                    match g.d_input {
                        Some(d) => d,
                        None => break,
                    }
                }
                Layer::Dense { dense, .. } => {
                    let g = dense_backward_with(input, dense, &upstream, need_input)?;
                    per_layer[i] = vec![g.d_weights, g.d_bias];
                    match g.d_input {
                        Some(d) => d,
                        None => break,
                    }
                }
                Layer::MaxPool2d => {
                    let idx = pool[i]
                        .as_ref()
                        .ok_or_else(|| NnError::Internal("pool indices missing".into()))?;
                    maxpool2d_backward(idx, &upstream)?
                }
                Layer::Flatten => upstream.into_reshaped(input.dims())?,
            };
        }
        Ok(per_layer.into_iter().flatten().collect())
    }

    /// Mean loss over the batch and its gradient for every parameter.
    pub fn loss_and_gradients(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
        loss: LossKind,
        class_weights: Option<&[f64]>,
    ) -> Result<BatchOutcome<T>, TrainError> {
        let cache = self.forward_cached(x)?;
        let logits = cache.logits().clone();
        let (value, d_logits) = weighted_cross_entropy_loss(&logits, labels, loss, class_weights)?;
        let gradients = self.backward(cache, d_logits)?;
        Ok(BatchOutcome {
            loss: value,
            logits,
            gradients,
        })
    }
}

pub struct BatchOutcome<T: Scalar> {
    pub loss: T,
    pub logits: Tensor<T>,
    pub gradients: Vec<Tensor<T>>,
}

/// The 11-layer network for square `image_size` inputs with 3 channels:
/// four conv3×3(32, 64, 128, 128)+relu / maxpool2×2 stages, flatten,
/// dense 512 + relu, dense 4 with the chosen head.
pub fn paper_model<T: Scalar, R: Rng + ?Sized>(
    image_size: usize,
    head: HeadMode,
    rng: &mut R,
) -> Result<Model<T>, TrainError> {
    let mut layers = Vec::with_capacity(11);
    let mut channels = INPUT_CHANNELS;
    let mut side = image_size;
    for out in [32, 64, 128, 128] {
        layers.push(Layer::conv(Conv2d::init(channels, out, 3, rng)?, Activation::Relu));
        layers.push(Layer::MaxPool2d);
        channels = out;
        side = side.checked_sub(2).map(|s| s / 2).ok_or_else(|| {
            TrainError::Topology(format!("image size {image_size} is too small for the network"))
        })?;
    }
    if side == 0 {
        return Err(TrainError::Topology(format!(
            "image size {image_size} is too small for the network"
        )));
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::dense(Dense::init(channels * side * side, 512, rng)?, Activation::Relu));
    layers.push(Layer::dense(
        Dense::init(512, NUM_CLASSES, rng)?,
        head.final_activation(),
    ));
    Model::new([INPUT_CHANNELS, image_size, image_size], layers, head)
}

/// The network at its native 200×200 input, initialised from `seed`.
pub fn build_paper_model(head: HeadMode, seed: u64) -> Result<Model<f32>, TrainError> {
    paper_model(PAPER_IMAGE_SIZE, head, &mut stream_rng(seed, Stream::Init))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_model_layer_list() {
        let model = build_paper_model(HeadMode::Softmax, 0).unwrap();
        assert_eq!(model.layers().len(), 11);
        let names: Vec<_> = model.layers().iter().map(|l| l.name()).collect();
        assert_eq!(
            names,
            [
                "conv2d", "maxpool2d", "conv2d", "maxpool2d", "conv2d", "maxpool2d", "conv2d",
                "maxpool2d", "flatten", "dense", "dense"
            ]
        );
        match &model.layers()[9] {
            Layer::Dense { dense, activation } => {
                assert_eq!(dense.weights().dims(), &[12800, 512]);
                assert_eq!(*activation, Activation::Relu);
            }
            _ => panic!("layer 10 is dense"),
        }
    }

    #[test]
    fn paper_model_parameter_count() {
        // conv: 3·32·9+32, 32·64·9+64, 64·128·9+128, 128·128·9+128;
        // dense: 12800·512+512, 512·4+4
        let expected = 896 + 18_496 + 73_856 + 147_584 + 6_554_112 + 2_052;
        assert_eq!(build_paper_model(HeadMode::Sigmoid, 1).unwrap().param_count(), expected);
    }

    #[test]
    fn heads_set_final_activation() {
        let s = build_paper_model(HeadMode::Sigmoid, 0).unwrap();
        assert_eq!(s.layers()[10].activation(), Activation::Sigmoid);
        let m = build_paper_model(HeadMode::Softmax, 0).unwrap();
        assert_eq!(m.layers()[10].activation(), Activation::Identity);
    }

    #[test]
    fn reduced_input_chain() {
        let mut rng = stream_rng(0, Stream::Init);
        let model: Model<f32> = paper_model(64, HeadMode::Softmax, &mut rng).unwrap();
        let chain = model.shape_chain(1).unwrap();
        assert_eq!(chain[8], vec![1, 128, 2, 2]);
        assert_eq!(chain[9], vec![1, 512]);
        assert_eq!(chain.last().unwrap(), &vec![1, 4]);
        assert!(paper_model::<f32, _>(20, HeadMode::Softmax, &mut rng).is_err());
    }

    #[test]
    fn mismatched_stack_is_rejected() {
        let mut rng = stream_rng(0, Stream::Init);
        let layers = vec![
            Layer::conv(Conv2d::<f32>::init(3, 4, 3, &mut rng).unwrap(), Activation::Relu),
            Layer::Flatten,
            Layer::dense(Dense::init(10, 4, &mut rng).unwrap(), Activation::Identity),
        ];
        assert!(matches!(
            Model::new([3, 8, 8], layers, HeadMode::Softmax),
            Err(TrainError::Nn(_))
        ));
        let layers = vec![
            Layer::Flatten,
            Layer::dense(Dense::<f32>::init(192, 4, &mut rng).unwrap(), Activation::Identity),
        ];
        assert!(matches!(
            Model::new([3, 8, 8], layers, HeadMode::Sigmoid),
            Err(TrainError::Topology(_))
        ));
    }

    #[test]
    fn forward_applies_head() {
        let mut rng = stream_rng(3, Stream::Init);
        let model: Model<f64> = paper_model(46, HeadMode::Sigmoid, &mut rng).unwrap();
        let x = nn::uniform_tensor(&[2, 3, 46, 46], 1.0, &mut rng).unwrap();
        let logits = model.logits(&x).unwrap();
        assert_eq!(model.forward(&x).unwrap(), nn::sigmoid(&logits));
        assert_eq!(model.scores(&x).unwrap(), nn::sigmoid(&logits));
        assert!(model.logits(&Tensor::zeros(&[1, 3, 31, 30]).unwrap()).is_err());
    }
}
