//! Central finite-difference verification of every analytic backward pass,
//! in double precision.
//!
//! Each layer check scalarises the layer output as `L = Σ out ⊙ R` for a fixed
//! random `R`, so the upstream gradient is `R`. The composed-model checks use
//! the training loss itself. Evaluation points are resampled until every relu
//! input and every pooling window is at least [`MARGIN`] away from a kink.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, maxpool2d_backward,
    maxpool2d_forward, relu, relu_backward, sigmoid, sigmoid_backward, Activation, Conv2d, Dense,
    NnError,
};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;
use crate::train::{weighted_cross_entropy_loss, HeadMode, Layer, Model};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Minimum distance of relu inputs from 0 and of pool winners from runners-up.
pub const MARGIN: f64 = 1e-3;
/// Denominator floor of the relative error, so that two gradients that are
/// both numerically zero compare as equal.
pub const RELATIVE_FLOOR: f64 = 1e-6;

type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    All,
    Conv,
    Pool,
    Dense,
    Activations,
    Model,
}

impl std::str::FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Target::All),
            "conv" => Ok(Target::Conv),
            "pool" => Ok(Target::Pool),
            "dense" => Ok(Target::Dense),
            "activations" => Ok(Target::Activations),
            "model" => Ok(Target::Model),
            other => Err(format!(
                "unknown layer `{other}` (expected all, conv, pool, dense, activations or model)"
            )),
        }
    }
}

/// Outcome for one gradient tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Multi-index of the worst coordinate.
    pub worst: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub rows: Vec<CheckRow>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.passed())
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<34} {:>7} {:>14}  {:<6} worst", "gradient", "checked", "max_rel_error", "status")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<34} {:>7} {:>14.3e}  {:<6} {:?}",
                r.name,
                r.checked,
                r.max_rel_error,
                if r.passed() { "ok" } else { "FAIL" },
                r.worst
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
}

fn unravel(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for (slot, &d) in idx.iter_mut().zip(dims).rev() {
        *slot = flat % d;
        flat /= d;
    }
    idx
}

/// Compares `analytic` against central differences of `loss`, where
/// `loss(i, delta)` evaluates the objective with coordinate `i` shifted.
fn compare(name: String, analytic: &Tensor<f64>, loss: impl Fn(usize, f64) -> Result<f64>) -> Result<CheckRow> {
    let mut row = CheckRow {
        name,
        checked: analytic.numel(),
        max_rel_error: 0.0,
        worst: Vec::new(),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, &a) in analytic.data().iter().enumerate() {
        let n = (loss(i, EPSILON)? - loss(i, -EPSILON)?) / (2.0 * EPSILON);
        let e = relative_error(a, n);
        if e > row.max_rel_error || row.worst.is_empty() {
            row.max_rel_error = e;
            row.worst = unravel(i, analytic.dims());
            row.analytic = a;
            row.numeric = n;
        }
    }
    Ok(row)
}

fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("non-empty dims")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn shifted(t: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut t = t.clone();
    t.data_mut()[i] += delta;
    t
}

/// Every pooling window either has a winner at least `MARGIN` above the
/// runner-up or is entirely non-positive (dead relus feed it).
fn pool_margins_ok(x: &Tensor<f64>, relu_fed: bool) -> bool {
    let d = x.dims();
    let (h, w) = (d[2], d[3]);
    x.data().chunks(h * w).all(|plane| {
        (0..h / 2).all(|oy| {
            (0..w / 2).all(|ox| {
                let mut v = [
                    plane[2 * oy * w + 2 * ox],
                    plane[2 * oy * w + 2 * ox + 1],
                    plane[(2 * oy + 1) * w + 2 * ox],
                    plane[(2 * oy + 1) * w + 2 * ox + 1],
                ];
                v.sort_by(|a, b| b.total_cmp(a));
                (relu_fed && v[0] <= 0.0) || v[0] - v[1] >= MARGIN
            })
        })
    })
}

fn check_conv(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<Vec<CheckRow>> {
    let x = uniform(&[2, 2, 5, 6], -1.0, 1.0, rng);
    let layer = Conv2d::new(uniform(&[3, 2, 3, 3], -0.5, 0.5, rng), uniform(&[3], -0.5, 0.5, rng))?;
    let r = uniform(&[2, 3, 3, 4], -1.0, 1.0, rng);
    let g = conv2d_backward(&x, &layer, &r)?;
    let mut d_w = g.d_weights.expect("conv has weights");
    if corrupt {
        d_w = d_w.map(|v| v * 1.001);
    }
    let d_b = g.d_bias.expect("conv has bias");
    let objective = |x: &Tensor<f64>, l: &Conv2d<f64>| Ok(dot(&conv2d_forward(x, l)?, &r));
    Ok(vec![
        compare("conv2d d_input".into(), &g.d_input, |i, d| objective(&shifted(&x, i, d), &layer))?,
        compare("conv2d d_weights".into(), &d_w, |i, d| {
            objective(&x, &Conv2d::new(shifted(layer.weights(), i, d), layer.bias().clone())?)
        })?,
        compare("conv2d d_bias".into(), &d_b, |i, d| {
            objective(&x, &Conv2d::new(layer.weights().clone(), shifted(layer.bias(), i, d))?)
        })?,
    ])
}

fn check_pool(rng: &mut ChaCha8Rng) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (label, dims) in [("maxpool2d d_input", [2, 2, 6, 6]), ("maxpool2d d_input (odd)", [1, 3, 5, 7])] {
        let x = loop {
            let x = uniform(&dims, -1.0, 1.0, rng);
            if pool_margins_ok(&x, false) {
                break x;
            }
        };
        let (out, idx) = maxpool2d_forward(&x)?;
        let r = uniform(out.dims(), -1.0, 1.0, rng);
        let d = maxpool2d_backward(&idx, &r)?;
        rows.push(compare(label.into(), &d, |i, delta| {
            Ok(dot(&maxpool2d_forward(&shifted(&x, i, delta))?.0, &r))
        })?);
    }
    Ok(rows)
}

fn check_dense(rng: &mut ChaCha8Rng) -> Result<Vec<CheckRow>> {
    let x = uniform(&[3, 5], -1.0, 1.0, rng);
    let layer = Dense::new(uniform(&[5, 4], -0.5, 0.5, rng), uniform(&[4], -0.5, 0.5, rng))?;
    let r = uniform(&[3, 4], -1.0, 1.0, rng);
    let g = dense_backward(&x, &layer, &r)?;
    let objective = |x: &Tensor<f64>, l: &Dense<f64>| Ok(dot(&dense_forward(x, l)?, &r));
    Ok(vec![
        compare("dense d_input".into(), &g.d_input, |i, d| objective(&shifted(&x, i, d), &layer))?,
        compare("dense d_weights".into(), g.d_weights.as_ref().expect("weights"), |i, d| {
            objective(&x, &Dense::new(shifted(layer.weights(), i, d), layer.bias().clone())?)
        })?,
        compare("dense d_bias".into(), g.d_bias.as_ref().expect("bias"), |i, d| {
            objective(&x, &Dense::new(layer.weights().clone(), shifted(layer.bias(), i, d))?)
        })?,
    ])
}

fn check_activations(rng: &mut ChaCha8Rng) -> Result<Vec<CheckRow>> {
    let mut x = uniform(&[4, 6], -1.0, 1.0, rng);
    for v in x.data_mut() {
        while v.abs() < MARGIN {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let r = uniform(&[4, 6], -1.0, 1.0, rng);
    let d = relu_backward(&x, &r)?;
    let relu_row = compare("relu d_input".into(), &d, |i, delta| Ok(dot(&relu(&shifted(&x, i, delta)), &r)))?;

    let z = uniform(&[4, 6], -5.0, 5.0, rng);
    let d = sigmoid_backward(&sigmoid(&z), &r)?;
    let sigmoid_row =
        compare("sigmoid d_input".into(), &d, |i, delta| Ok(dot(&sigmoid(&shifted(&z, i, delta)), &r)))?;
    Ok(vec![relu_row, sigmoid_row])
}

/// conv(1→3) relu, conv(3→4) relu, pool, flatten, dense(16→6) relu, dense(6→4)
/// on an 8×8 single-channel input.
pub fn tiny_model(head: HeadMode, rng: &mut ChaCha8Rng) -> Result<Model<f64>> {
    let layers = vec![
        Layer::conv(Conv2d::init(1, 3, 3, rng)?, Activation::Relu),
        Layer::conv(Conv2d::init(3, 4, 3, rng)?, Activation::Relu),
        Layer::MaxPool2d,
        Layer::Flatten,
        Layer::dense(Dense::init(16, 6, rng)?, Activation::Relu),
        Layer::dense(Dense::init(6, 4, rng)?, head.final_activation()),
    ];
    // random biases keep relu inputs away from exact ties at zero
    let mut model = Model::new([1, 8, 8], layers, head).map_err(|e| NnError::Internal(e.to_string()))?;
    for p in model.params_mut() {
        if p.dims().len() == 1 {
            for v in p.data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
    Ok(model)
}

/// True when every relu input is at least `MARGIN` from zero and every pool
/// window is decided by at least `MARGIN`.
fn model_margins_ok(model: &Model<f64>, x: &Tensor<f64>) -> Result<bool> {
    let mut h = x.clone();
    let layers = model.layers();
    for (i, layer) in layers.iter().enumerate() {
        if let Layer::MaxPool2d = layer {
            let fed_by_relu = i > 0 && layers[i - 1].activation() == Activation::Relu;
            if !pool_margins_ok(&h, fed_by_relu) {
                return Ok(false);
            }
        }
        let (z, _) = layer.forward_linear(&h).map_err(|e| NnError::Internal(e.to_string()))?;
        if layer.activation() == Activation::Relu && z.data().iter().any(|v| v.abs() < MARGIN) {
            return Ok(false);
        }
        h = layer.activation().apply(z);
    }
    Ok(true)
}

fn check_model(head: HeadMode, rng: &mut ChaCha8Rng, corrupt: bool) -> Result<Vec<CheckRow>> {
    let internal = |e: crate::train::TrainError| NnError::Internal(e.to_string());
    let labels = [1usize, 3];
    let (model, x) = loop {
        let model = tiny_model(head, rng)?;
        let x = uniform(&[2, 1, 8, 8], -1.0, 1.0, rng);
        if model_margins_ok(&model, &x)? {
            break (model, x);
        }
    };
    let loss_kind = head.default_loss();
    let outcome = model.loss_and_gradients(&x, &labels, loss_kind, None).map_err(internal)?;
    let names: Vec<String> = model
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            let n = l.params().len();
            ["weights", "bias"].into_iter().take(n).map(move |p| format!("{}{} {p}", l.name(), i + 1))
        })
        .collect();
    let mut rows = Vec::new();
    for (p, (name, analytic)) in names.iter().zip(&outcome.gradients).enumerate() {
        let analytic = if corrupt && p == 0 { analytic.map(|v| v * 1.001) } else { analytic.clone() };
        rows.push(compare(format!("model-{head} {name}"), &analytic, |i, delta| {
            let mut m = model.clone();
            m.params_mut()[p].data_mut()[i] += delta;
            let logits = m.logits(&x).map_err(internal)?;
            let (loss, _) = weighted_cross_entropy_loss(&logits, &labels, loss_kind, None).map_err(internal)?;
            Ok(loss)
        })?);
    }
    Ok(rows)
}

/// Runs the checks selected by `target`. With `corrupt`, the analytic
/// convolution weight gradients are scaled by 1.001 before comparison,
/// which the suite must detect.
pub fn run_gradcheck(seed: u64, target: Target, corrupt: bool) -> Result<GradCheckReport> {
    // an independent generator per check keeps rows identical across targets
    let rng_for = |check: u64| stream_rng(seed, Stream::GradCheck(check));
    let wants = |t: Target| target == Target::All || target == t;
    let mut rows = Vec::new();
    if wants(Target::Conv) {
        rows.extend(check_conv(&mut rng_for(0), corrupt)?);
    }
    if wants(Target::Pool) {
        rows.extend(check_pool(&mut rng_for(1))?);
    }
    if wants(Target::Dense) {
        rows.extend(check_dense(&mut rng_for(2))?);
    }
    if wants(Target::Activations) {
        rows.extend(check_activations(&mut rng_for(3))?);
    }
    if wants(Target::Model) {
        rows.extend(check_model(HeadMode::Softmax, &mut rng_for(4), corrupt)?);
        rows.extend(check_model(HeadMode::Sigmoid, &mut rng_for(5), corrupt)?);
    }
    Ok(GradCheckReport { seed, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes_for_several_seeds() {
        for seed in [1, 2, 3] {
            let report = run_gradcheck(seed, Target::All, false).unwrap();
            assert!(report.passed(), "seed {seed}\n{report}");
            assert!(report.rows.len() >= 10);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let report = run_gradcheck(1, Target::All, true).unwrap();
        assert!(!report.passed());
        let failed: Vec<_> = report.failures().map(|r| r.name.as_str()).collect();
        assert!(failed.contains(&"conv2d d_weights"), "{failed:?}");
    }

    #[test]
    fn same_seed_same_table_and_targets_agree() {
        let all = run_gradcheck(7, Target::All, false).unwrap();
        assert_eq!(all, run_gradcheck(7, Target::All, false).unwrap());
        let conv = run_gradcheck(7, Target::Conv, false).unwrap();
        assert_eq!(conv.rows[..], all.rows[..3]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let z = Tensor::from_vec(&[1], vec![0.0f64]).unwrap();
        let n = (sigmoid(&z.map(|v| v + EPSILON)).data()[0] - sigmoid(&z.map(|v| v - EPSILON)).data()[0])
            / (2.0 * EPSILON);
        assert!(relative_error(0.25, n) < TOLERANCE);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(0.0, 1e-12) < TOLERANCE);
        assert!(relative_error(1.0, 1.001) > TOLERANCE);
    }
}
