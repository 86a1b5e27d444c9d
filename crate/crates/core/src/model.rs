//! Fixed-topology feedforward regressor.
//!
//! Hidden layers use ReLU or tanh, the output layer is a single linear unit.
//! Gradients are computed by hand-written reverse mode over that topology,
//! both with respect to the parameters (training) and to the input row
//! (attribution).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{substream, Purpose};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// One affine layer; `weights` is `fan_out x fan_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }
}

/// Weights and biases of the regressor; the object exchanged each round.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

/// Parameter gradient plus the per-row gradient of the model output with
/// respect to the input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub d_params: ModelParams,
    pub d_input: Matrix,
}

impl ModelParams {
    /// Builds a model from explicit layers, checking that shapes chain.
    pub fn new(activation: Activation, layers: Vec<Layer>) -> Result<Self> {
        let params = Self { activation, layers };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model has no layers"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.fan_in() == 0 || layer.fan_out() == 0 {
                return Err(Error::shape(format!("layer {l} has an empty dimension")));
            }
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::shape(format!(
                    "layer {l}: bias length {} != fan_out {}",
                    layer.bias.len(),
                    layer.fan_out()
                )));
            }
            if l > 0 && self.layers[l - 1].fan_out() != layer.fan_in() {
                return Err(Error::shape(format!(
                    "layer {l}: fan_in {} does not match previous fan_out {}",
                    layer.fan_in(),
                    self.layers[l - 1].fan_out()
                )));
            }
            if !layer.weights.all_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Numeric {
                    layer: l,
                    detail: "non-finite parameter".into(),
                });
            }
        }
        if self.output_dim() != 1 {
            return Err(Error::shape(format!(
                "output layer must have one unit, got {}",
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// `[input, hidden..., output]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.layers.len() + 1);
        sizes.push(self.input_dim());
        sizes.extend(self.layers.iter().map(Layer::fan_out));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::fan_out)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            activation: self.activation,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: Matrix::zeros(l.fan_out(), l.fan_in()),
                    bias: vec![0.0; l.fan_out()],
                })
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.activation == other.activation
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.shape() == b.weights.shape())
    }

    /// All parameters in layer order, weights (row-major) before biases.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParams) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape("parameter shapes differ"));
        }
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.input_dim() {
            return Err(Error::shape(format!(
                "input width {width} does not match model input {}",
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<ModelParams> {
    if layer_sizes.len() < 2 {
        return Err(Error::invalid("layer_sizes needs at least input and output"));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::invalid("layer sizes must be >= 1"));
    }
    if *layer_sizes.last().unwrap() != 1 {
        return Err(Error::invalid("the output layer must have exactly one unit"));
    }
    let mut rng = substream(seed, Purpose::Init, &[]);
    let layers = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            Layer {
                weights: Matrix::from_vec(fan_out, fan_in, data).expect("sized above"),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    ModelParams::new(activation, layers)
}

/// Pre- and post-activation values of every layer for one input row.
struct Tape {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn run_forward(params: &ModelParams, x: &[f64], keep: bool) -> Result<(f64, Option<Tape>)> {
    let n_layers = params.layers.len();
    let mut tape = keep.then(|| Tape {
        pre: Vec::with_capacity(n_layers),
        post: Vec::with_capacity(n_layers),
    });
    let mut input: Vec<f64> = x.to_vec();
    for (l, layer) in params.layers.iter().enumerate() {
        let last = l + 1 == n_layers;
        let mut z = layer.bias.clone();
        for (o, zo) in z.iter_mut().enumerate() {
            let w = layer.weights.row(o);
            *zo += w.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>();
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: l,
                detail: "non-finite pre-activation".into(),
            });
        }
        let a: Vec<f64> = if last {
            z.clone()
        } else {
            z.iter().map(|&v| params.activation.apply(v)).collect()
        };
        if let Some(t) = tape.as_mut() {
            t.pre.push(z);
            t.post.push(input);
        }
        input = a;
    }
    Ok((input[0], tape))
}

/// Reverse pass for one row. Accumulates `coeff * d f / d params` into
/// `grads` when given, and returns `d f / d x` when `want_input`.
fn run_backward(
    params: &ModelParams,
    tape: &Tape,
    coeff: f64,
    mut grads: Option<&mut ModelParams>,
    want_input: bool,
) -> Result<Option<Vec<f64>>> {
    let n_layers = params.layers.len();
    // d f / d z for the output layer.
    let mut delta = vec![1.0];
    for l in (0..n_layers).rev() {
        let layer = &params.layers[l];
        let input = &tape.post[l];
        if let Some(g) = grads.as_deref_mut() {
            let gl = &mut g.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                let cd = coeff * d;
                gl.bias[o] += cd;
                for (gw, &xi) in gl.weights.row_mut(o).iter_mut().zip(input) {
                    *gw += cd * xi;
                }
            }
        }
        if l == 0 && !want_input {
            break;
        }
        let mut prev = vec![0.0; layer.fan_in()];
        for (o, &d) in delta.iter().enumerate() {
            for (p, &w) in prev.iter_mut().zip(layer.weights.row(o)) {
                *p += w * d;
            }
        }
        if l > 0 {
            let z = &tape.pre[l - 1];
            let a = input;
            for ((p, &zi), &ai) in prev.iter_mut().zip(z).zip(a) {
                *p *= params.activation.derivative(zi, ai);
            }
        }
        if prev.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: l,
                detail: "non-finite backpropagated signal".into(),
            });
        }
        delta = prev;
    }
    Ok(want_input.then_some(delta))
}

/// Model output for a single row.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<f64> {
    params.check_width(x.len())?;
    run_forward(params, x, false).map(|(y, _)| y)
}

/// Model outputs for every row of `batch`.
pub fn forward_batch(params: &ModelParams, batch: &Matrix) -> Result<Vec<f64>> {
    params.check_width(batch.cols())?;
    batch
        .iter_rows()
        .map(|x| run_forward(params, x, false).map(|(y, _)| y))
        .collect()
}

/// Output and its gradient with respect to the input row.
pub fn input_gradient(params: &ModelParams, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    params.check_width(x.len())?;
    let (y, tape) = run_forward(params, x, true)?;
    let g = run_backward(params, tape.as_ref().unwrap(), 0.0, None, true)?;
    Ok((y, g.unwrap()))
}

/// Outputs of `batch` and the parameter gradient of `sum_i coeffs[i] * f(x_i)`.
pub fn weighted_output_gradient(
    params: &ModelParams,
    batch: &Matrix,
    coeffs: &[f64],
) -> Result<(Vec<f64>, ModelParams)> {
    params.check_width(batch.cols())?;
    if coeffs.len() != batch.rows() {
        return Err(Error::shape(format!(
            "{} coefficients for {} rows",
            coeffs.len(),
            batch.rows()
        )));
    }
    let mut grads = params.zeros_like();
    let mut preds = Vec::with_capacity(batch.rows());
    for (x, &c) in batch.iter_rows().zip(coeffs) {
        let (y, tape) = run_forward(params, x, true)?;
        run_backward(params, tape.as_ref().unwrap(), c, Some(&mut grads), false)?;
        preds.push(y);
    }
    Ok((preds, grads))
}

/// Like [`weighted_output_gradient`], with each row's coefficient computed
/// from its own output during the same pass.
pub fn output_gradient_with<F: FnMut(f64) -> f64>(
    params: &ModelParams,
    batch: &Matrix,
    mut coeff: F,
) -> Result<(Vec<f64>, ModelParams)> {
    params.check_width(batch.cols())?;
    let mut grads = params.zeros_like();
    let mut preds = Vec::with_capacity(batch.rows());
    for x in batch.iter_rows() {
        let (y, tape) = run_forward(params, x, true)?;
        run_backward(params, tape.as_ref().unwrap(), coeff(y), Some(&mut grads), false)?;
        preds.push(y);
    }
    Ok((preds, grads))
}

/// Mean squared error.
pub fn mse_loss(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("mse_loss of an empty batch"));
    }
    let sum: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / preds.len() as f64)
}

/// MSE and its parameter gradient; skips the input-gradient pass.
pub fn mse_gradient(params: &ModelParams, batch: &Matrix, targets: &[f64]) -> Result<(f64, ModelParams)> {
    check_targets(batch, targets)?;
    params.check_width(batch.cols())?;
    let n = batch.rows() as f64;
    let mut grads = params.zeros_like();
    let mut sq = 0.0;
    for (x, &t) in batch.iter_rows().zip(targets) {
        let (y, tape) = run_forward(params, x, true)?;
        let r = y - t;
        sq += r * r;
        run_backward(params, tape.as_ref().unwrap(), 2.0 * r / n, Some(&mut grads), false)?;
    }
    Ok((sq / n, grads))
}

fn check_targets(batch: &Matrix, targets: &[f64]) -> Result<()> {
    if batch.rows() != targets.len() {
        return Err(Error::shape(format!(
            "{} rows vs {} targets",
            batch.rows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

/// MSE, its exact parameter gradient, and `d f / d x` for every row.
pub fn backward(params: &ModelParams, batch: &Matrix, targets: &[f64]) -> Result<(f64, GradientBundle)> {
    check_targets(batch, targets)?;
    params.check_width(batch.cols())?;
    let n = batch.rows() as f64;
    let mut grads = params.zeros_like();
    let mut d_input = Matrix::zeros(batch.rows(), batch.cols());
    let mut sq = 0.0;
    for (i, (x, &t)) in batch.iter_rows().zip(targets).enumerate() {
        let (y, tape) = run_forward(params, x, true)?;
        let r = y - t;
        sq += r * r;
        let gx = run_backward(params, tape.as_ref().unwrap(), 2.0 * r / n, Some(&mut grads), true)?;
        d_input.row_mut(i).copy_from_slice(&gx.unwrap());
    }
    Ok((
        sq / n,
        GradientBundle {
            d_params: grads,
            d_input,
        },
    ))
}

pub const CHECKPOINT_FORMAT: &str = "inhoc-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

/// Versioned JSON checkpoint: `{format, version, activation, layer_sizes,
/// layers: [{weights: [[..]; fan_out], bias: [..]}]}`.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    activation: Activation,
    layer_sizes: Vec<usize>,
    layers: Vec<CheckpointLayer>,
}

impl ModelParams {
    pub fn to_json(&self) -> String {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            activation: self.activation,
            layer_sizes: self.layer_sizes(),
            layers: self
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    weights: l.weights.iter_rows().map(<[f64]>::to_vec).collect(),
                    bias: l.bias.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<ModelParams> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("unknown checkpoint format '{}'", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        if ckpt.layer_sizes.len() != ckpt.layers.len() + 1 {
            return Err(Error::shape("layer_sizes does not match the layer list"));
        }
        let mut layers = Vec::with_capacity(ckpt.layers.len());
        for (l, (cl, w)) in ckpt.layers.into_iter().zip(ckpt.layer_sizes.windows(2)).enumerate() {
            let weights = Matrix::from_rows(&cl.weights)?;
            if weights.rows() != w[1] || (weights.rows() > 0 && weights.cols() != w[0]) {
                return Err(Error::shape(format!(
                    "layer {l}: weights {:?} do not match declared {}x{}",
                    weights.shape(),
                    w[1],
                    w[0]
                )));
            }
            layers.push(Layer {
                weights,
                bias: cl.bias,
            });
        }
        ModelParams::new(ckpt.activation, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(w: &[f64], b: f64) -> ModelParams {
        ModelParams::new(
            Activation::Relu,
            vec![Layer {
                weights: Matrix::from_vec(1, w.len(), w.to_vec()).unwrap(),
                bias: vec![b],
            }],
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_params(&[5, 16, 1], Activation::Relu, 3).unwrap();
        let b = init_params(&[5, 16, 1], Activation::Relu, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers[0].weights.shape(), (16, 5));
        assert_eq!(a.layers[1].weights.shape(), (1, 16));
        let bound = (6.0f64 / 21.0).sqrt();
        assert!(a.layers[0].weights.as_slice().iter().all(|w| w.abs() <= bound));
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(init_params(&[], Activation::Relu, 0).is_err());
        assert!(init_params(&[5], Activation::Relu, 0).is_err());
        assert!(init_params(&[5, 0, 1], Activation::Relu, 0).is_err());
        assert!(init_params(&[5, 4, 2], Activation::Relu, 0).is_err());
    }

    #[test]
    fn zero_model_predicts_zero() {
        let p = init_params(&[5, 16, 16, 1], Activation::Tanh, 1).unwrap().zeros_like();
        assert_eq!(forward(&p, &[1.0, -2.0, 3.0, 4.0, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn linear_closed_form() {
        let p = linear(&[0.5, -1.0, 2.0], 0.25);
        assert_eq!(forward(&p, &[2.0, 1.0, 0.5]).unwrap(), 0.5 * 2.0 - 1.0 + 1.0 + 0.25);
        let (_, g) = input_gradient(&p, &[7.0, -3.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let p = linear(&[1.0, 1.0], 0.0);
        assert!(matches!(forward(&p, &[1.0]), Err(Error::Shape(_))));
        let batch = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(forward_batch(&p, &batch), Err(Error::Shape(_))));
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!(matches!(mse_loss(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_residual_has_zero_gradient() {
        let p = init_params(&[5, 8, 1], Activation::Tanh, 9).unwrap();
        let batch = Matrix::from_rows(&[[0.1, 0.2, 0.3, 0.4, 0.5], [1.0, 0.0, -1.0, 2.0, 0.5]]).unwrap();
        let targets = forward_batch(&p, &batch).unwrap();
        let (loss, g) = backward(&p, &batch, &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.d_params.values().all(|v| v == 0.0));
    }

    #[test]
    fn overflow_reports_layer() {
        let mut p = linear(&[1e308, 1e308], 0.0);
        p.layers[0].bias[0] = 1e308;
        let err = forward(&p, &[10.0, 10.0]).unwrap_err();
        assert!(matches!(err, Error::Numeric { layer: 0, .. }));
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let p = init_params(&[5, 4, 1], Activation::Tanh, 2).unwrap();
        let back = ModelParams::from_json(&p.to_json()).unwrap();
        assert_eq!(p, back);
        let broken = p.to_json().replace("\"layer_sizes\": [\n    5,", "\"layer_sizes\": [\n    6,");
        assert!(ModelParams::from_json(&broken).is_err());
        assert!(ModelParams::from_json("{}").is_err());
    }
}
