//! Small dense networks with hand-written backpropagation.
//!
//! Every network in the model bundle is an [`Mlp`]: a chain of affine layers,
//! each optionally followed by a ReLU. Inputs are either a single vector
//! (shape `[d]`) or a batch of row vectors (shape `[n, d]`); parameter
//! gradients are summed over the rows of a batch, so callers fold any
//! `1/n` averaging into the output gradient they pass to [`mlp_backward`].

use rand::Rng;

use crate::error::{Error, Result};

/// Dense real-valued array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::arg(format!("non-finite tensor value {bad}")));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(rows, cols)` when viewed as a batch; a vector is a single row.
    pub fn batch_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [d] => Ok((1, *d)),
            [n, d] => Ok((*n, *d)),
            other => Err(Error::dim(format!("expected rank 1 or 2, got {other:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&0);
        &self.values[i * cols..(i + 1) * cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "none" => Some(Activation::None),
            _ => None,
        }
    }
}

/// One affine layer; `weight` has shape `[out, in]`, `bias` shape `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let [out, _] = weight.shape() else {
            return Err(Error::dim("layer weight must be a matrix"));
        };
        if bias.shape() != [*out] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match {out} outputs",
                bias.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::arg("an Mlp needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::dim(format!(
                    "layer output {} does not chain into input {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Xavier-uniform weights, zero biases. `dims = [in, h1, ..., out]`; hidden
    /// layers use ReLU and the last layer is linear.
    pub fn xavier<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::arg(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                let activation = if i + 2 < dims.len() {
                    Activation::Relu
                } else {
                    Activation::None
                };
                Layer {
                    weight: Tensor {
                        shape: vec![fan_out, fan_in],
                        values: weights,
                    },
                    bias: Tensor::zeros(vec![fan_out]),
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        mlp_forward(self, input)
    }

    /// Output of the last layer only.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut acts = mlp_forward(self, input)?;
        Ok(acts.pop().expect("forward returns at least the input"))
    }
}

/// Runs the network and returns `[input, layer_1_out, ..., layer_L_out]`.
pub fn mlp_forward(net: &Mlp, input: &Tensor) -> Result<Vec<Tensor>> {
    let (rows, cols) = input.batch_dims()?;
    if cols != net.input_dim() {
        return Err(Error::dim(format!(
            "input width {cols} does not match network input {}",
            net.input_dim()
        )));
    }
    let vector_input = input.shape().len() == 1;
    let mut acts = Vec::with_capacity(net.layers.len() + 1);
    acts.push(input.clone());
    for layer in &net.layers {
        let prev = acts.last().expect("nonempty");
        let (inp, out) = (layer.input_dim(), layer.output_dim());
        let w = layer.weight.values();
        let b = layer.bias.values();
        let mut values = vec![0.0; rows * out];
        for r in 0..rows {
            let x = &prev.values[r * inp..(r + 1) * inp];
            let y = &mut values[r * out..(r + 1) * out];
            for (o, yo) in y.iter_mut().enumerate() {
                let wrow = &w[o * inp..(o + 1) * inp];
                let mut acc = b[o];
                for (wi, xi) in wrow.iter().zip(x) {
                    acc += wi * xi;
                }
                *yo = match layer.activation {
                    Activation::Relu => acc.max(0.0),
                    Activation::None => acc,
                };
            }
        }
        let shape = if vector_input {
            vec![out]
        } else {
            vec![rows, out]
        };
        acts.push(Tensor { shape, values });
    }
    Ok(acts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameter gradients mirroring an [`Mlp`]'s layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Tensor::zeros(l.weight.shape().to_vec()),
                    bias: Tensor::zeros(l.bias.shape().to_vec()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.values.iter_mut().zip(&b.weight.values) {
                *x += y;
            }
            for (x, y) in a.bias.values.iter_mut().zip(&b.bias.values) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight.values.iter_mut().for_each(|v| *v *= factor);
            l.bias.values.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Flattened in the same order as [`params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.values());
            out.extend_from_slice(l.bias.values());
        }
        out
    }
}

/// All parameters, weights then bias, layer by layer.
pub fn params_flat(net: &Mlp) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.num_params());
    for l in &net.layers {
        out.extend_from_slice(l.weight.values());
        out.extend_from_slice(l.bias.values());
    }
    out
}

/// Mutable access to the `index`-th parameter in [`params_flat`] order.
pub fn param_mut(net: &mut Mlp, mut index: usize) -> &mut f64 {
    for l in &mut net.layers {
        if index < l.weight.len() {
            return &mut l.weight.values[index];
        }
        index -= l.weight.len();
        if index < l.bias.len() {
            return &mut l.bias.values[index];
        }
        index -= l.bias.len();
    }
    panic!("parameter index out of range");
}

/// Backpropagates `output_grad` (dLoss/dOutput, same shape as the output)
/// through the activations recorded by [`mlp_forward`].
pub fn mlp_backward(
    net: &Mlp,
    activations: &[Tensor],
    output_grad: &Tensor,
) -> Result<(MlpGrads, Tensor)> {
    if activations.len() != net.layers.len() + 1 {
        return Err(Error::dim(format!(
            "expected {} activations, got {}",
            net.layers.len() + 1,
            activations.len()
        )));
    }
    let output = activations.last().expect("nonempty");
    if output.shape() != output_grad.shape() {
        return Err(Error::dim(format!(
            "output grad shape {:?} does not match output {:?}",
            output_grad.shape(),
            output.shape()
        )));
    }
    let (rows, _) = output.batch_dims()?;
    let mut grads = MlpGrads::zeros_like(net);
    let mut delta = output_grad.values.clone();
    for (li, layer) in net.layers.iter().enumerate().rev() {
        let (inp, out) = (layer.input_dim(), layer.output_dim());
        let x = &activations[li].values;
        let y = &activations[li + 1].values;
        if layer.activation == Activation::Relu {
            for (d, yv) in delta.iter_mut().zip(y) {
                if *yv <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let g = &mut grads.layers[li];
        let w = layer.weight.values();
        let mut prev = vec![0.0; rows * inp];
        for r in 0..rows {
            let d = &delta[r * out..(r + 1) * out];
            let xr = &x[r * inp..(r + 1) * inp];
            let pr = &mut prev[r * inp..(r + 1) * inp];
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                g.bias.values[o] += dv;
                let gw = &mut g.weight.values[o * inp..(o + 1) * inp];
                let wrow = &w[o * inp..(o + 1) * inp];
                for i in 0..inp {
                    gw[i] += dv * xr[i];
                    pr[i] += dv * wrow[i];
                }
            }
        }
        delta = prev;
    }
    let input_grad = Tensor {
        shape: activations[0].shape().to_vec(),
        values: delta,
    };
    Ok((grads, input_grad))
}

/// Momentum buffers and hyperparameters for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    velocity: MlpGrads,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(net: &Mlp, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::arg(format!(
                "learning rate {learning_rate} must be positive"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::arg(format!("momentum {momentum} outside [0,1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::arg(format!(
                "weight decay {weight_decay} must be nonnegative"
            )));
        }
        Ok(Self {
            velocity: MlpGrads::zeros_like(net),
            learning_rate,
            momentum,
            weight_decay,
        })
    }
}

/// Classical momentum SGD: `v = momentum*v + grad + wd*param`, `param -= lr*v`.
/// Biases are not decayed.
pub fn sgd_step(net: &mut Mlp, grads: &MlpGrads, state: &mut OptimState) -> Result<()> {
    if grads.layers.len() != net.layers.len() || state.velocity.layers.len() != net.layers.len() {
        return Err(Error::dim(
            "gradient/optimizer layer count does not match network",
        ));
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for ((layer, g), v) in net
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity.layers)
    {
        if g.weight.shape() != layer.weight.shape() || g.bias.shape() != layer.bias.shape() {
            return Err(Error::dim("gradient shape does not match parameter shape"));
        }
        for ((p, gv), vv) in layer
            .weight
            .values
            .iter_mut()
            .zip(&g.weight.values)
            .zip(&mut v.weight.values)
        {
            *vv = mu * *vv + gv + wd * *p;
            *p -= lr * *vv;
        }
        for ((p, gv), vv) in layer
            .bias
            .values
            .iter_mut()
            .zip(&g.bias.values)
            .zip(&mut v.bias.values)
        {
            *vv = mu * *vv + gv;
            *p -= lr * *vv;
        }
    }
    Ok(())
}

pub const PROB_CLAMP: f64 = 1e-12;

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::arg(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[label];
    let mut grad = softmax(logits)?;
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a source-probability against the domain flag
/// (source = 1, target = 0). Returns the loss and dLoss/dProb.
pub fn binary_cross_entropy(prob: f64, is_source: bool) -> (f64, f64) {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if is_source {
        (-p.ln(), -1.0 / p)
    } else {
        (-(1.0 - p).ln(), 1.0 / (1.0 - p))
    }
}
