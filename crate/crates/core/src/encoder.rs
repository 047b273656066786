//! Feed-forward encoder with explicit forward and reverse passes.
//!
//! Hidden layers apply the configured activation; the output layer is linear
//! so embeddings (and anchors) can live anywhere in `R^n`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::loss::{attractor_grad, attractor_loss, AnchorSet};
use crate::numeric::{relative_error, Matrix, RngSeed, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }
}

/// One affine layer: `z = W x + b`, `W` is `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderModel {
    layer_sizes: Vec<usize>,
    activation: Activation,
    layers: Vec<Dense>,
    #[serde(skip)]
    generation: u64,
}

// Equality is over architecture and parameters; the tape generation is bookkeeping.
impl PartialEq for EncoderModel {
    fn eq(&self, other: &Self) -> bool {
        self.layer_sizes == other.layer_sizes && self.activation == other.activation && self.layers == other.layers
    }
}

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    layer_sizes: Vec<usize>,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.post.last().map_or(&self.input, Vec::as_slice)
    }
}

/// Parameter gradients, shaped like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub layers: Vec<Dense>,
}

impl ParamGradients {
    pub fn zeros_like(model: &EncoderModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Dense {
                    weights: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    /// Slices in the same order as [`EncoderModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn add_assign(&mut self, other: &ParamGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::invalid("encoder needs at least input and output sizes"));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::invalid("encoder layer sizes must be >= 1"));
    }
    Ok(())
}

// ChaCha stream of the run seed reserved for weight initialization.
const INIT_STREAM: u64 = 4;

/// Gaussian weights with standard deviation `1/sqrt(fan_in)`, zero biases.
pub fn init_encoder(layer_sizes: &[usize], activation: Activation, seed: RngSeed) -> Result<EncoderModel> {
    validate_sizes(layer_sizes)?;
    let mut rng = SeededRng::stream(seed, INIT_STREAM);
    let layers = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let data = rng.gaussians(fan_in * fan_out).into_iter().map(|g| g * scale).collect();
            Dense {
                weights: Matrix::from_vec(fan_out, fan_in, data).expect("sized above"),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(EncoderModel {
        layer_sizes: layer_sizes.to_vec(),
        activation,
        layers,
        generation: 0,
    })
}

impl EncoderModel {
    /// Assembles a model from explicit layers, checking the shape chain.
    pub fn from_layers(activation: Activation, layers: Vec<Dense>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::invalid("encoder needs at least one layer"))?;
        let mut sizes = vec![first.in_dim()];
        for l in &layers {
            if l.in_dim() != *sizes.last().unwrap() {
                return Err(Error::dims(*sizes.last().unwrap(), l.in_dim()));
            }
            if l.bias.len() != l.out_dim() {
                return Err(Error::dims(l.out_dim(), l.bias.len()));
            }
            sizes.push(l.out_dim());
        }
        validate_sizes(&sizes)?;
        Ok(Self {
            layer_sizes: sizes,
            activation,
            layers,
            generation: 0,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    /// Mutable parameter slices (per layer: weights then bias). Any tape
    /// recorded before this call is invalidated.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// Embedding only, without recording a tape.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(forward(self, x)?.0)
    }

    /// Embeds every row of `features`.
    pub fn embed_rows(&self, features: &Matrix, exec: Exec) -> Result<Matrix> {
        if features.cols() != self.input_dim() && features.rows() > 0 {
            return Err(Error::dims(self.input_dim(), features.cols()));
        }
        let rows = exec.map_indexed(features.rows(), |i| self.embed(features.row(i)));
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.embedding_dim()));
        }
        Matrix::from_rows(&rows)
    }
}

/// Runs the encoder on one input, recording activations.
pub fn forward(model: &EncoderModel, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
    if x.len() != model.input_dim() {
        return Err(Error::dims(model.input_dim(), x.len()));
    }
    let last = model.layers.len() - 1;
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let input = if i == 0 { x } else { post[i - 1].as_slice() };
        let mut z = vec![0.0; layer.out_dim()];
        layer.weights.mul_vec(input, &mut z);
        for (zi, b) in z.iter_mut().zip(&layer.bias) {
            *zi += b;
        }
        let a = if i == last {
            z.clone()
        } else {
            z.iter().map(|&v| model.activation.apply(v)).collect()
        };
        pre.push(z);
        post.push(a);
    }
    let e = post[last].clone();
    Ok((
        e,
        Tape {
            generation: model.generation,
            layer_sizes: model.layer_sizes.clone(),
            input: x.to_vec(),
            pre,
            post,
        },
    ))
}

/// Reverse pass: gradients of `dl_de · f(x)` with respect to every parameter.
pub fn backward(model: &EncoderModel, tape: &Tape, dl_de: &[f64]) -> Result<ParamGradients> {
    if tape.layer_sizes != model.layer_sizes {
        return Err(Error::StaleTape("tape was recorded for a different architecture".into()));
    }
    if tape.generation != model.generation {
        return Err(Error::StaleTape("model parameters changed since the forward pass".into()));
    }
    if dl_de.len() != model.embedding_dim() {
        return Err(Error::dims(model.embedding_dim(), dl_de.len()));
    }
    let mut grads = ParamGradients::zeros_like(model);
    let last = model.layers.len() - 1;
    let mut delta = dl_de.to_vec();
    for i in (0..model.layers.len()).rev() {
        if i != last {
            for ((d, &z), &a) in delta.iter_mut().zip(&tape.pre[i]).zip(&tape.post[i]) {
                *d *= model.activation.derivative(z, a);
            }
        }
        let input = if i == 0 { &tape.input } else { &tape.post[i - 1] };
        let g = &mut grads.layers[i];
        for (r, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                for (w, &xi) in g.weights.row_mut(r).iter_mut().zip(input.iter()) {
                    *w = d * xi;
                }
            }
            g.bias[r] = d;
        }
        if i > 0 {
            let mut next = vec![0.0; model.layers[i].in_dim()];
            model.layers[i].weights.mul_vec_transposed(&delta, &mut next);
            delta = next;
        }
    }
    Ok(grads)
}

/// Compares [`backward`] against central differences of
/// `attractor_loss(forward(x), label)` for every parameter, returning the
/// worst per-tensor relative error.
pub fn finite_diff_check(model: &EncoderModel, x: &[f64], anchors: &AnchorSet, label: usize, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let (e, tape) = forward(model, x)?;
    let (de, _) = attractor_grad(&e, anchors, label)?;
    let analytic = backward(model, &tape, &de)?;

    let mut probe = model.clone();
    let tensors = analytic.slices().len();
    let mut worst: f64 = 0.0;
    for t in 0..tensors {
        let len = analytic.slices()[t].len();
        let mut numeric = vec![0.0; len];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.param_slices_mut()[t][k];
            probe.param_slices_mut()[t][k] = orig + step;
            let up = attractor_loss(&probe.embed(x)?, anchors, label)?;
            probe.param_slices_mut()[t][k] = orig - step;
            let down = attractor_loss(&probe.embed(x)?, anchors, label)?;
            probe.param_slices_mut()[t][k] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        worst = worst.max(relative_error(analytic.slices()[t], &numeric));
    }
    Ok(worst)
}
