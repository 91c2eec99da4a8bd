//! SIREN target network: layout, forward pass, and exact gradients.
//!
//! Layer `l < L-1` computes `sin(omega * (W_l x + h_l))`; the final layer is
//! linear. Batches are processed feature-major (one row per feature, one
//! column per sample) so that every product vectorizes over the batch while
//! keeping a fixed per-entry summation order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{batch_matmul, batch_matmul_transposed, dot, DenseMatrix, RngStream};
use crate::signal::{encode_into, PositionalEncodingSpec};

pub const DEFAULT_OMEGA: f64 = 30.0;
pub const OUTPUT_BIAS_INIT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub width: usize,
    /// Number of width-to-width layers between the input and output layers.
    pub hidden: usize,
    pub omega: f64,
    pub encoding: Option<PositionalEncodingSpec>,
}

impl ModelConfig {
    pub fn new(in_dim: usize, out_dim: usize, width: usize, hidden: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            width,
            hidden,
            omega: DEFAULT_OMEGA,
            encoding: None,
        }
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn with_encoding(mut self, frequencies: usize) -> Self {
        self.encoding = Some(PositionalEncodingSpec::new(frequencies));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::invalid("model input and output dims must be nonzero"));
        }
        if self.width == 0 {
            return Err(Error::invalid("model width must be at least 1"));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::invalid(format!("omega must be positive, got {}", self.omega)));
        }
        Ok(())
    }

    pub fn encoded_dim(&self) -> usize {
        match &self.encoding {
            Some(pe) => pe.encoded_dim(self.in_dim),
            None => self.in_dim,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.hidden + 2
    }

    /// `(fan_out, fan_in)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.layer_count());
        shapes.push((self.width, self.encoded_dim()));
        for _ in 0..self.hidden {
            shapes.push((self.width, self.width));
        }
        shapes.push((self.out_dim, self.width));
        shapes
    }

    pub fn weight_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, _)| o).sum()
    }
}

/// Total trainable parameters of a plain MLP with this architecture.
pub fn param_count(config: &ModelConfig) -> usize {
    config.weight_count() + config.bias_count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_out x fan_in`
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetWeights {
    layers: Vec<Layer>,
}

/// Per-layer loss derivatives, shaped like [`TargetWeights`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    layers: Vec<Layer>,
}

macro_rules! layered {
    ($ty:ident) => {
        impl $ty {
            pub fn new(layers: Vec<Layer>) -> Self {
                Self { layers }
            }

            pub fn zeros(config: &ModelConfig) -> Self {
                Self {
                    layers: config
                        .layer_shapes()
                        .into_iter()
                        .map(|(o, i)| Layer::zeros(o, i))
                        .collect(),
                }
            }

            pub fn layers(&self) -> &[Layer] {
                &self.layers
            }

            pub fn layers_mut(&mut self) -> &mut [Layer] {
                &mut self.layers
            }

            pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
                let shapes = config.layer_shapes();
                if shapes.len() != self.layers.len() {
                    return Err(Error::invalid(format!(
                        "expected {} layers, found {}",
                        shapes.len(),
                        self.layers.len()
                    )));
                }
                for (l, ((o, i), layer)) in shapes.iter().zip(&self.layers).enumerate() {
                    if layer.weight.rows() != *o || layer.weight.cols() != *i || layer.bias.len() != *o {
                        return Err(Error::invalid(format!(
                            "layer {l}: expected {o}x{i} weights and {o} biases"
                        )));
                    }
                }
                Ok(())
            }

            /// Parameters in layer order, each layer as its weights
            /// (row-major) followed by its biases.
            pub fn flatten(&self) -> Vec<f64> {
                let mut out = Vec::new();
                for layer in &self.layers {
                    out.extend_from_slice(layer.weight.data());
                    out.extend_from_slice(&layer.bias);
                }
                out
            }

            pub fn from_flat(config: &ModelConfig, flat: &[f64]) -> Result<Self> {
                if flat.len() != param_count(config) {
                    return Err(Error::invalid(format!(
                        "flat parameter vector has {} entries, expected {}",
                        flat.len(),
                        param_count(config)
                    )));
                }
                let mut offset = 0;
                let mut layers = Vec::with_capacity(config.layer_count());
                for (o, i) in config.layer_shapes() {
                    let weight = DenseMatrix::new(o, i, flat[offset..offset + o * i].to_vec())?;
                    offset += o * i;
                    let bias = flat[offset..offset + o].to_vec();
                    offset += o;
                    layers.push(Layer { weight, bias });
                }
                Ok(Self { layers })
            }
        }
    };
}

layered!(TargetWeights);
layered!(GradientSet);

/// SIREN initialization: the input layer draws from `U(+-1/fan_in)`, later
/// layers from `U(+-1/(omega sqrt(width)))`. Hidden biases start at zero and
/// the output bias at 0.5. Draws run over layers in order, row-major.
pub fn init_mlp(config: &ModelConfig, stream: RngStream) -> Result<TargetWeights> {
    config.validate()?;
    let mut index = 0u64;
    let shapes = config.layer_shapes();
    let last = shapes.len() - 1;
    let mut layers = Vec::with_capacity(shapes.len());
    for (l, &(o, i)) in shapes.iter().enumerate() {
        let bound = siren_bound(config, l);
        let weight = DenseMatrix::from_fn(o, i, |_, _| {
            let v = stream.uniform_at(index, bound);
            index += 1;
            v
        });
        let fill = if l == last { OUTPUT_BIAS_INIT } else { 0.0 };
        layers.push(Layer {
            weight,
            bias: vec![fill; o],
        });
    }
    Ok(TargetWeights { layers })
}

/// Half-width of the uniform SIREN initialization for layer `l`.
pub fn siren_bound(config: &ModelConfig, layer: usize) -> f64 {
    if layer == 0 {
        1.0 / config.encoded_dim() as f64
    } else {
        1.0 / (config.omega * (config.width as f64).sqrt())
    }
}

/// Intermediate values retained for the backward pass.
struct Tape {
    /// Layer inputs, feature-major.
    inputs: Vec<Vec<f64>>,
    /// `omega * cos(omega * u_l)` for every sine layer.
    slopes: Vec<Vec<f64>>,
    /// Network output, feature-major.
    output: Vec<f64>,
}

fn encode_batch(config: &ModelConfig, coords: &[f64], batch: usize) -> Vec<f64> {
    let d = config.in_dim;
    let enc_dim = config.encoded_dim();
    let freqs = config.encoding.map_or(0, |e| e.frequencies);
    let mut x = vec![0.0; enc_dim * batch];
    let mut buf = Vec::with_capacity(enc_dim);
    for s in 0..batch {
        buf.clear();
        encode_into(&coords[s * d..(s + 1) * d], freqs, &mut buf);
        for (f, v) in buf.iter().enumerate() {
            x[f * batch + s] = *v;
        }
    }
    x
}

fn run(weights: &TargetWeights, config: &ModelConfig, coords: &[f64], keep: bool) -> Result<Tape> {
    weights.check_shapes(config)?;
    if coords.len() % config.in_dim != 0 {
        return Err(Error::invalid(format!(
            "coordinate buffer length {} is not a multiple of in_dim {}",
            coords.len(),
            config.in_dim
        )));
    }
    let batch = coords.len() / config.in_dim;
    let omega = config.omega;
    let last = weights.layers.len() - 1;

    let mut x = encode_batch(config, coords, batch);
    let mut inputs = Vec::new();
    let mut slopes = Vec::new();
    for (l, layer) in weights.layers.iter().enumerate() {
        let rows = layer.weight.rows();
        let mut u = vec![0.0; rows * batch];
        batch_matmul(&layer.weight, &x, batch, &mut u);
        for (r, &b) in layer.bias.iter().enumerate() {
            for v in &mut u[r * batch..(r + 1) * batch] {
                *v += b;
            }
        }
        if l == last {
            if keep {
                inputs.push(x);
            }
            return Ok(Tape {
                inputs,
                slopes,
                output: u,
            });
        }
        let mut slope = if keep { vec![0.0; u.len()] } else { Vec::new() };
        for (k, v) in u.iter_mut().enumerate() {
            let (s, c) = (omega * *v).sin_cos();
            if keep {
                slope[k] = omega * c;
            }
            *v = s;
        }
        if keep {
            inputs.push(std::mem::replace(&mut x, u));
            slopes.push(slope);
        } else {
            x = u;
        }
    }
    unreachable!("a model always has an output layer")
}

fn to_sample_major(feature_major: &[f64], rows: usize, batch: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * batch];
    for r in 0..rows {
        for s in 0..batch {
            out[s * rows + r] = feature_major[r * batch + s];
        }
    }
    out
}

pub fn forward(weights: &TargetWeights, config: &ModelConfig, coord: &[f64]) -> Result<Vec<f64>> {
    if coord.len() != config.in_dim {
        return Err(Error::invalid(format!(
            "coordinate has {} components, model expects {}",
            coord.len(),
            config.in_dim
        )));
    }
    Ok(run(weights, config, coord, false)?.output)
}

/// Outputs for a sample-major coordinate buffer, returned sample-major.
pub fn forward_batch(weights: &TargetWeights, config: &ModelConfig, coords: &[f64]) -> Result<Vec<f64>> {
    let batch = coords.len() / config.in_dim.max(1);
    let tape = run(weights, config, coords, false)?;
    Ok(to_sample_major(&tape.output, config.out_dim, batch))
}

const RENDER_CHUNK: usize = 2048;

/// Evaluates every coordinate, chunked across the rayon pool. Each output is
/// computed independently of the chunking, so the result is bit-stable.
pub fn render(weights: &TargetWeights, config: &ModelConfig, coords: &[f64]) -> Result<Vec<f64>> {
    weights.check_shapes(config)?;
    let parts: Result<Vec<Vec<f64>>> = coords
        .par_chunks(RENDER_CHUNK * config.in_dim)
        .map(|chunk| forward_batch(weights, config, chunk))
        .collect();
    Ok(parts?.concat())
}

/// Mean squared error over samples and output channels, with exact gradients.
pub fn backward(
    weights: &TargetWeights,
    config: &ModelConfig,
    coords: &[f64],
    targets: &[f64],
) -> Result<(f64, GradientSet)> {
    let batch = coords.len() / config.in_dim.max(1);
    if batch == 0 {
        return Err(Error::invalid("backward needs a nonempty batch"));
    }
    if targets.len() != batch * config.out_dim {
        return Err(Error::invalid(format!(
            "{} targets for a batch of {batch} with {} outputs",
            targets.len(),
            config.out_dim
        )));
    }
    let tape = run(weights, config, coords, true)?;
    let out_dim = config.out_dim;
    let norm = 1.0 / (batch * out_dim) as f64;

    let mut loss = 0.0;
    let mut delta = vec![0.0; out_dim * batch];
    for s in 0..batch {
        for r in 0..out_dim {
            let diff = tape.output[r * batch + s] - targets[s * out_dim + r];
            loss += diff * diff;
            delta[r * batch + s] = 2.0 * diff * norm;
        }
    }
    loss *= norm;

    let mut grads = GradientSet::zeros(config);
    for l in (0..weights.layers.len()).rev() {
        let layer = &weights.layers[l];
        let x = &tape.inputs[l];
        let (rows, cols) = (layer.weight.rows(), layer.weight.cols());
        let g = &mut grads.layers[l];
        let gw = g.weight.data_mut();
        for r in 0..rows {
            let dr = &delta[r * batch..(r + 1) * batch];
            for c in 0..cols {
                gw[r * cols + c] = dot(dr, &x[c * batch..(c + 1) * batch]);
            }
            g.bias[r] = dr.iter().sum();
        }
        if l == 0 {
            break;
        }
        let mut prev = vec![0.0; cols * batch];
        batch_matmul_transposed(&layer.weight, &delta, batch, &mut prev);
        for (p, s) in prev.iter_mut().zip(&tape.slopes[l - 1]) {
            *p *= s;
        }
        delta = prev;
    }
    Ok((loss, grads))
}
