//! Fixed random linear hypernetwork.
//!
//! Each target layer's flattened weights are `B_l z` for one shared latent
//! code `z` and a per-layer random matrix `B_l` that is never trained. Every
//! entry of `B_l` is a pure function of the global seed, so a decoder is fully
//! described by `(seed, latent_dim, model config)`.
//!
//! Entry `(i, j)` of `B_l`, for flat weight index `i` and latent index `j`, is
//! `uniform(layer_seed_l, i * n + j, a_l)` where `layer_seed_l` is the `l`-th
//! output of the global seed stream. Output `L` of the same stream seeds the
//! latent initialization.
//!
//! The bounds `a_l` match the variance of `B_l z` to the SIREN initialization
//! of the corresponding layer, given `z ~ U(+-1/n)`:
//!
//! * input layer: `a_0 = sqrt(3n) / fan_in`
//! * other layers: `a_l = sqrt(3n / (omega^2 width))`

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientSet, Layer, ModelConfig, TargetWeights, OUTPUT_BIAS_INIT};
use crate::numerics::{matvec_into, matvec_transposed_acc, DenseMatrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    /// Hold every `B_l` in memory: `8 * weights * n` bytes.
    Materialized,
    /// Regenerate entries on every use: constant memory, more arithmetic.
    Streamed,
}

#[derive(Clone, Debug)]
pub struct LayerProjection {
    fan_out: usize,
    fan_in: usize,
    seed: u64,
    bound: f64,
    matrix: Option<DenseMatrix>,
}

impl LayerProjection {
    pub fn shape(&self) -> (usize, usize) {
        (self.fan_out, self.fan_in)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    fn weight_count(&self) -> usize {
        self.fan_out * self.fan_in
    }
}

#[derive(Clone, Debug)]
pub struct RandomDecoder {
    global_seed: u64,
    latent_dim: usize,
    latent_seed: u64,
    layers: Vec<LayerProjection>,
    mode: DecoderMode,
}

/// Half-width of the uniform distribution for `B_l`.
pub fn bound_for_layer(config: &ModelConfig, latent_dim: usize, layer: usize) -> Result<f64> {
    if latent_dim == 0 {
        return Err(Error::invalid("latent dimension must be at least 1"));
    }
    if layer >= config.layer_count() {
        return Err(Error::invalid(format!(
            "layer {layer} out of range for {} layers",
            config.layer_count()
        )));
    }
    let n = latent_dim as f64;
    Ok(if layer == 0 {
        (3.0 * n).sqrt() / config.encoded_dim() as f64
    } else {
        (3.0 * n / (config.omega * config.omega * config.width as f64)).sqrt()
    })
}

impl RandomDecoder {
    pub fn new(config: &ModelConfig, latent_dim: usize, global_seed: u64, mode: DecoderMode) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(l, (o, i))| Ok((o, i, bound_for_layer(config, latent_dim, l)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(global_seed, latent_dim, &layers, mode)
    }

    /// Builds a decoder for arbitrary `(fan_out, fan_in, bound)` layers.
    pub fn from_layers(
        global_seed: u64,
        latent_dim: usize,
        layers: &[(usize, usize, f64)],
        mode: DecoderMode,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::invalid("latent dimension must be at least 1"));
        }
        if layers.is_empty() {
            return Err(Error::invalid("decoder needs at least one layer"));
        }
        let global = RngStream::new(global_seed);
        let mut projections = Vec::with_capacity(layers.len());
        for (l, &(fan_out, fan_in, bound)) in layers.iter().enumerate() {
            if !(bound > 0.0 && bound.is_finite()) {
                return Err(Error::invalid(format!("layer {l} bound must be positive")));
            }
            let seed = global.u64_at(l as u64);
            let matrix = match mode {
                DecoderMode::Materialized => {
                    let stream = RngStream::new(seed);
                    let n = latent_dim;
                    let mut data = Vec::with_capacity(fan_out * fan_in * n);
                    data.extend((0..(fan_out * fan_in * n) as u64).map(|k| stream.uniform_at(k, bound)));
                    Some(DenseMatrix::new(fan_out * fan_in, n, data)?)
                }
                DecoderMode::Streamed => None,
            };
            projections.push(LayerProjection {
                fan_out,
                fan_in,
                seed,
                bound,
                matrix,
            });
        }
        Ok(Self {
            global_seed,
            latent_dim,
            latent_seed: global.u64_at(layers.len() as u64),
            layers: projections,
            mode,
        })
    }

    pub fn global_seed(&self) -> u64 {
        self.global_seed
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn mode(&self) -> DecoderMode {
        self.mode
    }

    pub fn layers(&self) -> &[LayerProjection] {
        &self.layers
    }

    pub fn layer_seeds(&self) -> Vec<u64> {
        self.layers.iter().map(|l| l.seed).collect()
    }

    pub fn bounds(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.bound).collect()
    }

    pub fn latent_seed(&self) -> u64 {
        self.latent_seed
    }

    /// Entry of `B_layer` for flat weight index `i` and latent index `j`.
    pub fn entry(&self, layer: usize, i: usize, j: usize) -> f64 {
        let p = &self.layers[layer];
        RngStream::new(p.seed).uniform_at((i * self.latent_dim + j) as u64, p.bound)
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(LayerProjection::weight_count).sum()
    }

    /// Flattened `B_l z` for one layer.
    pub fn project_layer(&self, layer: usize, z: &[f64]) -> Vec<f64> {
        let p = &self.layers[layer];
        let n = self.latent_dim;
        let mut out = vec![0.0; p.weight_count()];
        match &p.matrix {
            Some(m) => matvec_into(m.data(), n, z, &mut out),
            None => {
                let stream = RngStream::new(p.seed);
                for (i, w) in out.iter_mut().enumerate() {
                    let base = (i * n) as u64;
                    let mut acc = 0.0;
                    for (j, &zj) in z.iter().enumerate() {
                        acc += stream.uniform_at(base + j as u64, p.bound) * zj;
                    }
                    *w = acc;
                }
            }
        }
        out
    }

    /// `B_l^T g` for one layer's flattened weight gradient.
    pub fn project_layer_transposed(&self, layer: usize, g: &[f64]) -> Vec<f64> {
        let p = &self.layers[layer];
        let n = self.latent_dim;
        let mut out = vec![0.0; n];
        match &p.matrix {
            Some(m) => matvec_transposed_acc(m.data(), n, g, &mut out),
            None => {
                let stream = RngStream::new(p.seed);
                for (i, &gi) in g.iter().enumerate() {
                    let base = (i * n) as u64;
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += stream.uniform_at(base + j as u64, p.bound) * gi;
                    }
                }
            }
        }
        out
    }
}

/// The trainable state: latent code plus one free bias vector per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub biases: Vec<Vec<f64>>,
}

impl LatentState {
    pub fn param_count(&self) -> usize {
        self.z.len() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// `z` followed by each bias vector in layer order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.z.clone();
        for b in &self.biases {
            out.extend_from_slice(b);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten), shaped like `template`.
    pub fn from_flat_like(template: &LatentState, flat: &[f64]) -> Result<Self> {
        if flat.len() != template.param_count() {
            return Err(Error::invalid("flat latent has the wrong length"));
        }
        let n = template.z.len();
        let mut offset = n;
        let biases = template
            .biases
            .iter()
            .map(|b| {
                let v = flat[offset..offset + b.len()].to_vec();
                offset += b.len();
                v
            })
            .collect();
        Ok(Self {
            z: flat[..n].to_vec(),
            biases,
        })
    }

    fn check(&self, decoder: &RandomDecoder) -> Result<()> {
        if self.z.len() != decoder.latent_dim {
            return Err(Error::invalid(format!(
                "latent has {} entries, decoder expects {}",
                self.z.len(),
                decoder.latent_dim
            )));
        }
        if self.biases.len() != decoder.layers.len()
            || self.biases.iter().zip(&decoder.layers).any(|(b, p)| b.len() != p.fan_out)
        {
            return Err(Error::invalid("bias vectors do not match decoder layers"));
        }
        Ok(())
    }
}

/// `z ~ U(+-1/n)` from the decoder's latent stream; hidden biases zero, output
/// bias 0.5.
pub fn init_latent(decoder: &RandomDecoder) -> LatentState {
    let n = decoder.latent_dim;
    let stream = RngStream::new(decoder.latent_seed);
    let bound = 1.0 / n as f64;
    let z = (0..n as u64).map(|j| stream.uniform_at(j, bound)).collect();
    let last = decoder.layers.len() - 1;
    let biases = decoder
        .layers
        .iter()
        .enumerate()
        .map(|(l, p)| vec![if l == last { OUTPUT_BIAS_INIT } else { 0.0 }; p.fan_out])
        .collect();
    LatentState { z, biases }
}

/// Materializes the target network: `W_l = reshape(B_l z)`, biases copied.
pub fn generate_weights(decoder: &RandomDecoder, latent: &LatentState) -> Result<TargetWeights> {
    latent.check(decoder)?;
    let layers = decoder
        .layers
        .par_iter()
        .enumerate()
        .map(|(l, p)| {
            let flat = decoder.project_layer(l, &latent.z);
            Ok(Layer {
                weight: DenseMatrix::new(p.fan_out, p.fan_in, flat)?,
                bias: latent.biases[l].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetWeights::new(layers))
}

/// Chain rule through the projection: `dL/dz = sum_l B_l^T vec(dL/dW_l)`,
/// accumulated in ascending layer order. Bias gradients pass through.
pub fn pullback(decoder: &RandomDecoder, grads: &GradientSet) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if grads.layers().len() != decoder.layers.len() {
        return Err(Error::invalid("gradient layer count does not match decoder"));
    }
    for (l, (g, p)) in grads.layers().iter().zip(&decoder.layers).enumerate() {
        if g.weight.rows() != p.fan_out || g.weight.cols() != p.fan_in || g.bias.len() != p.fan_out {
            return Err(Error::invalid(format!("gradient shape mismatch at layer {l}")));
        }
    }
    let per_layer: Vec<Vec<f64>> = grads
        .layers()
        .par_iter()
        .enumerate()
        .map(|(l, g)| decoder.project_layer_transposed(l, g.weight.data()))
        .collect();
    let mut grad_z = vec![0.0; decoder.latent_dim];
    for part in per_layer {
        for (a, b) in grad_z.iter_mut().zip(part) {
            *a += b;
        }
    }
    let grad_biases = grads.layers().iter().map(|g| g.bias.clone()).collect();
    Ok((grad_z, grad_biases))
}

/// Parameters a D'OH model trains and transmits: the latent code plus every
/// bias. Independent of positional encoding.
pub fn doh_param_count(config: &ModelConfig, latent_dim: usize) -> Result<usize> {
    if latent_dim == 0 {
        return Err(Error::invalid("latent dimension must be at least 1"));
    }
    Ok(latent_dim + config.bias_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::new(2, 3, 6, 1)
    }

    #[test]
    fn bound_examples() {
        let c = ModelConfig::new(2, 1, 40, 2);
        assert!((bound_for_layer(&c, 12, 0).unwrap() - 3.0).abs() < 1e-15);
        assert!((bound_for_layer(&c, 120, 1).unwrap() - 0.1).abs() < 1e-15);
        assert!((bound_for_layer(&c, 120, 3).unwrap() - 0.1).abs() < 1e-15);
        let a = bound_for_layer(&c, 50, 1).unwrap();
        let b = bound_for_layer(&c, 200, 1).unwrap();
        assert!((b / a - 2.0).abs() < 1e-14);
        assert!(bound_for_layer(&c, 0, 0).is_err());
    }

    #[test]
    fn seeds_follow_global_stream() {
        let d = RandomDecoder::new(&tiny(), 5, 99, DecoderMode::Streamed).unwrap();
        let g = RngStream::new(99);
        assert_eq!(d.layer_seeds(), vec![g.u64_at(0), g.u64_at(1), g.u64_at(2)]);
        assert_eq!(d.latent_seed(), g.u64_at(3));
        let m = RandomDecoder::new(&tiny(), 5, 99, DecoderMode::Materialized).unwrap();
        let p = &m.layers()[1];
        let mat = p.matrix.as_ref().unwrap();
        assert_eq!(mat.get(7, 3), d.entry(1, 7, 3));
        assert_eq!(
            d.entry(1, 7, 3),
            RngStream::new(g.u64_at(1)).uniform_at(7 * 5 + 3, p.bound())
        );
    }

    #[test]
    fn latent_init() {
        let d = RandomDecoder::new(&tiny(), 4, 1, DecoderMode::Streamed).unwrap();
        let lat = init_latent(&d);
        assert!(lat.z.iter().all(|z| (-0.25..0.25).contains(z)));
        assert_eq!(lat.biases[2], vec![0.5; 3]);
        assert_eq!(lat.biases[0], vec![0.0; 6]);
        assert_eq!(lat, init_latent(&d));
    }

    #[test]
    fn zero_latent_gives_zero_weights() {
        let d = RandomDecoder::new(&tiny(), 7, 3, DecoderMode::Materialized).unwrap();
        let mut lat = init_latent(&d);
        lat.z = vec![0.0; 7];
        lat.biases[0][2] = 0.3;
        let w = generate_weights(&d, &lat).unwrap();
        for (l, layer) in w.layers().iter().enumerate() {
            assert!(layer.weight.data().iter().all(|&v| v == 0.0));
            assert_eq!(layer.bias, lat.biases[l]);
        }
    }

    #[test]
    fn single_latent_scales_first_column() {
        let d = RandomDecoder::new(&tiny(), 1, 3, DecoderMode::Streamed).unwrap();
        let mut lat = init_latent(&d);
        lat.z = vec![0.5];
        let w1 = generate_weights(&d, &lat).unwrap();
        lat.z = vec![1.0];
        let w2 = generate_weights(&d, &lat).unwrap();
        for (l, (a, b)) in w1.layers().iter().zip(w2.layers()).enumerate() {
            for (i, (x, y)) in a.weight.data().iter().zip(b.weight.data()).enumerate() {
                assert_eq!(*y, 2.0 * x);
                assert_eq!(*y, d.entry(l, i, 0));
            }
        }
    }

    #[test]
    fn materialized_and_streamed_agree_bitwise() {
        let c = ModelConfig::new(2, 3, 9, 2).with_encoding(2);
        let m = RandomDecoder::new(&c, 13, 5, DecoderMode::Materialized).unwrap();
        let s = RandomDecoder::new(&c, 13, 5, DecoderMode::Streamed).unwrap();
        let lat = init_latent(&m);
        assert_eq!(lat, init_latent(&s));
        let wm = generate_weights(&m, &lat).unwrap();
        let ws = generate_weights(&s, &lat).unwrap();
        for (a, b) in wm.flatten().iter().zip(ws.flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let g = GradientSet::from_flat(&c, &wm.flatten()).unwrap();
        let (gm, _) = pullback(&m, &g).unwrap();
        let (gs, _) = pullback(&s, &g).unwrap();
        for (a, b) in gm.iter().zip(gs) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pullback_zero_and_adjoint() {
        let c = tiny();
        let d = RandomDecoder::new(&c, 20, 8, DecoderMode::Materialized).unwrap();
        let (gz, gb) = pullback(&d, &GradientSet::zeros(&c)).unwrap();
        assert!(gz.iter().all(|&v| v == 0.0));
        assert_eq!(gb.len(), 3);

        let s = RngStream::new(77);
        let flat: Vec<f64> = (0..crate::model::param_count(&c) as u64).map(|k| s.uniform_at(k, 1.0)).collect();
        let g = GradientSet::from_flat(&c, &flat).unwrap();
        let (gz, _) = pullback(&d, &g).unwrap();
        let dz: Vec<f64> = (0..20u64).map(|k| s.uniform_at(1000 + k, 1.0)).collect();
        let lhs: f64 = (0..3)
            .map(|l| {
                d.project_layer(l, &dz)
                    .iter()
                    .zip(g.layers()[l].weight.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum();
        let rhs: f64 = gz.iter().zip(&dz).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn shape_errors() {
        let c = tiny();
        let d = RandomDecoder::new(&c, 4, 0, DecoderMode::Streamed).unwrap();
        let mut lat = init_latent(&d);
        lat.z.push(0.0);
        assert!(generate_weights(&d, &lat).is_err());
        let other = ModelConfig::new(2, 3, 7, 1);
        assert!(pullback(&d, &GradientSet::zeros(&other)).is_err());
    }

    #[test]
    fn doh_counts() {
        let c = ModelConfig::new(3, 1, 40, 9);
        assert_eq!(doh_param_count(&c, 14560).unwrap(), 14961);
        assert_eq!(
            doh_param_count(&c.clone().with_encoding(10), 321).unwrap(),
            doh_param_count(&c, 321).unwrap()
        );
        assert!(doh_param_count(&c, 0).is_err());
    }

    #[test]
    fn flat_latent_round_trip() {
        let d = RandomDecoder::new(&tiny(), 4, 2, DecoderMode::Streamed).unwrap();
        let lat = init_latent(&d);
        assert_eq!(LatentState::from_flat_like(&lat, &lat.flatten()).unwrap(), lat);
    }
}
