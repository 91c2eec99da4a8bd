//! Range-based uniform integer quantization, one tensor at a time.
//!
//! A tensor is stored as integer codes plus its `min` and `max`, with no zero
//! point: `v' = min + code * (max - min) / (2^b - 1)`. The range endpoints are
//! kept as f32, rounded outward so the stored range always covers the data.

use serde::{Deserialize, Serialize};

use crate::decoder::{LatentState, RandomDecoder};
use crate::error::{Error, Result};
use crate::model::{Layer, TargetWeights};
use crate::numerics::DenseMatrix;

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 16;

pub fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::invalid(format!("bit width {bits} outside [1, 16]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    codes: Vec<u16>,
    min: f32,
    max: f32,
    bits: u8,
}

impl QuantizedTensor {
    /// Validates and assembles a tensor, e.g. after reading one from disk.
    pub fn from_parts(codes: Vec<u16>, min: f32, max: f32, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(Error::corrupt(format!("invalid tensor range [{min}, {max}]")));
        }
        let q = Self { codes, min, max, bits };
        let top = q.levels();
        if let Some(&bad) = q.codes.iter().find(|&&c| u32::from(c) > top) {
            return Err(Error::corrupt(format!("code {bad} exceeds {top} for {bits}-bit tensor")));
        }
        if min == max && q.codes.iter().any(|&c| c != 0) {
            return Err(Error::corrupt("degenerate range with nonzero codes"));
        }
        Ok(q)
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn min(&self) -> f32 {
        self.min
    }

    pub fn max(&self) -> f32 {
        self.max
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Largest code, `2^b - 1`.
    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Grid spacing of the stored range.
    pub fn step(&self) -> f64 {
        (self.max as f64 - self.min as f64) / self.levels() as f64
    }

    pub fn packed(&self) -> Vec<u8> {
        pack_codes(&self.codes, self.bits)
    }
}

/// f32 at or below `v`.
fn f32_floor(v: f64) -> f32 {
    let f = v as f32;
    if (f as f64) > v {
        f.next_down()
    } else {
        f
    }
}

/// f32 at or above `v`.
fn f32_ceil(v: f64) -> f32 {
    let f = v as f32;
    if (f as f64) < v {
        f.next_up()
    } else {
        f
    }
}

pub fn quantize(values: &[f64], bits: u8) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(Error::invalid("cannot quantize an empty tensor"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cannot quantize non-finite values"));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (min, max) = (f32_floor(lo), f32_ceil(hi));
    let levels = (1u32 << bits) - 1;
    if min == max {
        return Ok(QuantizedTensor {
            codes: vec![0; values.len()],
            min,
            max,
            bits,
        });
    }
    let (min64, step) = (min as f64, (max as f64 - min as f64) / levels as f64);
    let codes = values
        .iter()
        .map(|&v| ((v - min64) / step).round().clamp(0.0, levels as f64) as u16)
        .collect();
    Ok(QuantizedTensor { codes, min, max, bits })
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Vec<f64>> {
    let levels = q.levels();
    if let Some(&bad) = q.codes.iter().find(|&&c| u32::from(c) > levels) {
        return Err(Error::corrupt(format!("code {bad} exceeds {levels}")));
    }
    let min = q.min as f64;
    if q.min == q.max {
        return Ok(vec![min; q.codes.len()]);
    }
    let step = q.step();
    Ok(q.codes.iter().map(|&c| min + c as f64 * step).collect())
}

/// Quantize then dequantize, the forward map used in quantization-aware
/// training.
pub fn fake_quantize(values: &[f64], bits: u8) -> Result<Vec<f64>> {
    dequantize(&quantize(values, bits)?)
}

/// Bytes needed for `count` codes at `bits`.
pub fn packed_len(count: usize, bits: u8) -> usize {
    if bits < 8 {
        (count * bits as usize).div_ceil(8)
    } else {
        count * (bits as usize).div_ceil(8)
    }
}

/// Codes narrower than 8 bits form a continuous little-endian bit stream;
/// wider codes take `ceil(b/8)` little-endian bytes each.
pub fn pack_codes(codes: &[u16], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    if bits >= 8 {
        let width = (bits as usize).div_ceil(8);
        for (i, &c) in codes.iter().enumerate() {
            out[i * width..(i + 1) * width].copy_from_slice(&c.to_le_bytes()[..width]);
        }
    } else {
        let mut bit = 0usize;
        for &c in codes {
            for k in 0..bits as usize {
                if (c >> k) & 1 == 1 {
                    out[bit / 8] |= 1 << (bit % 8);
                }
                bit += 1;
            }
        }
    }
    out
}

pub fn unpack_codes(bytes: &[u8], count: usize, bits: u8) -> Result<Vec<u16>> {
    check_bits(bits)?;
    if bytes.len() != packed_len(count, bits) {
        return Err(Error::corrupt(format!(
            "{} packed bytes for {count} codes at {bits} bits",
            bytes.len()
        )));
    }
    if bits >= 8 {
        let width = (bits as usize).div_ceil(8);
        Ok(bytes
            .chunks_exact(width)
            .map(|ch| {
                let mut b = [0u8; 2];
                b[..width].copy_from_slice(ch);
                u16::from_le_bytes(b)
            })
            .collect())
    } else {
        let mut bit = 0usize;
        Ok((0..count)
            .map(|_| {
                let mut c = 0u16;
                for k in 0..bits as usize {
                    c |= u16::from((bytes[bit / 8] >> (bit % 8)) & 1) << k;
                    bit += 1;
                }
                c
            })
            .collect())
    }
}

/// A D'OH model after quantization: the latent as one tensor and each bias
/// vector as its own tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLatent {
    pub latent: QuantizedTensor,
    pub biases: Vec<QuantizedTensor>,
}

impl QuantizedLatent {
    pub fn tensor_count(&self) -> usize {
        1 + self.biases.len()
    }

    pub fn dequantize(&self) -> Result<LatentState> {
        Ok(LatentState {
            z: dequantize(&self.latent)?,
            biases: self.biases.iter().map(dequantize).collect::<Result<_>>()?,
        })
    }
}

/// An MLP after quantization: per layer, the weight tensor and bias tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMlp {
    pub layers: Vec<QuantizedLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    pub fan_out: usize,
    pub fan_in: usize,
    pub weight: QuantizedTensor,
    pub bias: QuantizedTensor,
}

impl QuantizedMlp {
    pub fn tensor_count(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn dequantize(&self) -> Result<TargetWeights> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(Layer {
                    weight: DenseMatrix::new(l.fan_out, l.fan_in, dequantize(&l.weight)?)?,
                    bias: dequantize(&l.bias)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TargetWeights::new(layers))
    }
}

pub fn quantize_model_doh(latent: &LatentState, bits: u8) -> Result<QuantizedLatent> {
    Ok(QuantizedLatent {
        latent: quantize(&latent.z, bits)?,
        biases: latent
            .biases
            .iter()
            .map(|b| quantize(b, bits))
            .collect::<Result<_>>()?,
    })
}

pub fn quantize_model_mlp(weights: &TargetWeights, bits: u8) -> Result<QuantizedMlp> {
    let layers = weights
        .layers()
        .iter()
        .map(|l| {
            Ok(QuantizedLayer {
                fan_out: l.weight.rows(),
                fan_in: l.weight.cols(),
                weight: quantize(l.weight.data(), bits)?,
                bias: quantize(&l.bias, bits)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedMlp { layers })
}

/// Quantization error of generated weights when quantizing the latent code
/// versus quantizing the generated weights directly.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmoothingReport {
    pub bits: u8,
    /// Mean of `(B Q(z) - B z)^2` over all generated weights.
    pub err_latent: f64,
    /// Mean of `(Q(W) - W)^2` with `W = B z`, quantized per layer.
    pub err_direct: f64,
    pub unique_latent: Vec<usize>,
    pub unique_direct: Vec<usize>,
}

fn unique_count(values: &[f64]) -> usize {
    let mut bits: Vec<u64> = values.iter().map(|v| (v + 0.0).to_bits()).collect();
    bits.sort_unstable();
    bits.dedup();
    bits.len()
}

pub fn smoothing_error(decoder: &RandomDecoder, z: &[f64], bits: u8) -> Result<SmoothingReport> {
    if z.len() != decoder.latent_dim() {
        return Err(Error::invalid("latent length does not match decoder"));
    }
    let qz = fake_quantize(z, bits)?;
    let (mut se_latent, mut se_direct, mut count) = (0.0, 0.0, 0usize);
    let mut unique_latent = Vec::new();
    let mut unique_direct = Vec::new();
    for l in 0..decoder.layers().len() {
        let w = decoder.project_layer(l, z);
        let from_latent = decoder.project_layer(l, &qz);
        let direct = fake_quantize(&w, bits)?;
        for k in 0..w.len() {
            se_latent += (from_latent[k] - w[k]).powi(2);
            se_direct += (direct[k] - w[k]).powi(2);
        }
        count += w.len();
        unique_latent.push(unique_count(&from_latent));
        unique_direct.push(unique_count(&direct));
    }
    Ok(SmoothingReport {
        bits,
        err_latent: se_latent / count as f64,
        err_direct: se_direct / count as f64,
        unique_latent,
        unique_direct,
    })
}
