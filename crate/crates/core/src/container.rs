//! DOH1 container: a quantized model, its architecture, and the decoder seed.
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "DOH1"
//!      4     1  version (1)
//!      5     1  model kind (0 doh, 1 mlp)
//!      6     1  payload codec (0 none, 1 deflate)
//!      7     1  bits per code
//!      8    16  in_dim, out_dim, width, hidden (u32 each)
//!     24     8  omega (f64)
//!     32     1  positional encoding present (0/1)
//!     33     4  encoding frequencies (u32)
//!     37     8  global seed (u64, 0 for mlp)
//!     45     4  latent dim (u32, 0 for mlp)
//!     49     1  signal shape tag (0 none, 1 image, 2 occupancy)
//!     50    12  shape dims (u32 x 3, unused entries 0)
//!     62     4  tensor count
//!     66     4  payload length before the codec
//!     70     4  stored payload length
//!     74     -  stored payload
//!      -     4  CRC-32 of every preceding byte
//! ```
//!
//! The payload is a sequence of tensor records: role (u8: 0 latent, 1 bias,
//! 2 weight), layer (u16), element count (u32), min (f32), max (f32), then the
//! packed codes. A doh payload holds the latent followed by one bias per
//! layer; an mlp payload holds weight then bias for each layer.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::decoder::{generate_weights, DecoderMode, RandomDecoder};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TargetWeights};
use crate::quant::{check_bits, pack_codes, packed_len, unpack_codes, QuantizedLatent, QuantizedLayer, QuantizedMlp, QuantizedTensor};
use crate::signal::{PositionalEncodingSpec, SignalShape};

pub const MAGIC: &[u8; 4] = b"DOH1";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 74;
const RECORD_HEADER_LEN: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Doh,
    Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    None,
    #[default]
    Deflate,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuantizedModel {
    Doh { global_seed: u64, latent: QuantizedLatent },
    Mlp(QuantizedMlp),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedArtifact {
    pub config: ModelConfig,
    pub bits: u8,
    pub shape: Option<SignalShape>,
    pub model: QuantizedModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Latent = 0,
    Bias = 1,
    Weight = 2,
}

impl CompressedArtifact {
    pub fn kind(&self) -> ModelKind {
        match self.model {
            QuantizedModel::Doh { .. } => ModelKind::Doh,
            QuantizedModel::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match &self.model {
            QuantizedModel::Doh { latent, .. } => latent.latent.len(),
            QuantizedModel::Mlp(_) => 0,
        }
    }

    pub fn global_seed(&self) -> u64 {
        match self.model {
            QuantizedModel::Doh { global_seed, .. } => global_seed,
            QuantizedModel::Mlp(_) => 0,
        }
    }

    fn tensors(&self) -> Vec<(Role, usize, &QuantizedTensor)> {
        match &self.model {
            QuantizedModel::Doh { latent, .. } => {
                let mut out = vec![(Role::Latent, 0, &latent.latent)];
                out.extend(latent.biases.iter().enumerate().map(|(l, b)| (Role::Bias, l, b)));
                out
            }
            QuantizedModel::Mlp(mlp) => mlp
                .layers
                .iter()
                .enumerate()
                .flat_map(|(l, q)| [(Role::Weight, l, &q.weight), (Role::Bias, l, &q.bias)])
                .collect(),
        }
    }

    /// Number of stored scalars.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Checks tensor shapes and bit widths against the architecture.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        check_bits(self.bits)?;
        if let Some(shape) = self.shape {
            if shape.in_dim() != self.config.in_dim || shape.out_dim() != self.config.out_dim {
                return Err(Error::invalid("signal shape does not match model dims"));
            }
        }
        let shapes = self.config.layer_shapes();
        let expected: Vec<(Role, usize, usize)> = match &self.model {
            QuantizedModel::Doh { latent, .. } => {
                if latent.latent.is_empty() {
                    return Err(Error::invalid("latent must not be empty"));
                }
                let mut e = vec![(Role::Latent, 0, latent.latent.len())];
                e.extend(shapes.iter().enumerate().map(|(l, &(o, _))| (Role::Bias, l, o)));
                e
            }
            QuantizedModel::Mlp(mlp) => {
                if mlp.layers.len() != shapes.len()
                    || mlp.layers.iter().zip(&shapes).any(|(q, &(o, i))| q.fan_out != o || q.fan_in != i)
                {
                    return Err(Error::invalid("mlp layer shapes do not match the config"));
                }
                shapes
                    .iter()
                    .enumerate()
                    .flat_map(|(l, &(o, i))| [(Role::Weight, l, o * i), (Role::Bias, l, o)])
                    .collect()
            }
        };
        let tensors = self.tensors();
        if tensors.len() != expected.len() {
            return Err(Error::invalid("tensor count does not match the config"));
        }
        for ((role, layer, t), (er, el, ec)) in tensors.iter().zip(&expected) {
            if role != er || layer != el || t.len() != *ec {
                return Err(Error::invalid(format!("tensor for layer {layer} has the wrong size")));
            }
            if t.bits() != self.bits {
                return Err(Error::invalid("all tensors must share the artifact bit width"));
            }
        }
        Ok(())
    }

    /// Dequantized target-network weights. For doh artifacts the projection
    /// matrices are regenerated from the stored seed.
    pub fn reconstruct(&self) -> Result<TargetWeights> {
        match &self.model {
            QuantizedModel::Doh { global_seed, latent } => {
                let decoder = RandomDecoder::new(&self.config, latent.latent.len(), *global_seed, DecoderMode::Streamed)?;
                generate_weights(&decoder, &latent.dequantize()?)
            }
            QuantizedModel::Mlp(mlp) => mlp.dequantize(),
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

fn encode_payload(artifact: &CompressedArtifact) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (role, layer, t) in artifact.tensors() {
        out.push(role as u8);
        let layer = u16::try_from(layer).map_err(|_| Error::invalid("more than 65535 layers"))?;
        out.extend_from_slice(&layer.to_le_bytes());
        out.extend_from_slice(&to_u32(t.len(), "tensor length")?.to_le_bytes());
        out.extend_from_slice(&t.min().to_le_bytes());
        out.extend_from_slice(&t.max().to_le_bytes());
        out.extend_from_slice(&pack_codes(t.codes(), t.bits()));
    }
    Ok(out)
}

/// Serializes an artifact. The output is a pure function of the inputs.
pub fn pack(artifact: &CompressedArtifact, codec: Codec) -> Result<Vec<u8>> {
    artifact.validate()?;
    let c = &artifact.config;
    let raw = encode_payload(artifact)?;
    let stored = entropy_stage(&raw, codec)?;

    let mut out = Vec::with_capacity(HEADER_LEN + stored.len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(match artifact.kind() {
        ModelKind::Doh => 0,
        ModelKind::Mlp => 1,
    });
    out.push(match codec {
        Codec::None => 0,
        Codec::Deflate => 1,
    });
    out.push(artifact.bits);
    for (v, what) in [(c.in_dim, "in_dim"), (c.out_dim, "out_dim"), (c.width, "width"), (c.hidden, "hidden")] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    out.extend_from_slice(&c.omega.to_le_bytes());
    match c.encoding {
        Some(pe) => {
            out.push(1);
            out.extend_from_slice(&to_u32(pe.frequencies, "frequencies")?.to_le_bytes());
        }
        None => {
            out.push(0);
            out.extend_from_slice(&0u32.to_le_bytes());
        }
    }
    out.extend_from_slice(&artifact.global_seed().to_le_bytes());
    out.extend_from_slice(&to_u32(artifact.latent_dim(), "latent dim")?.to_le_bytes());
    let (tag, dims) = match artifact.shape {
        None => (0u8, [0, 0, 0]),
        Some(SignalShape::Image { width, height }) => (1, [width, height, 0]),
        Some(SignalShape::Occupancy { nx, ny, nz }) => (2, [nx, ny, nz]),
    };
    out.push(tag);
    for d in dims {
        out.extend_from_slice(&to_u32(d, "shape dim")?.to_le_bytes());
    }
    out.extend_from_slice(&to_u32(artifact.tensors().len(), "tensor count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(raw.len(), "payload length")?.to_le_bytes());
    out.extend_from_slice(&to_u32(stored.len(), "payload length")?.to_le_bytes());
    debug_assert_eq!(out.len(), HEADER_LEN);
    out.extend_from_slice(&stored);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Header fields, readable without decoding the payload.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContainerHeader {
    pub kind: ModelKind,
    pub codec: Codec,
    pub bits: u8,
    pub config: ModelConfig,
    pub global_seed: u64,
    pub latent_dim: usize,
    pub shape: Option<SignalShape>,
    pub tensor_count: usize,
    pub raw_payload_len: usize,
    pub stored_payload_len: usize,
}

fn read_header(c: &mut Cursor) -> Result<ContainerHeader> {
    if c.take(4)? != MAGIC {
        return Err(Error::corrupt("bad magic, not a DOH1 container"));
    }
    let version = c.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::corrupt(format!("unsupported container version {version}")));
    }
    let kind = match c.u8()? {
        0 => ModelKind::Doh,
        1 => ModelKind::Mlp,
        k => return Err(Error::corrupt(format!("unknown model kind {k}"))),
    };
    let codec = match c.u8()? {
        0 => Codec::None,
        1 => Codec::Deflate,
        k => return Err(Error::corrupt(format!("unknown payload codec {k}"))),
    };
    let bits = c.u8()?;
    check_bits(bits).map_err(|e| Error::corrupt(e.to_string()))?;
    let (in_dim, out_dim, width, hidden) = (c.usize()?, c.usize()?, c.usize()?, c.usize()?);
    let omega = c.f64()?;
    let has_pe = c.u8()?;
    let freq = c.usize()?;
    let encoding = match has_pe {
        0 => None,
        1 => Some(PositionalEncodingSpec::new(freq)),
        v => return Err(Error::corrupt(format!("bad encoding flag {v}"))),
    };
    let config = ModelConfig {
        in_dim,
        out_dim,
        width,
        hidden,
        omega,
        encoding,
    };
    config.validate().map_err(|e| Error::corrupt(e.to_string()))?;
    let global_seed = c.u64()?;
    let latent_dim = c.usize()?;
    let tag = c.u8()?;
    let dims = [c.usize()?, c.usize()?, c.usize()?];
    let shape = match tag {
        0 => None,
        1 => Some(SignalShape::Image {
            width: dims[0],
            height: dims[1],
        }),
        2 => Some(SignalShape::Occupancy {
            nx: dims[0],
            ny: dims[1],
            nz: dims[2],
        }),
        t => return Err(Error::corrupt(format!("unknown shape tag {t}"))),
    };
    Ok(ContainerHeader {
        kind,
        codec,
        bits,
        config,
        global_seed,
        latent_dim,
        shape,
        tensor_count: c.usize()?,
        raw_payload_len: c.usize()?,
        stored_payload_len: c.usize()?,
    })
}

fn check_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::corrupt("container is truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::corrupt("checksum mismatch"));
    }
    Ok(body)
}

/// Reads and checksums the header without decoding tensors.
pub fn inspect(bytes: &[u8]) -> Result<ContainerHeader> {
    let body = check_crc(bytes)?;
    read_header(&mut Cursor { buf: body, pos: 0 })
}

pub fn unpack(bytes: &[u8]) -> Result<(CompressedArtifact, Codec)> {
    let body = check_crc(bytes)?;
    let mut c = Cursor { buf: body, pos: 0 };
    let h = read_header(&mut c)?;
    let stored = c.take(h.stored_payload_len)?;
    if c.pos != body.len() {
        return Err(Error::corrupt("trailing bytes after payload"));
    }
    let raw = entropy_unstage(stored, h.codec, h.raw_payload_len)?;

    let layer_count = h.config.hidden.checked_add(2).ok_or_else(|| Error::corrupt("layer count overflow"))?;
    let expected_tensors = match h.kind {
        ModelKind::Doh => layer_count.checked_add(1),
        ModelKind::Mlp => layer_count.checked_mul(2),
    };
    if expected_tensors != Some(h.tensor_count) || h.tensor_count * RECORD_HEADER_LEN > raw.len() {
        return Err(Error::corrupt("tensor count inconsistent with architecture"));
    }

    let mut p = Cursor { buf: &raw, pos: 0 };
    let mut records = Vec::with_capacity(h.tensor_count);
    for _ in 0..h.tensor_count {
        let role = p.u8()?;
        let layer = p.u16()? as usize;
        let count = p.usize()?;
        let (min, max) = (p.f32()?, p.f32()?);
        let bytes = p.take(packed_len(count, h.bits))?;
        let codes = unpack_codes(bytes, count, h.bits)?;
        records.push((role, layer, QuantizedTensor::from_parts(codes, min, max, h.bits)?));
    }
    if p.pos != raw.len() {
        return Err(Error::corrupt("trailing bytes in payload"));
    }

    let shapes = h.config.layer_shapes();
    let mut records = records.into_iter();
    let mut next = |role: Role, layer: usize| -> Result<QuantizedTensor> {
        let (r, l, t) = records.next().expect("count checked above");
        if r != role as u8 || l != layer {
            return Err(Error::corrupt(format!("unexpected tensor record (role {r}, layer {l})")));
        }
        Ok(t)
    };
    let model = match h.kind {
        ModelKind::Doh => {
            let latent = next(Role::Latent, 0)?;
            if latent.len() != h.latent_dim {
                return Err(Error::corrupt("latent length does not match header"));
            }
            let biases = (0..shapes.len()).map(|l| next(Role::Bias, l)).collect::<Result<_>>()?;
            QuantizedModel::Doh {
                global_seed: h.global_seed,
                latent: QuantizedLatent { latent, biases },
            }
        }
        ModelKind::Mlp => {
            let layers = shapes
                .iter()
                .enumerate()
                .map(|(l, &(fan_out, fan_in))| {
                    Ok(QuantizedLayer {
                        fan_out,
                        fan_in,
                        weight: next(Role::Weight, l)?,
                        bias: next(Role::Bias, l)?,
                    })
                })
                .collect::<Result<_>>()?;
            QuantizedModel::Mlp(QuantizedMlp { layers })
        }
    };
    let artifact = CompressedArtifact {
        config: h.config,
        bits: h.bits,
        shape: h.shape,
        model,
    };
    artifact.validate().map_err(|e| Error::corrupt(e.to_string()))?;
    Ok((artifact, h.codec))
}

/// Lossless payload transform.
pub fn entropy_stage(bytes: &[u8], codec: Codec) -> Result<Vec<u8>> {
    match codec {
        Codec::None => Ok(bytes.to_vec()),
        Codec::Deflate => {
            let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
            enc.write_all(bytes)?;
            Ok(enc.finish()?)
        }
    }
}

/// Inverse of [`entropy_stage`]; `expected_len` is the original length.
pub fn entropy_unstage(bytes: &[u8], codec: Codec, expected_len: usize) -> Result<Vec<u8>> {
    let out = match codec {
        Codec::None => bytes.to_vec(),
        Codec::Deflate => {
            let mut out = Vec::new();
            DeflateDecoder::new(bytes)
                .take(expected_len as u64 + 1)
                .read_to_end(&mut out)
                .map_err(|e| Error::corrupt(format!("deflate stream: {e}")))?;
            out
        }
    };
    if out.len() != expected_len {
        return Err(Error::corrupt(format!(
            "payload decodes to {} bytes, header says {expected_len}",
            out.len()
        )));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateReport {
    pub param_count: usize,
    pub bits: u8,
    /// `param_count * bits`; container overhead excluded.
    pub estimated_bits: u64,
    pub estimated_bytes: f64,
    pub memory_kb: f64,
    pub bpp: Option<f64>,
    pub raw_bytes: usize,
    pub compressed_bytes: usize,
}

pub fn rate_report(artifact: &CompressedArtifact, pixel_count: Option<usize>) -> Result<RateReport> {
    if pixel_count == Some(0) {
        return Err(Error::invalid("pixel count must be positive"));
    }
    let param_count = artifact.param_count();
    let estimated_bits = param_count as u64 * artifact.bits as u64;
    let estimated_bytes = estimated_bits as f64 / 8.0;
    Ok(RateReport {
        param_count,
        bits: artifact.bits,
        estimated_bits,
        estimated_bytes,
        memory_kb: estimated_bytes / 1000.0,
        bpp: pixel_count.map(|p| estimated_bits as f64 / p as f64),
        raw_bytes: pack(artifact, Codec::None)?.len(),
        compressed_bytes: pack(artifact, Codec::Deflate)?.len(),
    })
}

/// Bits per pixel of the headline estimate for `params` scalars at `bits`.
pub fn estimated_bpp(params: usize, bits: u8, pixel_count: usize) -> Result<f64> {
    if pixel_count == 0 {
        return Err(Error::invalid("pixel count must be positive"));
    }
    Ok(params as f64 * bits as f64 / pixel_count as f64)
}
