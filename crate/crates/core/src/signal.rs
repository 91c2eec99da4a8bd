//! Target signals, coordinate datasets, positional encoding, and fidelity
//! metrics.
//!
//! Coordinates are normalized per axis to `[-1, 1]` with endpoints included.
//! Grids are enumerated with the first axis fastest, which for images is the
//! usual row-major pixel order.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_CHANNELS: usize = 3;

/// RGB image with interleaved channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSignal {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ImageSignal {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be nonzero"));
        }
        if values.len() != width * height * IMAGE_CHANNELS {
            return Err(Error::invalid(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * IMAGE_CHANNELS,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Builds an image from unconstrained model output, clamping into `[0, 1]`.
    pub fn from_predictions(width: usize, height: usize, predictions: &[f64]) -> Result<Self> {
        let values = predictions
            .iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(width, height, values)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                values.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Crops a `w x h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid("crop window exceeds image bounds"));
        }
        Self::from_fn(w, h, |x, y| {
            let i = ((y0 + y) * self.width + x0 + x) * 3;
            [self.values[i], self.values[i + 1], self.values[i + 2]]
        })
    }

    fn to_rgb8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Binary voxel occupancy, x fastest then y then z.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancySignal {
    dims: [usize; 3],
    values: Vec<u8>,
}

impl OccupancySignal {
    pub fn new(dims: [usize; 3], values: Vec<u8>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("occupancy dims {dims:?} contain zero")));
        }
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::invalid("occupancy value count does not match dims"));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::invalid("occupancy values must be 0 or 1"));
        }
        Ok(Self { dims, values })
    }

    /// Thresholds real-valued predictions: a voxel is occupied when its value
    /// is at least `threshold`.
    pub fn from_predictions(dims: [usize; 3], predictions: &[f64], threshold: f64) -> Result<Self> {
        Self::new(
            dims,
            predictions.iter().map(|&v| u8::from(v >= threshold)).collect(),
        )
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn occupied(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Signal {
    Image(ImageSignal),
    Occupancy(OccupancySignal),
}

/// Grid extent of a signal, enough to rebuild its coordinate lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SignalShape {
    Image { width: usize, height: usize },
    Occupancy { nx: usize, ny: usize, nz: usize },
}

impl SignalShape {
    pub fn grid(&self) -> Vec<usize> {
        match *self {
            SignalShape::Image { width, height } => vec![width, height],
            SignalShape::Occupancy { nx, ny, nz } => vec![nx, ny, nz],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.grid().len()
    }

    pub fn out_dim(&self) -> usize {
        match self {
            SignalShape::Image { .. } => IMAGE_CHANNELS,
            SignalShape::Occupancy { .. } => 1,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.grid().iter().product()
    }

    /// Pixel count for images; `None` for volumes.
    pub fn pixel_count(&self) -> Option<usize> {
        match *self {
            SignalShape::Image { width, height } => Some(width * height),
            SignalShape::Occupancy { .. } => None,
        }
    }
}

impl Signal {
    pub fn shape(&self) -> SignalShape {
        match self {
            Signal::Image(img) => SignalShape::Image {
                width: img.width,
                height: img.height,
            },
            Signal::Occupancy(occ) => SignalShape::Occupancy {
                nx: occ.dims[0],
                ny: occ.dims[1],
                nz: occ.dims[2],
            },
        }
    }

    /// Rebuilds a signal of this shape from raw model output.
    pub fn from_predictions(shape: SignalShape, predictions: &[f64]) -> Result<Self> {
        match shape {
            SignalShape::Image { width, height } => Ok(Signal::Image(ImageSignal::from_predictions(
                width,
                height,
                predictions,
            )?)),
            SignalShape::Occupancy { nx, ny, nz } => Ok(Signal::Occupancy(
                OccupancySignal::from_predictions([nx, ny, nz], predictions, 0.5)?,
            )),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match extension(path).as_deref() {
            Some("occ") => Ok(Signal::Occupancy(load_occupancy(path)?)),
            _ => Ok(Signal::Image(load_image(path)?)),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            Signal::Image(img) => save_image(img, path),
            Signal::Occupancy(occ) => save_occupancy(occ, path),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncodingSpec {
    pub frequencies: usize,
}

impl Default for PositionalEncodingSpec {
    fn default() -> Self {
        Self { frequencies: 10 }
    }
}

impl PositionalEncodingSpec {
    pub fn new(frequencies: usize) -> Self {
        Self { frequencies }
    }

    pub fn encoded_dim(&self, in_dim: usize) -> usize {
        in_dim * (1 + 2 * self.frequencies)
    }
}

/// Samples along one axis: `i -> -1 + 2i/(n-1)`, or `[0]` when `n == 1`.
pub fn axis_coords(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    let denom = (n - 1) as f64;
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / denom).collect()
}

/// Flattened coordinates of a grid, first axis fastest. Each point occupies
/// `shape.len()` consecutive entries.
pub fn grid_coords(shape: &[usize]) -> Vec<f64> {
    let axes: Vec<Vec<f64>> = shape.iter().map(|&n| axis_coords(n)).collect();
    let total: usize = shape.iter().product();
    let d = shape.len();
    let mut out = Vec::with_capacity(total * d);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        for (axis, &i) in idx.iter().enumerate() {
            out.push(axes[axis][i]);
        }
        for axis in 0..d {
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    out
}

/// Fourier-feature lifting. Output is the raw coordinate followed, for each
/// component in turn, by `sin(2^k pi c), cos(2^k pi c)` for `k = 0..F`.
pub fn encode(coord: &[f64], spec: &PositionalEncodingSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.encoded_dim(coord.len()));
    encode_into(coord, spec.frequencies, &mut out);
    out
}

pub(crate) fn encode_into(coord: &[f64], frequencies: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(coord);
    for &c in coord {
        let mut scale = PI;
        for _ in 0..frequencies {
            let (s, co) = (scale * c).sin_cos();
            out.push(s);
            out.push(co);
            scale *= 2.0;
        }
    }
}

/// Coordinates and targets for fitting a signal, sample-major.
#[derive(Clone, Debug)]
pub struct CoordinateDataset {
    shape: SignalShape,
    coords: Vec<f64>,
    targets: Vec<f64>,
}

impl CoordinateDataset {
    pub fn from_signal(signal: &Signal) -> Self {
        let shape = signal.shape();
        let coords = grid_coords(&shape.grid());
        let targets = match signal {
            Signal::Image(img) => img.values.clone(),
            Signal::Occupancy(occ) => occ.values.iter().map(|&v| v as f64).collect(),
        };
        Self {
            shape,
            coords,
            targets,
        }
    }

    pub fn shape(&self) -> SignalShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.sample_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn in_dim(&self) -> usize {
        self.shape.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.shape.out_dim()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn coord(&self, i: usize) -> &[f64] {
        let d = self.in_dim();
        &self.coords[i * d..(i + 1) * d]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        let o = self.out_dim();
        &self.targets[i * o..(i + 1) * o]
    }

    /// Fidelity of full-grid predictions: PSNR for images (after clamping),
    /// IoU at 0.5 for occupancy. Higher is better for both.
    pub fn metric(&self, predictions: &[f64]) -> Result<f64> {
        if predictions.len() != self.targets.len() {
            return Err(Error::invalid("prediction count does not match dataset"));
        }
        match self.shape {
            SignalShape::Image { .. } => {
                let mse = self
                    .targets
                    .iter()
                    .zip(predictions)
                    .map(|(t, p)| {
                        let p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
                        (t - p) * (t - p)
                    })
                    .sum::<f64>()
                    / self.targets.len() as f64;
                Ok(psnr_from_mse(mse))
            }
            SignalShape::Occupancy { .. } => Ok(iou_slices(predictions, &self.targets, 0.5)),
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self.shape {
            SignalShape::Image { .. } => "psnr",
            SignalShape::Occupancy { .. } => "iou",
        }
    }
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR in dB with peak 1.0. Identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageSignal, b: &ImageSignal) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::invalid(format!(
            "psnr: shape mismatch {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mse = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.values.len() as f64;
    Ok(psnr_from_mse(mse))
}

fn iou_slices(pred: &[f64], gt: &[f64], threshold: f64) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let p = p >= threshold;
        let g = g >= 0.5;
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Intersection over union of thresholded predictions against ground truth.
/// An empty union counts as perfect agreement.
pub fn iou(pred: &[f64], gt: &OccupancySignal, threshold: f64) -> Result<f64> {
    if pred.len() != gt.values.len() {
        return Err(Error::invalid(format!(
            "iou: {} predictions for {} voxels",
            pred.len(),
            gt.values.len()
        )));
    }
    let gt: Vec<f64> = gt.values.iter().map(|&v| v as f64).collect();
    Ok(iou_slices(pred, &gt, threshold))
}

pub fn iou_signals(pred: &OccupancySignal, gt: &OccupancySignal) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::invalid(format!(
            "iou: dims {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    let p: Vec<f64> = pred.values.iter().map(|&v| v as f64).collect();
    iou(&p, gt, 0.5)
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

fn image_err(e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other)),
    }
}

/// Loads an 8-bit PNG or binary PPM, mapping each sample to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageSignal> {
    let img = image::open(path.as_ref()).map_err(image_err)?.to_rgb8();
    let (w, h) = img.dimensions();
    let values = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    ImageSignal::new(w as usize, h as usize, values)
}

/// Saves as PNG, or as binary PPM (P6, maxval 255) for `.ppm` paths.
pub fn save_image(signal: &ImageSignal, path: impl AsRef<Path>) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;

    let path = path.as_ref();
    let raw = signal.to_rgb8();
    let (w, h) = (signal.width as u32, signal.height as u32);
    let out = BufWriter::new(File::create(path)?);
    match extension(path).as_deref() {
        Some("ppm") | Some("pnm") => PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&raw, w, h, image::ExtendedColorType::Rgb8)
            .map_err(image_err),
        Some("png") => image::codecs::png::PngEncoder::new(out)
            .write_image(&raw, w, h, image::ExtendedColorType::Rgb8)
            .map_err(image_err),
        other => Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::Unsupported,
            format!("unsupported image extension {other:?}"),
        ))),
    }
}

const OCC_MAGIC: &[u8; 4] = b"OCC1";

/// Writes the OCC1 format: magic, three little-endian u32 dims, then the
/// voxels bit-packed x fastest, least significant bit first.
pub fn write_occupancy(signal: &OccupancySignal, mut w: impl Write) -> Result<()> {
    w.write_all(OCC_MAGIC)?;
    for d in signal.dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("occupancy dim exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut bytes = vec![0u8; signal.values.len().div_ceil(8)];
    for (i, &v) in signal.values.iter().enumerate() {
        bytes[i / 8] |= v << (i % 8);
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_occupancy(mut r: impl Read) -> Result<OccupancySignal> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != OCC_MAGIC {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "missing OCC1 magic",
        )));
    }
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        let b = &header[4 + 4 * k..8 + 4 * k];
        *d = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("occupancy header dims {dims:?} contain zero")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::invalid("occupancy dims overflow"))?;
    let mut bytes = vec![0u8; count.div_ceil(8)];
    r.read_exact(&mut bytes)?;
    let values = (0..count).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect();
    OccupancySignal::new(dims, values)
}

pub fn load_occupancy(path: impl AsRef<Path>) -> Result<OccupancySignal> {
    read_occupancy(BufReader::new(File::open(path)?))
}

pub fn save_occupancy(signal: &OccupancySignal, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_occupancy(signal, &mut w)?;
    w.flush()?;
    Ok(())
}
