//! Compression of signals as sinusoidal implicit neural representations whose
//! weights are generated by a fixed random linear hypernetwork from a small
//! latent code.
//!
//! The pipeline: [`signal`] turns an image or occupancy grid into coordinate
//! samples, [`train`] fits either a latent code ([`decoder`]) or a plain
//! network ([`model`]), [`quant`] quantizes the result and [`container`]
//! writes it to bytes.

pub mod container;
pub mod decoder;
pub mod error;
pub mod model;
pub mod numerics;
pub mod quant;
pub mod signal;
pub mod train;

pub use container::{pack, rate_report, unpack, Codec, CompressedArtifact, ModelKind, QuantizedModel, RateReport};
pub use decoder::{doh_param_count, generate_weights, init_latent, pullback, DecoderMode, LatentState, RandomDecoder};
pub use error::{Error, Result};
pub use model::{backward, forward, init_mlp, param_count, render, ModelConfig, TargetWeights};
pub use numerics::{DenseMatrix, RngStream};
pub use quant::{dequantize, quantize, QuantizedTensor};
pub use signal::{CoordinateDataset, ImageSignal, OccupancySignal, PositionalEncodingSpec, Signal, SignalShape};
pub use train::{train_doh, train_mlp, train_qat, Params, TrainConfig, TrainReport};
