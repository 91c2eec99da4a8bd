//! Pipelines behind the `doh` command: training checkpoints, compression to
//! DOH1 containers, rendering, evaluation and rate-distortion sweeps.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use doh_core::container::{self, rate_report, Codec, CompressedArtifact, ModelKind, QuantizedModel, RateReport};
use doh_core::decoder::{generate_weights, init_latent, DecoderMode, RandomDecoder};
use doh_core::model::{init_mlp, render, ModelConfig, TargetWeights};
use doh_core::numerics::RngStream;
use doh_core::quant::{quantize_model_doh, quantize_model_mlp};
use doh_core::signal::{grid_coords, CoordinateDataset, Signal, SignalShape};
use doh_core::train::{evaluate_weights, train_doh, train_mlp, EvalRecord, Params, TrainConfig, TrainReport};

/// Projection matrices are held in memory when they fit in this many bytes.
pub const MATERIALIZE_BUDGET: usize = 1 << 30;

/// Share of the target network's weight count, counted without positional
/// encoding, used as the default latent dimension.
pub const DEFAULT_LATENT_FRACTION: f64 = 0.3;

/// A full-precision trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub shape: SignalShape,
    /// Decoder seed for doh, initialization seed for mlp.
    pub seed: u64,
    pub params: Params,
}

impl Checkpoint {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))?;
        ckpt.check()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    fn check(&self) -> anyhow::Result<()> {
        self.config.validate()?;
        if self.shape.in_dim() != self.config.in_dim || self.shape.out_dim() != self.config.out_dim {
            bail!("checkpoint signal shape does not match the model");
        }
        match (&self.kind, &self.params) {
            (ModelKind::Doh, Params::Latent(l)) => {
                let d = RandomDecoder::new(&self.config, l.z.len(), self.seed, DecoderMode::Streamed)?;
                generate_weights(&d, l)?;
            }
            (ModelKind::Mlp, Params::Weights(w)) => w.check_shapes(&self.config)?,
            _ => bail!("checkpoint kind does not match its parameters"),
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        match &self.params {
            Params::Latent(l) => l.z.len(),
            Params::Weights(_) => 0,
        }
    }

    /// Full-precision target-network weights.
    pub fn weights(&self) -> anyhow::Result<TargetWeights> {
        match &self.params {
            Params::Latent(l) => {
                let d = RandomDecoder::new(&self.config, l.z.len(), self.seed, DecoderMode::Streamed)?;
                Ok(generate_weights(&d, l)?)
            }
            Params::Weights(w) => Ok(w.clone()),
        }
    }

    /// Post-training quantization at `bits`.
    pub fn quantize(&self, bits: u8) -> anyhow::Result<CompressedArtifact> {
        let model = match &self.params {
            Params::Latent(l) => QuantizedModel::Doh {
                global_seed: self.seed,
                latent: quantize_model_doh(l, bits)?,
            },
            Params::Weights(w) => QuantizedModel::Mlp(quantize_model_mlp(w, bits)?),
        };
        Ok(CompressedArtifact {
            config: self.config.clone(),
            bits,
            shape: Some(self.shape),
            model,
        })
    }
}

/// Materialized when the projection fits in [`MATERIALIZE_BUDGET`].
pub fn decoder_mode_for(config: &ModelConfig, latent_dim: usize) -> DecoderMode {
    let bytes = config.weight_count().saturating_mul(latent_dim).saturating_mul(8);
    if bytes <= MATERIALIZE_BUDGET {
        DecoderMode::Materialized
    } else {
        DecoderMode::Streamed
    }
}

pub fn default_latent_dim(config: &ModelConfig) -> usize {
    let plain = ModelConfig {
        encoding: None,
        ..config.clone()
    };
    ((plain.weight_count() as f64 * DEFAULT_LATENT_FRACTION).round() as usize).max(1)
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub kind: ModelKind,
    pub width: usize,
    pub hidden: usize,
    /// Positional-encoding frequencies; 0 disables the encoding.
    pub pe: usize,
    pub omega: f64,
    pub latent_dim: Option<usize>,
    pub seed: u64,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub gamma: Option<f64>,
    pub eval_every: Option<usize>,
    pub qat_bits: Option<u8>,
    pub decoder: Option<DecoderMode>,
    pub verbose: bool,
}

impl TrainOptions {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            width: 40,
            hidden: 9,
            pe: 0,
            omega: doh_core::model::DEFAULT_OMEGA,
            latent_dim: None,
            seed: 0,
            epochs: None,
            batch: None,
            lr: None,
            gamma: None,
            eval_every: None,
            qat_bits: None,
            decoder: None,
            verbose: false,
        }
    }

    pub fn model_config(&self, shape: SignalShape) -> ModelConfig {
        let config = ModelConfig::new(shape.in_dim(), shape.out_dim(), self.width, self.hidden).with_omega(self.omega);
        if self.pe > 0 {
            config.with_encoding(self.pe)
        } else {
            config
        }
    }

    /// Defaults for the signal type and model kind, with overrides applied.
    pub fn train_config(&self, shape: SignalShape) -> TrainConfig {
        let base = match (shape, self.kind) {
            (SignalShape::Image { .. }, ModelKind::Mlp) => TrainConfig::image_mlp(),
            (SignalShape::Image { .. }, ModelKind::Doh) => TrainConfig::image_doh(),
            (SignalShape::Occupancy { .. }, ModelKind::Mlp) => TrainConfig::occupancy_mlp(),
            (SignalShape::Occupancy { .. }, ModelKind::Doh) => TrainConfig::occupancy_doh(),
        };
        TrainConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch.unwrap_or(base.batch_size),
            lr: self.lr.unwrap_or(base.lr),
            lr_gamma: self.gamma.unwrap_or(base.lr_gamma),
            eval_every: self.eval_every.unwrap_or(base.eval_every),
            qat_bits: self.qat_bits,
            seed: self.seed,
            verbose: self.verbose,
            ..base
        }
    }
}

pub fn train(signal: &Signal, opts: &TrainOptions) -> anyhow::Result<(Checkpoint, TrainReport)> {
    let shape = signal.shape();
    let config = opts.model_config(shape);
    config.validate()?;
    let tc = opts.train_config(shape);
    let data = CoordinateDataset::from_signal(signal);
    let params = match opts.kind {
        ModelKind::Doh => {
            let n = opts.latent_dim.unwrap_or_else(|| default_latent_dim(&config));
            let mode = opts.decoder.unwrap_or_else(|| decoder_mode_for(&config, n));
            let decoder = RandomDecoder::new(&config, n, opts.seed, mode)?;
            let (latent, report) = train_doh(&decoder, &config, &init_latent(&decoder), &data, &tc)?;
            (Params::Latent(latent), report)
        }
        ModelKind::Mlp => {
            let w0 = init_mlp(&config, RngStream::new(opts.seed))?;
            let (w, report) = train_mlp(&config, &w0, &data, &tc)?;
            (Params::Weights(w), report)
        }
    };
    let ckpt = Checkpoint {
        kind: opts.kind,
        config,
        shape,
        seed: opts.seed,
        params: params.0,
    };
    Ok((ckpt, params.1))
}

/// Quantizes and serializes a checkpoint.
pub fn compress(ckpt: &Checkpoint, bits: u8, codec: Codec) -> anyhow::Result<Vec<u8>> {
    Ok(container::pack(&ckpt.quantize(bits)?, codec)?)
}

/// Decodes a container and renders its signal grid. Predictions are raw
/// network outputs, sample-major.
pub fn decompress(bytes: &[u8]) -> anyhow::Result<(CompressedArtifact, SignalShape, Vec<f64>)> {
    let (artifact, _) = container::unpack(bytes)?;
    let shape = artifact
        .shape
        .ok_or_else(|| anyhow!("container carries no signal shape, cannot render"))?;
    let weights = artifact.reconstruct()?;
    let preds = render(&weights, &artifact.config, &grid_coords(&shape.grid()))?;
    Ok((artifact, shape, preds))
}

/// Little-endian f64 dump of raw predictions.
pub fn predictions_to_bytes(preds: &[f64]) -> Vec<u8> {
    preds.iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub name: &'static str,
    pub value: f64,
}

/// PSNR for two images, IoU for two occupancy grids.
pub fn compare(rendered: &Signal, reference: &Signal) -> anyhow::Result<Metric> {
    match (rendered, reference) {
        (Signal::Image(a), Signal::Image(b)) => Ok(Metric {
            name: "psnr",
            value: doh_core::signal::psnr(a, b)?,
        }),
        (Signal::Occupancy(a), Signal::Occupancy(b)) => Ok(Metric {
            name: "iou",
            value: doh_core::signal::iou_signals(a, b)?,
        }),
        _ => bail!("cannot compare an image with an occupancy grid"),
    }
}

/// JSON number, or a string sentinel ("inf", "-inf", "nan") when not finite.
pub fn json_number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn record_json(r: &EvalRecord) -> Value {
    json!({"epoch": r.epoch, "loss": json_number(r.loss), "metric": json_number(r.metric)})
}

pub fn report_json(report: &TrainReport, metric_name: &str) -> Value {
    json!({
        "metric": metric_name,
        "best_epoch": report.best_epoch,
        "best_metric": json_number(report.best_metric),
        "history": report.history.iter().map(record_json).collect::<Vec<_>>(),
    })
}

pub fn rate_json(r: &RateReport) -> Value {
    json!({
        "param_count": r.param_count,
        "bits": r.bits,
        "estimated_bits": r.estimated_bits,
        "estimated_bytes": r.estimated_bytes,
        "memory_kb": r.memory_kb,
        "bpp": r.bpp.map(json_number),
        "raw_bytes": r.raw_bytes,
        "compressed_bytes": r.compressed_bytes,
    })
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub kinds: Vec<ModelKind>,
    pub latent_dims: Vec<usize>,
    pub bits: Vec<u8>,
    pub options: TrainOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub kind: ModelKind,
    pub width: usize,
    pub hidden: usize,
    /// Latent dimension of the grid point. mlp rows repeat one trained model
    /// for every `n`.
    pub n: usize,
    pub bits: u8,
    pub params: Option<usize>,
    pub est_bits: Option<u64>,
    pub bpp: Option<f64>,
    pub metric: Option<f64>,
    pub status: String,
}

impl SweepSpec {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.kinds.is_empty() || self.latent_dims.is_empty() || self.bits.is_empty() {
            bail!("sweep lists must be nonempty");
        }
        for &b in &self.bits {
            doh_core::quant::check_bits(b)?;
        }
        if self.latent_dims.contains(&0) {
            bail!("latent dimensions must be positive");
        }
        Ok(())
    }
}

/// Trains one model per (kind, n), with mlp trained once, then evaluates
/// every bit width by post-training quantization of that run. Rows are
/// sorted by (kind, n, bits).
pub fn sweep(signal: &Signal, spec: &SweepSpec) -> anyhow::Result<Vec<SweepRow>> {
    spec.validate()?;
    let shape = signal.shape();
    let data = CoordinateDataset::from_signal(signal);
    let mut dims = spec.latent_dims.clone();
    dims.sort_unstable();
    dims.dedup();
    let mut bits = spec.bits.clone();
    bits.sort_unstable();
    bits.dedup();
    let mut kinds = spec.kinds.clone();
    kinds.sort_by_key(|k| kind_name(*k));
    kinds.dedup();

    let mut jobs: Vec<(ModelKind, Option<usize>)> = Vec::new();
    for &kind in &kinds {
        match kind {
            ModelKind::Doh => jobs.extend(dims.iter().map(|&n| (kind, Some(n)))),
            ModelKind::Mlp => jobs.push((kind, None)),
        }
    }
    let runs: Vec<(ModelKind, Option<usize>, anyhow::Result<Checkpoint>)> = jobs
        .par_iter()
        .map(|&(kind, n)| {
            let opts = TrainOptions {
                kind,
                latent_dim: n,
                ..spec.options.clone()
            };
            (kind, n, train(signal, &opts).map(|(c, _)| c))
        })
        .collect();

    let mut rows = Vec::new();
    for (kind, n, run) in &runs {
        let ns: Vec<usize> = match n {
            Some(n) => vec![*n],
            None => dims.clone(),
        };
        for &b in &bits {
            let point = run
                .as_ref()
                .map_err(|e| anyhow!("{e:#}"))
                .and_then(|ckpt| evaluate_point(ckpt, b, &data, shape));
            for &n in &ns {
                let mut row = SweepRow {
                    kind: *kind,
                    width: spec.options.width,
                    hidden: spec.options.hidden,
                    n,
                    bits: b,
                    params: None,
                    est_bits: None,
                    bpp: None,
                    metric: None,
                    status: "ok".into(),
                };
                match &point {
                    Ok((r, metric)) => {
                        row.params = Some(r.param_count);
                        row.est_bits = Some(r.estimated_bits);
                        row.bpp = r.bpp;
                        row.metric = Some(*metric);
                    }
                    Err(e) => row.status = format!("error: {e:#}"),
                }
                rows.push(row);
            }
        }
    }
    rows.sort_by(|a, b| (kind_name(a.kind), a.n, a.bits).cmp(&(kind_name(b.kind), b.n, b.bits)));
    Ok(rows)
}

fn evaluate_point(
    ckpt: &Checkpoint,
    bits: u8,
    data: &CoordinateDataset,
    shape: SignalShape,
) -> anyhow::Result<(RateReport, f64)> {
    let artifact = ckpt.quantize(bits)?;
    let report = rate_report(&artifact, shape.pixel_count())?;
    let metric = evaluate_weights(&artifact.reconstruct()?, &ckpt.config, data)?.metric;
    Ok((report, metric))
}

pub fn kind_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Doh => "doh",
        ModelKind::Mlp => "mlp",
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], out: impl std::io::Write) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use doh_core::signal::ImageSignal;

    fn tiny_image() -> Signal {
        Signal::Image(
            ImageSignal::from_fn(6, 5, |x, y| [x as f64 / 5.0, y as f64 / 4.0, 0.3]).unwrap(),
        )
    }

    fn tiny_opts(kind: ModelKind) -> TrainOptions {
        TrainOptions {
            width: 6,
            hidden: 1,
            latent_dim: Some(10),
            epochs: Some(3),
            batch: Some(8),
            ..TrainOptions::new(kind)
        }
    }

    #[test]
    fn json_sentinels() {
        assert_eq!(json_number(f64::INFINITY), json!("inf"));
        assert_eq!(json_number(f64::NEG_INFINITY), json!("-inf"));
        assert_eq!(json_number(2.5), json!(2.5));
    }

    #[test]
    fn defaults_follow_signal_and_kind() {
        let img = SignalShape::Image { width: 4, height: 4 };
        let occ = SignalShape::Occupancy { nx: 2, ny: 2, nz: 2 };
        let doh = TrainOptions::new(ModelKind::Doh);
        let mlp = TrainOptions::new(ModelKind::Mlp);
        assert_eq!(mlp.train_config(img).lr, 2e-4);
        assert_eq!(doh.train_config(img).lr, 1e-6);
        assert_eq!(doh.train_config(img).batch_size, 1024);
        assert_eq!(doh.train_config(img).lr_gamma, 0.999);
        assert_eq!(mlp.train_config(occ).batch_size, 20_000);
        assert_eq!(mlp.train_config(occ).epochs, 250);
        assert_eq!(default_latent_dim(&ModelConfig::new(2, 3, 40, 9)), 4380);
        assert_eq!(default_latent_dim(&ModelConfig::new(2, 3, 40, 9).with_encoding(10)), 4380);
    }

    #[test]
    fn checkpoint_json_round_trip_is_exact() {
        for kind in [ModelKind::Doh, ModelKind::Mlp] {
            let (ckpt, _) = train(&tiny_image(), &tiny_opts(kind)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.json");
            ckpt.save(&path).unwrap();
            assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
        }
    }

    #[test]
    fn compress_is_deterministic_and_decompress_matches_direct_path() {
        let (ckpt, _) = train(&tiny_image(), &tiny_opts(ModelKind::Doh)).unwrap();
        let a = compress(&ckpt, 8, Codec::Deflate).unwrap();
        assert_eq!(a, compress(&ckpt, 8, Codec::Deflate).unwrap());
        let (_, shape, preds) = decompress(&a).unwrap();
        assert_eq!(shape, ckpt.shape);
        let direct = ckpt.quantize(8).unwrap().reconstruct().unwrap();
        let expected = render(&direct, &ckpt.config, &grid_coords(&shape.grid())).unwrap();
        assert_eq!(preds, expected);
    }

    #[test]
    fn sweep_rows_cover_the_grid() {
        let spec = SweepSpec {
            kinds: vec![ModelKind::Mlp, ModelKind::Doh],
            latent_dims: vec![12, 8],
            bits: vec![16, 4, 8],
            options: tiny_opts(ModelKind::Doh),
        };
        let rows = sweep(&tiny_image(), &spec).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 3);
        assert!(rows.iter().all(|r| r.status == "ok"));
        let keys: Vec<_> = rows.iter().map(|r| (kind_name(r.kind), r.n, r.bits)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        for group in rows.chunks(3) {
            assert!(group.windows(2).all(|p| p[0].est_bits < p[1].est_bits));
        }
        let mut csv = Vec::new();
        write_sweep_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("kind,width,hidden,n,bits,params,est_bits,bpp,metric,status\n"));
        assert_eq!(text.lines().count(), 13);
    }

    #[test]
    fn sweep_records_failures() {
        let mut opts = tiny_opts(ModelKind::Doh);
        opts.lr = Some(1e200);
        opts.epochs = Some(4);
        let spec = SweepSpec {
            kinds: vec![ModelKind::Doh],
            latent_dims: vec![8],
            bits: vec![8],
            options: opts,
        };
        let rows = sweep(&tiny_image(), &spec).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].status.starts_with("error"), "{}", rows[0].status);
    }
}
