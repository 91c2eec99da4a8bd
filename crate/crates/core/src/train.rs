//! Adam training of D'OH latents and plain SIREN weights.
//!
//! An epoch is one shuffled pass over every coordinate, the last batch
//! possibly short. The learning rate decays by `lr_gamma` after each epoch.
//! The model is evaluated on the full grid at epoch 0 (the initialization),
//! every `eval_every` epochs, and after the final epoch; the parameters with
//! the highest metric are returned.

use serde::{Deserialize, Serialize};

use crate::decoder::{generate_weights, pullback, LatentState, RandomDecoder};
use crate::error::{Error, Result};
use crate::model::{backward, render, ModelConfig, TargetWeights};
use crate::numerics::RngStream;
use crate::quant::{check_bits, fake_quantize};
use crate::signal::CoordinateDataset;

/// Trainable parameters of either model kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Params {
    Latent(LatentState),
    Weights(TargetWeights),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub lr_gamma: f64,
    pub eval_every: usize,
    /// Train through a fake quantizer at this width (straight-through
    /// gradients).
    pub qat_bits: Option<u8>,
    pub seed: u64,
    /// Print progress lines to stderr at each evaluation.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 1024,
            lr: 2e-4,
            adam_betas: (0.99, 0.999),
            adam_eps: 1e-8,
            lr_gamma: 0.999,
            eval_every: 10,
            qat_bits: None,
            seed: 0,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn image_mlp() -> Self {
        Self::default()
    }

    pub fn image_doh() -> Self {
        Self {
            lr: 1e-6,
            ..Self::default()
        }
    }

    pub fn occupancy_mlp() -> Self {
        Self {
            epochs: 250,
            batch_size: 20_000,
            lr: 1e-4,
            ..Self::default()
        }
    }

    pub fn occupancy_doh() -> Self {
        Self {
            lr: 1e-6,
            ..Self::occupancy_mlp()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.adam_betas;
        if !(0.0 < b1 && b1 < 1.0 && 0.0 < b2 && b2 < 1.0) {
            return Err(Error::invalid("Adam betas must lie in (0, 1)"));
        }
        // lr = 0 is allowed: it freezes the parameters.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be nonnegative, got {}", self.lr)));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::invalid("lr_gamma must lie in (0, 1]"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        if let Some(b) = self.qat_bits {
            check_bits(b)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    /// Mean squared error of the raw predictions over the full grid.
    pub loss: f64,
    /// PSNR in dB for images, IoU for occupancy.
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EvalRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected Adam, in the same arithmetic order as PyTorch's reference
/// implementation.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::invalid("Adam parameter, gradient and state lengths differ"));
    }
    let (b1, b2) = betas;
    state.t += 1;
    let t = state.t.min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2_sqrt = (1.0 - b2.powi(t)).sqrt();
    let step = lr / bc1;
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g;
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g;
        let denom = state.v[k].sqrt() / bc2_sqrt + eps;
        params[k] -= step * (state.m[k] / denom);
    }
    Ok(())
}

/// Full-grid loss and metric of a fixed set of weights.
pub fn evaluate_weights(weights: &TargetWeights, config: &ModelConfig, data: &CoordinateDataset) -> Result<EvalRecord> {
    let preds = render(weights, config, data.coords())?;
    let loss = preds
        .iter()
        .zip(data.targets())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64;
    Ok(EvalRecord {
        epoch: 0,
        loss,
        metric: data.metric(&preds)?,
    })
}

/// Fake-quantizes each `[start, end)` segment of `flat` as its own tensor.
fn fake_quantize_segments(flat: &[f64], segments: &[(usize, usize)], bits: u8) -> Result<Vec<f64>> {
    let mut out = flat.to_vec();
    for &(a, b) in segments {
        if b > a {
            out[a..b].copy_from_slice(&fake_quantize(&flat[a..b], bits)?);
        }
    }
    Ok(out)
}

/// What the generic loop needs from a model family, over a flat parameter
/// vector.
trait Objective {
    /// Tensor boundaries inside the flat vector, for fake quantization.
    fn segments(&self) -> &[(usize, usize)];
    fn weights(&self, flat: &[f64]) -> Result<TargetWeights>;
    fn grad(&self, flat: &[f64], coords: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)>;
    fn snapshot(&self, flat: &[f64]) -> Result<Params>;
}

struct DohObjective<'a> {
    decoder: &'a RandomDecoder,
    config: &'a ModelConfig,
    template: LatentState,
    segments: Vec<(usize, usize)>,
}

impl<'a> DohObjective<'a> {
    fn new(decoder: &'a RandomDecoder, config: &'a ModelConfig, template: &LatentState) -> Self {
        let mut segments = vec![(0, template.z.len())];
        let mut at = template.z.len();
        for b in &template.biases {
            segments.push((at, at + b.len()));
            at += b.len();
        }
        Self {
            decoder,
            config,
            template: template.clone(),
            segments,
        }
    }

    fn latent(&self, flat: &[f64]) -> Result<LatentState> {
        LatentState::from_flat_like(&self.template, flat)
    }
}

impl Objective for DohObjective<'_> {
    fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    fn weights(&self, flat: &[f64]) -> Result<TargetWeights> {
        generate_weights(self.decoder, &self.latent(flat)?)
    }

    fn grad(&self, flat: &[f64], coords: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (loss, grads) = backward(&self.weights(flat)?, self.config, coords, targets)?;
        let (gz, gb) = pullback(self.decoder, &grads)?;
        Ok((loss, LatentState { z: gz, biases: gb }.flatten()))
    }

    fn snapshot(&self, flat: &[f64]) -> Result<Params> {
        Ok(Params::Latent(self.latent(flat)?))
    }
}

struct MlpObjective<'a> {
    config: &'a ModelConfig,
    segments: Vec<(usize, usize)>,
}

impl<'a> MlpObjective<'a> {
    fn new(config: &'a ModelConfig) -> Self {
        let mut segments = Vec::new();
        let mut at = 0;
        for (o, i) in config.layer_shapes() {
            segments.push((at, at + o * i));
            segments.push((at + o * i, at + o * i + o));
            at += o * i + o;
        }
        Self { config, segments }
    }
}

impl Objective for MlpObjective<'_> {
    fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    fn weights(&self, flat: &[f64]) -> Result<TargetWeights> {
        TargetWeights::from_flat(self.config, flat)
    }

    fn grad(&self, flat: &[f64], coords: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (loss, grads) = backward(&self.weights(flat)?, self.config, coords, targets)?;
        Ok((loss, grads.flatten()))
    }

    fn snapshot(&self, flat: &[f64]) -> Result<Params> {
        Ok(Params::Weights(self.weights(flat)?))
    }
}

fn check_dataset(config: &ModelConfig, data: &CoordinateDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if data.in_dim() != config.in_dim || data.out_dim() != config.out_dim {
        return Err(Error::invalid(format!(
            "dataset has {} -> {} dims, model expects {} -> {}",
            data.in_dim(),
            data.out_dim(),
            config.in_dim,
            config.out_dim
        )));
    }
    Ok(())
}

/// In-place Fisher-Yates shuffle driven by `stream`, advancing `cursor`.
fn shuffle(order: &mut [usize], stream: RngStream, cursor: &mut u64) {
    for i in (1..order.len()).rev() {
        let j = ((stream.unit_at(*cursor) * (i + 1) as f64) as usize).min(i);
        *cursor += 1;
        order.swap(i, j);
    }
}

fn fit(
    objective: &dyn Objective,
    config: &ModelConfig,
    init: Vec<f64>,
    data: &CoordinateDataset,
    tc: &TrainConfig,
) -> Result<(Params, TrainReport)> {
    tc.validate()?;
    check_dataset(config, data)?;
    let effective = |flat: &[f64]| -> Result<Vec<f64>> {
        match tc.qat_bits {
            Some(b) => fake_quantize_segments(flat, objective.segments(), b),
            None => Ok(flat.to_vec()),
        }
    };
    let evaluate = |flat: &[f64], epoch: usize| -> Result<EvalRecord> {
        let mut r = evaluate_weights(&objective.weights(&effective(flat)?)?, config, data)?;
        r.epoch = epoch;
        Ok(r)
    };
    let diverged = |epoch: usize, flat: &[f64]| -> Error {
        match objective.snapshot(flat) {
            Ok(p) => Error::TrainingDiverged {
                epoch,
                last_finite: Box::new(p),
            },
            Err(e) => e,
        }
    };

    let mut params = init;
    let first = evaluate(&params, 0)?;
    if !first.loss.is_finite() {
        return Err(Error::invalid("initial parameters give a non-finite loss"));
    }
    let mut history = vec![first];
    let mut best = (0usize, first.metric, params.clone());
    let progress = |r: &EvalRecord, lr: f64| {
        if tc.verbose {
            eprintln!("epoch={} loss={:e} lr={:e} metric={}", r.epoch, r.loss, lr, r.metric);
        }
    };
    progress(&first, tc.lr);

    let (in_dim, out_dim) = (data.in_dim(), data.out_dim());
    let stream = RngStream::new(tc.seed);
    let mut cursor = 0u64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut adam = AdamState::new(params.len());
    let mut last_finite = params.clone();
    let mut lr = tc.lr;
    let mut coords = Vec::with_capacity(tc.batch_size * in_dim);
    let mut targets = Vec::with_capacity(tc.batch_size * out_dim);

    for epoch in 1..=tc.epochs {
        shuffle(&mut order, stream, &mut cursor);
        for chunk in order.chunks(tc.batch_size) {
            coords.clear();
            targets.clear();
            for &i in chunk {
                coords.extend_from_slice(data.coord(i));
                targets.extend_from_slice(data.target(i));
            }
            let (loss, grads) = objective.grad(&effective(&params)?, &coords, &targets)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, &last_finite));
            }
            last_finite.copy_from_slice(&params);
            adam_step(&mut params, &grads, &mut adam, lr, tc.adam_betas, tc.adam_eps)?;
        }
        let used_lr = lr;
        lr *= tc.lr_gamma;
        if epoch % tc.eval_every == 0 || epoch == tc.epochs {
            let r = evaluate(&params, epoch)?;
            if !r.loss.is_finite() {
                return Err(diverged(epoch, &last_finite));
            }
            progress(&r, used_lr);
            history.push(r);
            if r.metric > best.1 {
                best = (epoch, r.metric, params.clone());
            }
        }
    }

    let report = TrainReport {
        history,
        best_epoch: best.0,
        best_metric: best.1,
    };
    Ok((objective.snapshot(&best.2)?, report))
}

/// Optimizes the latent code and biases; the projection matrices stay fixed.
pub fn train_doh(
    decoder: &RandomDecoder,
    config: &ModelConfig,
    latent: &LatentState,
    data: &CoordinateDataset,
    tc: &TrainConfig,
) -> Result<(LatentState, TrainReport)> {
    // Validates the latent against the decoder.
    generate_weights(decoder, latent)?;
    let objective = DohObjective::new(decoder, config, latent);
    match fit(&objective, config, latent.flatten(), data, tc)? {
        (Params::Latent(l), r) => Ok((l, r)),
        (Params::Weights(_), _) => unreachable!("latent objective yields latents"),
    }
}

/// D'OH training through a `bits`-wide fake quantizer on the latent and
/// biases. The returned state is the full-precision shadow copy; quantizing
/// it at `bits` reproduces the evaluated model.
pub fn train_qat(
    decoder: &RandomDecoder,
    config: &ModelConfig,
    latent: &LatentState,
    data: &CoordinateDataset,
    tc: &TrainConfig,
    bits: u8,
) -> Result<(LatentState, TrainReport)> {
    check_bits(bits)?;
    let tc = TrainConfig {
        qat_bits: Some(bits),
        ..tc.clone()
    };
    train_doh(decoder, config, latent, data, &tc)
}

/// Optimizes every weight and bias of the target network directly.
pub fn train_mlp(
    config: &ModelConfig,
    weights: &TargetWeights,
    data: &CoordinateDataset,
    tc: &TrainConfig,
) -> Result<(TargetWeights, TrainReport)> {
    weights.check_shapes(config)?;
    let objective = MlpObjective::new(config);
    match fit(&objective, config, weights.flatten(), data, tc)? {
        (Params::Weights(w), r) => Ok((w, r)),
        (Params::Latent(_), _) => unreachable!("weight objective yields weights"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{init_latent, DecoderMode};
    use crate::model::init_mlp;
    use crate::quant::quantize_model_doh;
    use crate::signal::{ImageSignal, Signal};

    fn gradient_image(size: usize) -> CoordinateDataset {
        let s = (size - 1) as f64;
        let img = ImageSignal::from_fn(size, size, |x, y| {
            let (u, v) = (x as f64 / s, y as f64 / s);
            [u, v, 0.5 * (u + v)]
        })
        .unwrap();
        CoordinateDataset::from_signal(&Signal::Image(img))
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = vec![1.0, -2.0, 0.5];
        for t in [0, 1, 7, 1000] {
            let mut s = AdamState::new(3);
            s.t = t;
            adam_step(&mut p, &[0.0; 3], &mut s, 0.1, (0.99, 0.999), 1e-8).unwrap();
            assert_eq!(p, vec![1.0, -2.0, 0.5]);
            assert_eq!(s.t, t + 1);
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let (lr, eps) = (1e-3, 1e-8);
        let g = [3.0, -0.25, 1e-2];
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &g, &mut s, lr, (0.99, 0.999), eps).unwrap();
        for (pk, gk) in p.iter().zip(g) {
            // m_hat = g and sqrt(v_hat) = |g| after bias correction.
            let expected = -lr * gk / (gk.abs() + eps);
            assert!((pk - expected).abs() <= 1e-15, "{pk} vs {expected}");
        }
    }

    #[test]
    fn adam_constant_gradient_steps_approach_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let mut prev = 0.0;
        for _ in 0..5000 {
            adam_step(&mut p, &[0.7], &mut s, 1e-2, (0.99, 0.999), 1e-8).unwrap();
            let delta = p[0] - prev;
            prev = p[0];
            assert!((delta + 1e-2).abs() < 1e-6, "{delta}");
        }
    }

    #[test]
    fn adam_rejects_mismatched_lengths() {
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut [0.0; 2], &[0.0; 3], &mut s, 0.1, (0.9, 0.99), 1e-8).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr: -1.0, ..Default::default() },
            TrainConfig { lr_gamma: 0.0, ..Default::default() },
            TrainConfig { lr_gamma: 1.5, ..Default::default() },
            TrainConfig { adam_betas: (1.0, 0.9), ..Default::default() },
            TrainConfig { qat_bits: Some(17), ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert_eq!(TrainConfig::image_doh().lr, 1e-6);
        assert_eq!(TrainConfig::occupancy_mlp().batch_size, 20_000);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut order: Vec<usize> = (0..100).collect();
        let mut cursor = 0;
        shuffle(&mut order, RngStream::new(1), &mut cursor);
        assert_eq!(cursor, 99);
        assert_ne!(order, (0..100).collect::<Vec<_>>());
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn constant_target_is_optimal_at_start() {
        let config = ModelConfig::new(2, 3, 4, 1);
        let img = ImageSignal::new(4, 4, vec![0.5; 48]).unwrap();
        let data = CoordinateDataset::from_signal(&Signal::Image(img));
        let mut weights = TargetWeights::zeros(&config);
        weights.layers_mut().last_mut().unwrap().bias = vec![0.5; 3];
        let tc = TrainConfig {
            epochs: 5,
            eval_every: 1,
            ..Default::default()
        };
        let (best, report) = train_mlp(&config, &weights, &data, &tc).unwrap();
        assert_eq!(report.history[0].loss, 0.0);
        assert_eq!(report.best_epoch, 0);
        assert_eq!(best, weights);

        let d = RandomDecoder::new(&config, 5, 0, DecoderMode::Streamed).unwrap();
        let mut lat = init_latent(&d);
        lat.z = vec![0.0; 5];
        let (best, report) = train_doh(&d, &config, &lat, &data, &TrainConfig { lr: 1e-3, ..tc }).unwrap();
        assert_eq!(report.history[0].loss, 0.0);
        assert_eq!(report.best_epoch, 0);
        assert_eq!(best, lat);
    }

    #[test]
    fn doh_loss_decreases_on_gradient_image() {
        let data = gradient_image(16);
        let config = ModelConfig::new(2, 3, 16, 1);
        let d = RandomDecoder::new(&config, 200, 3, DecoderMode::Materialized).unwrap();
        let tc = TrainConfig {
            epochs: 200,
            eval_every: 50,
            ..TrainConfig::image_doh()
        };
        let (_, report) = train_doh(&d, &config, &init_latent(&d), &data, &tc).unwrap();
        let first = report.history.first().unwrap();
        let last = report.history.last().unwrap();
        assert_eq!(last.epoch, 200);
        assert!(last.loss < first.loss, "{first:?} -> {last:?}");
    }

    #[test]
    fn mlp_loss_decreases_and_best_metric_reevaluates_exactly() {
        let data = gradient_image(16);
        let config = ModelConfig::new(2, 3, 16, 1);
        let w0 = init_mlp(&config, RngStream::new(1)).unwrap();
        let tc = TrainConfig {
            epochs: 60,
            eval_every: 7,
            ..TrainConfig::image_mlp()
        };
        let (best, report) = train_mlp(&config, &w0, &data, &tc).unwrap();
        assert!(report.history.last().unwrap().loss < report.history[0].loss);
        let max = report.history.iter().map(|r| r.metric).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(report.best_metric, max);
        assert_eq!(evaluate_weights(&best, &config, &data).unwrap().metric, report.best_metric);
        let epochs: Vec<usize> = report.history.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 7, 14, 21, 28, 35, 42, 49, 56, 60]);
    }

    #[test]
    fn training_is_deterministic() {
        let data = gradient_image(8);
        let config = ModelConfig::new(2, 3, 8, 1).with_encoding(2);
        let d = RandomDecoder::new(&config, 30, 5, DecoderMode::Streamed).unwrap();
        let tc = TrainConfig {
            epochs: 12,
            batch_size: 20,
            eval_every: 3,
            lr: 1e-4,
            seed: 9,
            ..Default::default()
        };
        let a = train_doh(&d, &config, &init_latent(&d), &data, &tc).unwrap();
        let b = train_doh(&d, &config, &init_latent(&d), &data, &tc).unwrap();
        assert_eq!(a, b);
        let w0 = init_mlp(&config, RngStream::new(2)).unwrap();
        assert_eq!(
            train_mlp(&config, &w0, &data, &tc).unwrap(),
            train_mlp(&config, &w0, &data, &tc).unwrap()
        );
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let data = gradient_image(8);
        let config = ModelConfig::new(2, 3, 6, 1);
        let w0 = init_mlp(&config, RngStream::new(4)).unwrap();
        let tc = TrainConfig {
            epochs: 5,
            batch_size: 16,
            lr: 0.0,
            eval_every: 1,
            ..Default::default()
        };
        let (w, report) = train_mlp(&config, &w0, &data, &tc).unwrap();
        assert_eq!(w, w0);
        assert!(report.history.windows(2).all(|p| p[0].loss == p[1].loss));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = gradient_image(4);
        let config = ModelConfig::new(2, 3, 4, 0);
        let d = RandomDecoder::new(&config, 6, 0, DecoderMode::Streamed).unwrap();
        let lat = init_latent(&d);
        let tc = TrainConfig { epochs: 0, ..Default::default() };
        let (best, report) = train_doh(&d, &config, &lat, &data, &tc).unwrap();
        assert_eq!(best, lat);
        assert_eq!(report.history.len(), 1);
    }

    #[test]
    fn divergence_reports_last_finite_state() {
        let data = gradient_image(4);
        let config = ModelConfig::new(2, 3, 4, 0);
        let w = init_mlp(&config, RngStream::new(0)).unwrap();
        // One Adam step moves every parameter by about lr, after which the
        // squared error overflows.
        let tc = TrainConfig {
            epochs: 3,
            lr: 1e200,
            ..Default::default()
        };
        match train_mlp(&config, &w, &data, &tc) {
            Err(Error::TrainingDiverged { epoch, last_finite }) => {
                assert!(epoch >= 1);
                assert!(matches!(*last_finite, Params::Weights(_)));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn qat_matches_plain_training_at_sixteen_bits() {
        let data = gradient_image(16);
        let config = ModelConfig::new(2, 3, 16, 1);
        let d = RandomDecoder::new(&config, 200, 3, DecoderMode::Materialized).unwrap();
        let tc = TrainConfig {
            epochs: 100,
            batch_size: 64,
            eval_every: 10,
            lr: 2e-5,
            ..Default::default()
        };
        let lat = init_latent(&d);
        let (_, plain) = train_doh(&d, &config, &lat, &data, &tc).unwrap();
        let (q16, qat) = train_qat(&d, &config, &lat, &data, &tc, 16).unwrap();
        assert!((plain.best_metric - qat.best_metric).abs() <= 0.1, "{} vs {}", plain.best_metric, qat.best_metric);

        // The evaluated QAT model is the PTQ of the returned shadow state.
        let ptq = quantize_model_doh(&q16, 16).unwrap().dequantize().unwrap();
        let rec = evaluate_weights(&generate_weights(&d, &ptq).unwrap(), &config, &data).unwrap();
        assert_eq!(rec.metric, qat.best_metric);

        let (_, one_bit) = train_qat(&d, &config, &lat, &data, &tc, 1).unwrap();
        assert!(one_bit.history.iter().all(|r| r.loss.is_finite() && !r.metric.is_nan()));
    }

    #[test]
    fn rejects_mismatched_dataset() {
        let data = gradient_image(4);
        let config = ModelConfig::new(3, 1, 4, 0);
        let w = init_mlp(&config, RngStream::new(0)).unwrap();
        assert!(train_mlp(&config, &w, &data, &TrainConfig::default()).is_err());
    }
}
