//! Statistics of generated weights against the SIREN initialization they are
//! designed to match.

use doh_core::decoder::{init_latent, DecoderMode, RandomDecoder};
use doh_core::model::{siren_bound, ModelConfig};

/// Variance of `U(-a, a)`.
fn uniform_var(a: f64) -> f64 {
    a * a / 3.0
}

/// Collects at least `min_entries` generated weights for every layer by
/// drawing fresh decoders and latents, then compares the pooled variance to
/// the direct initialization variance of that layer.
fn check_variances(config: &ModelConfig, n: usize, min_entries: usize, tol: f64) {
    let layers = config.layer_count();
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); layers];
    let mut seed = 0u64;
    while sums.iter().any(|s| s.2 < min_entries) {
        let d = RandomDecoder::new(config, n, seed, DecoderMode::Streamed).unwrap();
        let lat = init_latent(&d);
        for (l, s) in sums.iter_mut().enumerate() {
            if s.2 >= min_entries {
                continue;
            }
            for w in d.project_layer(l, &lat.z) {
                s.0 += w;
                s.1 += w * w;
                s.2 += 1;
            }
        }
        seed += 1;
    }
    for (l, &(sum, sq, count)) in sums.iter().enumerate() {
        let mean = sum / count as f64;
        let var = sq / count as f64 - mean * mean;
        let target = uniform_var(siren_bound(config, l));
        let rel = (var - target).abs() / target;
        assert!(
            rel < tol,
            "n={n} layer {l}: variance {var:e} vs target {target:e} ({count} entries)"
        );
    }
}

#[test]
fn generated_weight_variance_matches_siren_init() {
    let config = ModelConfig::new(2, 3, 40, 1).with_encoding(10);
    for n in [64, 1024] {
        check_variances(&config, n, 100_000, 0.05);
    }
}

#[test]
fn variance_without_encoding() {
    let config = ModelConfig::new(2, 3, 16, 2);
    check_variances(&config, 128, 100_000, 0.05);
}
