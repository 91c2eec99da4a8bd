use std::path::PathBuf;

use doh_core::model::{init_mlp, ModelConfig};
use doh_core::numerics::RngStream;
use doh_core::signal::{CoordinateDataset, Signal};
use doh_core::train::{train_mlp, TrainConfig};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn deeper_wider_mlp_fits_photo_crop_better() {
    let signal = Signal::load(fixture("astronaut_32.png")).unwrap();
    let data = CoordinateDataset::from_signal(&signal);
    assert_eq!(data.len(), 1024);
    // Full-batch steps; the deeper network is unstable with small batches at
    // this learning rate, and needs about this many steps to overtake.
    let tc = TrainConfig {
        epochs: 1000,
        batch_size: 1024,
        lr: 1e-3,
        eval_every: 50,
        ..TrainConfig::image_mlp()
    };
    let run = |width, hidden| {
        let config = ModelConfig::new(2, 3, width, hidden);
        let w0 = init_mlp(&config, RngStream::new(0)).unwrap();
        train_mlp(&config, &w0, &data, &tc).unwrap().1.best_metric
    };
    let (big, small) = (run(28, 9), run(20, 4));
    assert!(big > small, "(28,9) {big} dB vs (20,4) {small} dB");
}
