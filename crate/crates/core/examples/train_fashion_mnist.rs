//! Train the small KAN-convolution network on a Fashion-MNIST subset.
//!
//! ```text
//! cargo run --release --example train_fashion_mnist -- [data-dir] [subset] [epochs]
//! ```

use std::path::{Path, PathBuf};

use kanconv::cli::{prepare_data, DataOptions};
use kanconv::config::ModelConfig;
use kanconv::data::DATA_DIR_ENV;
use kanconv::training::{compute_metrics, evaluate, fit, TrainConfig};

fn main() -> kanconv::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args
        .next()
        .map(PathBuf::from)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/fashion-mnist"));
    let subset: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(12_000);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);

    let splits = prepare_data(&DataOptions {
        subset: Some(subset),
        test_subset: Some(2_000),
        ..DataOptions::new(&dir)
    })?;
    let config = ModelConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/kanc_mlp_small.cfg"))?;
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 32,
        epochs,
        ..TrainConfig::default()
    };
    let mut model = config.build(cfg.seed)?;
    println!("{} on {} training images", model.name, splits.train.len());

    fit(&mut model, &splits.train, Some(&splits.valid), &cfg, None, |s| {
        println!(
            "epoch {}: loss {:.4}, train {:.2}%, valid {:.2}% ({:.1}s)",
            s.epoch,
            s.train_loss,
            100.0 * s.train_accuracy,
            100.0 * s.valid_accuracy.unwrap_or(f64::NAN),
            s.seconds
        );
    })?;
    let (_, preds) = evaluate(&model, &splits.test, 256)?;
    let m = compute_metrics(&preds, &splits.test.labels, 10)?;
    println!("test accuracy {:.2}%, weighted F1 {:.4}", 100.0 * m.accuracy, m.f1);
    Ok(())
}
