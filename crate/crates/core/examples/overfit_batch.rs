//! Sanity check: a KAN network can memorise a handful of random images.

use kanconv::data::Dataset;
use kanconv::layers::{GridSpec, LayerSpec};
use kanconv::training::{evaluate, train_epoch, Adam, TrainConfig};
use kanconv::{Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> kanconv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 16;
    let pixels: Vec<f64> = (0..n * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let data = Dataset::new(Tensor::new(vec![n, 1, 8, 8], pixels)?, labels, 4)?;

    let grid = GridSpec::default();
    let specs = [
        LayerSpec::KanConv {
            in_channels: 1,
            out_channels: 3,
            kernel: (3, 3),
            stride: 1,
            padding: 0,
            grid,
        },
        LayerSpec::MaxPool { window: 2, stride: 2 },
        LayerSpec::Flatten,
        LayerSpec::KanLinear {
            n_in: 27,
            n_out: 4,
            grid,
        },
        LayerSpec::LogSoftmax,
    ];
    let mut model = Model::from_specs("overfit", &[1, 8, 8], &specs, 0)?;
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: n,
        ..TrainConfig::default()
    };
    let mut opt = Adam::new(cfg.learning_rate, 0.0);
    for epoch in 0..300 {
        let stats = train_epoch(&mut model, &mut opt, &data, &cfg, epoch)?;
        let (_, preds) = evaluate(&model, &data, n)?;
        if preds == data.labels {
            println!(
                "all {n} images memorised after {} epochs (loss {:.4})",
                epoch + 1,
                stats.train_loss
            );
            return Ok(());
        }
    }
    println!("did not memorise the batch within 300 epochs");
    Ok(())
}
