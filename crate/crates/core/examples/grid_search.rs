//! Hyperparameter search over learning rate, weight decay and batch size on
//! a synthetic three-class problem.

use kanconv::data::Dataset;
use kanconv::layers::{GridSpec, LayerSpec};
use kanconv::training::{grid_search, SearchConfig};
use kanconv::{Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Class `c` lights up the `c`-th band of rows.
fn bands(n: usize, seed: u64) -> kanconv::Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let mut pixels = Vec::with_capacity(n * 36);
    for &l in &labels {
        for r in 0..6 {
            for _ in 0..6 {
                pixels.push(if r / 2 == l { 0.8 } else { -0.6 } + rng.random_range(-0.3..0.3));
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 6, 6], pixels)?, labels, 3)
}

fn main() -> kanconv::Result<()> {
    let (train, valid, test) = (bands(90, 1)?, bands(30, 2)?, bands(30, 3)?);
    let grid = GridSpec {
        grid_size: 5,
        ..GridSpec::default()
    };
    let build = || {
        Model::from_specs(
            "bands",
            &[1, 6, 6],
            &[
                LayerSpec::KanConv {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: (3, 3),
                    stride: 1,
                    padding: 0,
                    grid,
                },
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::KanLinear {
                    n_in: 8,
                    n_out: 3,
                    grid,
                },
                LayerSpec::LogSoftmax,
            ],
            0,
        )
    };
    let cfg = SearchConfig {
        budget: 4,
        max_epochs: 6,
        patience: 2,
        threads: 2,
        ..SearchConfig::default()
    };
    let outcome = grid_search(&build, &train, &valid, Some(&test), &cfg)?;
    for (i, t) in outcome.trials.iter().enumerate() {
        let c = &t.combo;
        let mark = if i == outcome.best { "*" } else { " " };
        println!(
            "{mark} lr {:<7} wd {:<7} batch {:<4} best valid {:.2}%",
            c.learning_rate,
            c.weight_decay,
            c.batch_size,
            100.0 * t.best_valid_accuracy
        );
    }
    if let Some(test) = &outcome.record.test {
        println!(
            "winner retrained on train + valid: test accuracy {:.2}%",
            100.0 * test.accuracy
        );
    }
    Ok(())
}
