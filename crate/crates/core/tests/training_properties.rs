use kanconv::data::Dataset;
use kanconv::gradcheck::gradient_check;
use kanconv::layers::{GridSpec, LayerSpec, Mode};
use kanconv::training::{
    compute_metrics, entropy, grid_search, objective, train_epoch, Adam, LossConfig, SearchConfig, TrainConfig,
};
use kanconv::{Model, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model(seed: u64) -> Model {
    let grid = GridSpec {
        grid_size: 4,
        ..GridSpec::default()
    };
    let specs = [
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
    ];
    Model::from_specs("tiny", &[1, 6, 6], &specs, seed).unwrap()
}

/// Three classes told apart by which third of the image is bright.
fn toy_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let mut data = Vec::with_capacity(n * 36);
    for &l in &labels {
        for r in 0..6 {
            for _ in 0..6 {
                let base = if r / 2 == l { 0.8 } else { -0.6 };
                data.push(base + rng.random_range(-0.2..0.2));
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 6, 6], data).unwrap(), labels, 3).unwrap()
}

fn param_bits(m: &Model) -> Vec<u64> {
    m.params()
        .iter()
        .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
        .collect()
}

/// Weighted precision, recall and F1 from per-class counts.
fn oracle(preds: &[usize], labels: &[usize], classes: usize) -> [f64; 4] {
    let n = labels.len() as f64;
    let mut out = [0.0; 4];
    out[0] = preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n;
    for c in 0..classes {
        let tp = (0..labels.len()).filter(|&i| preds[i] == c && labels[i] == c).count() as f64;
        let fp = (0..labels.len()).filter(|&i| preds[i] == c && labels[i] != c).count() as f64;
        let fn_ = (0..labels.len()).filter(|&i| preds[i] != c && labels[i] == c).count() as f64;
        let w = (tp + fn_) / n;
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        out[1] += w * p;
        out[2] += w * r;
        out[3] += w * if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn entropy_is_bounded(a in proptest::collection::vec(0.0..5.0f64, 1..40)) {
        prop_assume!(a.iter().sum::<f64>() > 0.0);
        let s = entropy(&a);
        prop_assert!(s >= 0.0 && s <= (a.len() as f64).ln() + 1e-12, "{s}");
    }

    #[test]
    fn entropy_maximum_iff_uniform(v in 0.01..5.0f64, n in 2usize..30, bump in 0.01..1.0f64) {
        let mut a = vec![v; n];
        prop_assert!((entropy(&a) - (n as f64).ln()).abs() < 1e-10);
        a[0] += bump;
        prop_assert!(entropy(&a) < (n as f64).ln() - 1e-12);
    }

    #[test]
    fn metrics_match_oracle(
        classes in 2usize..8,
        pairs in proptest::collection::vec((0usize..8, 0usize..8), 1..80),
    ) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0 % classes).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1 % classes).collect();
        let m = compute_metrics(&preds, &labels, classes).unwrap();
        let o = oracle(&preds, &labels, classes);
        for (got, want) in [m.accuracy, m.precision, m.recall, m.f1].into_iter().zip(o) {
            prop_assert!((got - want).abs() < 1e-12);
            prop_assert!(got.is_finite());
        }
        let trace: u64 = (0..classes).map(|c| m.confusion[c][c]).sum();
        prop_assert_eq!(trace as f64 / preds.len() as f64, m.accuracy);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zero_lambda_is_plain_cross_entropy(seed in 0u64..1000) {
        let model = tiny_model(seed);
        let data = toy_data(5, seed);
        let (x, labels) = data.batch(&[0, 1, 2, 3, 4]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let b = model.bind(&mut tape, true);
        let outs = model.forward(&mut tape, xv, &b, Mode::Train).unwrap();
        let before = tape.len();
        let loss = objective(&mut tape, &model, xv, &outs, &b, &labels, &LossConfig::default()).unwrap();
        // Exactly one node: the cross-entropy, no regularization work.
        prop_assert_eq!(tape.len(), before + 1);
        let ce = tape.cross_entropy(*outs.last().unwrap(), &labels).unwrap();
        prop_assert_eq!(tape.value(loss).item().unwrap().to_bits(), tape.value(ce).item().unwrap().to_bits());
    }

    #[test]
    fn cross_entropy_gradient(logits in proptest::collection::vec(-4.0..4.0f64, 12)) {
        let x = Tensor::new(vec![3, 4], logits).unwrap();
        let err = gradient_check(
            |t, v| {
                let lp = t.log_softmax(v)?;
                t.cross_entropy(lp, &[3, 0, 1])
            },
            &x,
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-5, "{err}");
    }
}

#[test]
fn regularized_objective_gradient() {
    let model = tiny_model(3);
    let data = toy_data(4, 3);
    let (x, labels) = data.batch(&[0, 1, 2, 3]);
    let cfg = LossConfig {
        lambda: 0.3,
        mu1: 1.0,
        mu2: 0.5,
    };
    let err = gradient_check(
        |tape, xv| {
            let b = model.bind(tape, false);
            let outs = model.forward(tape, xv, &b, Mode::Train)?;
            objective(tape, &model, xv, &outs, &b, &labels, &cfg)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn uniform_prediction_loss_is_ln_classes() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[3, 10]));
    let lp = tape.log_softmax(z).unwrap();
    let l = tape.cross_entropy(lp, &[1, 5, 9]).unwrap();
    assert!((tape.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let mut model = tiny_model(1);
    let before = model.clone();
    let data = toy_data(30, 1);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut opt = Adam::new(0.0, 0.0);
    for epoch in 0..2 {
        let stats = train_epoch(&mut model, &mut opt, &data, &cfg, epoch).unwrap();
        assert!(stats.grid_updates.is_empty());
    }
    assert_eq!(param_bits(&model), param_bits(&before));
    assert_eq!(
        model.layers[0].bank().unwrap().grid,
        before.layers[0].bank().unwrap().grid
    );
}

#[test]
fn seeded_training_is_deterministic() {
    let run = || {
        let mut model = tiny_model(5);
        let data = toy_data(40, 2);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(cfg.learning_rate, 0.0);
        let losses: Vec<u64> = (0..3)
            .map(|e| {
                train_epoch(&mut model, &mut opt, &data, &cfg, e)
                    .unwrap()
                    .train_loss
                    .to_bits()
            })
            .collect();
        (losses, param_bits(&model))
    };
    assert_eq!(run(), run());
}

#[test]
fn small_search_picks_the_best_trial() {
    let train = toy_data(30, 4);
    let valid = toy_data(12, 5);
    let cfg = SearchConfig {
        budget: 2,
        max_epochs: 3,
        patience: 2,
        seed: 1,
        ..SearchConfig::default()
    };
    let build = || Ok(tiny_model(0));
    let a = grid_search(&build, &train, &valid, Some(&valid), &cfg).unwrap();
    assert_eq!(a.trials.len(), 2);
    let best = a.trials.iter().map(|t| t.best_valid_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(a.trials[a.best].best_valid_accuracy, best);
    assert!(a.trials[..a.best].iter().all(|t| t.best_valid_accuracy < best));
    assert!(a.record.test.is_some());

    let threaded = SearchConfig { threads: 2, ..cfg };
    let b = grid_search(&build, &train, &valid, Some(&valid), &threaded).unwrap();
    assert_eq!(a.best, b.best);
    let strip = |o: &kanconv::training::SearchOutcome| {
        o.trials
            .iter()
            .map(|t| t.record.without_wall_clock())
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(param_bits(&a.model), param_bits(&b.model));
}

#[test]
fn budget_eight_samples_eight_distinct_combinations() {
    let cfg = SearchConfig::default();
    let combos = cfg.space.sample(cfg.budget, cfg.seed).unwrap();
    assert_eq!(combos.len(), 8);
    let all = cfg.space.combos();
    assert_eq!(all.len(), 27);
    assert!(combos.iter().all(|c| all.contains(c)));
    for i in 0..8 {
        assert!(combos[..i].iter().all(|c| *c != combos[i]));
    }
}
