//! Random search over learning rate, weight decay and batch size.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{recombine, Dataset};
use crate::error::{Error, Result};
use crate::layers::GridUpdatePolicy;
use crate::model::Model;
use crate::training::loss::LossConfig;
use crate::training::metrics::compute_metrics;
use crate::training::records::RunRecord;
use crate::training::trainer::{evaluate, fit, TrainConfig};

/// Candidate values for each searched hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-4, 5e-4, 1e-3],
            weight_decays: vec![0.0, 1e-5, 1e-4],
            batch_sizes: vec![32, 64, 128],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Combo {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl SearchSpace {
    /// Every combination, learning rate varying slowest.
    pub fn combos(&self) -> Vec<Combo> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rates {
            for &weight_decay in &self.weight_decays {
                for &batch_size in &self.batch_sizes {
                    out.push(Combo {
                        learning_rate,
                        weight_decay,
                        batch_size,
                    });
                }
            }
        }
        out
    }

    /// `budget` distinct combinations drawn uniformly without replacement.
    pub fn sample(&self, budget: usize, seed: u64) -> Result<Vec<Combo>> {
        let all = self.combos();
        if budget == 0 || budget > all.len() {
            return Err(Error::Config(format!(
                "search budget {budget} outside 1..={}",
                all.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(sample(&mut rng, all.len(), budget)
            .into_iter()
            .map(|i| all[i])
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub space: SearchSpace,
    pub budget: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Worker threads for independent trials.
    pub threads: usize,
    pub grid_policy: GridUpdatePolicy,
    pub loss: LossConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            space: SearchSpace::default(),
            budget: 8,
            seed: 0,
            max_epochs: 30,
            patience: 5,
            threads: 1,
            grid_policy: GridUpdatePolicy::default(),
            loss: LossConfig::default(),
        }
    }
}

impl SearchConfig {
    fn train_config(&self, combo: Combo, epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: combo.learning_rate,
            weight_decay: combo.weight_decay,
            batch_size: combo.batch_size,
            epochs,
            seed: self.seed,
            grid_policy: self.grid_policy,
            loss: self.loss,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub combo: Combo,
    pub record: RunRecord,
    pub best_valid_accuracy: f64,
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub trials: Vec<Trial>,
    /// Index into `trials` of the selected combination.
    pub best: usize,
    /// Winner retrained on train + valid for its best epoch count.
    pub model: Model,
    pub record: RunRecord,
}

fn run_trial(
    build: &(dyn Fn() -> Result<Model> + Sync),
    train: &Dataset,
    valid: &Dataset,
    cfg: &SearchConfig,
    combo: Combo,
) -> Result<Trial> {
    let mut model = build()?;
    let tc = cfg.train_config(combo, cfg.max_epochs);
    let result = fit(&mut model, train, Some(valid), &tc, Some(cfg.patience), |_| {})?;
    let mut record = RunRecord::new(&model, "search", &tc, result.epochs);
    record.best_epoch = result.best_epoch;
    Ok(Trial {
        combo,
        record,
        best_valid_accuracy: result.best_valid_accuracy.unwrap_or(0.0),
    })
}

/// Trains `budget` sampled combinations on `train`, keeps the one with the
/// best validation accuracy (earliest sampled on ties), retrains it on
/// train + valid for its best epoch count and scores it on `test`.
///
/// Every trial starts from `build()`, so candidates share initial weights.
pub fn grid_search(
    build: &(dyn Fn() -> Result<Model> + Sync),
    train: &Dataset,
    valid: &Dataset,
    test: Option<&Dataset>,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    let combos = cfg.space.sample(cfg.budget, cfg.seed)?;
    let threads = cfg.threads.clamp(1, combos.len());
    let mut results: Vec<Option<Result<Trial>>> = (0..combos.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, &c) in results.iter_mut().zip(&combos) {
            *slot = Some(run_trial(build, train, valid, cfg, c));
        }
    } else {
        let chunk = combos.len().div_ceil(threads);
        std::thread::scope(|s| {
            for (slots, cs) in results.chunks_mut(chunk).zip(combos.chunks(chunk)) {
                s.spawn(move || {
                    for (slot, &c) in slots.iter_mut().zip(cs) {
                        *slot = Some(run_trial(build, train, valid, cfg, c));
                    }
                });
            }
        });
    }
    let trials = results
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect::<Result<Vec<_>>>()?;

    let best = trials.iter().enumerate().fold(0, |b, (i, t)| {
        if t.best_valid_accuracy > trials[b].best_valid_accuracy {
            i
        } else {
            b
        }
    });
    let epochs = trials[best].record.best_epoch.unwrap_or(cfg.max_epochs);
    let tc = cfg.train_config(trials[best].combo, epochs);
    let full = recombine(train, valid)?;
    let mut model = build()?;
    let result = fit(&mut model, &full, None, &tc, None, |_| {})?;
    let mut record = RunRecord::new(&model, "final", &tc, result.epochs);
    record.best_epoch = Some(epochs);
    if let Some(test) = test {
        let (_, preds) = evaluate(&model, test, 256)?;
        record.test = Some(compute_metrics(&preds, &test.labels, test.classes)?);
    }
    Ok(SearchOutcome {
        trials,
        best,
        model,
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_has_27_points() {
        let s = SearchSpace::default();
        assert_eq!(s.combos().len(), 27);
    }

    #[test]
    fn sampling_is_distinct_and_seeded() {
        let s = SearchSpace::default();
        let a = s.sample(8, 5).unwrap();
        assert_eq!(a.len(), 8);
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(a[i], a[j]);
            }
        }
        assert_eq!(a, s.sample(8, 5).unwrap());
        assert_ne!(a, s.sample(8, 6).unwrap());
        assert_eq!(s.sample(27, 0).unwrap().len(), 27);
        assert!(s.sample(28, 0).is_err());
        assert!(s.sample(0, 0).is_err());
    }
}
