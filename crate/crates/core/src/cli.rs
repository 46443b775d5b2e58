//! Command implementations behind the `kanconv` binary.
//!
//! Each command is a plain function returning its results, so the binary
//! stays a thin argument parser and everything here is testable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{load_standard, normalize_standardize, pixel_stats, split, subset, Dataset, Part, SplitSpec};
use crate::error::{Error, Result};
use crate::layers::GridUpdatePolicy;
use crate::model::Model;
use crate::spline::spline_value;
use crate::training::{
    compute_metrics, evaluate, fit, grid_search, model_grid_size, read_runs, write_runs, EpochStats, LossConfig,
    Metrics, RunRecord, SearchConfig, SearchSpace, TrainConfig,
};
use crate::weights;

/// Pixel standardization constants, saved next to the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

/// Standardized train/valid/test sets.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub norm: Normalization,
}

/// How to carve the standard training and test files into working sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DataOptions {
    pub data_dir: PathBuf,
    /// Stratified subset of the training file before splitting.
    pub subset: Option<usize>,
    /// Stratified subset of the test file.
    pub test_subset: Option<usize>,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl DataOptions {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            subset: None,
            test_subset: None,
            valid_fraction: 1.0 / 6.0,
            seed: 0,
        }
    }
}

/// Loads, subsets, splits and standardizes; statistics come from the
/// training split only.
pub fn prepare_data(opts: &DataOptions) -> Result<Splits> {
    let mut full = load_standard(&opts.data_dir, Part::Train)?;
    if let Some(n) = opts.subset {
        full = subset(&full, n, opts.seed)?;
    }
    let (train, valid) = split(
        &full,
        SplitSpec {
            valid_fraction: opts.valid_fraction,
            seed: opts.seed,
        },
    )?;
    let mut test = load_standard(&opts.data_dir, Part::Test)?;
    if let Some(n) = opts.test_subset {
        test = subset(&test, n, opts.seed)?;
    }
    let (mean, std) = pixel_stats(&train);
    Ok(Splits {
        train: normalize_standardize(&train, mean, std)?,
        valid: normalize_standardize(&valid, mean, std)?,
        test: normalize_standardize(&test, mean, std)?,
        norm: Normalization { mean, std },
    })
}

fn load_config(path: &Path, grid_size: Option<usize>) -> Result<ModelConfig> {
    let cfg = ModelConfig::load(path)?;
    Ok(match grid_size {
        Some(g) => cfg.with_grid_size(g),
        None => cfg,
    })
}

/// Weight file name for a model, grid size and seed.
pub fn weights_file_name(model: &str, grid_size: Option<usize>, seed: u64) -> String {
    let gs = grid_size.map_or_else(|| "na".to_string(), |g| g.to_string());
    format!("{model}_{gs}_seed{seed}.kanc")
}

fn norm_path(weights_path: &Path) -> PathBuf {
    weights_path.with_extension("norm.json")
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub config: PathBuf,
    pub data: DataOptions,
    pub out_dir: PathBuf,
    pub grid_size: Option<usize>,
    pub train: TrainConfig,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug)]
pub struct TrainReport {
    pub record: RunRecord,
    pub model: Model,
    pub weights_path: PathBuf,
    pub runs_path: PathBuf,
}

fn log_epoch(verbose: bool, name: &str) -> impl FnMut(&EpochStats) + '_ {
    move |e: &EpochStats| {
        if verbose {
            let valid = e
                .valid_accuracy
                .map_or_else(String::new, |a| format!("  valid acc {a:.4}"));
            eprintln!(
                "{name} epoch {:>3}  loss {:.4}  train acc {:.4}{valid}  {:.1}s",
                e.epoch, e.train_loss, e.train_accuracy, e.seconds
            );
        }
    }
}

/// Trains a configured model, writes its weights and one run record.
pub fn cmd_train(opts: &TrainOptions) -> Result<TrainReport> {
    let cfg = load_config(&opts.config, opts.grid_size)?;
    opts.train.validate()?;
    let splits = prepare_data(&opts.data)?;
    let mut model = cfg.build(opts.train.seed)?;
    let result = fit(
        &mut model,
        &splits.train,
        Some(&splits.valid),
        &opts.train,
        None,
        log_epoch(opts.verbose, &cfg.name),
    )?;
    let (_, preds) = evaluate(&model, &splits.test, 256)?;
    let mut record = RunRecord::new(&model, "train", &opts.train, result.epochs);
    record.best_epoch = result.best_epoch;
    record.test = Some(compute_metrics(&preds, &splits.test.labels, splits.test.classes)?);

    std::fs::create_dir_all(&opts.out_dir)?;
    let gs = model_grid_size(&model);
    let weights_path = opts.out_dir.join(weights_file_name(&cfg.name, gs, opts.train.seed));
    weights::save(&model, &weights_path)?;
    std::fs::write(norm_path(&weights_path), serde_json::to_vec(&splits.norm)?)?;
    let runs_path = write_runs(&opts.out_dir, &cfg.name, gs, std::slice::from_ref(&record))?;
    Ok(TrainReport {
        record,
        model,
        weights_path,
        runs_path,
    })
}

/// Test-set metrics of saved weights. The standardization saved with the
/// weights is reused; without it, constants come from the training file.
pub fn cmd_eval(weights_path: &Path, data: &DataOptions) -> Result<Metrics> {
    let model = weights::load(weights_path)?;
    let norm = match std::fs::read(norm_path(weights_path)) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(_) => prepare_data(data)?.norm,
    };
    let mut test = load_standard(&data.data_dir, Part::Test)?;
    if let Some(n) = data.test_subset {
        test = subset(&test, n, data.seed)?;
    }
    let test = normalize_standardize(&test, norm.mean, norm.std)?;
    let (_, preds) = evaluate(&model, &test, 256)?;
    compute_metrics(&preds, &test.labels, test.classes)
}

#[derive(Debug, Clone)]
pub struct SearchOptions {
    pub config: PathBuf,
    pub data: DataOptions,
    pub out_dir: PathBuf,
    pub grid_size: Option<usize>,
    pub search: SearchConfig,
}

#[derive(Debug)]
pub struct SearchReport {
    pub records: Vec<RunRecord>,
    pub best: usize,
    pub runs_path: PathBuf,
    pub weights_path: PathBuf,
}

/// Runs the hyperparameter search, persisting every trial plus the final
/// retrained winner (last record).
pub fn cmd_gridsearch(opts: &SearchOptions) -> Result<SearchReport> {
    let cfg = load_config(&opts.config, opts.grid_size)?;
    let splits = prepare_data(&opts.data)?;
    let seed = opts.search.seed;
    let build = || cfg.build(seed);
    let outcome = grid_search(&build, &splits.train, &splits.valid, Some(&splits.test), &opts.search)?;
    let mut records: Vec<RunRecord> = outcome.trials.iter().map(|t| t.record.clone()).collect();
    records.push(outcome.record);
    std::fs::create_dir_all(&opts.out_dir)?;
    let gs = model_grid_size(&outcome.model);
    let runs_path = write_runs(&opts.out_dir, &cfg.name, gs, &records)?;
    let weights_path = opts.out_dir.join(weights_file_name(&cfg.name, gs, seed));
    weights::save(&outcome.model, &weights_path)?;
    std::fs::write(norm_path(&weights_path), serde_json::to_vec(&splits.norm)?)?;
    Ok(SearchReport {
        records,
        best: outcome.best,
        runs_path,
        weights_path,
    })
}

/// Per-layer table of exact and formula parameter counts.
pub fn cmd_count_params(config: &Path, grid_size: Option<usize>) -> Result<String> {
    let cfg = load_config(config, grid_size)?;
    let model = cfg.build(0)?;
    Ok(format_counts(&model))
}

pub fn format_counts(model: &Model) -> String {
    let counts = model.count_parameters();
    let mut out = String::new();
    let _ = writeln!(out, "{}", model.name);
    let _ = writeln!(out, "{:>5}  {:<12} {:>10} {:>10}", "layer", "kind", "exact", "G+2 rule");
    for l in counts.layers.iter().filter(|l| l.exact > 0) {
        let _ = writeln!(out, "{:>5}  {:<12} {:>10} {:>10}", l.index, l.kind, l.exact, l.formula);
    }
    let _ = writeln!(
        out,
        "{:>5}  {:<12} {:>10} {:>10}",
        "", "total", counts.exact, counts.formula
    );
    out
}

/// Samples every activation of a learnable-activation layer over its grid
/// range widened by 20% per side. CSV columns:
/// `activation,x,spline,silu,phi` where `silu` is the weighted term.
pub fn export_splines(model: &Model, layer: usize, n_samples: usize) -> Result<String> {
    let bank = model
        .layers
        .get(layer)
        .ok_or_else(|| Error::Usage(format!("model has {} layers", model.layers.len())))?
        .bank()
        .ok_or_else(|| {
            Error::Usage(format!(
                "layer {layer} ({}) has no learnable activations",
                model.layers[layer].kind()
            ))
        })?;
    if n_samples < 2 {
        return Err(Error::Usage("need at least 2 samples".into()));
    }
    let (lo, hi) = bank.grid.range();
    let pad = 0.2 * (hi - lo);
    let (a, b) = (lo - pad, hi + pad);
    let nb = bank.grid.basis_count();
    let mut out = String::from("activation,x,spline,silu,phi\n");
    for act in 0..bank.activation_count() {
        let coeffs = &bank.coeffs.data()[act * nb..(act + 1) * nb];
        let (w1, w2) = (bank.w1.data()[act], bank.w2.data()[act]);
        for i in 0..n_samples {
            let x = a + (b - a) * i as f64 / (n_samples - 1) as f64;
            let s = spline_value(coeffs, &bank.grid, x);
            let r = w2 * crate::autodiff::silu(x);
            let _ = writeln!(out, "{act},{x},{s},{r},{}", w1 * s + r);
        }
    }
    Ok(out)
}

pub fn cmd_export_splines(weights_path: &Path, layer: usize, out: &Path, n_samples: usize) -> Result<()> {
    let model = weights::load(weights_path)?;
    std::fs::write(out, export_splines(&model, layer, n_samples)?)?;
    Ok(())
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub grid_size: Option<usize>,
    pub phase: String,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub parameters: usize,
    pub minutes_per_epoch: f64,
}

impl From<&RunRecord> for ReportRow {
    fn from(r: &RunRecord) -> Self {
        Self {
            model: r.model.clone(),
            grid_size: r.grid_size,
            phase: r.phase.clone(),
            accuracy: r.test.as_ref().map(|m| m.accuracy),
            precision: r.test.as_ref().map(|m| m.precision),
            recall: r.test.as_ref().map(|m| m.recall),
            f1: r.test.as_ref().map(|m| m.f1),
            parameters: r.parameters,
            minutes_per_epoch: r.seconds_per_epoch / 60.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub table: String,
    /// `parameters,accuracy` CSV, one row per record.
    pub scatter: String,
}

pub fn build_report(records: &[RunRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Usage("no run records found".into()));
    }
    let mut rows: Vec<ReportRow> = records.iter().map(ReportRow::from).collect();
    rows.sort_by(|a, b| a.model.cmp(&b.model).then(a.grid_size.cmp(&b.grid_size)));
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}%", 100.0 * v));
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<26} {:>4} {:<6} {:>9} {:>9} {:>9} {:>9} {:>10} {:>9}",
        "model", "gs", "phase", "accuracy", "precision", "recall", "f1", "params", "min/epoch"
    );
    for r in &rows {
        let gs = r.grid_size.map_or_else(|| "-".to_string(), |g| g.to_string());
        let _ = writeln!(
            table,
            "{:<26} {:>4} {:<6} {:>9} {:>9} {:>9} {:>9} {:>10} {:>9.2}",
            r.model,
            gs,
            r.phase,
            pct(r.accuracy),
            pct(r.precision),
            pct(r.recall),
            pct(r.f1),
            r.parameters,
            r.minutes_per_epoch
        );
    }
    let mut scatter = String::from("parameters,accuracy\n");
    for r in &rows {
        let acc = r.accuracy.map_or_else(|| "nan".to_string(), |a| a.to_string());
        let _ = writeln!(scatter, "{},{acc}", r.parameters);
    }
    Ok(Report { rows, table, scatter })
}

/// Reads every `.runs` file in `runs_dir`.
pub fn cmd_report(runs_dir: &Path) -> Result<Report> {
    let records = read_runs(runs_dir).map_err(|e| match e {
        Error::Io(io) => Error::Usage(format!("cannot read {}: {io}", runs_dir.display())),
        other => other,
    })?;
    build_report(&records)
}

/// Default search settings with the given seed and budget.
pub fn search_config(
    budget: usize,
    seed: u64,
    max_epochs: usize,
    patience: usize,
    threads: usize,
    policy: GridUpdatePolicy,
    loss: LossConfig,
) -> SearchConfig {
    SearchConfig {
        space: SearchSpace::default(),
        budget,
        seed,
        max_epochs,
        patience,
        threads,
        grid_policy: policy,
        loss,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{GridSpec, LayerSpec};
    use crate::spline::{fit_spline_to_function, KnotGrid};

    fn kan_model() -> Model {
        let specs = [
            LayerSpec::Flatten,
            LayerSpec::KanLinear {
                n_in: 2,
                n_out: 1,
                grid: GridSpec::default(),
            },
            LayerSpec::LogSoftmax,
        ];
        Model::from_specs("m", &[1, 1, 2], &specs, 0).unwrap()
    }

    fn rows(csv: &str, act: usize) -> Vec<[f64; 4]> {
        csv.lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .filter(|v| v[0] as usize == act)
            .map(|v| [v[1], v[2], v[3], v[4]])
            .collect()
    }

    #[test]
    fn export_zero_and_identity_activations() {
        let mut m = kan_model();
        let grid = KnotGrid::uniform(-1.0, 1.0, 10, 3).unwrap();
        let samples: Vec<(f64, f64)> = (0..=100).map(|i| -1.0 + i as f64 / 50.0).map(|x| (x, x)).collect();
        let ident = fit_spline_to_function(&grid, &samples).unwrap();
        let bank = m.layers[1].bank_mut().unwrap();
        bank.coeffs.data_mut()[..13].fill(0.0);
        bank.coeffs.data_mut()[13..].copy_from_slice(&ident.0);

        let csv = export_splines(&m, 1, 401).unwrap();
        let zero = rows(&csv, 0);
        assert_eq!(zero.len(), 401);
        assert!((zero[0][0] + 1.4).abs() < 1e-12 && (zero[400][0] - 1.4).abs() < 1e-12);
        for [_, s, r, phi] in &zero {
            assert_eq!(*s, 0.0);
            assert_eq!(phi, r);
        }
        for [x, s, r, phi] in rows(&csv, 1) {
            if x.abs() <= 1.0 {
                assert!((s - x).abs() < 1e-6);
            }
            if x.abs() > 1.0 + 3.0 * 0.2 {
                assert_eq!(s, 0.0);
                assert_eq!(phi, r);
            }
        }
        assert!(matches!(export_splines(&m, 0, 401), Err(Error::Usage(_))));
    }

    fn record(model: &str, gs: Option<usize>, acc: f64) -> RunRecord {
        let m = kan_model();
        let mut r = RunRecord::new(&m, "train", &TrainConfig::default(), vec![]);
        r.model = model.into();
        r.grid_size = gs;
        r.test = Some(compute_metrics(&[0, 1], &[0, if acc > 0.5 { 1 } else { 0 }], 2).unwrap());
        r
    }

    #[test]
    fn report_rows_are_sorted() {
        let recs = [
            record("kkan", Some(20), 1.0),
            record("cnn", None, 0.5),
            record("kkan", Some(10), 1.0),
        ];
        let rep = build_report(&recs).unwrap();
        let order: Vec<_> = rep.rows.iter().map(|r| (r.model.as_str(), r.grid_size)).collect();
        assert_eq!(order, vec![("cnn", None), ("kkan", Some(10)), ("kkan", Some(20))]);
        assert_eq!(rep.scatter.lines().count(), 4);
        assert_eq!(rep.table.lines().count(), 4);
        assert!(matches!(build_report(&[]), Err(Error::Usage(_))));
    }
}
