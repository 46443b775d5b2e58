//! Line-delimited JSON run records.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::metrics::Metrics;
use crate::training::trainer::{EpochStats, TrainConfig};

/// Everything known about one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    /// Grid size of the first learnable-activation layer, if any.
    pub grid_size: Option<usize>,
    /// `train`, `search` or `final`.
    pub phase: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub test: Option<Metrics>,
    pub parameters: usize,
    pub parameters_formula: usize,
    pub seconds_per_epoch: f64,
}

impl RunRecord {
    pub fn new(model: &Model, phase: &str, config: &TrainConfig, epochs: Vec<EpochStats>) -> Self {
        let counts = model.count_parameters();
        let seconds_per_epoch = if epochs.is_empty() {
            0.0
        } else {
            epochs.iter().map(|e| e.seconds).sum::<f64>() / epochs.len() as f64
        };
        Self {
            model: model.name.clone(),
            grid_size: model_grid_size(model),
            phase: phase.to_string(),
            config: config.clone(),
            epochs,
            best_epoch: None,
            test: None,
            parameters: counts.exact,
            parameters_formula: counts.formula,
            seconds_per_epoch,
        }
    }

    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_wall_clock(&self) -> Self {
        let mut r = self.clone();
        r.seconds_per_epoch = 0.0;
        for e in &mut r.epochs {
            e.seconds = 0.0;
        }
        r
    }
}

pub fn model_grid_size(model: &Model) -> Option<usize> {
    model.layers.iter().find_map(|l| l.bank().map(|b| b.grid.grid_size()))
}

/// Writes `records` to `<dir>/<model>_<gs>_<timestamp>.runs`, one JSON
/// object per line, and returns the path.
pub fn write_runs(dir: &Path, model: &str, grid_size: Option<usize>, records: &[RunRecord]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let gs = grid_size.map_or_else(|| "na".to_string(), |g| g.to_string());
    for attempt in 0.. {
        let suffix = if attempt == 0 {
            String::new()
        } else {
            format!("-{attempt}")
        };
        let path = dir.join(format!("{model}_{gs}_{stamp}{suffix}.runs"));
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                for r in records {
                    serde_json::to_writer(&mut f, r)?;
                    f.write_all(b"\n")?;
                }
                return Ok(path);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("attempt counter is unbounded")
}

pub fn read_run_file(path: &Path) -> Result<Vec<RunRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Every record in the `.runs` files of `dir`, files in name order.
pub fn read_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "runs"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_run_file(&f)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::from_specs("cnn", &[4], &[LayerSpec::Linear { n_in: 4, n_out: 2 }], 0).unwrap();
        let epoch = EpochStats {
            epoch: 1,
            train_loss: 0.5,
            train_accuracy: 0.75,
            valid_loss: None,
            valid_accuracy: Some(0.5),
            grid_updates: vec![],
            seconds: 1.5,
        };
        let r = RunRecord::new(&m, "train", &TrainConfig::default(), vec![epoch]);
        assert_eq!(r.parameters, 10);
        assert_eq!(r.seconds_per_epoch, 1.5);
        let p1 = write_runs(dir.path(), "cnn", None, &[r.clone(), r.clone()]).unwrap();
        let p2 = write_runs(dir.path(), "cnn", None, std::slice::from_ref(&r)).unwrap();
        assert_ne!(p1, p2);
        assert!(p1.file_name().unwrap().to_str().unwrap().starts_with("cnn_na_"));
        let back = read_runs(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0], r);
        assert_eq!(r.without_wall_clock().epochs[0].seconds, 0.0);
    }
}
