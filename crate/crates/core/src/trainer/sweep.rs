//! Cross-product hyperparameter sweeps.
//!
//! A grid file lists one axis per line as `key = v1, v2, …` using the same
//! keys as the training config, plus an optional `repeats = N`. Runs are
//! ordered cell-major (last axis fastest), then by repeat.

use rayon::prelude::*;

use super::Trainer;
use crate::config::TrainConfig;
use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::noise::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub axes: Vec<SweepAxis>,
    pub repeats: usize,
}

impl SweepGrid {
    pub fn new(axes: Vec<SweepAxis>, repeats: usize) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Config("sweep grid has no axes".into()));
        }
        if repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        let probe = TrainConfig::default();
        for (i, axis) in axes.iter().enumerate() {
            if axis.values.is_empty() {
                return Err(Error::Config(format!("axis '{}' has no values", axis.key)));
            }
            if axis.key == "seed" {
                return Err(Error::Config("seed cannot be swept; use repeats".into()));
            }
            if probe.get(&axis.key).is_none() {
                return Err(Error::Config(format!("unknown key '{}'", axis.key)));
            }
            if axes[..i].iter().any(|a| a.key == axis.key) {
                return Err(Error::Config(format!("axis '{}' listed twice", axis.key)));
            }
            for v in &axis.values {
                probe.clone().set(&axis.key, v)?;
            }
        }
        Ok(Self { axes, repeats })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut axes = Vec::new();
        let mut repeats = 1;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, values) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = values", lineno + 1)))?;
            let key = key.trim();
            if key == "repeats" {
                repeats = values
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("line {}: bad repeats", lineno + 1)))?;
                continue;
            }
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            axes.push(SweepAxis {
                key: key.to_string(),
                values,
            });
        }
        Self::new(axes, repeats)
    }

    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn run_count(&self) -> usize {
        self.cell_count() * self.repeats
    }

    /// Axis values of cell `index`, last axis varying fastest.
    pub fn cell_values(&self, mut index: usize) -> Vec<String> {
        let mut out = vec![String::new(); self.axes.len()];
        for (slot, axis) in out.iter_mut().zip(&self.axes).rev() {
            let n = axis.values.len();
            *slot = axis.values[index % n].clone();
            index /= n;
        }
        out
    }

    /// Seed of repeat `repeat` in cell `cell`.
    pub fn run_seed(base_seed: u64, cell: usize, repeat: usize) -> u64 {
        derive_seed(derive_seed(base_seed, cell as u64), repeat as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub run_id: usize,
    pub cell: usize,
    pub repeat: usize,
    pub seed: u64,
    pub values: Vec<String>,
    pub final_accuracy: Option<f64>,
    pub epsilon: Option<f64>,
    pub sigma: Option<f64>,
    pub steps: Option<u64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: usize,
    pub values: Vec<String>,
    pub runs: usize,
    pub failures: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation; zero with fewer than two successful runs.
    pub std_accuracy: f64,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepResults {
    pub keys: Vec<String>,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellSummary>,
}

impl SweepResults {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    fn opt<T: ToString>(v: &Option<T>) -> String {
        v.as_ref().map_or(String::new(), ToString::to_string)
    }

    /// One row per run: `run_id, <axes…>, final_accuracy, epsilon_achieved,
    /// sigma, steps, seed, error`.
    pub fn write_runs_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Validation(format!("writing sweep csv: {e}"));
        let mut header = vec!["run_id".to_string()];
        header.extend(self.keys.iter().cloned());
        header.extend(["final_accuracy", "epsilon_achieved", "sigma", "steps", "seed", "error"].map(String::from));
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![r.run_id.to_string()];
            rec.extend(r.values.iter().cloned());
            rec.push(Self::opt(&r.final_accuracy));
            rec.push(Self::opt(&r.epsilon));
            rec.push(Self::opt(&r.sigma));
            rec.push(Self::opt(&r.steps));
            rec.push(r.seed.to_string());
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec).map_err(err)?;
        }
        w.flush()
            .map_err(|e| Error::Validation(format!("writing sweep csv: {e}")))
    }

    /// One row per cell with mean and standard deviation over repeats.
    pub fn write_cells_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Validation(format!("writing sweep csv: {e}"));
        let mut header = vec!["cell".to_string()];
        header.extend(self.keys.iter().cloned());
        header.extend(["runs", "failures", "mean_accuracy", "std_accuracy", "sigma"].map(String::from));
        w.write_record(&header).map_err(err)?;
        for c in &self.cells {
            let mut rec = vec![c.cell.to_string()];
            rec.extend(c.values.iter().cloned());
            rec.push(c.runs.to_string());
            rec.push(c.failures.to_string());
            rec.push(c.mean_accuracy.to_string());
            rec.push(c.std_accuracy.to_string());
            rec.push(Self::opt(&c.sigma));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush()
            .map_err(|e| Error::Validation(format!("writing sweep csv: {e}")))
    }
}

fn run_one(
    grid: &SweepGrid,
    base: &TrainConfig,
    dataset: &FeatureDataset,
    eval: Option<&FeatureDataset>,
    run_id: usize,
) -> SweepRow {
    let cell = run_id / grid.repeats;
    let repeat = run_id % grid.repeats;
    let seed = SweepGrid::run_seed(base.seed, cell, repeat);
    let values = grid.cell_values(cell);
    let mut row = SweepRow {
        run_id,
        cell,
        repeat,
        seed,
        values: values.clone(),
        final_accuracy: None,
        epsilon: None,
        sigma: None,
        steps: None,
        error: None,
    };
    let result = (|| {
        let mut config = base.clone();
        for (axis, v) in grid.axes.iter().zip(&values) {
            config.set(&axis.key, v)?;
        }
        config.seed = seed;
        let mut trainer = Trainer::new(&config);
        if let Some(e) = eval {
            trainer = trainer.eval_on(e);
        }
        trainer.run(dataset)
    })();
    match result {
        Ok(out) => {
            row.final_accuracy = Some(out.final_accuracy);
            row.epsilon = out.report.as_ref().map(|r| r.epsilon);
            row.sigma = Some(out.sigma);
            row.steps = Some(out.steps);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Runs every cell of `grid` `grid.repeats` times on top of `base`. Failed
/// runs are recorded in their row and do not stop the sweep.
pub fn run_sweep(
    grid: &SweepGrid,
    base: &TrainConfig,
    dataset: &FeatureDataset,
    eval: Option<&FeatureDataset>,
) -> SweepResults {
    let rows: Vec<SweepRow> = (0..grid.run_count())
        .into_par_iter()
        .map(|id| run_one(grid, base, dataset, eval, id))
        .collect();
    let cells = (0..grid.cell_count())
        .map(|cell| {
            let runs: Vec<&SweepRow> = rows.iter().filter(|r| r.cell == cell).collect();
            let accs: Vec<f64> = runs.iter().filter_map(|r| r.final_accuracy).collect();
            let mean = if accs.is_empty() {
                f64::NAN
            } else {
                accs.iter().sum::<f64>() / accs.len() as f64
            };
            let std = if accs.len() < 2 {
                0.0
            } else {
                (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (accs.len() - 1) as f64).sqrt()
            };
            CellSummary {
                cell,
                values: grid.cell_values(cell),
                runs: runs.len(),
                failures: runs.len() - accs.len(),
                mean_accuracy: mean,
                std_accuracy: std,
                sigma: runs.iter().find_map(|r| r.sigma),
            }
        })
        .collect();
    SweepResults {
        keys: grid.axes.iter().map(|a| a.key.clone()).collect(),
        rows,
        cells,
    }
}
