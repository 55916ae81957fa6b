//! Hyperparameter sweeps: one full run per (grid value, seed), summarised
//! as mean ± standard deviation of final validation accuracy.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Result};
use greedyprune::criteria::parse_pool;
use greedyprune::RunConfig;
use serde::Serialize;

use crate::manifest::RunManifest;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    PruneEpoch,
    CriteriaPool,
    Rmax,
    Ps,
}

impl FromStr for Study {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prune-epoch" => Ok(Study::PruneEpoch),
            "criteria-pool" => Ok(Study::CriteriaPool),
            "rmax" => Ok(Study::Rmax),
            "ps" => Ok(Study::Ps),
            _ => Err(anyhow!("unknown study `{s}` (prune-epoch, criteria-pool, rmax, ps)")),
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Study::PruneEpoch => "prune-epoch",
            Study::CriteriaPool => "criteria-pool",
            Study::Rmax => "rmax",
            Study::Ps => "ps",
        })
    }
}

impl Study {
    fn row_label(self) -> &'static str {
        match self {
            Study::PruneEpoch => "prune epoch",
            Study::CriteriaPool => "criteria",
            Study::Rmax => "max layer rate",
            Study::Ps => "step rate",
        }
    }

    /// Grid used when none is given. Criteria pools are `+`-joined.
    pub fn default_grid(self, config: &RunConfig) -> Vec<String> {
        match self {
            Study::Rmax => ["0.55", "0.60", "0.65", "0.70", "0.75"].map(String::from).to_vec(),
            Study::Ps => ["0.005", "0.01", "0.015", "0.02", "0.025", "0.03"].map(String::from).to_vec(),
            Study::CriteriaPool => ["l1+l2", "eucl+cos", "l1+l2+eucl+cos"].map(String::from).to_vec(),
            Study::PruneEpoch => {
                let s = config.schedule();
                let first = s.milestones.first().copied().unwrap_or(s.max_epochs / 2).max(2);
                let mut epochs = vec![first / 4, first / 2, 3 * first / 4, first - 1];
                if let Some(&second) = s.milestones.get(1) {
                    epochs.push((first + second) / 2);
                }
                epochs.dedup();
                epochs.into_iter().map(|e| e.to_string()).collect()
            }
        }
    }

    /// Sets this study's knob in `config`, adjusting dependent settings so
    /// the grid point stays valid.
    pub fn apply(self, value: &str, config: &mut RunConfig) -> Result<()> {
        let num = || value.parse::<f64>().map_err(|_| anyhow!("`{value}` is not a number"));
        match self {
            Study::Rmax => config.max_layer_rate = num()?,
            Study::Ps => {
                config.step_rate = num()?;
                if config.finetune_interval <= config.step_rate {
                    config.finetune_interval = 1.5 * config.step_rate;
                }
            }
            Study::CriteriaPool => config.criteria = parse_pool(&value.replace('+', ","))?,
            Study::PruneEpoch => {
                config.prune_epoch = Some(value.parse().map_err(|_| anyhow!("`{value}` is not an epoch"))?);
                config.late_prune_ok = true;
            }
        }
        config.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub value: String,
    pub seeds: Vec<u64>,
    /// Final accuracy per seed; `None` marks a failed run.
    pub accuracies: Vec<Option<f64>>,
    pub rates: Vec<Option<f64>>,
    pub errors: Vec<String>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub study: String,
    pub cells: Vec<Cell>,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Some((mean, std))
}

impl Summary {
    /// Markdown table: one column per grid value, accuracy in percent.
    pub fn to_markdown(&self, study: Study) -> String {
        let mut s = format!("| {} |", study.row_label());
        for c in &self.cells {
            let _ = write!(s, " {} |", c.value);
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.cells.len()));
        s.push_str("\n| top-1 acc. (%) |");
        for c in &self.cells {
            match (c.mean, c.std) {
                (Some(m), Some(sd)) => {
                    let _ = write!(s, " {:.2} ± {:.2} |", 100.0 * m, 100.0 * sd);
                }
                _ => s.push_str(" failed |"),
            }
        }
        s.push('\n');
        s
    }

    fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["study", "value", "seed", "accuracy", "pruning_rate", "error"])?;
        for c in &self.cells {
            for (i, seed) in c.seeds.iter().enumerate() {
                let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                w.write_record([
                    self.study.clone(),
                    c.value.clone(),
                    seed.to_string(),
                    fmt(c.accuracies[i]),
                    fmt(c.rates[i]),
                    c.errors.get(i).cloned().unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every grid point for every seed below `manifest.output_dir/ablate-<study>`
/// and writes `summary.csv` and `summary.md` there. Failed runs are marked and
/// the sweep continues.
pub fn cmd_ablate(study: Study, grid: &[String], seeds: &[u64], manifest: &RunManifest) -> Result<Summary> {
    if grid.is_empty() || seeds.is_empty() {
        bail!("grid and seeds must be non-empty");
    }
    let root: PathBuf = manifest.output_dir.join(format!("ablate-{study}"));
    fs::create_dir_all(&root)?;
    let mut cells = Vec::new();
    for value in grid {
        let mut cell = Cell {
            value: value.clone(),
            seeds: seeds.to_vec(),
            accuracies: vec![],
            rates: vec![],
            errors: vec![],
            mean: None,
            std: None,
        };
        for &seed in seeds {
            let mut m = manifest.clone();
            m.config.seed = seed;
            m.output_dir = root.join(value.replace(['/', '\\'], "_")).join(format!("seed-{seed}"));
            let outcome = study.apply(value, &mut m.config).and_then(|_| crate::cmd_prune(&m));
            match outcome {
                Ok(o) => {
                    cell.accuracies.push(Some(o.final_accuracy));
                    cell.rates.push(Some(o.log.final_rate()));
                    cell.errors.push(String::new());
                }
                Err(e) => {
                    log::warn!("{study}={value} seed {seed} failed: {e:#}");
                    cell.accuracies.push(None);
                    cell.rates.push(None);
                    cell.errors.push(format!("{e:#}"));
                }
            }
        }
        let ok: Vec<f64> = cell.accuracies.iter().flatten().copied().collect();
        if let Some((m, s)) = mean_std(&ok) {
            cell.mean = Some(m);
            cell.std = Some(s);
        }
        cells.push(cell);
    }
    let summary = Summary { study: study.to_string(), cells };
    summary.write_csv(&root.join("summary.csv"))?;
    fs::write(root.join("summary.md"), summary.to_markdown(study))?;
    Ok(summary)
}
