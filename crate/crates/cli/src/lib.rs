//! Command implementations behind the `greedyprune` binary.

pub mod ablate;
pub mod manifest;
pub mod report;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use greedyprune::data::{load_dataset, DatasetSpec, Split};
use greedyprune::model::checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, CheckpointMeta};
use greedyprune::pruner::{filter_counts, PruneLog};
use greedyprune::train::{evaluate, full_pipeline, Boundary};
use greedyprune::{build_model, flops, EpochRecord, Network, Scalar};
use serde::Serialize;

pub use manifest::RunManifest;

/// What a prune (or train) run leaves behind.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub log: PruneLog,
    pub records: Vec<EpochRecord>,
    /// Validation accuracy of the final network.
    pub final_accuracy: f64,
}

pub const FINAL_CKPT: &str = "final.ckpt";
pub const PRUNE_LOG: &str = "prune_log.json";
pub const EPOCH_LOG: &str = "epochs.log";
pub const REPORT_DIR: &str = "reports";

/// Runs the full prune-while-training pipeline and writes checkpoints, the
/// pruning log, the epoch log, the manifest and reports to the output
/// directory.
pub fn cmd_prune(manifest: &RunManifest) -> Result<RunOutcome> {
    manifest.validate()?;
    match manifest.dtype.as_str() {
        "f64" => run_as::<f64>(manifest, true),
        _ => run_as::<f32>(manifest, true),
    }
}

/// Plain training for the whole schedule; no pruning.
pub fn cmd_train(manifest: &RunManifest) -> Result<RunOutcome> {
    let mut m = manifest.clone();
    m.config.target_rate = 0.0;
    m.validate()?;
    match m.dtype.as_str() {
        "f64" => run_as::<f64>(&m, false),
        _ => run_as::<f32>(&m, false),
    }
}

fn run_as<T: Scalar>(m: &RunManifest, prune: bool) -> Result<RunOutcome> {
    let out = &m.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("manifest.toml"), m.to_toml()?)?;
    let data = load_dataset::<T>(&m.dataset)?;
    let mut net: Network<T> = build_model(&m.arch, data.image_shape, data.class_count, m.config.seed)?;

    let epoch_log = RefCell::new(BufWriter::new(fs::File::create(out.join(EPOCH_LOG))?));
    let write_error = RefCell::new(None);
    let on_epoch = |r: &EpochRecord| {
        let line = serde_json::to_string(r).expect("records serialize");
        let mut w = epoch_log.borrow_mut();
        if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
            write_error.borrow_mut().get_or_insert(e);
        }
    };
    let on_boundary = |b: Boundary, n: &Network<T>, epoch: usize, log: Option<&PruneLog>| {
        if !prune && b != Boundary::Final {
            return Ok(());
        }
        let meta = CheckpointMeta {
            phase: Some(b.name().into()),
            epoch: Some(epoch),
            prune_log: log.map(|_| PRUNE_LOG.to_string()),
        };
        save_checkpoint(out.join(format!("{}.ckpt", b.name())), n, &meta)
    };
    let result = full_pipeline(&mut net, &data, &m.config, on_epoch, on_boundary)?;
    if let Some(e) = write_error.into_inner() {
        return Err(e).context("writing epoch log");
    }
    fs::write(out.join(PRUNE_LOG), result.log.to_json()?)?;
    if prune {
        let rep = report::build(&result.log);
        report::cross_check(&rep, &filter_counts(&net))?;
        report::write(&rep, &out.join(REPORT_DIR))?;
    }
    let final_accuracy = match result.records.last() {
        Some(r) => r.val_accuracy,
        None => evaluate(&net, &data, Split::Val, m.config.eval_batch_size)?.1,
    };
    Ok(RunOutcome { output_dir: out.clone(), log: result.log, records: result.records, final_accuracy })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub arch: String,
    pub dtype: String,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub macs: u64,
    pub params: usize,
    pub filters: BTreeMap<String, usize>,
}

/// Evaluates a checkpoint on the validation split of `dataset`.
pub fn cmd_eval(checkpoint: &Path, dataset: &DatasetSpec, batch_size: usize) -> Result<EvalSummary> {
    match checkpoint_dtype(checkpoint)?.as_str() {
        "f64" => eval_as::<f64>(checkpoint, dataset, batch_size),
        _ => eval_as::<f32>(checkpoint, dataset, batch_size),
    }
}

fn eval_as<T: Scalar>(checkpoint: &Path, dataset: &DatasetSpec, batch_size: usize) -> Result<EvalSummary> {
    let (net, _) = load_checkpoint::<T>(checkpoint)?;
    let data = load_dataset::<T>(dataset)?;
    let (val_loss, val_accuracy) = evaluate(&net, &data, Split::Val, batch_size)?;
    Ok(EvalSummary {
        arch: net.arch().into(),
        dtype: T::NAME.into(),
        val_loss,
        val_accuracy,
        macs: flops::flops(&net)?.total,
        params: net.count_params(),
        filters: filter_counts(&net),
    })
}

/// Filter counts of every driver conv stored in a checkpoint.
pub fn checkpoint_filters(checkpoint: &Path) -> Result<BTreeMap<String, usize>> {
    Ok(match checkpoint_dtype(checkpoint)?.as_str() {
        "f64" => filter_counts(&load_checkpoint::<f64>(checkpoint)?.0),
        _ => filter_counts(&load_checkpoint::<f32>(checkpoint)?.0),
    })
}

/// Regenerates reports from a pruning log, optionally checking them
/// against the final checkpoint.
pub fn cmd_report(log_path: &Path, checkpoint: Option<&Path>, out_dir: &Path) -> Result<report::Report> {
    let text = fs::read_to_string(log_path).with_context(|| format!("reading {}", log_path.display()))?;
    let log = PruneLog::from_json(&text)?;
    let rep = report::build(&log);
    if let Some(ckpt) = checkpoint {
        report::cross_check(&rep, &checkpoint_filters(ckpt)?)?;
    }
    report::write(&rep, out_dir)?;
    Ok(rep)
}
