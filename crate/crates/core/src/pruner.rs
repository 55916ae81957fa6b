//! The greedy pruning loop.
//!
//! Each iteration proposes, for every eligible layer and every criterion in
//! the pool, the layer's lowest-ranked filters; applies each proposal to a
//! copy of the network; measures the copy's loss on the fixed probe batch;
//! and commits the proposal with the lowest loss. Iterations continue until
//! the FLOPs reduction target is met or no layer can shrink further.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::criteria::{rank, Criterion};
use crate::data::{ProbeData, ProbeSet};
use crate::error::{Error, Result};
use crate::flops::{self, ExplorationPlan, FlopsReport};
use crate::graph::{channel_map, eligible_filters, remove_filters};
use crate::model::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PRUNE_LOG_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    /// The target FLOPs reduction was reached.
    Reached,
    /// No layer could be pruned further before the target.
    Exhausted,
    /// The target was zero; nothing was pruned.
    Disabled,
}

/// One proposal: drop `indices` from `layer`, as ranked by `criterion`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub layer: String,
    /// Position of the layer in the exploration plan.
    pub layer_pos: usize,
    pub criterion: Criterion,
    /// Position of the criterion in the pool.
    pub criterion_pos: usize,
    /// Sorted filter indices.
    pub indices: Vec<usize>,
    /// MACs of the network after this candidate is applied.
    pub flops_after: u64,
    /// First node whose parameters change.
    pub start_node: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub layer: String,
    pub criterion: Criterion,
    pub filters: usize,
    /// Probe loss; `None` when the candidate was not evaluated or failed.
    pub loss: Option<f64>,
    pub flops_after: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChosenRecord {
    pub layer: String,
    pub criterion: Criterion,
    pub indices: Vec<usize>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneLogEntry {
    pub iteration: usize,
    /// Probe loss of the network before this iteration.
    pub loss_before: f64,
    pub candidates: Vec<CandidateRecord>,
    pub chosen: ChosenRecord,
    pub flops_before: u64,
    pub flops_after: u64,
    pub pruning_rate: f64,
    /// Cumulative filters removed per driver layer after this iteration.
    pub removed_per_layer: BTreeMap<String, usize>,
    pub params_after: usize,
    pub finetuned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneLogHeader {
    pub arch: String,
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub dtype: String,
    pub config: RunConfig,
    pub baseline: FlopsReport,
    pub original_filters: BTreeMap<String, usize>,
    pub plan: ExplorationPlan,
    pub probe: ProbeSet,
    /// Learning rate used by recovery fine-tunes.
    pub finetune_lr: Option<f64>,
    pub notes: Vec<String>,
    pub started_unix: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneLogFooter {
    pub status: RunStatus,
    pub final_rate: f64,
    pub final_flops: u64,
    pub final_params: usize,
    pub iterations: usize,
    pub finetunes: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneLog {
    pub schema_version: u32,
    pub header: PruneLogHeader,
    pub entries: Vec<PruneLogEntry>,
    pub footer: Option<PruneLogFooter>,
}

impl PruneLog {
    pub fn final_rate(&self) -> f64 {
        self.entries.last().map(|e| e.pruning_rate).unwrap_or(0.0)
    }

    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timestamps(&self) -> PruneLog {
        let mut log = self.clone();
        log.header.started_unix = 0;
        if let Some(f) = log.footer.as_mut() {
            f.wall_time_s = 0.0;
        }
        log
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let log: PruneLog = serde_json::from_str(text)?;
        if log.schema_version != PRUNE_LOG_SCHEMA {
            return Err(Error::Config(format!("unsupported prune log schema {}", log.schema_version)));
        }
        Ok(log)
    }
}

/// Called whenever enough FLOPs have been removed since the last recovery.
pub trait RecoveryHook<T: Scalar> {
    fn recover(&mut self, net: &mut Network<T>, epochs: usize) -> Result<()>;
}

impl<T: Scalar, F: FnMut(&mut Network<T>, usize) -> Result<()>> RecoveryHook<T> for F {
    fn recover(&mut self, net: &mut Network<T>, epochs: usize) -> Result<()> {
        self(net, epochs)
    }
}

/// Recovery that does nothing.
pub struct NoRecovery;

impl<T: Scalar> RecoveryHook<T> for NoRecovery {
    fn recover(&mut self, _: &mut Network<T>, _: usize) -> Result<()> {
        Ok(())
    }
}

/// Filter counts of every driver conv.
pub fn filter_counts<T: Scalar>(net: &Network<T>) -> BTreeMap<String, usize> {
    net.prunable_convs().into_iter().map(|l| {
        let n = net.conv(&l).expect("listed conv").out_channels();
        (l, n)
    }).collect()
}

fn removed_per_layer<T: Scalar>(net: &Network<T>, original: &BTreeMap<String, usize>) -> BTreeMap<String, usize> {
    original.iter().map(|(l, &n)| (l.clone(), n - net.conv(l).map(|c| c.out_channels()).unwrap_or(n))).collect()
}

/// Candidates for every eligible (layer, criterion) pair, plus records for
/// pairs whose criterion could not be applied.
pub fn generate_candidates<T: Scalar>(
    net: &Network<T>,
    plan: &ExplorationPlan,
    config: &RunConfig,
    original: &BTreeMap<String, usize>,
) -> Result<(Vec<Candidate>, Vec<CandidateRecord>)> {
    let map = channel_map(net)?;
    let table = flops::cost_table(net)?;
    let mut out = Vec::new();
    let mut rejected = Vec::new();
    for (layer_pos, step) in plan.steps.iter().enumerate() {
        let Some(count) = eligible_filters(net, &step.layer, original, config.max_layer_rate, step.step) else {
            continue;
        };
        let idx = net.node_index(&step.layer).ok_or_else(|| Error::UnknownLayer(step.layer.clone()))?;
        let space = map.space_of(idx);
        let start_node = *space.producers.iter().min().expect("prunable space has a producer");
        let flops_after = flops::total_with_removed(&table, space.id, count);
        for (criterion_pos, &criterion) in config.criteria.iter().enumerate() {
            match rank(net, &step.layer, criterion, config.cosine_form) {
                Ok(score) => out.push(Candidate {
                    layer: step.layer.clone(),
                    layer_pos,
                    criterion,
                    criterion_pos,
                    indices: score.lowest(count),
                    flops_after,
                    start_node,
                }),
                Err(e) => rejected.push(CandidateRecord {
                    layer: step.layer.clone(),
                    criterion,
                    filters: count,
                    loss: None,
                    flops_after,
                    skipped: Some(e.to_string()),
                }),
            }
        }
    }
    Ok((out, rejected))
}

/// Probe loss of `net` with `candidate` applied. Never touches `net`.
pub fn evaluate_candidate<T: Scalar>(net: &Network<T>, candidate: &Candidate, probe: &ProbeData<T>) -> Result<f64> {
    let mut copy = net.inference_clone();
    remove_filters(&mut copy, &candidate.layer, &candidate.indices)?;
    Ok(copy.forward_loss(&probe.batch)?.as_f64())
}

/// Activations of the unpruned network shared by candidates that only
/// change nodes at or after their start node.
struct PrefixCache<T: Scalar> {
    acts: BTreeMap<usize, Tensor<T>>,
    covered: BTreeSet<usize>,
}

fn plan_cache<T: Scalar>(net: &Network<T>, starts: &BTreeSet<usize>, batch_len: usize, budget_bytes: usize) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    let shapes = net.infer_shapes()?;
    let bytes = |i: usize| shapes[i].iter().product::<usize>() * batch_len * T::BYTES;
    let mut keep = BTreeSet::new();
    let mut covered = BTreeSet::new();
    let mut used = 0;
    // Later starts save the most work; take them first.
    for &s in starts.iter().rev() {
        if s == 0 {
            continue;
        }
        let live = net.live_before(s);
        let extra: usize = live.iter().filter(|i| !keep.contains(*i)).map(|&i| bytes(i)).sum();
        if used + extra <= budget_bytes {
            used += extra;
            keep.extend(live);
            covered.insert(s);
        }
    }
    Ok((keep, covered))
}

/// Losses for all candidates, in input order. Identical proposals are
/// evaluated once. Failed or non-finite evaluations yield `None`.
fn evaluate_all<T: Scalar>(
    net: &Network<T>,
    candidates: &[&Candidate],
    probe: &ProbeData<T>,
    cache_mb: usize,
) -> Result<(f64, Vec<Option<f64>>)> {
    let mut unique: Vec<&Candidate> = Vec::new();
    let mut slot: HashMap<(&str, &[usize]), usize> = HashMap::new();
    let mut which = Vec::with_capacity(candidates.len());
    for c in candidates {
        let key = (c.layer.as_str(), c.indices.as_slice());
        let id = *slot.entry(key).or_insert_with(|| {
            unique.push(c);
            unique.len() - 1
        });
        which.push(id);
    }
    let starts: BTreeSet<usize> = unique.iter().map(|c| c.start_node).collect();
    let (keep, covered) = plan_cache(net, &starts, probe.batch.len(), cache_mb << 20)?;
    let (base_loss, acts) = net.forward_collect(&probe.batch, &keep)?;
    let cache = PrefixCache { acts, covered };
    let losses: Vec<Option<f64>> = unique
        .par_iter()
        .map(|c| {
            let mut copy = net.inference_clone();
            remove_filters(&mut copy, &c.layer, &c.indices).ok()?;
            let loss = if cache.covered.contains(&c.start_node) {
                copy.forward_loss_from(&probe.batch.labels, c.start_node, &cache.acts)
            } else {
                copy.forward_loss(&probe.batch)
            };
            loss.ok().map(|l| l.as_f64()).filter(|l| l.is_finite())
        })
        .collect();
    Ok((base_loss.as_f64(), which.into_iter().map(|i| losses[i]).collect()))
}

/// Index of the winning candidate: lowest loss, then earlier layer, then
/// earlier criterion in the pool.
pub fn select_best(candidates: &[Candidate], losses: &[Option<f64>]) -> Option<usize> {
    (0..candidates.len())
        .filter(|&i| losses[i].is_some())
        .min_by(|&a, &b| {
            let (la, lb) = (losses[a].unwrap(), losses[b].unwrap());
            la.total_cmp(&lb)
                .then(candidates[a].layer_pos.cmp(&candidates[b].layer_pos))
                .then(candidates[a].criterion_pos.cmp(&candidates[b].criterion_pos))
        })
}

/// Applies the chosen candidate to the working network.
pub fn commit_iteration<T: Scalar>(net: &mut Network<T>, chosen: &Candidate) -> Result<u64> {
    let receipt = remove_filters(net, &chosen.layer, &chosen.indices)?;
    Ok(receipt.flops_after)
}

/// Runs the greedy loop on `net` in place and returns the full log.
pub fn run<T: Scalar>(
    net: &mut Network<T>,
    config: &RunConfig,
    probe: &ProbeData<T>,
    finetune_lr: Option<f64>,
    hook: &mut dyn RecoveryHook<T>,
) -> Result<PruneLog> {
    config.validate()?;
    let clock = Instant::now();
    let baseline = flops::flops(net)?;
    if baseline.total == 0 {
        return Err(Error::ZeroFlops);
    }
    let original = filter_counts(net);
    let plan = if config.pruning_enabled() {
        flops::exploration_steps(net, config.step_rate, config.step_mode)?
    } else {
        ExplorationPlan { step_rate: config.step_rate, baseline_total: baseline.total, mode: config.step_mode, steps: vec![] }
    };
    let mut notes = vec![
        "FLOPs are multiply-accumulate counts".to_string(),
        format!("exploration steps ({:?} mode) are fixed from the unpruned network", config.step_mode),
    ];
    if let Some(lr) = finetune_lr {
        notes.push(format!("recovery fine-tunes use the schedule's rate at the prune epoch ({lr})"));
    }
    let header = PruneLogHeader {
        arch: net.arch().to_string(),
        input_shape: net.input_shape(),
        class_count: net.class_count(),
        dtype: T::NAME.into(),
        config: config.clone(),
        baseline: baseline.clone(),
        original_filters: original.clone(),
        plan: plan.clone(),
        probe: probe.set.clone(),
        finetune_lr,
        notes,
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let mut log = PruneLog { schema_version: PRUNE_LOG_SCHEMA, header, entries: vec![], footer: None };
    let mut flops_now = baseline.total;
    let mut rate = 0.0;
    let mut rate_at_last_recovery = 0.0;
    let mut finetunes = 0;
    let status = if !config.pruning_enabled() {
        RunStatus::Disabled
    } else {
        loop {
            if rate >= config.target_rate {
                break RunStatus::Reached;
            }
            let (candidates, mut records) = generate_candidates(net, &plan, config, &original)?;
            let bound = config.target_rate + 2.0 * config.step_rate;
            let rate_of = |c: &Candidate| flops::rate_from_totals(baseline.total, c.flops_after);
            let within: Vec<bool> = candidates.iter().map(|c| rate_of(c).map(|r| r <= bound)).collect::<Result<_>>()?;
            let guard = config.overshoot_guard && within.iter().any(|&w| w);
            let to_eval: Vec<&Candidate> =
                candidates.iter().zip(&within).filter(|(_, &w)| w || !guard).map(|(c, _)| c).collect();
            if to_eval.is_empty() {
                break RunStatus::Exhausted;
            }
            let (loss_before, eval_losses) = evaluate_all(net, &to_eval, probe, config.probe_cache_mb)?;
            let mut losses = Vec::with_capacity(candidates.len());
            let mut it = eval_losses.into_iter();
            for (c, &w) in candidates.iter().zip(&within) {
                if w || !guard {
                    let loss = it.next().expect("one loss per evaluated candidate");
                    losses.push(loss);
                    records.push(CandidateRecord {
                        layer: c.layer.clone(),
                        criterion: c.criterion,
                        filters: c.indices.len(),
                        loss,
                        flops_after: c.flops_after,
                        skipped: if loss.is_none() { Some("evaluation failed".into()) } else { None },
                    });
                } else {
                    losses.push(None);
                    records.push(CandidateRecord {
                        layer: c.layer.clone(),
                        criterion: c.criterion,
                        filters: c.indices.len(),
                        loss: None,
                        flops_after: c.flops_after,
                        skipped: Some("overshoots target".into()),
                    });
                }
            }
            let Some(best) = select_best(&candidates, &losses) else {
                break RunStatus::Exhausted;
            };
            let chosen = &candidates[best];
            let flops_before = flops_now;
            flops_now = commit_iteration(net, chosen)?;
            rate = flops::rate_from_totals(baseline.total, flops_now)?;
            let finetuned = rate - rate_at_last_recovery >= config.finetune_interval - 1e-12;
            if finetuned {
                hook.recover(net, config.finetune_epochs)?;
                rate_at_last_recovery = rate;
                finetunes += 1;
            }
            log::info!(
                "prune iter {}: {} via {} ({} filters), probe loss {:.4}, rate {:.4}",
                log.entries.len(),
                chosen.layer,
                chosen.criterion,
                chosen.indices.len(),
                losses[best].unwrap(),
                rate
            );
            log.entries.push(PruneLogEntry {
                iteration: log.entries.len(),
                loss_before,
                candidates: records,
                chosen: ChosenRecord {
                    layer: chosen.layer.clone(),
                    criterion: chosen.criterion,
                    indices: chosen.indices.clone(),
                    loss: losses[best].unwrap(),
                },
                flops_before,
                flops_after: flops_now,
                pruning_rate: rate,
                removed_per_layer: removed_per_layer(net, &original),
                params_after: net.count_params(),
                finetuned,
            });
        }
    };
    log.footer = Some(PruneLogFooter {
        status,
        final_rate: rate,
        final_flops: flops_now,
        final_params: net.count_params(),
        iterations: log.entries.len(),
        finetunes,
        wall_time_s: clock.elapsed().as_secs_f64(),
    });
    Ok(log)
}
