//! FLOPs accounting, pruning rate and per-layer exploration steps.
//!
//! FLOPs are counted as multiply-accumulates (MACs). Only convolutions
//! (`N_out · H_out · W_out · N_in · K²`) and linear layers (`in · out`)
//! contribute; norm, activation and pooling layers count as zero. Every
//! downstream quantity is a ratio, so the MAC-vs-FLOP convention cancels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::channel_map;
use crate::model::{ConvRole, Network, Op};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub layer: String,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub total: u64,
    /// Conv and linear layers in network order.
    pub per_layer: Vec<LayerMacs>,
    pub input_shape: [usize; 3],
}

impl FlopsReport {
    pub fn layer(&self, name: &str) -> Option<u64> {
        self.per_layer.iter().find(|l| l.layer == name).map(|l| l.macs)
    }

    /// Two-column text table.
    pub fn to_table(&self) -> String {
        let width = self.per_layer.iter().map(|l| l.layer.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "# MACs (multiply-accumulates) at input {}x{}x{}\n{:<width$}  {:>14}\n",
            self.input_shape[0], self.input_shape[1], self.input_shape[2], "layer", "macs"
        );
        for l in &self.per_layer {
            let _ = writeln!(out, "{:<width$}  {:>14}", l.layer, l.macs);
        }
        let _ = writeln!(out, "{:<width$}  {:>14}", "total", self.total);
        out
    }
}

/// One MAC-bearing layer reduced to what FLOPs depend on.
#[derive(Clone, Debug)]
pub(crate) struct Cost {
    pub node: usize,
    pub out: usize,
    pub inp: usize,
    /// `K² · H_out · W_out` for convs, 1 for linear layers.
    pub per_pair: u64,
    pub out_space: usize,
    pub in_space: usize,
}

pub(crate) fn cost_table_at<T: Scalar>(net: &Network<T>, input_shape: [usize; 3]) -> Result<Vec<Cost>> {
    let shapes = net.infer_shapes_at(input_shape)?;
    let spaces = channel_map(net).map(|m| m.node_space).unwrap_or_else(|_| (0..net.nodes().len()).collect());
    let mut table = Vec::new();
    for (i, node) in net.nodes().iter().enumerate() {
        let (out, inp, per_pair) = match &node.op {
            Op::Conv(c) => {
                let [_, ho, wo] = shapes[i];
                (c.out_channels(), c.in_channels(), (c.kernel() * c.kernel() * ho * wo) as u64)
            }
            Op::Linear(l) => (l.weight.value.dim(0), l.weight.value.dim(1), 1),
            _ => continue,
        };
        table.push(Cost { node: i, out, inp, per_pair, out_space: spaces[i], in_space: spaces[node.inputs[0]] });
    }
    Ok(table)
}

pub(crate) fn cost_table<T: Scalar>(net: &Network<T>) -> Result<Vec<Cost>> {
    cost_table_at(net, net.input_shape())
}

/// Total MACs after removing `count` channels from channel space `space`.
pub(crate) fn total_with_removed(table: &[Cost], space: usize, count: usize) -> u64 {
    table
        .iter()
        .map(|c| {
            let out = if c.out_space == space { c.out.saturating_sub(count) } else { c.out };
            let inp = if c.in_space == space { c.inp.saturating_sub(count) } else { c.inp };
            (out * inp) as u64 * c.per_pair
        })
        .sum()
}

pub(crate) fn total_macs<T: Scalar>(net: &Network<T>) -> Result<u64> {
    Ok(total_with_removed(&cost_table(net)?, usize::MAX, 0))
}

/// FLOPs report at the network's own input shape.
pub fn flops<T: Scalar>(net: &Network<T>) -> Result<FlopsReport> {
    flops_at(net, net.input_shape())
}

pub fn flops_at<T: Scalar>(net: &Network<T>, input_shape: [usize; 3]) -> Result<FlopsReport> {
    let table = cost_table_at(net, input_shape)?;
    let per_layer: Vec<LayerMacs> = table
        .iter()
        .map(|c| LayerMacs { layer: net.nodes()[c.node].name.clone(), macs: (c.out * c.inp) as u64 * c.per_pair })
        .collect();
    Ok(FlopsReport { total: per_layer.iter().map(|l| l.macs).sum(), per_layer, input_shape })
}

/// Fraction of baseline FLOPs removed: `1 − Ψ(pruned) / Ψ(base)`.
pub fn pruning_rate(base: &FlopsReport, pruned: &FlopsReport) -> Result<f64> {
    if base.input_shape != pruned.input_shape {
        return Err(Error::Shape(format!(
            "FLOPs measured at different inputs: {:?} vs {:?}",
            base.input_shape, pruned.input_shape
        )));
    }
    rate_from_totals(base.total, pruned.total)
}

pub fn rate_from_totals(base: u64, pruned: u64) -> Result<f64> {
    if base == 0 {
        return Err(Error::ZeroFlops);
    }
    Ok(1.0 - pruned as f64 / base as f64)
}

/// MACs of `layer`'s own entry in the FLOPs report.
pub fn layer_contribution<T: Scalar>(net: &Network<T>, layer: &str) -> Result<u64> {
    let report = flops(net)?;
    report.layer(layer).ok_or_else(|| Error::UnknownLayer(layer.into()))
}

/// Exact MACs freed by removing one filter of `layer` together with its
/// whole coupled group, at current shapes.
pub fn group_delta_per_filter<T: Scalar>(net: &Network<T>, layer: &str) -> Result<u64> {
    let idx = net.node_index(layer).ok_or_else(|| Error::UnknownLayer(layer.into()))?;
    let map = channel_map(net)?;
    let table = cost_table(net)?;
    let total = total_with_removed(&table, usize::MAX, 0);
    Ok(total - total_with_removed(&table, map.node_space[idx], 1))
}

/// How the per-layer step size is derived.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    /// `P_s · Ψ / δ`, with `δ` the exact MACs one filter group frees.
    #[default]
    Measured,
    /// `P_s · Ψ · N_out / own_layer_macs`; ignores consumer-side savings.
    Analytic,
    /// Measured for convs whose channels are shared across an addition,
    /// analytic for plain chain layers.
    Hybrid,
}

impl std::str::FromStr for StepMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "measured" => Ok(StepMode::Measured),
            "analytic" => Ok(StepMode::Analytic),
            "hybrid" => Ok(StepMode::Hybrid),
            _ => Err(Error::Config(format!("unknown step mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStep {
    pub layer: String,
    pub filters: usize,
    pub contribution: u64,
    pub group_delta: u64,
    /// True when the layer's channels are shared with other producers.
    pub coupled: bool,
    pub analytic: usize,
    pub measured: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationPlan {
    pub step_rate: f64,
    pub baseline_total: u64,
    pub mode: StepMode,
    /// Prunable layers in network order.
    pub steps: Vec<LayerStep>,
}

impl ExplorationPlan {
    pub fn step(&self, layer: &str) -> Option<usize> {
        self.steps.iter().find(|s| s.layer == layer).map(|s| s.step)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Per-layer filter counts so that one pruning step removes about
/// `step_rate` of the network's FLOPs. Layers with a zero contribution are
/// left out of the plan.
pub fn exploration_steps<T: Scalar>(net: &Network<T>, step_rate: f64, mode: StepMode) -> Result<ExplorationPlan> {
    if !(step_rate > 0.0 && step_rate < 1.0) {
        return Err(Error::Config(format!("step rate {step_rate} must lie in (0, 1)")));
    }
    let map = channel_map(net)?;
    let table = cost_table(net)?;
    let total = total_with_removed(&table, usize::MAX, 0);
    if total == 0 {
        return Err(Error::ZeroFlops);
    }
    let own: BTreeMap<usize, u64> = table.iter().map(|c| (c.node, (c.out * c.inp) as u64 * c.per_pair)).collect();
    let budget = step_rate * total as f64;
    let mut steps = Vec::new();
    for (i, node) in net.nodes().iter().enumerate() {
        let Op::Conv(conv) = &node.op else { continue };
        let space = map.space_of(i);
        if conv.role != ConvRole::Main || !space.prunable {
            continue;
        }
        let contribution = own[&i];
        let group_delta = total - total_with_removed(&table, space.id, 1);
        if contribution == 0 || group_delta == 0 {
            continue;
        }
        let filters = conv.out_channels();
        let analytic = round_half_up(budget * filters as f64 / contribution as f64).max(1);
        let measured = round_half_up(budget / group_delta as f64).max(1);
        let coupled = space.producers.len() > 1;
        let step = match mode {
            StepMode::Measured => measured,
            StepMode::Analytic => analytic,
            StepMode::Hybrid if coupled => measured,
            StepMode::Hybrid => analytic,
        };
        steps.push(LayerStep { layer: node.name.clone(), filters, contribution, group_delta, coupled, analytic, measured, step });
    }
    Ok(ExplorationPlan { step_rate, baseline_total: total, mode, steps })
}
