//! Channel-coupling analysis and physical filter removal.
//!
//! Every node output lives in a *channel space*. Convolutions and linear
//! layers open a new space; norm, activation and pooling layers pass their
//! input's space through; an addition merges the spaces of all its operands.
//! A pruning group is one channel index of one space: the out-slice of every
//! conv producing the space, the matching norm channels, and the in-slice of
//! every conv or linear layer consuming it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops;
use crate::model::{ConvRole, Network, Op};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Out,
    In,
    NormChannel,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupMember {
    pub layer: String,
    pub axis: Axis,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningGroup {
    pub driver: (String, usize),
    pub members: Vec<GroupMember>,
    /// MACs removed if only this group is pruned, at current shapes.
    pub flops_weight: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryReceipt {
    pub layer: String,
    pub removed: Vec<GroupMember>,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
}

/// One coupled channel space of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelSpace {
    pub id: usize,
    pub channels: usize,
    /// Conv nodes whose output channels live here.
    pub producers: Vec<usize>,
    /// Batch-norm nodes normalising this space.
    pub norms: Vec<usize>,
    /// Conv or linear nodes reading this space.
    pub consumers: Vec<usize>,
    /// False if the space touches the image input or the logits.
    pub prunable: bool,
}

#[derive(Clone, Debug)]
pub struct ChannelMap {
    /// Space id of every node's output.
    pub node_space: Vec<usize>,
    pub spaces: Vec<ChannelSpace>,
}

impl ChannelMap {
    pub fn space_of(&self, node: usize) -> &ChannelSpace {
        &self.spaces[self.node_space[node]]
    }
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut root = x;
    while parent[root] != root {
        root = parent[root];
    }
    let mut cur = x;
    while parent[cur] != root {
        let next = parent[cur];
        parent[cur] = root;
        cur = next;
    }
    root
}

/// Traces channel coupling through the graph. Rejects concatenation.
pub fn channel_map<T: Scalar>(net: &Network<T>) -> Result<ChannelMap> {
    let nodes = net.nodes();
    let shapes = net.infer_shapes()?;
    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    for (i, node) in nodes.iter().enumerate() {
        match &node.op {
            Op::Concat => {
                return Err(Error::UnsupportedTopology(format!(
                    "concatenation junction `{}` cannot be grouped",
                    node.name
                )))
            }
            Op::BatchNorm(_) | Op::Relu | Op::MaxPool { .. } | Op::GlobalAvgPool | Op::Add => {
                for &j in &node.inputs {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
            Op::Input | Op::Conv(_) | Op::Linear(_) => {}
        }
    }
    let roots: Vec<usize> = (0..nodes.len()).map(|i| find(&mut parent, i)).collect();
    let mut ids = BTreeMap::new();
    for &r in &roots {
        let next = ids.len();
        ids.entry(r).or_insert(next);
    }
    let node_space: Vec<usize> = roots.iter().map(|r| ids[r]).collect();
    let mut spaces: Vec<ChannelSpace> = (0..ids.len())
        .map(|id| ChannelSpace { id, channels: 0, producers: vec![], norms: vec![], consumers: vec![], prunable: true })
        .collect();
    let output = nodes.len() - 1;
    for (i, node) in nodes.iter().enumerate() {
        let s = node_space[i];
        spaces[s].channels = shapes[i][0];
        match &node.op {
            Op::Input => spaces[s].prunable = false,
            Op::Conv(_) => {
                spaces[s].producers.push(i);
                spaces[node_space[node.inputs[0]]].consumers.push(i);
            }
            Op::Linear(_) => spaces[node_space[node.inputs[0]]].consumers.push(i),
            Op::BatchNorm(_) => spaces[s].norms.push(i),
            _ => {}
        }
        if i == output {
            spaces[s].prunable = false;
        }
    }
    for space in &mut spaces {
        if space.producers.is_empty() {
            space.prunable = false;
        }
    }
    Ok(ChannelMap { node_space, spaces })
}

fn members_of<T: Scalar>(net: &Network<T>, space: &ChannelSpace, index: usize) -> Vec<GroupMember> {
    let name = |i: usize| net.nodes()[i].name.clone();
    let mut members = Vec::new();
    for &p in &space.producers {
        members.push(GroupMember { layer: name(p), axis: Axis::Out, index });
    }
    for &b in &space.norms {
        members.push(GroupMember { layer: name(b), axis: Axis::NormChannel, index });
    }
    for &c in &space.consumers {
        members.push(GroupMember { layer: name(c), axis: Axis::In, index });
    }
    members
}

/// Every (driver conv, filter index) group of the network.
pub fn build_groups<T: Scalar>(net: &Network<T>) -> Result<BTreeMap<(String, usize), PruningGroup>> {
    let map = channel_map(net)?;
    let table = flops::cost_table(net)?;
    let total = flops::total_with_removed(&table, usize::MAX, 0);
    let mut groups = BTreeMap::new();
    for (i, node) in net.nodes().iter().enumerate() {
        let Op::Conv(conv) = &node.op else { continue };
        if conv.role != ConvRole::Main {
            continue;
        }
        let space = map.space_of(i);
        if !space.prunable {
            continue;
        }
        let weight = total - flops::total_with_removed(&table, space.id, 1);
        for k in 0..conv.out_channels() {
            groups.insert(
                (node.name.clone(), k),
                PruningGroup { driver: (node.name.clone(), k), members: members_of(net, space, k), flops_weight: weight },
            );
        }
    }
    Ok(groups)
}

/// One line per group: `driver[k] (MACs) : member.axis[k], ...`.
pub fn groups_report(groups: &BTreeMap<(String, usize), PruningGroup>) -> String {
    let mut out = String::new();
    for g in groups.values() {
        let members: Vec<String> = g
            .members
            .iter()
            .map(|m| {
                let axis = match m.axis {
                    Axis::Out => "out",
                    Axis::In => "in",
                    Axis::NormChannel => "ch",
                };
                format!("{}.{axis}[{}]", m.layer, m.index)
            })
            .collect();
        let _ = writeln!(out, "{}[{}] ({} MACs): {}", g.driver.0, g.driver.1, g.flops_weight, members.join(", "));
    }
    out
}

fn resolve_conv<T: Scalar>(net: &Network<T>, layer: &str) -> Result<usize> {
    let idx = net.node_index(layer).ok_or_else(|| Error::UnknownLayer(layer.into()))?;
    match &net.nodes()[idx].op {
        Op::Conv(_) => Ok(idx),
        _ => Err(Error::NotPrunable(layer.into())),
    }
}

fn validate_indices(layer: &str, indices: &[usize], count: usize) -> Result<Vec<usize>> {
    let mut seen = BTreeSet::new();
    for &k in indices {
        if k >= count {
            return Err(Error::FilterIndex { layer: layer.into(), index: k, count });
        }
        if !seen.insert(k) {
            return Err(Error::DuplicateIndex { layer: layer.into(), index: k });
        }
    }
    if !indices.is_empty() && seen.len() >= count {
        return Err(Error::LayerCollapse { layer: layer.into(), removing: seen.len(), count });
    }
    Ok((0..count).filter(|k| !seen.contains(k)).collect())
}

/// Physically removes `indices` of the prunable conv `layer`, together with
/// every coupled slice. All checks run before any tensor is touched, so a
/// rejected call leaves the network unchanged.
pub fn remove_filters<T: Scalar>(net: &mut Network<T>, layer: &str, indices: &[usize]) -> Result<SurgeryReceipt> {
    let idx = resolve_conv(net, layer)?;
    if let Op::Conv(c) = &net.nodes()[idx].op {
        if c.role != ConvRole::Main {
            return Err(Error::NotPrunable(layer.into()));
        }
    }
    remove_group_channels(net, layer, indices)
}

/// Like [`remove_filters`] but accepts any conv of the group, including
/// shortcut projections.
pub fn remove_group_channels<T: Scalar>(net: &mut Network<T>, layer: &str, indices: &[usize]) -> Result<SurgeryReceipt> {
    let idx = resolve_conv(net, layer)?;
    let map = channel_map(net)?;
    let space = map.space_of(idx).clone();
    if !space.prunable {
        return Err(Error::UnsupportedTopology(format!(
            "channels of `{layer}` are tied to the network input or output"
        )));
    }
    let keep = validate_indices(layer, indices, space.channels)?;
    let params_before = net.count_params();
    let flops_before = flops::total_macs(net)?;
    let mut sorted: Vec<usize> = indices.to_vec();
    sorted.sort_unstable();
    let mut removed = Vec::new();
    for &k in &sorted {
        removed.extend(members_of(net, &space, k));
    }
    if !sorted.is_empty() {
        for &p in &space.producers {
            if let Op::Conv(c) = &mut net.nodes[p].op {
                c.weight.select(0, &keep);
                if let Some(b) = c.bias.as_mut() {
                    b.select(0, &keep);
                }
            }
        }
        for &b in &space.norms {
            if let Op::BatchNorm(bn) = &mut net.nodes[b].op {
                bn.gamma.select(0, &keep);
                bn.beta.select(0, &keep);
                bn.running_mean = bn.running_mean.select(0, &keep);
                bn.running_var = bn.running_var.select(0, &keep);
            }
        }
        for &c in &space.consumers {
            match &mut net.nodes[c].op {
                Op::Conv(conv) => conv.weight.select(1, &keep),
                Op::Linear(l) => l.weight.select(1, &keep),
                _ => unreachable!("consumers are conv or linear"),
            }
        }
    }
    let flops_after = flops::total_macs(net)?;
    Ok(SurgeryReceipt {
        layer: layer.into(),
        removed,
        params_before,
        params_after: net.count_params(),
        flops_before,
        flops_after,
    })
}

/// How many filters of a layer may still be removed: `floor(original ·
/// r_max) − already_pruned`, never emptying the layer.
pub fn pruning_budget(original: usize, current: usize, r_max: f64) -> usize {
    let cap = (original as f64 * r_max + 1e-9).floor() as usize;
    let pruned = original.saturating_sub(current);
    cap.saturating_sub(pruned).min(current.saturating_sub(1))
}

/// Number of filters `layer` may lose this iteration given its exploration
/// `step`, or `None` once its cumulative pruned fraction has reached `r_max`.
pub fn eligible_filters<T: Scalar>(
    net: &Network<T>,
    layer: &str,
    original_counts: &BTreeMap<String, usize>,
    r_max: f64,
    step: usize,
) -> Option<usize> {
    let current = net.conv(layer)?.out_channels();
    let original = *original_counts.get(layer)?;
    match pruning_budget(original, current, r_max) {
        0 => None,
        budget => Some(step.min(budget)),
    }
}
