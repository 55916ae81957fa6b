//! Network representation, execution and the architecture zoo.
//!
//! A [`Network`] is a topologically ordered DAG of [`Node`]s. Node 0 is always
//! the image input and the last node produces the `[classes]` logits. All
//! activations flow channel-major (`[C, N, H, W]`).

pub mod checkpoint;
mod kernels;
pub mod zoo;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use kernels::{BnBatchStats, ConvGeom};

pub use zoo::{build_model, ArchSpec};

/// A trainable tensor with its SGD momentum buffer.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub momentum: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let momentum = Tensor::zeros(value.shape());
        Param { value, momentum }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub(crate) fn select(&mut self, axis: usize, keep: &[usize]) {
        let tracked = self.momentum.shape() == self.value.shape();
        self.value = self.value.select(axis, keep);
        self.momentum = if tracked { self.momentum.select(axis, keep) } else { Tensor::zeros(&[0]) };
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvRole {
    /// Main-path convolution; may drive pruning.
    Main,
    /// Projection on a residual shortcut; pruned only as a group member.
    Shortcut,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Conv2d<T: Scalar> {
    /// `[out, in, k, k]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
    pub role: ConvRole,
}

impl<T: Scalar> Conv2d<T> {
    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.dim(2)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Linear<T: Scalar> {
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "", tag = "type", rename_all = "snake_case")]
pub enum Op<T: Scalar> {
    Input,
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    Add,
    /// Channel concatenation; executable, but rejected by the pruning graph.
    Concat,
    MaxPool { kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    Linear(Linear<T>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Node<T: Scalar> {
    pub name: String,
    pub op: Op<T>,
    pub inputs: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Norm,
    Linear,
    AddJunction,
    Concat,
    Pool,
    Activation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub prunable: bool,
}

/// A labelled batch. `images` is channel-major: `[C, N, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    /// Builds a batch from conventional `[N, C, H, W]` image data.
    pub fn from_nchw(images: &Tensor<T>, labels: Vec<usize>) -> Self {
        let (n, c) = (images.dim(0), images.dim(1));
        let plane = images.dim(2) * images.dim(3);
        let mut data = Vec::with_capacity(images.len());
        for ch in 0..c {
            for b in 0..n {
                data.extend_from_slice(&images.data()[(b * c + ch) * plane..][..plane]);
            }
        }
        Batch {
            images: Tensor::from_vec(&[c, n, images.dim(2), images.dim(3)], data),
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Network<T: Scalar> {
    pub(crate) arch: String,
    pub(crate) input_shape: [usize; 3],
    pub(crate) class_count: usize,
    pub(crate) nodes: Vec<Node<T>>,
}

struct Exec<T: Scalar> {
    acts: Vec<Option<Tensor<T>>>,
    bn: Vec<Option<BnBatchStats<T>>>,
}

impl<T: Scalar> Network<T> {
    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn node(&self, name: &str) -> Option<&Node<T>> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut Node<T>> {
        self.nodes.iter_mut().find(|n| n.name == name)
    }

    pub fn conv(&self, name: &str) -> Option<&Conv2d<T>> {
        match self.node(name).map(|n| &n.op) {
            Some(Op::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self, name: &str) -> Option<&mut Conv2d<T>> {
        match self.node_mut(name).map(|n| &mut n.op) {
            Some(Op::Conv(c)) => Some(c),
            _ => None,
        }
    }

    /// Names of the convolutions that may drive pruning, in network order.
    pub fn prunable_convs(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Conv(c) if c.role == ConvRole::Main => Some(n.name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        let shapes = self.infer_shapes().ok();
        let channels_of = |i: usize| shapes.as_ref().map(|s| s[i][0]).unwrap_or(0);
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let in_ch = n.inputs.first().map(|&j| channels_of(j)).unwrap_or(0);
                let (kind, out_ch, in_ch, kernel, prunable) = match &n.op {
                    Op::Input => return None,
                    Op::Conv(c) => (LayerKind::Conv, c.out_channels(), c.in_channels(), c.kernel(), c.role == ConvRole::Main),
                    Op::BatchNorm(b) => (LayerKind::Norm, b.channels(), b.channels(), 0, false),
                    Op::Linear(l) => (LayerKind::Linear, l.weight.value.dim(0), l.weight.value.dim(1), 0, false),
                    Op::Add => (LayerKind::AddJunction, channels_of(i), in_ch, 0, false),
                    Op::Concat => (LayerKind::Concat, channels_of(i), in_ch, 0, false),
                    Op::MaxPool { kernel, .. } => (LayerKind::Pool, in_ch, in_ch, *kernel, false),
                    Op::GlobalAvgPool => (LayerKind::Pool, in_ch, in_ch, 0, false),
                    Op::Relu => (LayerKind::Activation, in_ch, in_ch, 0, false),
                };
                Some(LayerInfo { name: n.name.clone(), kind, out_channels: out_ch, in_channels: in_ch, kernel, prunable })
            })
            .collect()
    }

    pub fn count_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Conv(c) => {
                    out.push(&c.weight);
                    out.extend(c.bias.as_ref());
                }
                Op::BatchNorm(b) => {
                    out.push(&b.gamma);
                    out.push(&b.beta);
                }
                Op::Linear(l) => {
                    out.push(&l.weight);
                    out.push(&l.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for n in &mut self.nodes {
            match &mut n.op {
                Op::Conv(c) => {
                    out.push(&mut c.weight);
                    out.extend(c.bias.as_mut());
                }
                Op::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                Op::Linear(l) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Resets every momentum buffer to zero.
    pub fn clear_momentum(&mut self) {
        for p in self.params_mut() {
            p.momentum = Tensor::zeros(p.value.shape());
        }
    }

    /// Copy without optimizer state, for side-effect-free evaluation.
    pub fn inference_clone(&self) -> Self {
        let mut net = self.clone();
        for p in net.params_mut() {
            p.momentum = Tensor::zeros(&[0]);
        }
        net
    }

    /// Output shape `[C, H, W]` of every node; validates channel wiring.
    pub fn infer_shapes(&self) -> Result<Vec<[usize; 3]>> {
        self.infer_shapes_at(self.input_shape)
    }

    /// Shape inference for an arbitrary input resolution.
    pub fn infer_shapes_at(&self, input_shape: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if node.inputs.iter().any(|&j| j >= i) {
                return Err(Error::Shape(format!("node `{}` is not topologically ordered", node.name)));
            }
            let arg = |k: usize| -> Result<[usize; 3]> {
                node.inputs
                    .get(k)
                    .map(|&j| shapes[j])
                    .ok_or_else(|| Error::Shape(format!("node `{}` is missing input {k}", node.name)))
            };
            let shape = match &node.op {
                Op::Input => {
                    if i != 0 {
                        return Err(Error::Shape("input must be node 0".into()));
                    }
                    input_shape
                }
                Op::Conv(c) => {
                    let [ch, h, w] = arg(0)?;
                    if c.in_channels() != ch {
                        return Err(Error::Shape(format!(
                            "conv `{}` expects {} input channels, got {ch}",
                            node.name,
                            c.in_channels()
                        )));
                    }
                    let g = ConvGeom::new(ch, h, w, c.kernel(), c.stride, c.padding)
                        .ok_or_else(|| Error::Shape(format!("conv `{}` input {h}x{w} too small", node.name)))?;
                    if let Some(b) = &c.bias {
                        if b.len() != c.out_channels() {
                            return Err(Error::Shape(format!("conv `{}` bias length mismatch", node.name)));
                        }
                    }
                    [c.out_channels(), g.ho, g.wo]
                }
                Op::BatchNorm(b) => {
                    let s = arg(0)?;
                    let c = b.channels();
                    if s[0] != c || b.beta.len() != c || b.running_mean.len() != c || b.running_var.len() != c {
                        return Err(Error::Shape(format!(
                            "norm `{}` has {c} channels, input has {}",
                            node.name, s[0]
                        )));
                    }
                    s
                }
                Op::Relu => arg(0)?,
                Op::Add => {
                    let first = arg(0)?;
                    for k in 1..node.inputs.len() {
                        if arg(k)? != first {
                            return Err(Error::Shape(format!(
                                "add `{}` operands disagree: {:?} vs {:?}",
                                node.name,
                                first,
                                arg(k)?
                            )));
                        }
                    }
                    if node.inputs.len() < 2 {
                        return Err(Error::Shape(format!("add `{}` needs two operands", node.name)));
                    }
                    first
                }
                Op::Concat => {
                    let first = arg(0)?;
                    let mut c = 0;
                    for k in 0..node.inputs.len() {
                        let s = arg(k)?;
                        if s[1..] != first[1..] {
                            return Err(Error::Shape(format!("concat `{}` spatial mismatch", node.name)));
                        }
                        c += s[0];
                    }
                    [c, first[1], first[2]]
                }
                Op::MaxPool { kernel, stride, padding } => {
                    let [c, h, w] = arg(0)?;
                    let g = ConvGeom::new(c, h, w, *kernel, *stride, *padding)
                        .ok_or_else(|| Error::Shape(format!("pool `{}` input {h}x{w} too small", node.name)))?;
                    [c, g.ho, g.wo]
                }
                Op::GlobalAvgPool => [arg(0)?[0], 1, 1],
                Op::Linear(l) => {
                    let s = arg(0)?;
                    if s[1] != 1 || s[2] != 1 || s[0] != l.weight.value.dim(1) {
                        return Err(Error::Shape(format!(
                            "linear `{}` expects [{}, 1, 1], got {:?}",
                            node.name,
                            l.weight.value.dim(1),
                            s
                        )));
                    }
                    if l.bias.len() != l.weight.value.dim(0) {
                        return Err(Error::Shape(format!("linear `{}` bias length mismatch", node.name)));
                    }
                    [l.weight.value.dim(0), 1, 1]
                }
            };
            shapes.push(shape);
        }
        match shapes.last() {
            Some(&[c, 1, 1]) if c == self.class_count => Ok(shapes),
            other => Err(Error::Shape(format!(
                "network output {other:?} does not match {} classes",
                self.class_count
            ))),
        }
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<usize> {
        let s = images.shape();
        if s.len() != 4 || s[0] != self.input_shape[0] || s[2] != self.input_shape[1] || s[3] != self.input_shape[2] {
            return Err(Error::Shape(format!(
                "batch {:?} does not match input shape {:?} (channel-major)",
                s, self.input_shape
            )));
        }
        if s[1] == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(s[1])
    }

    fn last_uses(&self) -> Vec<usize> {
        let mut last: Vec<usize> = (0..self.nodes.len()).collect();
        for (j, n) in self.nodes.iter().enumerate() {
            for &i in &n.inputs {
                last[i] = last[i].max(j);
            }
        }
        last
    }

    /// Core executor. Nodes below `start` are taken from `cached`.
    fn execute(
        &self,
        images: Option<&Tensor<T>>,
        train: bool,
        keep: &dyn Fn(usize) -> bool,
        start: usize,
        cached: &BTreeMap<usize, Tensor<T>>,
    ) -> Result<Exec<T>> {
        let count = self.nodes.len();
        let last = self.last_uses();
        let mut acts: Vec<Option<Tensor<T>>> = vec![None; count];
        let mut bn: Vec<Option<BnBatchStats<T>>> = vec![None; count];
        let shapes = self.infer_shapes()?;
        for i in start.max(0)..count {
            let node = &self.nodes[i];
            let input = |k: usize| -> &Tensor<T> {
                let j = node.inputs[k];
                if j < start {
                    cached.get(&j).expect("resume cache is missing a live activation")
                } else {
                    acts[j].as_ref().expect("activation freed before its last use")
                }
            };
            let out = match &node.op {
                Op::Input => images.ok_or(Error::EmptyBatch)?.clone(),
                Op::Conv(c) => {
                    let [ch, h, w] = shapes[node.inputs[0]];
                    let g = ConvGeom::new(ch, h, w, c.kernel(), c.stride, c.padding).expect("validated");
                    kernels::conv_forward(input(0), &c.weight.value, c.bias.as_ref().map(|b| &b.value), &g)
                }
                Op::BatchNorm(b) => {
                    let eps = T::of(b.eps);
                    if train {
                        let (y, stats) = kernels::bn_forward_train(input(0), b.gamma.value.data(), b.beta.value.data(), eps);
                        bn[i] = Some(stats);
                        y
                    } else {
                        kernels::bn_forward_eval(
                            input(0),
                            b.gamma.value.data(),
                            b.beta.value.data(),
                            b.running_mean.data(),
                            b.running_var.data(),
                            eps,
                        )
                    }
                }
                Op::Relu => {
                    let x = input(0);
                    Tensor::from_vec(x.shape(), x.data().iter().map(|v| v.max(T::zero())).collect())
                }
                Op::Add => {
                    let mut acc = input(0).clone();
                    for k in 1..node.inputs.len() {
                        for (a, b) in acc.data_mut().iter_mut().zip(input(k).data()) {
                            *a += *b;
                        }
                    }
                    acc
                }
                Op::Concat => {
                    let first = input(0);
                    let mut data = Vec::new();
                    let mut c = 0;
                    for k in 0..node.inputs.len() {
                        data.extend_from_slice(input(k).data());
                        c += input(k).dim(0);
                    }
                    Tensor::from_vec(&[c, first.dim(1), first.dim(2), first.dim(3)], data)
                }
                Op::MaxPool { kernel, stride, padding } => {
                    let [ch, h, w] = shapes[node.inputs[0]];
                    let g = ConvGeom::new(ch, h, w, *kernel, *stride, *padding).expect("validated");
                    kernels::max_pool_forward(input(0), &g)
                }
                Op::GlobalAvgPool => kernels::global_avg_pool(input(0)),
                Op::Linear(l) => kernels::linear_forward(input(0), &l.weight.value, &l.bias.value),
            };
            acts[i] = Some(out);
            for &j in &node.inputs {
                if j >= start && last[j] == i && !keep(j) {
                    acts[j] = None;
                }
            }
        }
        Ok(Exec { acts, bn })
    }

    /// Eval-mode logits, channel-major `[K, N, 1, 1]`.
    fn eval_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let exec = self.execute(Some(images), false, &|_| false, 0, &BTreeMap::new())?;
        Ok(exec.acts.into_iter().last().flatten().expect("output node computed"))
    }

    /// Eval-mode logits as `[N, K]` for a channel-major image batch.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let raw = self.eval_logits(images)?;
        Ok(transpose_logits(&raw))
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let raw = self.eval_logits(images)?;
        Ok(argmax_columns(&raw))
    }

    fn check_labels(&self, batch: &Batch<T>) -> Result<()> {
        if batch.labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if batch.labels.len() != batch.images.dim(1) {
            return Err(Error::Shape(format!(
                "{} labels for {} images",
                batch.labels.len(),
                batch.images.dim(1)
            )));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::Label { label: bad, classes: self.class_count });
        }
        Ok(())
    }

    /// Mean cross-entropy in evaluation mode. Never mutates the network.
    pub fn forward_loss(&self, batch: &Batch<T>) -> Result<T> {
        self.check_images(&batch.images)?;
        self.check_labels(batch)?;
        let logits = self.eval_logits(&batch.images)?;
        Ok(kernels::softmax_cross_entropy(logits.data(), self.class_count, &batch.labels, false).0)
    }

    /// Runs an eval-mode pass and retains the activations listed in `keep`.
    pub(crate) fn forward_collect(
        &self,
        batch: &Batch<T>,
        keep: &BTreeSet<usize>,
    ) -> Result<(T, BTreeMap<usize, Tensor<T>>)> {
        self.check_images(&batch.images)?;
        self.check_labels(batch)?;
        let exec = self.execute(Some(&batch.images), false, &|i| keep.contains(&i), 0, &BTreeMap::new())?;
        let mut acts = exec.acts;
        let logits = acts.pop().flatten().expect("output node computed");
        let loss = kernels::softmax_cross_entropy(logits.data(), self.class_count, &batch.labels, false).0;
        let kept = keep.iter().filter_map(|&i| acts.get_mut(i).and_then(Option::take).map(|t| (i, t))).collect();
        Ok((loss, kept))
    }

    /// Eval-mode loss resuming at node `start` from cached activations.
    pub(crate) fn forward_loss_from(
        &self,
        labels: &[usize],
        start: usize,
        cached: &BTreeMap<usize, Tensor<T>>,
    ) -> Result<T> {
        let exec = self.execute(None, false, &|_| false, start, cached)?;
        let logits = exec.acts.into_iter().last().flatten().expect("output node computed");
        Ok(kernels::softmax_cross_entropy(logits.data(), self.class_count, labels, false).0)
    }

    /// Nodes below `start` whose outputs are consumed at or after `start`.
    pub(crate) fn live_before(&self, start: usize) -> BTreeSet<usize> {
        self.nodes[start..]
            .iter()
            .flat_map(|n| n.inputs.iter().copied())
            .filter(|&j| j < start)
            .collect()
    }

    /// Training-mode forward and backward pass. Updates batch-norm running
    /// statistics and returns the loss with one gradient per parameter, in
    /// [`Network::params`] order.
    pub fn loss_and_grads(&mut self, batch: &Batch<T>) -> Result<(T, Vec<Tensor<T>>)> {
        self.check_images(&batch.images)?;
        self.check_labels(batch)?;
        let exec = self.execute(Some(&batch.images), true, &|_| true, 0, &BTreeMap::new())?;
        let logits = exec.acts.last().cloned().flatten().expect("output node computed");
        let (loss, dlogits) = kernels::softmax_cross_entropy(logits.data(), self.class_count, &batch.labels, true);
        let grads = self.backward(&exec, Tensor::from_vec(logits.shape(), dlogits.expect("requested")))?;
        self.apply_bn_stats(&exec);
        Ok((loss, grads))
    }

    fn apply_bn_stats(&mut self, exec: &Exec<T>) {
        for (node, stats) in self.nodes.iter_mut().zip(&exec.bn) {
            if let (Op::BatchNorm(b), Some(s)) = (&mut node.op, stats) {
                let m = T::of(b.momentum);
                let keep = T::one() - m;
                for (r, v) in b.running_mean.data_mut().iter_mut().zip(&s.mean) {
                    *r = keep * *r + m * *v;
                }
                for (r, v) in b.running_var.data_mut().iter_mut().zip(&s.unbiased_var) {
                    *r = keep * *r + m * *v;
                }
            }
        }
    }

    fn backward(&self, exec: &Exec<T>, dlogits: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let count = self.nodes.len();
        let shapes = self.infer_shapes()?;
        let mut param_offset = Vec::with_capacity(count);
        let mut total = 0;
        for n in &self.nodes {
            param_offset.push(total);
            total += match &n.op {
                Op::Conv(c) => 1 + usize::from(c.bias.is_some()),
                Op::BatchNorm(_) | Op::Linear(_) => 2,
                _ => 0,
            };
        }
        let mut pgrads: Vec<Option<Tensor<T>>> = vec![None; total];
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; count];
        grads[count - 1] = Some(dlogits);
        let act = |i: usize| exec.acts[i].as_ref().expect("training pass keeps every activation");

        fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g),
            }
        }

        for i in (1..count).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let needs = |j: usize| j != 0;
            match &node.op {
                Op::Input => {}
                Op::Conv(c) => {
                    let j = node.inputs[0];
                    let [ch, h, w] = shapes[j];
                    let g = ConvGeom::new(ch, h, w, c.kernel(), c.stride, c.padding).expect("validated");
                    let cg = kernels::conv_backward(act(j), &c.weight.value, c.bias.is_some(), &dy, &g, needs(j));
                    pgrads[param_offset[i]] = Some(cg.dw);
                    if let Some(db) = cg.db {
                        pgrads[param_offset[i] + 1] = Some(db);
                    }
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads[j], dx);
                    }
                }
                Op::BatchNorm(b) => {
                    let j = node.inputs[0];
                    let stats = exec.bn[i].as_ref().expect("training pass records batch statistics");
                    let (dx, dg, db) = kernels::bn_backward(act(j), b.gamma.value.data(), stats, &dy);
                    pgrads[param_offset[i]] = Some(Tensor::from_vec(&[dg.len()], dg));
                    pgrads[param_offset[i] + 1] = Some(Tensor::from_vec(&[db.len()], db));
                    if needs(j) {
                        accumulate(&mut grads[j], dx);
                    }
                }
                Op::Relu => {
                    let j = node.inputs[0];
                    let y = act(i);
                    let dx = Tensor::from_vec(
                        dy.shape(),
                        dy.data().iter().zip(y.data()).map(|(g, v)| if *v > T::zero() { *g } else { T::zero() }).collect(),
                    );
                    if needs(j) {
                        accumulate(&mut grads[j], dx);
                    }
                }
                Op::Add => {
                    for &j in &node.inputs {
                        if needs(j) {
                            accumulate(&mut grads[j], dy.clone());
                        }
                    }
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &j in &node.inputs {
                        let len = act(j).len();
                        if needs(j) {
                            let part = Tensor::from_vec(act(j).shape(), dy.data()[offset..offset + len].to_vec());
                            accumulate(&mut grads[j], part);
                        }
                        offset += len;
                    }
                }
                Op::MaxPool { kernel, stride, padding } => {
                    let j = node.inputs[0];
                    let [ch, h, w] = shapes[j];
                    let g = ConvGeom::new(ch, h, w, *kernel, *stride, *padding).expect("validated");
                    if needs(j) {
                        accumulate(&mut grads[j], kernels::max_pool_backward(act(j), &dy, &g));
                    }
                }
                Op::GlobalAvgPool => {
                    let j = node.inputs[0];
                    if needs(j) {
                        accumulate(&mut grads[j], kernels::global_avg_pool_backward(act(j).shape(), &dy));
                    }
                }
                Op::Linear(l) => {
                    let j = node.inputs[0];
                    let (dx, dw, db) = kernels::linear_backward(act(j), &l.weight.value, &dy);
                    pgrads[param_offset[i]] = Some(dw);
                    pgrads[param_offset[i] + 1] = Some(db);
                    if needs(j) {
                        accumulate(&mut grads[j], dx);
                    }
                }
            }
        }
        let params = self.params();
        Ok(pgrads
            .into_iter()
            .zip(params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect())
    }
}

fn transpose_logits<T: Scalar>(raw: &Tensor<T>) -> Tensor<T> {
    let (k, n) = (raw.dim(0), raw.dim(1));
    let mut data = vec![T::zero(); k * n];
    for r in 0..k {
        for c in 0..n {
            data[c * k + r] = raw.data()[r * n + c];
        }
    }
    Tensor::from_vec(&[n, k], data)
}

fn argmax_columns<T: Scalar>(raw: &Tensor<T>) -> Vec<usize> {
    let (k, n) = (raw.dim(0), raw.dim(1));
    (0..n)
        .map(|c| {
            let mut best = 0;
            for r in 1..k {
                if raw.data()[r * n + c] > raw.data()[best * n + c] {
                    best = r;
                }
            }
            best
        })
        .collect()
}

/// Incremental construction of custom networks.
pub struct NetworkBuilder<T: Scalar> {
    net: Network<T>,
    rng: rand_chacha::ChaCha8Rng,
}

impl<T: Scalar> NetworkBuilder<T> {
    pub fn new(arch: &str, input_shape: [usize; 3], class_count: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let input = Node { name: "input".into(), op: Op::Input, inputs: vec![] };
        NetworkBuilder {
            net: Network { arch: arch.into(), input_shape, class_count, nodes: vec![input] },
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub const INPUT: usize = 0;

    fn push(&mut self, name: &str, op: Op<T>, inputs: Vec<usize>) -> usize {
        assert!(self.net.node_index(name).is_none(), "duplicate layer name `{name}`");
        self.net.nodes.push(Node { name: name.into(), op, inputs });
        self.net.nodes.len() - 1
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).expect("positive std");
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| T::of(dist.sample(&mut self.rng))).collect())
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        use rand::Rng;
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| T::of(self.rng.random_range(-bound..bound))).collect())
    }

    /// Kaiming-normal (fan-out) initialised convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        input: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        role: ConvRole,
    ) -> usize {
        let std = (2.0 / (out_ch * kernel * kernel) as f64).sqrt();
        let weight = Param::new(self.normal(&[out_ch, in_ch, kernel, kernel], std));
        let bias = bias.then(|| Param::new(Tensor::zeros(&[out_ch])));
        self.push(name, Op::Conv(Conv2d { weight, bias, stride, padding, role }), vec![input])
    }

    pub fn batch_norm(&mut self, name: &str, input: usize, channels: usize) -> usize {
        self.push(name, Op::BatchNorm(BatchNorm::new(channels)), vec![input])
    }

    pub fn relu(&mut self, name: &str, input: usize) -> usize {
        self.push(name, Op::Relu, vec![input])
    }

    pub fn add(&mut self, name: &str, a: usize, b: usize) -> usize {
        self.push(name, Op::Add, vec![a, b])
    }

    pub fn concat(&mut self, name: &str, inputs: Vec<usize>) -> usize {
        self.push(name, Op::Concat, inputs)
    }

    pub fn max_pool(&mut self, name: &str, input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        self.push(name, Op::MaxPool { kernel, stride, padding }, vec![input])
    }

    pub fn global_avg_pool(&mut self, name: &str, input: usize) -> usize {
        self.push(name, Op::GlobalAvgPool, vec![input])
    }

    /// Linear layer with the default uniform(±1/√fan_in) initialisation.
    pub fn linear(&mut self, name: &str, input: usize, in_features: usize, out_features: usize) -> usize {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = Param::new(self.uniform(&[out_features, in_features], bound));
        let bias = Param::new(self.uniform(&[out_features], bound));
        self.push(name, Op::Linear(Linear { weight, bias }), vec![input])
    }

    /// Validates wiring and returns the network.
    pub fn finish(self) -> Result<Network<T>> {
        self.net.infer_shapes()?;
        Ok(self.net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_conv(bias: bool) -> Network<f64> {
        let mut b = NetworkBuilder::<f64>::new("custom", [3, 4, 4], 8, 0);
        let c = b.conv("conv", NetworkBuilder::<f64>::INPUT, 3, 8, 3, 1, 1, bias, ConvRole::Main);
        b.global_avg_pool("pool", c);
        // output is the pooled conv itself: 8 "classes"
        b.finish().unwrap()
    }

    #[test]
    fn parameter_counts_of_single_conv() {
        let net = single_conv(false);
        assert_eq!(net.count_params(), 216);
        assert_eq!(single_conv(true).count_params(), 224);
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        let mut net = zoo::build_model::<f64>("toy-chain[4]", [3, 6, 6], 5, 3).unwrap();
        if let Op::Linear(l) = &mut net.nodes.last_mut().unwrap().op {
            l.weight.value.fill(0.0);
            l.bias.value.fill(0.0);
        }
        let batch = Batch { images: Tensor::full(&[3, 2, 6, 6], 0.5), labels: vec![0, 4] };
        let loss = net.forward_loss(&batch).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_batches() {
        let net = zoo::build_model::<f32>("toy-chain[4]", [3, 6, 6], 5, 3).unwrap();
        let empty = Batch { images: Tensor::zeros(&[3, 0, 6, 6]), labels: vec![] };
        assert!(matches!(net.forward_loss(&empty), Err(Error::EmptyBatch)));
        let wrong = Batch { images: Tensor::zeros(&[3, 1, 5, 6]), labels: vec![0] };
        assert!(matches!(net.forward_loss(&wrong), Err(Error::Shape(_))));
        let label = Batch { images: Tensor::zeros(&[3, 1, 6, 6]), labels: vec![5] };
        assert!(matches!(net.forward_loss(&label), Err(Error::Label { .. })));
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let mut net = zoo::build_model::<f64>("resnet8x0.25", [3, 8, 8], 3, 11).unwrap();
        let images = Tensor::from_vec(&[3, 4, 8, 8], (0..768).map(|i| ((i as f64) * 0.13).sin()).collect());
        let batch = Batch { images, labels: vec![0, 2, 1, 2] };
        let (_, grads) = net.clone().loss_and_grads(&batch).unwrap();
        // training-mode loss as a pure function of the parameters
        let train_loss = |net: &Network<f64>| net.clone().loss_and_grads(&batch).unwrap().0;
        let h = 1e-5;
        let n_params = net.params().len();
        for pi in [0, 3, n_params / 2, n_params - 2, n_params - 1] {
            for idx in [0, net.params()[pi].len() - 1] {
                let mut plus = net.clone();
                plus.params_mut()[pi].value.data_mut()[idx] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].value.data_mut()[idx] -= h;
                let fd = (train_loss(&plus) - train_loss(&minus)) / (2.0 * h);
                let an = grads[pi].data()[idx];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "param {pi}[{idx}]: fd {fd} vs {an}");
            }
        }
        net.loss_and_grads(&batch).unwrap();
    }
}
