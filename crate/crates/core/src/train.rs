//! SGD training, evaluation and the prune-while-training pipeline.
//!
//! Each epoch's shuffling and augmentation draw from their own random
//! stream keyed by (seed, epoch), so training resumed from a checkpoint at an
//! epoch boundary replays exactly what an uninterrupted run would have done.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TrainSchedule};
use crate::data::{epoch_batches, sample_probe, DatasetHandle, ProbeData, Split};
use crate::error::{Error, Result};
use crate::flops;
use crate::model::Network;
use crate::pruner::{self, PruneLog};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PrePrune,
    FineTune,
    PostPrune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Schedule epoch for regular training, running fine-tune count otherwise.
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Fraction of validation samples classified correctly.
    pub val_accuracy: f64,
    pub lr: f64,
    pub params: usize,
    pub macs: u64,
}

const STREAM_TRAIN: u64 = 1;
const STREAM_FINETUNE: u64 = 2;

fn epoch_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 40) | index as u64);
    rng
}

/// Momentum SGD with coupled weight decay: `g += wd·w; m = μ·m + g; w -= lr·m`.
pub fn sgd_step<T: Scalar>(net: &mut Network<T>, grads: &[Tensor<T>], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for (p, g) in net.params_mut().into_iter().zip(grads) {
        if p.momentum.shape() != p.value.shape() {
            p.momentum = Tensor::zeros(p.value.shape());
        }
        for ((w, m), &g) in p.value.data_mut().iter_mut().zip(p.momentum.data_mut()).zip(g.data()) {
            let g = g + wd * *w;
            *m = mu * *m + g;
            *w -= lr * *m;
        }
    }
}

/// Mean loss and accuracy over a split, in evaluation mode.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &DatasetHandle<T>, split: Split, batch_size: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let total = data.len(split);
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    let k = net.class_count();
    for chunk in data.chunks(split, batch_size) {
        let batch = data.batch(split, &chunk);
        let logits = net.logits(&batch.images)?;
        for (row, &label) in logits.data().chunks_exact(k).zip(&batch.labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[label].as_f64();
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(best == label);
        }
    }
    Ok((loss / total as f64, correct as f64 / total as f64))
}

/// Drives training epochs over one dataset with one schedule.
pub struct Trainer<'a, T: Scalar> {
    pub data: &'a DatasetHandle<T>,
    pub schedule: TrainSchedule,
    pub seed: u64,
    on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
    finetunes_done: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(data: &'a DatasetHandle<T>, schedule: TrainSchedule, seed: u64) -> Self {
        Trainer { data, schedule, seed, on_epoch: None, finetunes_done: 0 }
    }

    /// Observer called after every epoch, e.g. to stream records to disk.
    pub fn on_epoch(mut self, f: impl FnMut(&EpochRecord) + 'a) -> Self {
        self.on_epoch = Some(Box::new(f));
        self
    }

    fn train_epoch(&self, net: &mut Network<T>, lr: f64, mut rng: ChaCha8Rng, epoch: usize) -> Result<f64> {
        let s = &self.schedule;
        let mut sum = 0.0;
        let mut seen = 0usize;
        for indices in epoch_batches(self.data.train_size(), s.batch_size, &mut rng) {
            let batch = if s.augment {
                self.data.augmented_batch(&indices, s.crop_padding, &mut rng)
            } else {
                self.data.batch(Split::Train, &indices)
            };
            let (loss, grads) = net.loss_and_grads(&batch)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            sgd_step(net, &grads, lr, s.momentum, s.weight_decay);
            sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        if seen == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(sum / seen as f64)
    }

    fn record(&mut self, net: &Network<T>, epoch: usize, phase: Phase, train_loss: f64, lr: f64) -> Result<EpochRecord> {
        let (val_loss, val_accuracy) = evaluate(net, self.data, Split::Val, self.schedule.eval_batch_size)?;
        let rec = EpochRecord {
            epoch,
            phase,
            train_loss,
            val_loss,
            val_accuracy,
            lr,
            params: net.count_params(),
            macs: flops::flops(net)?.total,
        };
        log::info!(
            "{:?} epoch {epoch}: loss {train_loss:.4}, val acc {:.2}%, lr {lr}",
            phase,
            100.0 * val_accuracy
        );
        if let Some(f) = self.on_epoch.as_mut() {
            f(&rec);
        }
        Ok(rec)
    }

    /// Trains schedule epochs `from..upto`.
    pub fn fit(&mut self, net: &mut Network<T>, from: usize, upto: usize, phase: Phase) -> Result<Vec<EpochRecord>> {
        if upto > self.schedule.max_epochs {
            return Err(Error::Config(format!("epoch {upto} is past max_epochs {}", self.schedule.max_epochs)));
        }
        let mut out = Vec::new();
        for epoch in from..upto {
            let lr = self.schedule.lr_at(epoch);
            let loss = self.train_epoch(net, lr, epoch_rng(self.seed, STREAM_TRAIN, epoch), epoch)?;
            out.push(self.record(net, epoch, phase, loss, lr)?);
        }
        Ok(out)
    }

    /// Recovery training at the prune-epoch learning rate.
    pub fn finetune(&mut self, net: &mut Network<T>, epochs: usize) -> Result<Vec<EpochRecord>> {
        if epochs == 0 {
            return Err(Error::Config("fine-tune needs at least one epoch".into()));
        }
        let lr = self.schedule.finetune_lr();
        let mut out = Vec::new();
        for _ in 0..epochs {
            let n = self.finetunes_done;
            let loss = self.train_epoch(net, lr, epoch_rng(self.seed, STREAM_FINETUNE, n), n)?;
            self.finetunes_done += 1;
            out.push(self.record(net, n, Phase::FineTune, loss, lr)?);
        }
        Ok(out)
    }
}

/// Phase boundaries reported by [`full_pipeline`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    PrePrune,
    PostPrune,
    Final,
}

impl Boundary {
    pub fn name(self) -> &'static str {
        match self {
            Boundary::PrePrune => "pre_prune",
            Boundary::PostPrune => "post_prune",
            Boundary::Final => "final",
        }
    }
}

pub struct PipelineOutput {
    pub records: Vec<EpochRecord>,
    pub log: PruneLog,
}

/// Trains `t_p` epochs, prunes with recovery fine-tunes, then trains the
/// slim network for the remaining `t_max − t_p` schedule epochs.
/// `on_boundary` sees the network at each phase boundary together with the
/// number of schedule epochs completed.
pub fn full_pipeline<'a, T: Scalar>(
    net: &mut Network<T>,
    data: &'a DatasetHandle<T>,
    config: &RunConfig,
    on_epoch: impl FnMut(&EpochRecord) + 'a,
    mut on_boundary: impl FnMut(Boundary, &Network<T>, usize, Option<&PruneLog>) -> Result<()>,
) -> Result<PipelineOutput> {
    config.validate()?;
    if data.image_shape != net.input_shape() || data.class_count != net.class_count() {
        return Err(Error::Shape(format!(
            "dataset {:?} with {} classes does not fit network {:?} with {} classes",
            data.image_shape,
            data.class_count,
            net.input_shape(),
            net.class_count()
        )));
    }
    let schedule = config.schedule();
    let t_p = if config.pruning_enabled() { schedule.prune_epoch } else { schedule.max_epochs };
    let mut trainer = Trainer::new(data, schedule.clone(), config.seed).on_epoch(on_epoch);
    let mut records = trainer.fit(net, 0, t_p, Phase::PrePrune)?;
    on_boundary(Boundary::PrePrune, net, t_p, None)?;

    let probe_size = if config.pruning_enabled() { config.probe_size } else { config.probe_size.clamp(1, data.train_size()) };
    let set = sample_probe(data, probe_size, config.seed, config.balanced_probe)?;
    let probe = ProbeData::new(data, set);
    let mut ft_records = Vec::new();
    let log = {
        let mut hook = |n: &mut Network<T>, epochs: usize| -> Result<()> {
            ft_records.extend(trainer.finetune(n, epochs)?);
            Ok(())
        };
        pruner::run(net, config, &probe, Some(schedule.finetune_lr()), &mut hook)?
    };
    records.extend(ft_records);
    on_boundary(Boundary::PostPrune, net, t_p, Some(&log))?;

    records.extend(trainer.fit(net, t_p, schedule.max_epochs, Phase::PostPrune)?);
    on_boundary(Boundary::Final, net, schedule.max_epochs, Some(&log))?;
    Ok(PipelineOutput { records, log })
}
