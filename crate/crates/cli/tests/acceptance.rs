//! Acceptance suite. Runs each criterion in turn and prints one PASS/FAIL
//! line per criterion. Pass a substring as the first free argument to run
//! only matching criteria, e.g. `cargo test --test acceptance -- flops`.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use greedyprune::criteria::rank_weights;
use greedyprune::data::{load_dataset, sample_probe, DatasetSpec, ProbeData, Split};
use greedyprune::flops::{self, exploration_steps, group_delta_per_filter, rate_from_totals};
use greedyprune::graph::{build_groups, channel_map, pruning_budget, remove_filters, remove_group_channels};
use greedyprune::model::{ConvRole, NetworkBuilder};
use greedyprune::pruner::{self, filter_counts, PruneLog};
use greedyprune::train::{evaluate, full_pipeline, Boundary, Phase, Trainer};
use greedyprune::{build_model, CosineForm, Criterion, Network, RunConfig, RunStatus, StepMode, Tensor};
use greedyprune_cli::ablate::{cmd_ablate, Study};
use greedyprune_cli::manifest::RunManifest;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

// ---------------------------------------------------------------------------
// 1. criteria oracles

fn oracle_l1(f: &[f64]) -> f64 {
    f.iter().fold(0.0, |s, v| s + v.abs())
}

fn oracle_l2(f: &[f64]) -> f64 {
    f.iter().fold(0.0, |s, v| s + v * v).sqrt()
}

/// Mean distance from filter `k` to every other filter, by direct double loop.
fn oracle_mean_distance(filters: &[Vec<f64>], k: usize, dist: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let others: Vec<f64> = (0..filters.len()).filter(|&j| j != k).map(|j| dist(&filters[k], &filters[j])).collect();
    others.iter().sum::<f64>() / others.len() as f64
}

fn oracle_eucl(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s.sqrt()
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

fn random_layer(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = rng.random_range(2..=24);
    let c = rng.random_range(1..=8);
    let k = if rng.random_bool(0.5) { 1 } else { 3 };
    let len = n * c * k * k;
    Tensor::from_vec(&[n, c, k, k], (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn criterion_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for layer in 0..100 {
        let w = random_layer(&mut rng);
        let n = w.dim(0);
        let filters: Vec<Vec<f64>> = (0..n).map(|k| w.row(k).to_vec()).collect();
        for c in Criterion::ALL {
            let got = rank_weights("layer", &w, c, CosineForm::Normalized).map_err(|e| e.to_string())?;
            for k in 0..n {
                let want = match c {
                    Criterion::L1 => oracle_l1(&filters[k]),
                    Criterion::L2 => oracle_l2(&filters[k]),
                    Criterion::Eucl => oracle_mean_distance(&filters, k, oracle_eucl),
                    Criterion::Cos => oracle_mean_distance(&filters, k, oracle_cos),
                };
                let e = rel_err(got.scores[k], want);
                worst = worst.max(e);
                ensure!(e <= 1e-6, "layer {layer} {c} filter {k}: {} vs oracle {want}", got.scores[k]);
            }

            // Power-of-two rescaling is exact in binary floating point, so
            // covariance must hold bit for bit.
            let scale = 4.0;
            let scaled = Tensor::from_vec(w.shape(), w.data().iter().map(|v| v * scale).collect());
            let s = rank_weights("layer", &scaled, c, CosineForm::Normalized).map_err(|e| e.to_string())?;
            for k in 0..n {
                let want = if c == Criterion::Cos { got.scores[k] } else { scale * got.scores[k] };
                ensure!(s.scores[k] == want, "{c} not scale covariant at filter {k}: {} vs {want}", s.scores[k]);
            }
            ensure!(s.order == got.order, "{c} order changed under rescaling");

            // Generic positive scale: covariant to rounding.
            let factor = rng.random_range(0.1..10.0);
            let scaled = Tensor::from_vec(w.shape(), w.data().iter().map(|v| v * factor).collect());
            let s = rank_weights("layer", &scaled, c, CosineForm::Normalized).map_err(|e| e.to_string())?;
            for k in 0..n {
                let want = if c == Criterion::Cos { got.scores[k] } else { factor * got.scores[k] };
                ensure!((s.scores[k] - want).abs() <= 1e-12 * want.abs().max(1.0), "{c} scale {factor} filter {k}");
            }

            // Permutation equivariance, exact.
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let permuted = w.select(0, &perm);
            let p = rank_weights("layer", &permuted, c, CosineForm::Normalized).map_err(|e| e.to_string())?;
            for (new, &old) in perm.iter().enumerate() {
                ensure!(p.scores[new] == got.scores[old], "{c} not permutation equivariant at {old}->{new}");
            }
        }
    }
    Ok(format!("100 layers x 4 criteria, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 2. structural safety

fn random_images(rng: &mut ChaCha8Rng, shape: [usize; 3], n: usize) -> Tensor<f32> {
    let [c, h, w] = shape;
    Tensor::from_vec(&[c, n, h, w], (0..c * n * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Every group member points at a live channel and every conv, norm and
/// consumer agrees with its channel space.
fn check_closure(net: &Network<f32>) -> Result<(), String> {
    net.infer_shapes().map_err(|e| format!("shape inference: {e}"))?;
    let map = channel_map(net).map_err(|e| e.to_string())?;
    let groups = build_groups(net).map_err(|e| e.to_string())?;
    for ((layer, index), g) in &groups {
        let idx = net.node_index(layer).ok_or("unknown driver")?;
        let space = map.space_of(idx);
        ensure!(*index < space.channels, "group {layer}:{index} beyond {} channels", space.channels);
        for m in &g.members {
            ensure!(m.index < space.channels, "member {}:{} out of range", m.layer, m.index);
        }
    }
    Ok(())
}

fn surgery_sequences() -> Outcome {
    let zoo: Vec<(&str, [usize; 3])> = vec![
        ("toy-chain[8,16,12]", [3, 8, 8]),
        ("toy-chain[6,10]:plain", [3, 8, 8]),
        ("vgg11x0.125", [3, 32, 32]),
        ("resnet8x0.5", [3, 8, 8]),
        ("resnet20x0.25", [3, 8, 8]),
        ("resnet18-shapex0.0625", [3, 32, 32]),
    ];
    let nets: Vec<Network<f32>> = zoo.iter().map(|(a, s)| build_model(a, *s, 5, 0)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut surgeries = 0;
    let mut twins = 0;
    for seq in 0..500 {
        let which = seq % nets.len();
        let mut net = nets[which].clone();
        let shape = zoo[which].1;
        let images = random_images(&mut rng, shape, 2);
        for _ in 0..rng.random_range(1..=4) {
            let layers = net.prunable_convs();
            let layer = &layers[rng.random_range(0..layers.len())];
            let current = net.conv(layer).unwrap().out_channels();
            if current < 2 {
                continue;
            }
            let count = rng.random_range(1..current);
            let mut indices = sample(&mut rng, current, count).into_vec();
            indices.sort_unstable();
            let params_before = net.count_params();

            // Pruning through any other member of the group must give the
            // same shapes.
            let twin = {
                let map = channel_map(&net).map_err(|e| e.to_string())?;
                let own = net.node_index(layer).unwrap();
                map.space_of(own).producers.iter().find(|&&p| p != own).map(|&p| {
                    let mut t = net.clone();
                    let member = t.nodes()[p].name.clone();
                    remove_group_channels(&mut t, &member, &indices).map(|_| t)
                })
            };
            let receipt = remove_filters(&mut net, layer, &indices).map_err(|e| format!("{}: {layer}: {e}", zoo[which].0))?;
            surgeries += 1;
            ensure!(net.count_params() < params_before, "{layer}: parameter count did not drop");
            ensure!(receipt.params_after == net.count_params(), "receipt disagrees with network");
            ensure!(receipt.flops_after < receipt.flops_before, "{layer}: FLOPs did not drop");
            ensure!(net.conv(layer).unwrap().out_channels() == current - count, "{layer}: wrong filter count");
            check_closure(&net).map_err(|e| format!("{} after pruning {layer}: {e}", zoo[which].0))?;
            let logits = net.logits(&images).map_err(|e| format!("forward after {layer}: {e}"))?;
            ensure!(logits.shape() == [2, 5] && logits.all_finite(), "bad logits after {layer}");
            if let Some(twin) = twin {
                let twin = twin.map_err(|e| format!("pruning a group member of {layer}: {e}"))?;
                let shapes = |n: &Network<f32>| n.params().iter().map(|p| p.value.shape().to_vec()).collect::<Vec<_>>();
                ensure!(shapes(&twin) == shapes(&net), "{layer}: group members disagree on shapes");
                twins += 1;
            }
        }
    }

    // Zeroed filters on a bias-free, norm-free chain are equivalent to
    // removing them.
    let mut worst = 0.0f32;
    for trial in 0..50 {
        let widths: Vec<usize> = (0..rng.random_range(2..=4)).map(|_| rng.random_range(3..=12)).collect();
        let arch = format!("toy-chain[{}]:plain", widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","));
        let mut zeroed: Network<f32> = build_model(&arch, [3, 6, 6], 4, trial).map_err(|e| e.to_string())?;
        let mut pruned = zeroed.clone();
        let layers = zeroed.prunable_convs();
        let layer = layers[rng.random_range(0..layers.len())].clone();
        let n = zeroed.conv(&layer).unwrap().out_channels();
        let count = rng.random_range(1..n);
        let mut idx = sample(&mut rng, n, count).into_vec();
        idx.sort_unstable();
        let conv = zeroed.conv_mut(&layer).unwrap();
        for &k in &idx {
            conv.weight.value.row_mut(k).fill(0.0);
        }
        remove_filters(&mut pruned, &layer, &idx).map_err(|e| e.to_string())?;
        let images = random_images(&mut rng, [3, 6, 6], 4);
        let a = zeroed.logits(&images).map_err(|e| e.to_string())?;
        let b = pruned.logits(&images).map_err(|e| e.to_string())?;
        let d = a.max_abs_diff(&b);
        worst = worst.max(d);
        ensure!(d <= 1e-5, "{arch} {layer} {idx:?}: zeroed vs removed differ by {d}");
    }
    Ok(format!("500 sequences, {surgeries} surgeries, {twins} member-driven twins; zero-filter equivalence worst {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 3. FLOPs fidelity

fn hand_nets() -> Vec<(&'static str, Network<f32>, u64)> {
    let mut out = Vec::new();

    // conv 3->8 k3 on 32x32: 8*3*9*1024 = 221_184; linear 8->10: 80.
    let mut b = NetworkBuilder::<f32>::new("single", [3, 32, 32], 10, 0);
    let c = b.conv("conv", NetworkBuilder::<f32>::INPUT, 3, 8, 3, 1, 1, false, ConvRole::Main);
    let r = b.relu("relu", c);
    let p = b.global_avg_pool("pool", r);
    b.linear("fc", p, 8, 10);
    out.push(("single conv", b.finish().unwrap(), 221_184 + 80));

    // stride-2 conv 3->4 on 8x8 -> 4x4: 4*3*9*16 = 1_728; 2x2 pool -> 2x2;
    // 1x1 conv 4->5: 5*4*4 = 80; linear 5->3: 15.
    let mut b = NetworkBuilder::<f32>::new("strided", [3, 8, 8], 3, 0);
    let c = b.conv("a", NetworkBuilder::<f32>::INPUT, 3, 4, 3, 2, 1, false, ConvRole::Main);
    let c = b.batch_norm("bn", c, 4);
    let c = b.relu("relu", c);
    let c = b.max_pool("pool", c, 2, 2, 0);
    let c = b.conv("b", c, 4, 5, 1, 1, 0, false, ConvRole::Main);
    let p = b.global_avg_pool("gap", c);
    b.linear("fc", p, 5, 3);
    out.push(("strided", b.finish().unwrap(), 1_728 + 80 + 15));

    // residual on 4x4: x = conv 3->4 (4*3*9*16 = 1_728), y = conv 4->4
    // (4*4*9*16 = 2_304), x + y, linear 4->2: 8.
    let mut b = NetworkBuilder::<f32>::new("residual", [3, 4, 4], 2, 0);
    let x = b.conv("x", NetworkBuilder::<f32>::INPUT, 3, 4, 3, 1, 1, false, ConvRole::Main);
    let x = b.relu("rx", x);
    let y = b.conv("y", x, 4, 4, 3, 1, 1, false, ConvRole::Main);
    let s = b.add("sum", y, x);
    let p = b.global_avg_pool("gap", s);
    b.linear("fc", p, 4, 2);
    out.push(("residual", b.finish().unwrap(), 1_728 + 2_304 + 8));
    out
}

fn flops_fidelity() -> Outcome {
    for (name, net, want) in hand_nets() {
        let r = flops::flops(&net).map_err(|e| e.to_string())?;
        ensure!(r.total == want, "{name}: {} MACs, hand count {want}", r.total);
        ensure!(r.per_layer.iter().map(|l| l.macs).sum::<u64>() == r.total, "{name}: per-layer sum");
    }

    let mut checked = 0;
    for (arch, shape) in [
        ("toy-chain[8,16,12]", [3, 8, 8]),
        ("vgg11x0.25", [3, 32, 32]),
        ("resnet20", [3, 8, 8]),
        ("resnet18-shapex0.25", [3, 32, 32]),
    ] {
        let net: Network<f32> = build_model(arch, shape, 10, 0).map_err(|e| e.to_string())?;
        let before = flops::flops(&net).map_err(|e| e.to_string())?.total;
        let plan = exploration_steps(&net, 0.01, StepMode::Measured).map_err(|e| e.to_string())?;
        for layer in net.prunable_convs() {
            let delta = group_delta_per_filter(&net, &layer).map_err(|e| e.to_string())?;
            let mut pruned = net.clone();
            remove_filters(&mut pruned, &layer, &[0]).map_err(|e| e.to_string())?;
            let after = flops::flops(&pruned).map_err(|e| e.to_string())?.total;
            ensure!(before - after == delta, "{arch} {layer}: predicted {delta}, measured {}", before - after);
            if let Some(s) = plan.steps.iter().find(|s| s.layer == layer) {
                ensure!(s.group_delta == delta, "{arch} {layer}: plan delta differs");
            }
            checked += 1;
        }
    }

    let net: Network<f32> = build_model("resnet18-shape", [3, 224, 224], 1000, 0).map_err(|e| e.to_string())?;
    let plan = exploration_steps(&net, 0.01, StepMode::default()).map_err(|e| e.to_string())?;
    let stem = plan.step("conv1").ok_or("no stem step")?;
    let block = plan.step("layer1.0.conv1").ok_or("no layer1.0.conv1 step")?;
    ensure!(stem.abs_diff(2) <= 1, "stem step {stem}, expected 2 ± 1");
    ensure!(block.abs_diff(5) <= 1, "layer1.0.conv1 step {block}, expected 5 ± 1");
    Ok(format!("3 hand nets exact, {checked} group deltas exact, steps stem={stem} layer1.0.conv1={block}"))
}

// ---------------------------------------------------------------------------
// 4. greedy loop contract

/// Checks every log invariant that can be re-derived from the log alone.
fn check_log(log: &PruneLog) -> Result<(), String> {
    let cfg = &log.header.config;
    let base = log.header.baseline.total;
    let max_drop = 3.0 * cfg.step_rate * base as f64;
    let mut removed: BTreeMap<String, usize> = BTreeMap::new();
    let mut prev_flops = base;
    let mut prev_rate = 0.0;
    for e in &log.entries {
        let evaluated: Vec<f64> = e.candidates.iter().filter_map(|c| c.loss).collect();
        ensure!(!evaluated.is_empty(), "iteration {}: no evaluated candidate", e.iteration);
        ensure!(evaluated.iter().all(|&l| e.chosen.loss <= l), "iteration {}: chosen loss is not the minimum", e.iteration);
        ensure!(e.flops_before == prev_flops, "iteration {}: FLOPs chain broken", e.iteration);
        ensure!(e.flops_after < e.flops_before, "iteration {}: FLOPs did not drop", e.iteration);
        ensure!(e.pruning_rate >= prev_rate, "iteration {}: rate decreased", e.iteration);
        let drop = (e.flops_before - e.flops_after) as f64;
        ensure!(drop <= max_drop, "iteration {}: dropped {drop} MACs, bound {max_drop}", e.iteration);
        let rate = rate_from_totals(base, e.flops_after).map_err(|x| x.to_string())?;
        ensure!(rate == e.pruning_rate, "iteration {}: logged rate disagrees with FLOPs", e.iteration);
        // Counts come from the network, so coupled drivers lose the same
        // indices as the chosen layer and everyone else stays put.
        let k = e.chosen.indices.len();
        for (layer, &n) in &e.removed_per_layer {
            let before = removed.get(layer).copied().unwrap_or(0);
            ensure!(n >= before, "iteration {}: {layer} regained filters", e.iteration);
            ensure!(n - before == 0 || n - before == k, "iteration {}: {layer} lost {} filters, chosen {k}", e.iteration, n - before);
            let original = log.header.original_filters[layer];
            let allowed = pruning_budget(original, original, cfg.max_layer_rate);
            ensure!(n <= allowed, "iteration {}: {layer} lost {n} of {original}", e.iteration);
            ensure!(n as f64 <= cfg.max_layer_rate * original as f64 + 1e-9, "{layer} exceeds the layer cap");
        }
        let chosen_before = removed.get(&e.chosen.layer).copied().unwrap_or(0);
        ensure!(
            e.removed_per_layer.get(&e.chosen.layer) == Some(&(chosen_before + k)),
            "iteration {}: removed_per_layer disagrees for the chosen layer",
            e.iteration
        );
        removed = e.removed_per_layer.clone();
        prev_flops = e.flops_after;
        prev_rate = e.pruning_rate;
    }
    Ok(())
}

fn greedy_run(data: &greedyprune::data::DatasetHandle<f32>, config: &RunConfig) -> Result<(PruneLog, Network<f32>), String> {
    let mut net: Network<f32> = build_model("resnet20", data.image_shape, data.class_count, config.seed).map_err(|e| e.to_string())?;
    let schedule = config.schedule();
    let mut trainer = Trainer::new(data, schedule.clone(), config.seed);
    trainer.fit(&mut net, 0, 1, Phase::PrePrune).map_err(|e| e.to_string())?;
    let probe = ProbeData::new(data, sample_probe(data, config.probe_size, config.seed, false).map_err(|e| e.to_string())?);
    let mut hook = |n: &mut Network<f32>, epochs: usize| trainer.finetune(n, epochs).map(|_| ());
    let log = pruner::run(&mut net, config, &probe, Some(schedule.finetune_lr()), &mut hook).map_err(|e| e.to_string())?;
    Ok((log, net))
}

fn greedy_contract() -> Outcome {
    let data = load_dataset::<f32>(&DatasetSpec::synthetic(10, 5000, [3, 8, 8], 1)).map_err(|e| e.to_string())?;
    let config = RunConfig { target_rate: 0.5, step_rate: 0.01, probe_size: 256, crop_padding: 1, seed: 3, ..RunConfig::default() };
    let (log, net) = greedy_run(&data, &config)?;
    let footer = log.footer.as_ref().ok_or("no footer")?;
    ensure!(footer.status == RunStatus::Reached, "status {:?}", footer.status);
    let measured = rate_from_totals(log.header.baseline.total, flops::flops(&net).map_err(|e| e.to_string())?.total)
        .map_err(|e| e.to_string())?;
    ensure!((0.50..=0.52).contains(&measured), "P' = {measured:.4} outside [0.50, 0.52]");
    ensure!(measured == log.final_rate(), "log final rate disagrees with the network");
    check_log(&log)?;
    let counts = filter_counts(&net);
    for (layer, &orig) in &log.header.original_filters {
        ensure!(orig - counts[layer] == log.entries.last().unwrap().removed_per_layer.get(layer).copied().unwrap_or(0), "{layer} count");
    }
    let (again, _) = greedy_run(&data, &config)?;
    ensure!(again.without_timestamps() == log.without_timestamps(), "rerun produced a different log");
    Ok(format!("P' = {measured:.4} after {} iterations, {} fine-tunes, rerun identical", log.entries.len(), footer.finetunes))
}

// ---------------------------------------------------------------------------
// 5. end-to-end smoke

fn end_to_end() -> Outcome {
    let data = load_dataset::<f32>(&DatasetSpec::synthetic(10, 5000, [3, 8, 8], 1)).map_err(|e| e.to_string())?;
    let config = RunConfig {
        max_epochs: 60,
        target_rate: 0.3,
        probe_size: 256,
        crop_padding: 1,
        seed: 5,
        ..RunConfig::default()
    };
    let schedule = config.schedule();
    ensure!(schedule.prune_epoch + 1 == schedule.milestones[0], "prune epoch is not right before the first decay");
    let mut net: Network<f32> = build_model("resnet20", data.image_shape, data.class_count, config.seed).map_err(|e| e.to_string())?;
    let snapshot = RefCell::new(None);
    let out = full_pipeline(&mut net, &data, &config, |_| {}, |b, n, _, _| {
        if b == Boundary::PrePrune {
            *snapshot.borrow_mut() = Some(n.clone());
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let pruned_acc = evaluate(&net, &data, Split::Val, 500).map_err(|e| e.to_string())?.1;
    ensure!(out.log.final_rate() >= 0.3, "pruning stopped at {:.4}", out.log.final_rate());

    // The unpruned baseline shares the first t_p epochs bit for bit, so it
    // continues from the pre-prune snapshot under the same schedule.
    let mut baseline = snapshot.into_inner().ok_or("no pre-prune snapshot")?;
    Trainer::new(&data, schedule.clone(), config.seed)
        .fit(&mut baseline, schedule.prune_epoch, schedule.max_epochs, Phase::PostPrune)
        .map_err(|e| e.to_string())?;
    let base_acc = evaluate(&baseline, &data, Split::Val, 500).map_err(|e| e.to_string())?.1;
    let gap = 100.0 * (base_acc - pruned_acc);
    ensure!(gap <= 3.0, "pruned {:.2}% vs baseline {:.2}%: gap {gap:.2} points", 100.0 * pruned_acc, 100.0 * base_acc);
    Ok(format!(
        "P' = {:.4}, pruned {:.2}% vs baseline {:.2}% (gap {gap:.2} points)",
        out.log.final_rate(),
        100.0 * pruned_acc,
        100.0 * base_acc
    ))
}

// ---------------------------------------------------------------------------
// 6. ablation machinery

fn tiny_manifest(dir: &std::path::Path) -> RunManifest {
    let mut m = greedyprune_cli::manifest::preset("toy-synthetic").unwrap();
    m.output_dir = dir.to_path_buf();
    m.dataset = DatasetSpec::synthetic(4, 600, [3, 8, 8], 0);
    m.config.max_epochs = 4;
    m.config.probe_size = 64;
    m
}

fn ablation() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = tiny_manifest(tmp.path());
    let seeds = [0, 1];
    let mut report = Vec::new();
    for (study, width) in [(Study::Rmax, 5), (Study::Ps, 6)] {
        let grid = study.default_grid(&m.config);
        ensure!(grid.len() == width, "{study}: grid has {} values", grid.len());
        let summary = cmd_ablate(study, &grid, &seeds, &m).map_err(|e| format!("{e:#}"))?;
        ensure!(summary.cells.len() == width, "{study}: {} cells", summary.cells.len());
        for c in &summary.cells {
            ensure!(c.accuracies.iter().all(Option::is_some), "{study}={}: failed runs {:?}", c.value, c.errors);
            ensure!(c.mean.is_some_and(f64::is_finite) && c.std.is_some_and(f64::is_finite), "{study}={}: empty cell", c.value);
        }
        let md = summary.to_markdown(study);
        let header = md.lines().next().unwrap_or_default();
        ensure!(header.matches('|').count() == width + 2, "{study}: table header `{header}`");
        let dir = tmp.path().join(format!("ablate-{study}"));
        let rows = std::fs::read_to_string(dir.join("summary.csv")).map_err(|e| e.to_string())?.lines().count();
        ensure!(rows == 1 + width * seeds.len(), "{study}: summary.csv has {rows} lines");

        let again_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let again = cmd_ablate(study, &grid, &seeds, &tiny_manifest(again_dir.path())).map_err(|e| format!("{e:#}"))?;
        ensure!(again == summary, "{study}: rerun gave a different summary");
        report.push(format!("{study} {width} cells"));
    }
    Ok(format!("{} x 2 seeds, all populated and reproducible", report.join(", ")))
}

// ---------------------------------------------------------------------------
// 7. pruning-rate arithmetic

fn rate_arithmetic() -> Outcome {
    let net: Network<f32> = build_model("resnet56", [3, 32, 32], 10, 0).map_err(|e| e.to_string())?;
    let base = flops::flops(&net).map_err(|e| e.to_string())?.total;
    for (ratio, want) in [(0.474, "0.526"), (0.577, "0.423")] {
        for total in [1_000u64, 1_000_000, base] {
            let pruned = (ratio * total as f64).round() as u64;
            let p = rate_from_totals(total, pruned).map_err(|e| e.to_string())?;
            ensure!(format!("{p:.3}") == want, "ratio {ratio} of {total}: rate {p}, expected {want}");
        }
    }
    Ok("0.474 -> 0.526, 0.577 -> 0.423".into())
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("criteria oracles", criterion_oracles),
        ("structural safety", surgery_sequences),
        ("flops fidelity", flops_fidelity),
        ("greedy loop contract", greedy_contract),
        ("end-to-end smoke", end_to_end),
        ("ablation machinery", ablation),
        ("pruning-rate arithmetic", rate_arithmetic),
    ];
    let selected: BTreeSet<usize> =
        (0..criteria.len()).filter(|&i| filter.as_deref().is_none_or(|f| criteria[i].0.contains(f))).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !selected.contains(&i) {
            continue;
        }
        let clock = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = clock.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
