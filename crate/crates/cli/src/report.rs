//! Reports derived from a pruning log (and optionally the final
//! checkpoint): criteria distribution, per-layer pruned/retained filters and
//! the FLOPs trajectory. Each is written as CSV with an SVG rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use greedyprune::{Criterion, PruneLog};
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriterionRow {
    pub criterion: String,
    pub filters_pruned: usize,
    pub iterations_won: usize,
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRow {
    pub layer: String,
    pub original: usize,
    pub pruned: usize,
    pub retained: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub macs: u64,
    pub pruning_rate: f64,
    pub criterion: String,
    pub layer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub criteria: Vec<CriterionRow>,
    pub layers: Vec<LayerRow>,
    pub trajectory: Vec<TrajectoryRow>,
}

/// Builds every table from the log alone.
pub fn build(log: &PruneLog) -> Report {
    let mut filters: BTreeMap<Criterion, (usize, usize)> = BTreeMap::new();
    for c in &log.header.config.criteria {
        filters.insert(*c, (0, 0));
    }
    for e in &log.entries {
        let slot = filters.entry(e.chosen.criterion).or_default();
        slot.0 += e.chosen.indices.len();
        slot.1 += 1;
    }
    let total: usize = filters.values().map(|v| v.0).sum();
    let order: Vec<Criterion> = {
        let mut o = log.header.config.criteria.clone();
        o.extend(filters.keys().filter(|c| !log.header.config.criteria.contains(c)));
        o
    };
    let criteria = order
        .iter()
        .map(|c| {
            let (n, won) = filters[c];
            CriterionRow {
                criterion: c.id().into(),
                filters_pruned: n,
                iterations_won: won,
                share: if total == 0 { 0.0 } else { n as f64 / total as f64 },
            }
        })
        .collect();

    let removed = log.entries.last().map(|e| e.removed_per_layer.clone()).unwrap_or_default();
    let layers = log
        .header
        .plan
        .steps
        .iter()
        .map(|s| s.layer.clone())
        .chain(log.header.original_filters.keys().filter(|l| !log.header.plan.steps.iter().any(|s| &s.layer == *l)).cloned())
        .map(|layer| {
            let original = log.header.original_filters[&layer];
            let pruned = removed.get(&layer).copied().unwrap_or(0);
            LayerRow { layer, original, pruned, retained: original - pruned }
        })
        .collect();

    let mut trajectory = vec![TrajectoryRow {
        iteration: 0,
        macs: log.header.baseline.total,
        pruning_rate: 0.0,
        criterion: String::new(),
        layer: String::new(),
    }];
    for e in &log.entries {
        trajectory.push(TrajectoryRow {
            iteration: e.iteration + 1,
            macs: e.flops_after,
            pruning_rate: e.pruning_rate,
            criterion: e.chosen.criterion.id().into(),
            layer: e.chosen.layer.clone(),
        });
    }
    Report { criteria, layers, trajectory }
}

/// Checks the per-layer table against the filter counts of a checkpoint.
pub fn cross_check(report: &Report, actual: &BTreeMap<String, usize>) -> Result<()> {
    for row in &report.layers {
        match actual.get(&row.layer) {
            Some(&n) if n == row.retained => {}
            Some(&n) => bail!("layer `{}`: log says {} filters remain, checkpoint has {n}", row.layer, row.retained),
            None => bail!("layer `{}` is missing from the checkpoint", row.layer),
        }
    }
    Ok(())
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const W: f64 = 720.0;
const H: f64 = 360.0;
const M: f64 = 50.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        esc(title),
        H - M,
        W - M / 2.0,
        H - M,
        H - M
    )
}

fn bars_svg(title: &str, labels: &[String], stacks: &[Vec<f64>], colors: &[&str], legend: &[&str]) -> String {
    let mut s = svg_open(title);
    let max = stacks.iter().map(|v| v.iter().sum::<f64>()).fold(0.0, f64::max).max(1.0);
    let n = labels.len().max(1) as f64;
    let slot = (W - 1.5 * M) / n;
    let plot_h = H - 2.0 * M;
    for (i, (label, parts)) in labels.iter().zip(stacks).enumerate() {
        let x = M + i as f64 * slot + slot * 0.15;
        let mut y = H - M;
        for (k, v) in parts.iter().enumerate() {
            let h = v / max * plot_h;
            y -= h;
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"><title>{} {}: {v}</title></rect>",
                slot * 0.7,
                colors[k % colors.len()],
                esc(label),
                legend.get(k).copied().unwrap_or("")
            );
        }
        let lx = x + slot * 0.35;
        let _ = writeln!(
            s,
            "<text x=\"{lx:.1}\" y=\"{:.1}\" text-anchor=\"end\" transform=\"rotate(-45 {lx:.1} {:.1})\">{}</text>",
            H - M + 12.0,
            H - M + 12.0,
            esc(label)
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{max}</text>", M - 4.0, M + 4.0);
    for (k, name) in legend.iter().enumerate() {
        let y = M + 14.0 * k as f64;
        let _ = writeln!(s, "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>", W - 130.0, y - 9.0, colors[k % colors.len()]);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y}\">{}</text>", W - 115.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

fn line_svg(title: &str, points: &[(f64, f64)]) -> String {
    let mut s = svg_open(title);
    let xmax = points.iter().map(|p| p.0).fold(1.0, f64::max);
    let ymax = points.iter().map(|p| p.1).fold(1e-9, f64::max);
    let px = |x: f64| M + x / xmax * (W - 1.5 * M);
    let py = |y: f64| H - M - y / ymax * (H - 2.0 * M);
    let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{ymax:.3e}</text>", M - 4.0, M + 4.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">iteration (max {xmax})</text>", W / 2.0, H - M + 30.0);
    s.push_str("</svg>\n");
    s
}

/// Writes all CSV and SVG files into `dir` and returns their paths.
pub fn write(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let p = |name: &str| dir.join(name);
    write_csv(&p("criteria_distribution.csv"), &report.criteria)?;
    write_csv(&p("layers.csv"), &report.layers)?;
    write_csv(&p("flops_trajectory.csv"), &report.trajectory)?;

    let labels: Vec<String> = report.criteria.iter().map(|r| r.criterion.clone()).collect();
    let stacks: Vec<Vec<f64>> = report.criteria.iter().map(|r| vec![r.filters_pruned as f64]).collect();
    fs::write(p("criteria_distribution.svg"), bars_svg("Filters pruned per criterion", &labels, &stacks, &["#1f77b4"], &["pruned"]))?;

    let labels: Vec<String> = report.layers.iter().map(|r| r.layer.clone()).collect();
    let stacks: Vec<Vec<f64>> = report.layers.iter().map(|r| vec![r.retained as f64, r.pruned as f64]).collect();
    fs::write(
        p("layers.svg"),
        bars_svg("Retained and pruned filters per layer", &labels, &stacks, &["#2ca02c", "#d62728"], &["retained", "pruned"]),
    )?;

    let points: Vec<(f64, f64)> = report.trajectory.iter().map(|r| (r.iteration as f64, r.macs as f64)).collect();
    fs::write(p("flops_trajectory.svg"), line_svg("MACs after each pruning iteration", &points))?;

    Ok([
        "criteria_distribution.csv",
        "criteria_distribution.svg",
        "layers.csv",
        "layers.svg",
        "flops_trajectory.csv",
        "flops_trajectory.svg",
    ]
    .iter()
    .map(|n| p(n))
    .collect())
}
