//! Filter importance criteria. Every scorer returns one value per filter,
//! and the filters are ranked ascending: the lowest score is pruned first.
//!
//! Magnitude criteria treat small-norm filters as unimportant. Similarity
//! criteria score a filter by its mean distance to the other filters of the
//! layer, so a filter close to its peers is redundant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    L1,
    L2,
    Eucl,
    Cos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriterionKind {
    Magnitude,
    Similarity,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::L1, Criterion::L2, Criterion::Eucl, Criterion::Cos];

    pub fn id(self) -> &'static str {
        match self {
            Criterion::L1 => "l1",
            Criterion::L2 => "l2",
            Criterion::Eucl => "eucl",
            Criterion::Cos => "cos",
        }
    }

    pub fn kind(self) -> CriterionKind {
        match self {
            Criterion::L1 | Criterion::L2 => CriterionKind::Magnitude,
            Criterion::Eucl | Criterion::Cos => CriterionKind::Similarity,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" | "l1-norm" => Ok(Criterion::L1),
            "l2" | "l2-norm" => Ok(Criterion::L2),
            "eucl" | "euclidean" | "eucl-sim" => Ok(Criterion::Eucl),
            "cos" | "cosine" | "cos-sim" => Ok(Criterion::Cos),
            other => Err(Error::Config(format!("unknown criterion `{other}`"))),
        }
    }
}

/// Parses a comma-separated pool such as `l1,cos`, rejecting duplicates.
pub fn parse_pool(s: &str) -> Result<Vec<Criterion>> {
    let pool: Vec<Criterion> = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    validate_pool(&pool)?;
    Ok(pool)
}

pub fn validate_pool(pool: &[Criterion]) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::Config("criteria pool is empty".into()));
    }
    for (i, c) in pool.iter().enumerate() {
        if pool[..i].contains(c) {
            return Err(Error::Config(format!("criterion `{c}` listed twice")));
        }
    }
    Ok(())
}

/// Denominator used by the cosine distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CosineForm {
    /// `‖x‖·‖y‖`, the usual cosine.
    #[default]
    Normalized,
    /// `Σx²·Σy²` without square roots. Not scale invariant; kept for
    /// replication studies only.
    SquaredNorms,
}

impl FromStr for CosineForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(CosineForm::Normalized),
            "squared-norms" => Ok(CosineForm::SquaredNorms),
            _ => Err(Error::Config(format!("unknown cosine form `{s}` (normalized, squared-norms)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionScore {
    pub layer: String,
    pub criterion: Criterion,
    pub scores: Vec<f64>,
    /// Filter indices, ascending by score, ties by index.
    pub order: Vec<usize>,
}

impl CriterionScore {
    pub fn new(layer: &str, criterion: Criterion, scores: Vec<f64>) -> Self {
        let order = ascending_order(&scores);
        CriterionScore { layer: layer.into(), criterion, scores, order }
    }

    /// The `count` lowest-ranked filters, sorted by index.
    pub fn lowest(&self, count: usize) -> Vec<usize> {
        let mut picked: Vec<usize> = self.order.iter().take(count).copied().collect();
        picked.sort_unstable();
        picked
    }
}

/// Indices sorted by ascending score; NaN sorts last, ties keep index order.
pub fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

fn filters_f64<T: Scalar>(weight: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..weight.dim(0)).map(|k| weight.row(k).iter().map(|v| v.as_f64()).collect()).collect()
}

pub fn lp_norm(x: &[f64], p: u32) -> f64 {
    match p {
        1 => x.iter().map(|v| v.abs()).sum(),
        2 => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        _ => x.iter().map(|v| v.abs().powi(p as i32)).sum::<f64>().powf(1.0 / p as f64),
    }
}

/// Euclidean distance between two filter vectors.
pub fn euclidean_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// `1 − cos(x, y)` in `[0, 2]`; `None` when either vector is zero.
pub fn cosine_distance(x: &[f64], y: &[f64], form: CosineForm) -> Option<f64> {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let xx: f64 = x.iter().map(|a| a * a).sum();
    let yy: f64 = y.iter().map(|b| b * b).sum();
    if xx == 0.0 || yy == 0.0 {
        return None;
    }
    let denom = match form {
        CosineForm::Normalized => (xx * yy).sqrt(),
        CosineForm::SquaredNorms => xx * yy,
    };
    let d = 1.0 - dot / denom;
    Some(match form {
        CosineForm::Normalized => d.clamp(0.0, 2.0),
        CosineForm::SquaredNorms => d,
    })
}

fn check_nonempty(layer: &str, criterion: Criterion, filters: &[Vec<f64>]) -> Result<()> {
    if filters.is_empty() || filters[0].is_empty() {
        return Err(Error::CriterionInapplicable {
            criterion: criterion.id().into(),
            layer: layer.into(),
            reason: "layer has no weights".into(),
        });
    }
    Ok(())
}

/// l1 (`p = 1`) or l2 (`p = 2`) norm of every flattened filter.
pub fn score_magnitude<T: Scalar>(layer: &str, weight: &Tensor<T>, p: u32) -> Result<CriterionScore> {
    let criterion = if p == 1 { Criterion::L1 } else { Criterion::L2 };
    let filters = filters_f64(weight);
    check_nonempty(layer, criterion, &filters)?;
    Ok(CriterionScore::new(layer, criterion, filters.iter().map(|f| lp_norm(f, p)).collect()))
}

/// Mean distance of each filter to the other filters of the layer.
pub fn score_similarity<T: Scalar>(
    layer: &str,
    weight: &Tensor<T>,
    criterion: Criterion,
    form: CosineForm,
) -> Result<CriterionScore> {
    let filters = filters_f64(weight);
    check_nonempty(layer, criterion, &filters)?;
    let n = filters.len();
    if n < 2 {
        return Err(Error::CriterionInapplicable {
            criterion: criterion.id().into(),
            layer: layer.into(),
            reason: "similarity needs at least two filters".into(),
        });
    }
    let mut dist = vec![0.0; n * n];
    let mut zero_seen = false;
    for a in 0..n {
        for b in a + 1..n {
            let d = match criterion {
                Criterion::Eucl => euclidean_distance(&filters[a], &filters[b]),
                Criterion::Cos => cosine_distance(&filters[a], &filters[b], form).unwrap_or_else(|| {
                    zero_seen = true;
                    1.0
                }),
                _ => unreachable!("magnitude criteria are scored elsewhere"),
            };
            dist[a * n + b] = d;
            dist[b * n + a] = d;
        }
    }
    if zero_seen {
        log::warn!("layer `{layer}` has an all-zero filter; its cosine distances are taken as 1");
    }
    // Summing in sorted order makes each score independent of filter order.
    let scores = (0..n)
        .map(|k| {
            let mut row = dist[k * n..(k + 1) * n].to_vec();
            row.sort_by(f64::total_cmp);
            row.iter().sum::<f64>() / (n - 1) as f64
        })
        .collect();
    Ok(CriterionScore::new(layer, criterion, scores))
}

/// Scores the filters of conv `layer` under `criterion`.
pub fn rank<T: Scalar>(net: &Network<T>, layer: &str, criterion: Criterion, form: CosineForm) -> Result<CriterionScore> {
    let conv = net.conv(layer).ok_or_else(|| match net.node(layer) {
        Some(_) => Error::NotPrunable(layer.into()),
        None => Error::UnknownLayer(layer.into()),
    })?;
    rank_weights(layer, &conv.weight.value, criterion, form)
}

pub fn rank_weights<T: Scalar>(layer: &str, weight: &Tensor<T>, criterion: Criterion, form: CosineForm) -> Result<CriterionScore> {
    match criterion {
        Criterion::L1 => score_magnitude(layer, weight, 1),
        Criterion::L2 => score_magnitude(layer, weight, 2),
        Criterion::Eucl | Criterion::Cos => score_similarity(layer, weight, criterion, form),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn layer(rows: &[&[f64]]) -> Tensor<f64> {
        let m = rows[0].len();
        Tensor::from_vec(&[rows.len(), m, 1, 1], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    #[test]
    fn magnitude_examples() {
        let w = layer(&[&[1.0, -2.0, 3.0], &[0.0, 0.0, 0.0]]);
        let l1 = score_magnitude("c", &w, 1).unwrap();
        assert_eq!(l1.scores, vec![6.0, 0.0]);
        assert_eq!(l1.order, vec![1, 0]);
        let l2 = score_magnitude("c", &w, 2).unwrap();
        assert_relative_eq!(l2.scores[0], 14f64.sqrt());
    }

    #[test]
    fn distance_examples() {
        let n = CosineForm::Normalized;
        assert_relative_eq!(euclidean_distance(&[1.0, 0.0], &[0.0, 1.0]), 2f64.sqrt());
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0], n), Some(1.0));
        assert_eq!(cosine_distance(&[0.3, 0.4], &[0.3, 0.4], n), Some(0.0));
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0], n), Some(2.0));
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0], n), None);
    }

    #[test]
    fn similarity_examples() {
        let w = layer(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let s = score_similarity("c", &w, Criterion::Eucl, CosineForm::Normalized).unwrap();
        assert_relative_eq!(s.scores[0], 2f64.sqrt() / 2.0);
        assert_eq!(s.scores[0], s.scores[2]);
        let same = layer(&[&[0.5, 1.0], &[0.5, 1.0], &[0.5, 1.0]]);
        for c in [Criterion::Eucl, Criterion::Cos] {
            let s = score_similarity("c", &same, c, CosineForm::Normalized).unwrap();
            assert!(s.scores.iter().all(|&v| v == 0.0));
        }
        let single = layer(&[&[1.0, 2.0]]);
        assert!(matches!(
            score_similarity("c", &single, Criterion::Cos, CosineForm::Normalized),
            Err(Error::CriterionInapplicable { .. })
        ));
    }

    #[test]
    fn zero_filter_cosine_is_orthogonal() {
        let w = layer(&[&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let s = score_similarity("c", &w, Criterion::Cos, CosineForm::Normalized).unwrap();
        assert_eq!(s.scores, vec![1.0, 0.5, 0.5]);
    }

    #[test]
    fn ordering_and_ties() {
        assert_eq!(ascending_order(&[3.0, 1.0, 2.0]), vec![1, 2, 0]);
        assert_eq!(ascending_order(&[1.0, 1.0, 2.0]), vec![0, 1, 2]);
        let s = CriterionScore::new("c", Criterion::L1, vec![5.0, 1.0, 0.5, 4.0]);
        assert_eq!(s.lowest(2), vec![1, 2]);
    }

    #[test]
    fn pool_parsing() {
        assert_eq!(parse_pool("l1,cos").unwrap(), vec![Criterion::L1, Criterion::Cos]);
        assert!(parse_pool("l1,l1").is_err());
        assert!(parse_pool("").is_err());
        assert!(parse_pool("taylor").is_err());
    }
}
