//! Evaluation statistics for point-set models.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::canonical_sum;
use crate::error::{Error, Result};
use crate::pointset::PointSet;
use crate::process::{EvalSettings, PointProcessModel};

/// Sorted pairwise distances of one set.
#[derive(Clone, Debug, PartialEq)]
pub struct Distances {
    pub values: Vec<f64>,
    /// Set when the set had fewer than two points.
    pub degenerate: bool,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// All `n(n-1)/2` Euclidean distances in ascending order.
pub fn pairwise_distances(set: &PointSet) -> Distances {
    let n = set.len();
    if n < 2 {
        log::warn!("pairwise distances of a set with {n} point(s) are empty");
        return Distances {
            values: Vec::new(),
            degenerate: true,
        };
    }
    let mut values = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            values.push(distance(set.point(i), set.point(j)));
        }
    }
    values.sort_by(f64::total_cmp);
    Distances {
        values,
        degenerate: false,
    }
}

/// Distances of every set concatenated and sorted.
pub fn pooled_distances(sets: &[PointSet]) -> Vec<f64> {
    let mut all: Vec<f64> = sets.iter().flat_map(|s| pairwise_distances(s).values).collect();
    all.sort_by(f64::total_cmp);
    all
}

/// Empirical 1-D Wasserstein-1 distance. The larger sample is subsampled
/// without replacement to the size of the smaller one.
pub fn wasserstein1(a: &[f64], b: &[f64], rng: &mut impl Rng) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("wasserstein distance needs two nonempty samples".into()));
    }
    let shrink = |xs: &[f64], k: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
        if xs.len() == k {
            xs.to_vec()
        } else {
            sample_indices(rng, xs.len(), k).into_iter().map(|i| xs[i]).collect()
        }
    };
    let k = a.len().min(b.len());
    let mut x = shrink(a, k, rng);
    let mut y = shrink(b, k, rng);
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let gaps: Vec<f64> = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).collect();
    Ok(canonical_sum(&gaps) / k as f64)
}

/// Mean over sets of `K̂(r) = area / (n(n-1)) · #{ordered pairs i≠j : d_ij ≤ r}`,
/// without edge correction. Sets with fewer than two points are skipped.
pub fn ripley_k(sets: &[PointSet], r: f64, area: f64) -> Result<f64> {
    if !(r > 0.0) || !(area > 0.0) {
        return Err(Error::Contract("ripley's K needs a positive radius and area".into()));
    }
    let mut values = Vec::with_capacity(sets.len());
    for s in sets {
        let n = s.len();
        if n < 2 {
            continue;
        }
        let close = pairwise_distances(s).values.iter().filter(|d| **d <= r).count();
        values.push(area * (2 * close) as f64 / (n * (n - 1)) as f64);
    }
    if values.is_empty() {
        return Err(Error::Contract("every set has fewer than two points".into()));
    }
    Ok(canonical_sum(&values) / values.len() as f64)
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Deviations are taken from the first value, so identical inputs give a
/// standard deviation of exactly zero. An empty slice gives NaNs.
pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len() as f64;
    let Some(&first) = values.first() else {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
        };
    };
    let shifted: Vec<f64> = values.iter().map(|v| v - first).collect();
    let mean = first + canonical_sum(&shifted) / n;
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    Summary {
        mean,
        std: (canonical_sum(&dev) / n).sqrt(),
    }
}

/// Per-point NLL over the realizations of a split (cardinality excluded).
pub fn nll_report(
    model: &PointProcessModel,
    sets: &[PointSet],
    eval: &EvalSettings,
    rng: &mut impl Rng,
) -> Result<Summary> {
    if sets.is_empty() {
        return Err(Error::Contract("nll report needs at least one realization".into()));
    }
    let losses = sets
        .iter()
        .map(|s| model.per_point_nll(s, false, eval, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&losses))
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
    pub std: f64,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "dataset,model,metric,value,std,seed";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:?},{:?},{}\n",
            r.dataset, r.model, r.metric, r.value, r.std, r.seed
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(metrics_csv(rows).as_bytes())?;
    Ok(())
}
