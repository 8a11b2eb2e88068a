//! Timing of divergence evaluation per trace mode and set size.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterSet;
use crate::dynamics::{Dynamics, DynamicsConfig, TraceMode};
use crate::error::{Error, Result};
use crate::pointset::PointSet;
use crate::process::{EvalSettings, PointProcessModel};
use crate::train::mean_loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub d: usize,
    pub hidden: usize,
    pub modes: Vec<TraceMode>,
    pub repeats: usize,
    /// Untimed evaluations before each measurement.
    pub warmup: usize,
    /// Largest `n * d` for which the dense trace is attempted.
    pub dense_ceiling: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_list: vec![50, 200, 1000],
            d: 2,
            hidden: 64,
            modes: vec![
                TraceMode::ClosedForm,
                TraceMode::Hutchinson,
                TraceMode::BlockExact,
                TraceMode::ExactDense,
            ],
            repeats: 5,
            warmup: 1,
            dense_ceiling: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub d: usize,
    pub mode: TraceMode,
    pub median_seconds: f64,
    pub result_value: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Human-readable reasons for measurements that were not taken.
    pub skipped: Vec<String>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Deep-set dynamics with every weight randomized, so the output layer is
/// not the zero map.
pub fn random_dynamics(d: usize, hidden: usize, seed: u64) -> Result<(Dynamics, ParameterSet)> {
    let cfg = DynamicsConfig {
        hidden_dim: hidden,
        between_dim: hidden,
        ..DynamicsConfig::deep_set(d)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    let dy = Dynamics::new(cfg, &mut params, "bench", &mut rng)?;
    for (_, t) in params.iter_mut() {
        let scale = 1.0 / (t.values().len() as f64).sqrt().max(1.0);
        for v in t.values_mut() {
            *v += rng.gen_range(-1.0..1.0) * scale;
        }
    }
    Ok((dy, params))
}

pub fn random_points(n: usize, d: usize, rng: &mut impl Rng) -> PointSet {
    PointSet::new(d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).expect("n*d coordinates")
}

pub fn bench_trace(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats == 0 || cfg.n_list.is_empty() || cfg.modes.is_empty() {
        return Err(Error::Config("bench needs sizes, modes and at least one repeat".into()));
    }
    let (dy, params) = random_dynamics(cfg.d, cfg.hidden, cfg.seed)?;
    let mut report = BenchReport::default();
    for &n in &cfg.n_list {
        if n == 0 {
            return Err(Error::Config("set sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ n as u64);
        let set = random_points(n, cfg.d, &mut rng);
        for &mode in &cfg.modes {
            if mode == TraceMode::Zero {
                continue;
            }
            if mode == TraceMode::ExactDense && n * cfg.d > cfg.dense_ceiling {
                let msg = format!(
                    "exact-dense skipped for n={n}, d={}: n*d = {} exceeds the ceiling {}",
                    cfg.d,
                    n * cfg.d,
                    cfg.dense_ceiling
                );
                log::warn!("{msg}");
                report.skipped.push(msg);
                continue;
            }
            let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for _ in 0..cfg.warmup {
                dy.eval_point_set(&params, &set, 0.5, mode, &mut probe_rng)?;
            }
            let mut times = Vec::with_capacity(cfg.repeats);
            let mut value = 0.0;
            for _ in 0..cfg.repeats {
                let start = Instant::now();
                let (_, div) = dy.eval_point_set(&params, &set, 0.5, mode, &mut probe_rng)?;
                times.push(start.elapsed().as_secs_f64());
                value = div;
            }
            report.rows.push(BenchRow {
                n,
                d: cfg.d,
                mode,
                median_seconds: median(&mut times),
                result_value: value,
            });
        }
    }
    Ok(report)
}

pub const BENCH_HEADER: &str = "n,d,mode,median_seconds,result_value";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:?},{:?}\n",
            r.n, r.d, r.mode, r.median_seconds, r.result_value
        ));
    }
    out
}

/// Solver effort and loss of one model on a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfeRow {
    pub model: String,
    pub mean_nfe: f64,
    pub val_loss: f64,
}

pub fn nfe_comparison(
    models: &[(String, PointProcessModel)],
    sets: &[PointSet],
    eval: Option<EvalSettings>,
    seed: u64,
) -> Result<Vec<NfeRow>> {
    models
        .iter()
        .map(|(name, m)| {
            let settings = eval.unwrap_or_else(|| m.default_settings());
            let (loss, nfe) = mean_loss(m, sets, &settings, &mut ChaCha8Rng::seed_from_u64(seed))?;
            Ok(NfeRow {
                model: name.clone(),
                mean_nfe: nfe,
                val_loss: loss,
            })
        })
        .collect()
}

pub const NFE_HEADER: &str = "model,mean_nfe,val_loss";

pub fn nfe_csv(rows: &[NfeRow]) -> String {
    let mut out = String::from(NFE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{:?},{:?}\n", r.model, r.mean_nfe, r.val_loss));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_modes_agree_on_small_sets() {
        let cfg = BenchConfig {
            n_list: vec![8],
            hidden: 16,
            repeats: 1,
            modes: vec![TraceMode::ClosedForm, TraceMode::BlockExact, TraceMode::ExactDense],
            ..BenchConfig::default()
        };
        let report = bench_trace(&cfg).unwrap();
        assert_eq!(report.rows.len(), 3);
        let v: Vec<f64> = report.rows.iter().map(|r| r.result_value).collect();
        assert!(v[0] != 0.0);
        assert!((v[0] - v[2]).abs() < 1e-9 && (v[1] - v[2]).abs() < 1e-9, "{v:?}");
        assert!(bench_csv(&report.rows).starts_with("n,d,mode,median_seconds,result_value\n8,2,closed-form,"));
    }

    #[test]
    fn dense_ceiling_is_reported() {
        let cfg = BenchConfig {
            n_list: vec![6],
            hidden: 8,
            repeats: 1,
            dense_ceiling: 10,
            modes: vec![TraceMode::ExactDense],
            ..BenchConfig::default()
        };
        let report = bench_trace(&cfg).unwrap();
        assert!(report.rows.is_empty());
        assert!(report.skipped[0].contains("exceeds the ceiling"));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
