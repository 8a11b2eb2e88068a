//! Cross-module properties of the point-process model, its metrics and the
//! training loss.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use setcnf::dynamics::{DynamicsConfig, TraceMode};
use setcnf::flow::{FlowConfig, FlowModel};
use setcnf::metrics::{nll_report, wasserstein1};
use setcnf::ode::SolverConfig;
use setcnf::pointset::PointSet;
use setcnf::process::{fit_rate, EvalSettings, PointProcessModel};
use setcnf::train::loss_and_gradient;

fn random_model(seed: u64, cfg: DynamicsConfig) -> PointProcessModel {
    let mut flow = FlowModel::new(FlowConfig::cnf(cfg), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in flow.params_mut().iter_mut() {
        for v in t.values_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    PointProcessModel::with_rate(flow, 7.0).unwrap()
}

fn small() -> DynamicsConfig {
    DynamicsConfig {
        hidden_dim: 8,
        between_dim: 6,
        ..DynamicsConfig::deep_set(2)
    }
}

fn unit_set(n: usize, rng: &mut ChaCha8Rng) -> PointSet {
    PointSet::new(2, (0..2 * n).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap()
}

#[test]
fn rate_estimate_from_poisson_cardinalities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pois = Poisson::new(15.0).unwrap();
    let sets: Vec<PointSet> = (0..10_000)
        .map(|_| PointSet::new(1, vec![0.5; pois.sample(&mut rng) as usize]).unwrap())
        .collect();
    let rate = fit_rate(&sets).unwrap();
    assert!((rate - 15.0).abs() < 0.5, "{rate}");
}

#[test]
fn nll_report_agrees_between_closed_form_and_dense_trace() {
    let model = random_model(3, small());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sets: Vec<PointSet> = (0..5).map(|i| unit_set(3 + i, &mut rng)).collect();
    let solver = SolverConfig::rk4(8);
    let report = |mode| {
        nll_report(
            &model,
            &sets,
            &EvalSettings {
                trace_mode: mode,
                solver,
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap()
    };
    let a = report(TraceMode::ClosedForm);
    let b = report(TraceMode::ExactDense);
    assert!((a.mean - b.mean).abs() < 1e-6, "{} vs {}", a.mean, b.mean);
    let single = nll_report(&model, &sets[..1], &model.default_settings(), &mut rng).unwrap();
    assert_eq!(single.std, 0.0);
}

#[test]
fn identity_flow_report_is_hand_computable() {
    let model = PointProcessModel::with_rate(FlowModel::new(FlowConfig::identity(1), 0).unwrap(), 1.0).unwrap();
    let sets = vec![
        PointSet::new(1, vec![0.0, 0.0]).unwrap(),
        PointSet::new(1, vec![1.0, -1.0, 2.0]).unwrap(),
    ];
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let first = half_ln_2pi;
    let second = half_ln_2pi + (0.5 + 0.5 + 2.0) / 3.0;
    let r = nll_report(&model, &sets, &model.default_settings(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((r.mean - 0.5 * (first + second)).abs() < 1e-12);
    assert!((r.std - 0.5 * (second - first)).abs() < 1e-12);
}

/// Minimum-cost perfect matching by the Hungarian algorithm.
fn assignment_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let (mut p, mut way) = (vec![0usize; n + 1], vec![0usize; n + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
}

#[test]
fn wasserstein_equals_optimal_transport() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let a: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.gen_range(0.2..1.5)).collect();
        let cost: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| (x - y).abs()).collect()).collect();
        let oracle = assignment_cost(&cost) / 20.0;
        let w = wasserstein1(&a, &b, &mut rng).unwrap();
        assert!((w - oracle).abs() < 1e-12, "{w} vs {oracle}");
    }
}

#[test]
fn batch_loss_is_the_mean_of_set_losses() {
    let model = random_model(6, small());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sets: Vec<PointSet> = [2, 5, 3].iter().map(|&n| unit_set(n, &mut rng)).collect();
    let refs: Vec<&PointSet> = sets.iter().collect();
    let (batch, _) = loss_and_gradient(&model, &refs, TraceMode::ClosedForm, 6, &mut rng).unwrap();
    let singles: Vec<f64> = sets
        .iter()
        .map(|s| loss_and_gradient(&model, &[s], TraceMode::ClosedForm, 6, &mut rng).unwrap().0)
        .collect();
    let mean = singles.iter().sum::<f64>() / 3.0;
    assert!((batch - mean).abs() < 1e-10, "{batch} vs {mean}");
}

#[test]
fn repeated_losses_are_constant_only_for_exact_traces() {
    let model = random_model(8, small());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let set = unit_set(6, &mut rng);
    let losses = |mode, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..20)
            .map(|_| loss_and_gradient(&model, &[&set], mode, 4, rng).unwrap().0)
            .collect()
    };
    let exact = losses(TraceMode::ClosedForm, &mut rng);
    assert!(exact.iter().all(|v| *v == exact[0]));
    let noisy = losses(TraceMode::Hutchinson, &mut rng);
    assert!(noisy.iter().any(|v| *v != noisy[0]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn likelihood_is_permutation_invariant(seed in 0u64..1000, n in 1usize..7) {
        let model = random_model(seed % 4, small());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = unit_set(n, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let eval = EvalSettings { trace_mode: TraceMode::ClosedForm, solver: SolverConfig::rk4(5) };
        let a = model.log_likelihood(&set, &eval, &mut rng).unwrap();
        let b = model.log_likelihood(&set.permuted(&perm), &eval, &mut rng).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        let x = model.per_point_nll(&set, true, &eval, &mut rng).unwrap();
        let y = model.per_point_nll(&set.permuted(&perm), true, &eval, &mut rng).unwrap();
        prop_assert_eq!(x.to_bits(), y.to_bits());
    }

    #[test]
    fn conditional_scores_repeat_exactly(seed in 0u64..1000) {
        let model = random_model(1, small());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = unit_set(3, &mut rng);
        let g = vec![rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let eval = EvalSettings { trace_mode: TraceMode::ClosedForm, solver: SolverConfig::rk4(5) };
        let s = model.conditional_log_density(&set, &[g.clone(), g], &eval, &mut rng).unwrap();
        prop_assert_eq!(s[0].to_bits(), s[1].to_bits());
    }
}
