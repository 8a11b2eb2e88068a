//! Finite point-process likelihood: Poisson cardinality times a
//! permutation-invariant location density.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::autodiff::softplus;
use crate::coupling::CouplingConfig;
use crate::dynamics::{DynamicsConfig, TraceMode};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::ode::SolverConfig;
use crate::pointset::PointSet;

/// Smallest rate used when a dataset has no points at all.
pub const RATE_FLOOR: f64 = 1e-6;

/// Inverse of `softplus` for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Poisson maximum-likelihood rate: the mean cardinality.
pub fn fit_rate(sets: &[PointSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::Contract("cannot fit a rate to an empty dataset".into()));
    }
    Ok(sets.iter().map(|s| s.len() as f64).sum::<f64>() / sets.len() as f64)
}

/// Model families offered by the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    CnfDeepset,
    CnfAttention,
    Ihp,
    CnfZeroTrace,
    #[serde(rename = "cnf-zero-trace+ihp")]
    CnfZeroTraceIhp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::CnfDeepset,
        ModelKind::CnfAttention,
        ModelKind::Ihp,
        ModelKind::CnfZeroTrace,
        ModelKind::CnfZeroTraceIhp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::CnfDeepset => "cnf-deepset",
            ModelKind::CnfAttention => "cnf-attention",
            ModelKind::Ihp => "ihp",
            ModelKind::CnfZeroTrace => "cnf-zero-trace",
            ModelKind::CnfZeroTraceIhp => "cnf-zero-trace+ihp",
        }
    }

    pub fn is_cnf(self) -> bool {
        self != ModelKind::Ihp
    }

    /// Flow configuration on the unit box of dimension `d`.
    ///
    /// `trace` applies to CNF models only. A deep-set model asked for the
    /// zero trace becomes the between-points-only variant, whose divergence
    /// vanishes identically.
    pub fn flow_config(self, d: usize, trace: Option<TraceMode>) -> Result<FlowConfig> {
        let with_trace = |mut dc: DynamicsConfig, default: TraceMode| {
            dc.trace_mode = trace.unwrap_or(default);
            dc.validate().map(|_| dc)
        };
        let cfg = match self {
            ModelKind::Ihp => {
                if trace.is_some() {
                    return Err(Error::Config("trace modes apply to CNF models only".into()));
                }
                FlowConfig::ihp(d, CouplingConfig::default())
            }
            ModelKind::CnfDeepset if trace == Some(TraceMode::Zero) => {
                FlowConfig::cnf(DynamicsConfig::between_only(d))
            }
            ModelKind::CnfDeepset => FlowConfig::cnf(with_trace(DynamicsConfig::deep_set(d), TraceMode::ClosedForm)?),
            ModelKind::CnfAttention => {
                FlowConfig::cnf(with_trace(DynamicsConfig::attention(d), TraceMode::ClosedForm)?)
            }
            ModelKind::CnfZeroTrace | ModelKind::CnfZeroTraceIhp => {
                let mut cfg = FlowConfig::cnf(with_trace(DynamicsConfig::between_only(d), TraceMode::Zero)?);
                if self == ModelKind::CnfZeroTraceIhp {
                    cfg.coupling = Some(CouplingConfig::default());
                }
                cfg
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }
}

/// How the location density is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub trace_mode: TraceMode,
    pub solver: SolverConfig,
}

/// Flow over locations plus a Poisson rate `λ = softplus(θ_λ)`.
#[derive(Clone, Debug)]
pub struct PointProcessModel {
    pub flow: FlowModel,
    theta_lambda: f64,
}

impl PointProcessModel {
    pub fn new(flow: FlowModel, theta_lambda: f64) -> Result<Self> {
        if !theta_lambda.is_finite() {
            return Err(Error::Config("rate pre-activation must be finite".into()));
        }
        Ok(Self { flow, theta_lambda })
    }

    pub fn with_rate(flow: FlowModel, rate: f64) -> Result<Self> {
        let mut m = Self::new(flow, 0.0)?;
        m.set_rate(rate)?;
        Ok(m)
    }

    pub fn theta_lambda(&self) -> f64 {
        self.theta_lambda
    }

    pub fn rate(&self) -> f64 {
        softplus(self.theta_lambda)
    }

    /// Sets `λ`, flooring non-positive values at [`RATE_FLOOR`].
    pub fn set_rate(&mut self, rate: f64) -> Result<()> {
        if !rate.is_finite() || rate < 0.0 {
            return Err(Error::Config(format!("invalid rate {rate}")));
        }
        self.theta_lambda = softplus_inverse(rate.max(RATE_FLOOR));
        Ok(())
    }

    /// Fits `λ` to the mean cardinality of `sets`.
    pub fn fit_rate(&mut self, sets: &[PointSet]) -> Result<f64> {
        let rate = fit_rate(sets)?;
        self.set_rate(rate)?;
        Ok(rate)
    }

    /// Exact evaluation settings: the declared trace mode (or an exact
    /// substitute if it is stochastic) with the adaptive solver.
    pub fn default_settings(&self) -> EvalSettings {
        EvalSettings {
            trace_mode: self.flow.exact_trace_mode(),
            solver: self.flow.config().eval_solver,
        }
    }

    pub fn log_location_density(&self, set: &PointSet, eval: &EvalSettings, rng: &mut impl Rng) -> Result<f64> {
        self.flow.log_density(set, eval.trace_mode, &eval.solver, rng)
    }

    /// `log p(X) = n log λ − λ + log p̃(X)`.
    pub fn log_likelihood(&self, set: &PointSet, eval: &EvalSettings, rng: &mut impl Rng) -> Result<f64> {
        let lambda = self.rate();
        let n = set.len() as f64;
        let card = if set.is_empty() { -lambda } else { n * lambda.ln() - lambda };
        Ok(card + self.log_location_density(set, eval, rng)?)
    }

    /// `−log p̃(X)/n`, plus `−(n log λ − λ)/n` when `include_cardinality`.
    pub fn per_point_nll(
        &self,
        set: &PointSet,
        include_cardinality: bool,
        eval: &EvalSettings,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::Contract("per-point loss needs at least one point".into()));
        }
        let n = set.len() as f64;
        let mut nll = -self.log_location_density(set, eval, rng)? / n;
        if include_cardinality {
            let lambda = self.rate();
            nll -= (n * lambda.ln() - lambda) / n;
        }
        Ok(nll)
    }

    /// `log p̃(X ∪ {g}) − log p̃(X)` for each query `g`.
    pub fn conditional_log_density(
        &self,
        set: &PointSet,
        queries: &[Vec<f64>],
        eval: &EvalSettings,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        if set.is_empty() {
            return Err(Error::Contract("conditioning set must be nonempty".into()));
        }
        for g in queries {
            self.flow.domain().check_point(g)?;
        }
        if self.flow.blocks().is_empty() {
            // Points are independent: the score is the single-point density.
            return queries
                .iter()
                .map(|g| self.log_location_density(&PointSet::new(g.len(), g.clone())?, eval, rng))
                .collect();
        }
        let base = self.log_location_density(set, eval, rng)?;
        queries
            .iter()
            .map(|g| Ok(self.log_location_density(&set.with_point(g), eval, rng)? - base))
            .collect()
    }

    /// Expected points per unit volume at `g`: `λ` times the single-point
    /// density, or the conditional density given `condition`.
    pub fn intensity(
        &self,
        g: &[f64],
        condition: Option<&PointSet>,
        eval: &EvalSettings,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let score = match condition {
            Some(x) => self.conditional_log_density(x, &[g.to_vec()], eval, rng)?[0],
            None => {
                self.flow.domain().check_point(g)?;
                let single = PointSet::new(g.len(), g.to_vec())?;
                self.log_location_density(&single, eval, rng)?
            }
        };
        Ok(self.rate() * score.exp())
    }

    /// Draws one realization with `n ~ Poisson(λ)`; may be empty.
    pub fn sample_poisson(&self, solver: &SolverConfig, rng: &mut impl Rng) -> Result<PointSet> {
        let n = Poisson::new(self.rate())
            .map_err(|e| Error::Config(format!("rate: {e}")))?
            .sample(rng) as usize;
        if n == 0 {
            return Ok(PointSet::empty(self.flow.point_dim()));
        }
        self.flow.sample(n, solver, rng)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::flow::{Domain, HALF_LN_2PI};

    fn identity_1d() -> PointProcessModel {
        PointProcessModel::with_rate(FlowModel::new(FlowConfig::identity(1), 0).unwrap(), 1.0).unwrap()
    }

    fn eval() -> EvalSettings {
        EvalSettings {
            trace_mode: TraceMode::Zero,
            solver: SolverConfig::rk4(4),
        }
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-6, 0.3, 1.0, 5.0, 40.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() <= 1e-12 * y.max(1.0), "{y}");
        }
    }

    #[test]
    fn cardinality_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = identity_1d();
        assert!((m.rate() - 1.0).abs() < 1e-14);
        let empty = PointSet::empty(1);
        assert!((m.log_likelihood(&empty, &eval(), &mut rng).unwrap() + 1.0).abs() < 1e-14);

        // λ = 2, n = 2 and p̃ = 0.25: p = e^{-2}.
        let mut m = identity_1d();
        m.set_rate(2.0).unwrap();
        let set = PointSet::new(1, vec![0.1, -0.4]).unwrap();
        let lp_loc = m.log_location_density(&set, &eval(), &mut rng).unwrap();
        let ll = m.log_likelihood(&set, &eval(), &mut rng).unwrap();
        assert!((ll - lp_loc - (2.0 * 2f64.ln() - 2.0)).abs() < 1e-12);
        let p = (ll - lp_loc + 0.25f64.ln()).exp();
        assert!((p - 0.1353352832).abs() < 1e-10);
    }

    #[test]
    fn per_point_nll_of_identity_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = identity_1d();
        let set = PointSet::new(1, vec![0.0, 0.0]).unwrap();
        let nll = m.per_point_nll(&set, false, &eval(), &mut rng).unwrap();
        assert!((nll - 0.9189385332).abs() < 1e-10);
        let with = m.per_point_nll(&set, true, &eval(), &mut rng).unwrap();
        assert!((with - (nll + 0.5)).abs() < 1e-12);
        assert!(matches!(
            m.per_point_nll(&PointSet::empty(1), false, &eval(), &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cardinality_and_locations_normalize_together() {
        // Sum over n of the integral of p(X) over ordered locations divided by n!.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = identity_1d();
        m.set_rate(0.7).unwrap();
        let nodes = 401;
        let (lo, hi) = (-6.0, 6.0);
        let h = (hi - lo) / (nodes - 1) as f64;
        let w = |i: usize| if i == 0 || i == nodes - 1 { 0.5 * h } else { h };
        let x = |i: usize| lo + i as f64 * h;
        let mut total = m.log_likelihood(&PointSet::empty(1), &eval(), &mut rng).unwrap().exp();
        for i in 0..nodes {
            let s = PointSet::new(1, vec![x(i)]).unwrap();
            total += w(i) * m.log_likelihood(&s, &eval(), &mut rng).unwrap().exp();
        }
        let mut two = 0.0;
        for i in 0..nodes {
            for j in 0..nodes {
                let s = PointSet::new(1, vec![x(i), x(j)]).unwrap();
                two += w(i) * w(j) * m.log_likelihood(&s, &eval(), &mut rng).unwrap().exp();
            }
        }
        total += two / 2.0;
        // Poisson tail beyond n = 2.
        let lambda: f64 = 0.7;
        let tail = 1.0 - (-lambda).exp() * (1.0 + lambda + lambda * lambda / 2.0);
        assert!((total + tail - 1.0).abs() < 1e-6, "{total} {tail}");
    }

    #[test]
    fn fit_rate_examples() {
        let sets: Vec<PointSet> = [3, 5, 7]
            .iter()
            .map(|&n| PointSet::new(1, vec![0.5; n]).unwrap())
            .collect();
        assert_eq!(fit_rate(&sets).unwrap(), 5.0);
        let mut m = identity_1d();
        let empties = vec![PointSet::empty(1); 4];
        assert_eq!(m.fit_rate(&empties).unwrap(), 0.0);
        assert_eq!(m.theta_lambda(), softplus_inverse(RATE_FLOOR));
        assert!(fit_rate(&[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pois = Poisson::new(15.0).unwrap();
        let draws: Vec<PointSet> = (0..10_000)
            .map(|_| PointSet::new(1, vec![0.5; pois.sample(&mut rng) as usize]).unwrap())
            .collect();
        assert!((fit_rate(&draws).unwrap() - 15.0).abs() < 0.5);
    }

    #[test]
    fn conditional_scores_of_independent_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let flow = FlowModel::new(FlowConfig::ihp(2, CouplingConfig { layers: 2, hidden_dim: 6 }), 3).unwrap();
        let mut flow_params = flow.params().clone();
        for (_, t) in flow_params.iter_mut() {
            for v in t.values_mut() {
                *v += rng.gen_range(-0.4..0.4);
            }
        }
        let mut flow = flow;
        flow.set_params(flow_params).unwrap();
        let m = PointProcessModel::with_rate(flow, 10.0).unwrap();
        let a = PointSet::new(2, vec![0.2, 0.3, 0.7, 0.1]).unwrap();
        let b = PointSet::new(2, vec![0.9, 0.9]).unwrap();
        let qs = vec![vec![0.4, 0.5], vec![0.4, 0.5], vec![0.05, 0.95]];
        let sa = m.conditional_log_density(&a, &qs, &eval(), &mut rng).unwrap();
        let sb = m.conditional_log_density(&b, &qs, &eval(), &mut rng).unwrap();
        assert_eq!(sa[0], sa[1]);
        for (k, q) in qs.iter().enumerate() {
            let single = m
                .log_location_density(&PointSet::new(2, q.clone()).unwrap(), &eval(), &mut rng)
                .unwrap();
            assert_eq!(sa[k], single);
            assert_eq!(sb[k], single);
        }
        assert!(matches!(
            m.conditional_log_density(&a, &[vec![1.2, 0.5]], &eval(), &mut rng),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn intensity_scales_with_rate_and_integrates_to_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Unbounded identity flow: intensity is λ times the standard normal density.
        let m = PointProcessModel::with_rate(FlowModel::new(FlowConfig::identity(1), 0).unwrap(), 10.0).unwrap();
        let at0 = m.intensity(&[0.0], None, &eval(), &mut rng).unwrap();
        assert!((at0 - 10.0 * (-HALF_LN_2PI).exp()).abs() < 1e-12);
        let mut m2 = m.clone();
        m2.set_rate(20.0).unwrap();
        let doubled = m2.intensity(&[0.0], None, &eval(), &mut rng).unwrap();
        assert!((doubled - 2.0 * at0).abs() < 1e-10);

        let flow = FlowModel::new(FlowConfig::ihp(2, CouplingConfig { layers: 2, hidden_dim: 6 }), 5).unwrap();
        let m = PointProcessModel::with_rate(flow, 10.0).unwrap();
        let k = 100;
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..k {
                let g = [(i as f64 + 0.5) / k as f64, (j as f64 + 0.5) / k as f64];
                total += m.intensity(&g, None, &eval(), &mut rng).unwrap();
            }
        }
        total /= (k * k) as f64;
        assert!((total - 10.0).abs() < 1e-2, "{total}");
        assert_eq!(m.flow.domain(), &Domain::unit(2));
    }

    #[test]
    fn model_kinds_parse_and_validate() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
            assert!(k.flow_config(2, None).is_ok());
        }
        assert!(matches!(
            ModelKind::Ihp.flow_config(2, Some(TraceMode::ClosedForm)),
            Err(Error::Config(_))
        ));
        let zero = ModelKind::CnfDeepset.flow_config(2, Some(TraceMode::Zero)).unwrap();
        assert!(!zero.dynamics.unwrap().self_slot);
        assert!(ModelKind::CnfAttention.flow_config(2, Some(TraceMode::Hutchinson)).is_ok());
        let json = serde_json::to_string(&ModelKind::CnfZeroTraceIhp).unwrap();
        assert_eq!(json, "\"cnf-zero-trace+ihp\"");
        assert!("bogus".parse::<ModelKind>().is_err());
    }
}
