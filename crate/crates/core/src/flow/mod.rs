//! Continuous normalizing flows over point sets.
//!
//! Density direction: data points are mapped into the real line by the
//! bounding transform, through the coupling stack (inverse direction), then
//! through each CNF block from `t = 0` to `t = 1`, and scored under a
//! standard normal base:
//!
//! `log p(x) = log q(z(1)) + ∫₀¹ Tr(∂f/∂z) dt + log-determinants`.
//!
//! Sampling runs the same maps backwards, integrating each block from
//! `t = 1` to `t = 0`.

pub mod bounding;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{canonical_sum, ParamVars, ParameterSet, Tape, Var};
use crate::coupling::{CouplingConfig, CouplingStack};
use crate::dynamics::{canonical_order, rademacher, Dynamics, DynamicsConfig, TraceMode, TraceRequest};
use crate::error::{Error, Result};
use crate::ode::{self, SolverConfig};
use crate::pointset::{pad_batch, Batch, PointSet};

pub use bounding::{BoundDirection, Domain, BOUND_EPS};

/// `0.5 * ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub const MAX_BLOCKS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `t = 0 → 1`, data side to base side, accumulating the divergence.
    DensityPass,
    /// `t = 1 → 0`, base side to data side.
    SamplePass,
}

/// Result of integrating one block over a batch.
#[derive(Clone, Debug)]
pub struct FlowEval {
    pub points: Batch,
    /// Per set; add to the base-side log-density.
    pub delta_logdensity: Vec<f64>,
    pub nfe: usize,
}

/// Log-density of one set with solver instrumentation.
#[derive(Clone, Copy, Debug)]
pub struct DensityEval {
    pub log_density: f64,
    pub nfe: usize,
}

fn check_mode(cfg: &DynamicsConfig, mode: TraceMode) -> Result<()> {
    DynamicsConfig {
        trace_mode: mode,
        ..cfg.clone()
    }
    .validate()
}

/// Integrates one set through `dynamics`. With `trace = None` no
/// divergence is accumulated and the returned delta is zero.
pub fn integrate_set(
    dynamics: &Dynamics,
    params: &ParameterSet,
    set: &PointSet,
    direction: Direction,
    solver: &SolverConfig,
    trace: Option<TraceMode>,
    rng: &mut impl Rng,
) -> Result<(PointSet, f64, usize)> {
    let (n, d) = (set.len(), set.dim());
    if n == 0 {
        return Ok((set.clone(), 0.0, 0));
    }
    if let Some(mode) = trace {
        check_mode(dynamics.config(), mode)?;
    }
    let probe = match trace {
        Some(TraceMode::Hutchinson) => Some(rademacher(n * d, rng)),
        _ => None,
    };
    let m = n * d;
    let accumulate = trace.is_some();
    let mut y0 = set.coords().to_vec();
    if accumulate {
        y0.push(0.0);
    }
    let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = tape.bind_frozen(params);
        let x = tape.constant(n, d, y[..m].to_vec());
        let mode = trace.unwrap_or(TraceMode::Zero);
        let f = dynamics.field(&mut tape, &vars, x, t, TraceRequest::value(mode, probe.as_deref()))?;
        tape.check_finite(f.velocity)?;
        let mut out = tape.value(f.velocity).to_vec();
        if accumulate {
            tape.check_finite(f.divergence)?;
            out.push(tape.scalar(f.divergence));
        }
        Ok(out)
    };
    let (t0, t1) = match direction {
        Direction::DensityPass => (0.0, 1.0),
        Direction::SamplePass => (1.0, 0.0),
    };
    let sol = ode::solve(rhs, &y0, t0, t1, solver)?;
    let delta = if accumulate { sol.y[m] } else { 0.0 };
    Ok((PointSet::new(d, sol.y[..m].to_vec())?, delta, sol.nfe))
}

/// Batch form of [`integrate_set`].
pub fn integrate(
    dynamics: &Dynamics,
    params: &ParameterSet,
    batch: &Batch,
    direction: Direction,
    solver: &SolverConfig,
    trace: Option<TraceMode>,
    rng: &mut impl Rng,
) -> Result<FlowEval> {
    let mut sets = Vec::with_capacity(batch.size());
    let mut deltas = Vec::with_capacity(batch.size());
    let mut nfe = 0;
    for set in batch.sets() {
        let (s, delta, k) = integrate_set(dynamics, params, &set, direction, solver, trace, rng)?;
        sets.push(s);
        deltas.push(delta);
        nfe += k;
    }
    Ok(FlowEval {
        points: pad_batch(&sets)?,
        delta_logdensity: deltas,
        nfe,
    })
}

/// Density-pass RK4 recorded on a tape, differentiable in the parameters.
/// Returns the base-side state and the accumulated divergence.
#[allow(clippy::too_many_arguments)]
pub fn integrate_on_tape(
    dynamics: &Dynamics,
    tape: &mut Tape,
    vars: &ParamVars,
    x: Var,
    steps: usize,
    mode: TraceMode,
    probe: Option<&[f64]>,
) -> Result<(Var, Var)> {
    check_mode(dynamics.config(), mode)?;
    let h = 1.0 / steps as f64;
    let req = TraceRequest::training(mode, probe);
    let mut x = x;
    let mut acc: Option<Var> = None;
    for s in 0..steps {
        let t = s as f64 * h;
        let f1 = dynamics.field(tape, vars, x, t, req)?;
        let step = tape.scale(f1.velocity, 0.5 * h);
        let x2 = tape.add(x, step);
        let f2 = dynamics.field(tape, vars, x2, t + 0.5 * h, req)?;
        let step = tape.scale(f2.velocity, 0.5 * h);
        let x3 = tape.add(x, step);
        let f3 = dynamics.field(tape, vars, x3, t + 0.5 * h, req)?;
        let step = tape.scale(f3.velocity, h);
        let x4 = tape.add(x, step);
        let f4 = dynamics.field(tape, vars, x4, t + h, req)?;

        let combine = |tape: &mut Tape, a: Var, b: Var, c: Var, d: Var| {
            let b2 = tape.scale(b, 2.0);
            let c2 = tape.scale(c, 2.0);
            let s = tape.add(a, b2);
            let s = tape.add(s, c2);
            let s = tape.add(s, d);
            tape.scale(s, h / 6.0)
        };
        let dx = combine(tape, f1.velocity, f2.velocity, f3.velocity, f4.velocity);
        x = tape.add(x, dx);
        let da = combine(tape, f1.divergence, f2.divergence, f3.divergence, f4.divergence);
        acc = Some(match acc {
            None => da,
            Some(a) => tape.add(a, da),
        });
    }
    let acc = match acc {
        Some(a) => a,
        None => tape.zeros(1, 1),
    };
    Ok((x, acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub point_dim: usize,
    /// CNF dynamics shared by every block's architecture; `None` means no
    /// CNF blocks.
    pub dynamics: Option<DynamicsConfig>,
    pub blocks: usize,
    /// Coupling layers between the bounding transform and the CNF blocks.
    pub coupling: Option<CouplingConfig>,
    pub domain: Domain,
    pub train_solver: SolverConfig,
    pub eval_solver: SolverConfig,
}

impl FlowConfig {
    /// One CNF block on the unit box.
    pub fn cnf(dynamics: DynamicsConfig) -> Self {
        let d = dynamics.point_dim;
        Self {
            point_dim: d,
            dynamics: Some(dynamics),
            blocks: 1,
            coupling: None,
            domain: Domain::unit(d),
            train_solver: SolverConfig::training_default(),
            eval_solver: SolverConfig::evaluation_default(),
        }
    }

    /// Coupling stack only: points are independent.
    pub fn ihp(point_dim: usize, coupling: CouplingConfig) -> Self {
        Self {
            point_dim,
            dynamics: None,
            blocks: 0,
            coupling: Some(coupling),
            domain: Domain::unit(point_dim),
            train_solver: SolverConfig::training_default(),
            eval_solver: SolverConfig::evaluation_default(),
        }
    }

    /// No transformation at all: the base density on the unbounded space.
    pub fn identity(point_dim: usize) -> Self {
        Self {
            point_dim,
            dynamics: None,
            blocks: 0,
            coupling: None,
            domain: Domain::unbounded(point_dim),
            train_solver: SolverConfig::training_default(),
            eval_solver: SolverConfig::evaluation_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.point_dim == 0 {
            return bad("point_dim must be positive".into());
        }
        self.domain.validate()?;
        if self.domain.dim() != self.point_dim {
            return bad("domain dimension differs from point_dim".into());
        }
        match &self.dynamics {
            Some(dc) => {
                dc.validate()?;
                if dc.point_dim != self.point_dim {
                    return bad("dynamics point_dim differs from the flow".into());
                }
                if self.blocks == 0 || self.blocks > MAX_BLOCKS {
                    return bad(format!("blocks must be between 1 and {MAX_BLOCKS}"));
                }
            }
            None if self.blocks != 0 => return bad("blocks given without dynamics".into()),
            None => {}
        }
        if self.coupling.is_some() && self.point_dim < 2 {
            return bad("coupling layers need at least two dimensions".into());
        }
        self.train_solver.validate()?;
        self.eval_solver.validate()
    }
}

/// Stacked flow with parameters.
#[derive(Clone, Debug)]
pub struct FlowModel {
    cfg: FlowConfig,
    params: ParameterSet,
    blocks: Vec<Dynamics>,
    coupling: Option<CouplingStack>,
}

impl FlowModel {
    pub fn new(cfg: FlowConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let coupling = match &cfg.coupling {
            Some(cc) => Some(CouplingStack::new(cc, cfg.point_dim, &mut params, "coupling", &mut rng)?),
            None => None,
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        if let Some(dc) = &cfg.dynamics {
            for k in 0..cfg.blocks {
                blocks.push(Dynamics::new(dc.clone(), &mut params, &format!("block{k}"), &mut rng)?);
            }
        }
        Ok(Self {
            cfg,
            params,
            blocks,
            coupling,
        })
    }

    /// Rebuilds the architecture of `cfg` around existing parameters.
    pub fn from_parts(cfg: FlowConfig, params: ParameterSet) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        model.set_params(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn set_params(&mut self, params: ParameterSet) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::Config("parameters do not match the model architecture".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn blocks(&self) -> &[Dynamics] {
        &self.blocks
    }

    pub fn domain(&self) -> &Domain {
        &self.cfg.domain
    }

    pub fn point_dim(&self) -> usize {
        self.cfg.point_dim
    }

    /// Trace mode declared by the dynamics; `Zero` when there are no blocks.
    pub fn trace_mode(&self) -> TraceMode {
        self.cfg
            .dynamics
            .as_ref()
            .map_or(TraceMode::Zero, |d| d.trace_mode)
    }

    /// Exact mode used for validation and evaluation: the declared mode
    /// unless it is stochastic.
    pub fn exact_trace_mode(&self) -> TraceMode {
        match self.trace_mode() {
            TraceMode::Hutchinson => TraceMode::BlockExact,
            m => m,
        }
    }

    pub fn check_trace_mode(&self, mode: TraceMode) -> Result<()> {
        match &self.cfg.dynamics {
            Some(dc) => check_mode(dc, mode),
            None => Ok(()),
        }
    }

    /// Canonically ordered copy of `set` on the unbounded side, with the
    /// bounding log-determinant.
    fn prepare(&self, set: &PointSet) -> Result<(PointSet, f64)> {
        if set.dim() != self.point_dim() {
            return Err(Error::Contract(format!(
                "set has dimension {}, model expects {}",
                set.dim(),
                self.point_dim()
            )));
        }
        let sorted = set.permuted(&canonical_order(set.coords(), set.dim()));
        self.cfg.domain.to_unbounded(&sorted)
    }

    fn coupling_inverse_value(&self, y: &PointSet) -> (PointSet, f64) {
        match &self.coupling {
            None => (y.clone(), 0.0),
            Some(stack) => {
                let mut tape = Tape::new();
                let vars = tape.bind_frozen(&self.params);
                let x = tape.constant(y.len(), y.dim(), y.coords().to_vec());
                let (z, ld) = stack.inverse(&mut tape, &vars, x);
                let ld = canonical_sum(tape.value(ld));
                (PointSet::new(y.dim(), tape.value(z).to_vec()).expect("same shape"), ld)
            }
        }
    }

    /// `sum_i log N(z_i; 0, I)`.
    pub fn base_log_density(z: &PointSet) -> f64 {
        let sq: Vec<f64> = z.coords().iter().map(|v| v * v).collect();
        -0.5 * canonical_sum(&sq) - z.coords().len() as f64 * HALF_LN_2PI
    }

    /// Unnormalized location log-density `log p̃(X)` with solver counts.
    pub fn log_density_eval(
        &self,
        set: &PointSet,
        mode: TraceMode,
        solver: &SolverConfig,
        rng: &mut impl Rng,
    ) -> Result<DensityEval> {
        if set.is_empty() {
            return Ok(DensityEval {
                log_density: 0.0,
                nfe: 0,
            });
        }
        self.check_trace_mode(mode)?;
        let (y, ld_bound) = self.prepare(set)?;
        let (mut z, ld_coupling) = self.coupling_inverse_value(&y);
        let mut deltas = 0.0;
        let mut nfe = 0;
        for block in &self.blocks {
            let (nz, delta, k) =
                integrate_set(block, &self.params, &z, Direction::DensityPass, solver, Some(mode), rng)?;
            z = nz;
            deltas += delta;
            nfe += k;
        }
        let lp = ld_bound + ld_coupling + deltas + Self::base_log_density(&z);
        if !lp.is_finite() {
            return Err(Error::NonFinite {
                op: "log density".into(),
            });
        }
        Ok(DensityEval { log_density: lp, nfe })
    }

    pub fn log_density(
        &self,
        set: &PointSet,
        mode: TraceMode,
        solver: &SolverConfig,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        Ok(self.log_density_eval(set, mode, solver, rng)?.log_density)
    }

    /// `log p̃(X)` recorded on a tape (RK4 with `steps` steps per block).
    pub fn log_density_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        set: &PointSet,
        mode: TraceMode,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        self.check_trace_mode(mode)?;
        let (y, ld_bound) = self.prepare(set)?;
        let (n, d) = (y.len(), y.dim());
        let mut x = tape.constant(n, d, y.coords().to_vec());
        let mut total = tape.constant(1, 1, vec![ld_bound]);
        if let Some(stack) = &self.coupling {
            let (z, ld) = stack.inverse(tape, vars, x);
            x = z;
            let ld = tape.sum_canonical(ld);
            total = tape.add(total, ld);
        }
        for block in &self.blocks {
            let probe = (mode == TraceMode::Hutchinson).then(|| rademacher(n * d, rng));
            let (z, delta) = integrate_on_tape(block, tape, vars, x, steps, mode, probe.as_deref())?;
            x = z;
            total = tape.add(total, delta);
        }
        let sq = tape.square(x);
        let sq = tape.sum_canonical(sq);
        let base = tape.scale(sq, -0.5);
        let base = tape.add_scalar(base, -((n * d) as f64) * HALF_LN_2PI);
        Ok(tape.add(total, base))
    }

    /// Per-point negative log-density `-log p̃(X) / n` on a tape.
    pub fn nll_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        set: &PointSet,
        mode: TraceMode,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if set.is_empty() {
            return Err(Error::Contract("per-point loss needs at least one point".into()));
        }
        let lp = self.log_density_on_tape(tape, vars, set, mode, steps, rng)?;
        Ok(tape.scale(lp, -1.0 / set.len() as f64))
    }

    /// Draws `n` points: base sample, blocks backwards in time, coupling
    /// stack, then the bounding map.
    pub fn sample(&self, n: usize, solver: &SolverConfig, rng: &mut impl Rng) -> Result<PointSet> {
        if n == 0 {
            return Err(Error::Contract("sample size must be positive".into()));
        }
        let d = self.point_dim();
        let base: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let z = PointSet::new(d, base)?;
        self.sample_from_base(&z, solver, rng)
    }

    /// Pushes given base-side points to the data side.
    pub fn sample_from_base(&self, z: &PointSet, solver: &SolverConfig, rng: &mut impl Rng) -> Result<PointSet> {
        let mut x = z.clone();
        for block in self.blocks.iter().rev() {
            x = integrate_set(block, &self.params, &x, Direction::SamplePass, solver, None, rng)?.0;
        }
        if let Some(stack) = &self.coupling {
            let mut tape = Tape::new();
            let vars = tape.bind_frozen(&self.params);
            let xv = tape.constant(x.len(), x.dim(), x.coords().to_vec());
            let (y, _) = stack.forward(&mut tape, &vars, xv);
            x = PointSet::new(x.dim(), tape.value(y).to_vec())?;
        }
        Ok(self.cfg.domain.to_domain(&x).0)
    }

    /// Data side to base side for every block, without densities; used to
    /// check that sampling inverts the density pass.
    pub fn to_base(&self, set: &PointSet, solver: &SolverConfig, rng: &mut impl Rng) -> Result<PointSet> {
        let (y, _) = self.cfg.domain.to_unbounded(set)?;
        let (mut z, _) = self.coupling_inverse_value(&y);
        for block in &self.blocks {
            z = integrate_set(block, &self.params, &z, Direction::DensityPass, solver, None, rng)?.0;
        }
        Ok(z)
    }
}
