//! Maximum-likelihood training with Adam, step decay and early stopping.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{canonical_sum, ParameterSet, Tape};
use crate::dynamics::TraceMode;
use crate::error::{Error, Result};
use crate::ode::SolverConfig;
use crate::pointset::PointSet;
use crate::process::{EvalSettings, PointProcessModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// The learning rate halves after every this many epochs.
    pub lr_halving_period: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Trace mode used for the training loss; `None` uses the model's own.
    pub trace_mode: Option<TraceMode>,
    /// Fixed RK4 steps per block for the training loss; `None` uses the
    /// model's training solver.
    pub train_steps: Option<usize>,
    /// Solver for the per-epoch validation loss; `None` uses fixed RK4 with
    /// the training step count.
    pub val_solver: Option<SolverConfig>,
    /// Stop after the epoch during which this much wall time has elapsed.
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            lr_halving_period: 50,
            early_stop_patience: 10,
            max_epochs: 300,
            seed: 0,
            trace_mode: None,
            train_steps: None,
            val_solver: None,
            max_seconds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.lr_halving_period == 0 || self.early_stop_patience == 0 {
            return bad("batch_size, lr_halving_period and early_stop_patience must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.train_steps == Some(0) {
            return bad("train_steps must be positive");
        }
        if let Some(s) = &self.val_solver {
            s.validate()?;
        }
        Ok(())
    }

    /// Learning rate during `epoch` (counted from 1).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let halvings = epoch.saturating_sub(1) / self.lr_halving_period;
        self.learning_rate * 0.5f64.powi(halvings as i32)
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay. Returns `false` and
/// leaves everything untouched when a gradient is non-finite.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<bool> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::Contract("adam: parameter, gradient and state shapes differ".into()));
    }
    if !grads.all_finite() {
        log::warn!("non-finite gradient; step rejected");
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let n = params.len();
    for k in 0..n {
        let g = grads.by_index(k).values().to_vec();
        let m = state.m.by_index_mut(k).values_mut();
        for (mi, gi) in m.iter_mut().zip(&g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v.by_index_mut(k).values_mut();
        for (vi, gi) in v.iter_mut().zip(&g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let m = state.m.by_index(k).values();
        let v = state.v.by_index(k).values();
        let p = params.by_index_mut(k).values_mut();
        for i in 0..p.len() {
            p[i] -= lr * cfg.weight_decay * p[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(true)
}

/// Mean per-point NLL of `sets` and its parameter gradient, accumulated in
/// set order. Training uses fixed-step RK4 recorded on a tape.
pub fn loss_and_gradient(
    model: &PointProcessModel,
    sets: &[&PointSet],
    mode: TraceMode,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<(f64, ParameterSet)> {
    if sets.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let params = model.flow.params();
    let mut total = params.zeros_like();
    let mut losses = Vec::with_capacity(sets.len());
    let scale = 1.0 / sets.len() as f64;
    for set in sets {
        let mut tape = Tape::new();
        let vars = tape.bind(params);
        let loss = model.flow.nll_on_tape(&mut tape, &vars, set, mode, steps, rng)?;
        tape.check_finite(loss)?;
        let grads = tape.backward(loss);
        total.add_scaled(&grads.params(&tape, &vars, params), scale);
        losses.push(tape.scalar(loss));
    }
    Ok((canonical_sum(&losses) * scale, total))
}

/// Mean per-point NLL over `sets` on the value path, with the mean number
/// of dynamics evaluations per set.
pub fn mean_loss(
    model: &PointProcessModel,
    sets: &[PointSet],
    eval: &EvalSettings,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    if sets.is_empty() {
        return Err(Error::Contract("empty split".into()));
    }
    let mut losses = Vec::with_capacity(sets.len());
    let mut nfe = 0usize;
    for s in sets {
        let e = model.flow.log_density_eval(s, eval.trace_mode, &eval.solver, rng)?;
        losses.push(-e.log_density / s.len() as f64);
        nfe += e.nfe;
    }
    let n = sets.len() as f64;
    Ok((canonical_sum(&losses) / n, nfe as f64 / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub mean_nfe: f64,
    pub seconds: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,mean_nfe,seconds";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            r.epoch, r.train_loss, r.val_loss, r.mean_nfe, r.seconds
        ));
    }
    out
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    fs::write(path, history_csv(history))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
    TimeBudget,
    Diverged,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model with the parameters of the best validation epoch.
    pub model: PointProcessModel,
    /// Epoch 0 is the initial model; empty when `max_epochs == 0`.
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    pub rejected_steps: usize,
}

/// Trains the location flow on `train`, selecting parameters on `val`.
/// The Poisson rate is fitted in closed form to `train`.
pub fn train(
    model: PointProcessModel,
    train: &[PointSet],
    val: &[PointSet],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("train and validation splits must be nonempty".into()));
    }
    let mut model = model;
    model.fit_rate(train)?;
    let mode = cfg.trace_mode.unwrap_or_else(|| model.flow.trace_mode());
    model.flow.check_trace_mode(mode)?;
    if cfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history: Vec::new(),
            best_epoch: 0,
            best_val_loss: f64::NAN,
            stop: StopReason::MaxEpochs,
            rejected_steps: 0,
        });
    }
    let steps = cfg.train_steps.unwrap_or(model.flow.config().train_solver.steps);
    let val_eval = EvalSettings {
        trace_mode: match mode {
            TraceMode::Hutchinson => model.flow.exact_trace_mode(),
            m => m,
        },
        solver: cfg.val_solver.unwrap_or(SolverConfig::rk4(steps)),
    };
    let train_eval = EvalSettings {
        trace_mode: val_eval.trace_mode,
        solver: SolverConfig::rk4(steps),
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    probe_rng.set_stream(2);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eval_rng.set_stream(3);

    let start = Instant::now();
    let (train0, _) = mean_loss(&model, train, &train_eval, &mut eval_rng)?;
    let (val0, nfe0) = mean_loss(&model, val, &val_eval, &mut eval_rng)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: train0,
        val_loss: val0,
        mean_nfe: nfe0,
        seconds: start.elapsed().as_secs_f64(),
    }];
    let mut best = (0usize, val0, model.flow.params().clone());
    let mut adam = AdamState::new(model.flow.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rejected = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut batch_losses = Vec::new();
        let mut batch_weights = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let sets: Vec<&PointSet> = chunk.iter().map(|&i| &train[i]).collect();
            match loss_and_gradient(&model, &sets, mode, steps, &mut probe_rng) {
                Ok((loss, grads)) => {
                    if adam_step(model.flow.params_mut(), &grads, &mut adam, cfg, lr)? {
                        batch_losses.push(loss * chunk.len() as f64);
                        batch_weights.push(chunk.len() as f64);
                    } else {
                        rejected += 1;
                    }
                }
                Err(Error::NonFinite { op }) => {
                    log::warn!("epoch {epoch}: non-finite loss at {op}; step rejected");
                    rejected += 1;
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = canonical_sum(&batch_losses) / canonical_sum(&batch_weights);
        let val = mean_loss(&model, val, &val_eval, &mut eval_rng);
        let (val_loss, nfe) = match val {
            Ok(v) => v,
            Err(Error::NonFinite { .. } | Error::SolverDivergence { .. }) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        let seconds = start.elapsed().as_secs_f64();
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            mean_nfe: nfe,
            seconds,
        });
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} ({seconds:.1}s)");
        if !val_loss.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        if val_loss < best.1 {
            best = (epoch, val_loss, model.flow.params().clone());
        } else if epoch - best.0 >= cfg.early_stop_patience {
            stop = StopReason::EarlyStopping;
            break;
        }
        if cfg.max_seconds.is_some_and(|limit| seconds >= limit) {
            stop = StopReason::TimeBudget;
            break;
        }
    }
    model.flow.set_params(best.2)?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.0,
        best_val_loss: best.1,
        stop,
        rejected_steps: rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::dynamics::DynamicsConfig;
    use crate::flow::{FlowConfig, FlowModel};

    fn scalar_params(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("theta", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn adam_examples() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar_params(0.7);
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &scalar_params(0.0), &mut st, &cfg, 1e-3).unwrap());
        assert_eq!(p.get("theta").unwrap().values()[0], 0.7);

        let mut p = scalar_params(0.7);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar_params(1.0), &mut st, &cfg, 1e-3).unwrap();
        let moved = 0.7 - p.get("theta").unwrap().values()[0];
        assert!((moved - 1e-3).abs() < 1e-10, "{moved}");

        let mut p = scalar_params(0.7);
        let mut st = AdamState::new(&p);
        assert!(!adam_step(&mut p, &scalar_params(f64::NAN), &mut st, &cfg, 1e-3).unwrap());
        assert_eq!(st.step, 0);
        assert_eq!(p.get("theta").unwrap().values()[0], 0.7);
    }

    #[test]
    fn decoupled_weight_decay() {
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut p = scalar_params(2.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar_params(0.0), &mut st, &cfg, 0.5).unwrap();
        assert!((p.get("theta").unwrap().values()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn learning_rate_halves_every_period() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate_at(1), 1e-3);
        assert_eq!(cfg.learning_rate_at(50), 1e-3);
        assert_eq!(cfg.learning_rate_at(51), 5e-4);
        assert_eq!(cfg.learning_rate_at(101), 2.5e-4);
    }

    fn tiny_model() -> PointProcessModel {
        let dc = DynamicsConfig {
            hidden_dim: 6,
            latent_dim: 2,
            between_dim: 4,
            tau_layers: 1,
            ..DynamicsConfig::deep_set(2)
        };
        let cfg = FlowConfig {
            train_solver: SolverConfig::rk4(3),
            ..FlowConfig::cnf(dc)
        };
        PointProcessModel::new(FlowModel::new(cfg, 0).unwrap(), 0.0).unwrap()
    }

    fn toy_sets(count: usize, seed: u64) -> Vec<PointSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let n = rng.gen_range(1..5);
                PointSet::new(2, (0..2 * n).map(|_| rng.gen_range(0.3..0.5)).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_epochs_return_the_initial_model() {
        let m = tiny_model();
        let sets = toy_sets(4, 0);
        let out = train(m.clone(), &sets, &sets, &TrainConfig { max_epochs: 0, ..TrainConfig::default() }).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.model.flow.params(), m.flow.params());
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let train_sets = toy_sets(12, 1);
        let val_sets = toy_sets(4, 2);
        let cfg = TrainConfig {
            max_epochs: 10,
            batch_size: 5,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let a = train(tiny_model(), &train_sets, &val_sets, &cfg).unwrap();
        let b = train(tiny_model(), &train_sets, &val_sets, &cfg).unwrap();
        assert_eq!(a.model.flow.params(), b.model.flow.params());
        assert_eq!(a.history.len(), 11);
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!((x.train_loss, x.val_loss), (y.train_loss, y.val_loss));
        }
        assert!(a.best_val_loss < a.history[0].val_loss - 0.1, "{:?}", a.history);
        assert!((a.model.rate() - crate::process::fit_rate(&train_sets).unwrap()).abs() < 1e-12);
        let csv = history_csv(&a.history);
        assert!(csv.starts_with("epoch,train_loss,val_loss,mean_nfe,seconds\n0,"));
    }

    #[test]
    fn gradient_of_a_batch_is_the_mean_of_set_gradients() {
        let m = tiny_model();
        let sets = toy_sets(3, 3);
        let refs: Vec<&PointSet> = sets.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, g) = loss_and_gradient(&m, &refs, TraceMode::ClosedForm, 3, &mut rng).unwrap();
        let mut mean = m.flow.params().zeros_like();
        let mut losses = 0.0;
        for s in &refs {
            let (l, gs) = loss_and_gradient(&m, &[s], TraceMode::ClosedForm, 3, &mut rng).unwrap();
            mean.add_scaled(&gs, 1.0 / 3.0);
            losses += l / 3.0;
        }
        assert!((loss - losses).abs() < 1e-12);
        for (a, b) in g.flatten().iter().zip(mean.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
