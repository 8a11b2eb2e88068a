//! Command-line front end. Every command writes CSV, JSON or JSONL files.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{bench_csv, bench_trace, nfe_comparison, nfe_csv, BenchConfig};
use crate::checkpoint;
use crate::coupling::CouplingConfig;
use crate::data::{make_dataset, write_jsonl, Dataset, SimKind};
use crate::dynamics::{DynamicsConfig, TraceMode};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::metrics::{nll_report, pooled_distances, ripley_k, wasserstein1, write_metrics_csv, MetricRow};
use crate::ode::SolverConfig;
use crate::pointset::PointSet;
use crate::process::{EvalSettings, ModelKind, PointProcessModel};
use crate::train::{train, write_history, StopReason, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "setcnf", version, about = "Continuous normalizing flows for point sets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a synthetic dataset and write its 60/20/20 split.
    Simulate(SimulateArgs),
    /// Train a model and write a checkpoint plus history.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Draw sets from a checkpoint.
    Sample(SampleArgs),
    /// Score a regular 2-D grid, optionally conditioned on observed points.
    DensityGrid(GridArgs),
    /// Time divergence evaluation per trace mode and set size.
    BenchTrace(BenchArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub kind: SimKind,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest or directory containing manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub trace: Option<TraceMode>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed RK4 steps per block for the training loss.
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long)]
    pub max_seconds: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "nll")]
    pub metrics: Vec<Metric>,
    /// Radius for Ripley's K.
    #[arg(long, default_value_t = 0.1)]
    pub r: f64,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trace mode for the likelihood; defaults to the model's exact mode.
    #[arg(long)]
    pub trace: Option<TraceMode>,
    /// Fixed RK4 steps instead of the adaptive solver.
    #[arg(long)]
    pub rk4_steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Metric {
    Nll,
    Wasserstein,
    Ripley,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Points per set.
    #[arg(long, conflicts_with = "poisson", required_unless_present = "poisson")]
    pub n: Option<usize>,
    /// Draw each cardinality from the fitted Poisson rate.
    #[arg(long)]
    pub poisson: bool,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL file whose first set is conditioned on, or `none`.
    #[arg(long, default_value = "none")]
    pub condition: String,
    #[arg(long, default_value_t = 50)]
    pub resolution: usize,
    /// Grid extent for unbounded models.
    #[arg(long, default_value_t = 4.0)]
    pub extent: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "50,200,1000")]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, value_delimiter = ',', default_value = "closed-form,hutchinson,block,exact-dense")]
    pub modes: Vec<TraceMode>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Largest `n * d` for which exact-dense is attempted.
    #[arg(long, default_value_t = 1000)]
    pub dense_ceiling: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Two or more checkpoints whose solver effort is compared on `--data`.
    #[arg(long, value_delimiter = ',')]
    pub compare: Vec<PathBuf>,
    #[arg(long, requires = "compare")]
    pub data: Option<PathBuf>,
    /// Output for the comparison; defaults to `nfe.csv` beside `--out`.
    #[arg(long)]
    pub nfe_out: Option<PathBuf>,
}

/// Contents of the `--config` file of `train`. Field names mirror the
/// library configuration types; missing fields keep the model defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelKind>,
    pub trace_mode: Option<TraceMode>,
    /// Replaces the CNF dynamics of the chosen model.
    pub dynamics: Option<DynamicsConfig>,
    pub coupling: Option<CouplingConfig>,
    pub blocks: Option<usize>,
    pub train_solver: Option<SolverConfig>,
    pub eval_solver: Option<SolverConfig>,
    /// Seed for parameter initialization.
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Flow configuration for points of dimension `d`.
    pub fn flow_config(&self, kind: ModelKind, d: usize) -> Result<FlowConfig> {
        let mut cfg = kind.flow_config(d, self.trace_mode)?;
        if let Some(dc) = &self.dynamics {
            if !kind.is_cnf() {
                return Err(Error::Config(format!("model {kind} has no CNF dynamics to configure")));
            }
            let mut dc = dc.clone();
            if let Some(mode) = self.trace_mode {
                dc.trace_mode = mode;
            }
            dc.validate()?;
            cfg.dynamics = Some(dc);
        }
        if let Some(c) = self.coupling.clone() {
            cfg.coupling = Some(c);
        }
        if let Some(b) = self.blocks {
            if !kind.is_cnf() {
                return Err(Error::Config(format!("model {kind} has no CNF blocks")));
            }
            cfg.blocks = b;
        }
        if let Some(s) = self.train_solver {
            cfg.train_solver = s;
        }
        if let Some(s) = self.eval_solver {
            cfg.eval_solver = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; messages go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::DensityGrid(a) => density_grid_cmd(a),
        Command::BenchTrace(a) => bench(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let ds = make_dataset(a.kind, a.count, a.seed)?;
    let manifest = ds.write(&a.out)?;
    log::info!(
        "wrote {}/{}/{} realizations, manifest {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        manifest.display()
    );
    Ok(())
}

/// Summary written beside the checkpoint after training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: ModelKind,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    pub rejected_steps: usize,
    pub rate: f64,
    pub train_config: TrainConfig,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.model.is_some() {
        rc.model = a.model;
    }
    if a.trace.is_some() {
        rc.trace_mode = a.trace;
    }
    let tc = &mut rc.train;
    if let Some(v) = a.epochs {
        tc.max_epochs = v;
    }
    if let Some(v) = a.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if a.train_steps.is_some() {
        tc.train_steps = a.train_steps;
    }
    if a.max_seconds.is_some() {
        tc.max_seconds = a.max_seconds;
    }
    tc.validate()?;
    let kind = rc
        .model
        .ok_or_else(|| Error::Config("a model is required (--model or the config file)".into()))?;
    let flow_cfg = rc.flow_config(kind, 2)?;
    let data = Dataset::load(&a.data)?;
    let model = PointProcessModel::new(FlowModel::new(flow_cfg, rc.init_seed)?, 0.0)?;
    let out = train(model, &data.train, &data.val, &rc.train)?;
    checkpoint::save(&a.out, &out.model, Some(kind))?;
    write_history(&a.out.join("history.csv"), &out.history)?;
    let summary = TrainSummary {
        model: kind,
        best_epoch: out.best_epoch,
        best_val_loss: out.best_val_loss,
        stop: out.stop,
        rejected_steps: out.rejected_steps,
        rate: out.model.rate(),
        train_config: rc.train.clone(),
    };
    write(&a.out.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    log::info!("best epoch {} val {:.5} ({:?})", out.best_epoch, out.best_val_loss, out.stop);
    Ok(())
}

fn eval_settings(model: &PointProcessModel, trace: Option<TraceMode>, rk4_steps: Option<usize>) -> Result<EvalSettings> {
    let mut s = model.default_settings();
    if let Some(mode) = trace {
        model.flow.check_trace_mode(mode)?;
        s.trace_mode = mode;
    }
    if let Some(steps) = rk4_steps {
        s.solver = SolverConfig::rk4(steps);
        s.solver.validate()?;
    }
    Ok(s)
}

/// One model sample per reference set, with matching cardinality.
pub fn matched_samples(
    model: &PointProcessModel,
    reference: &[PointSet],
    solver: &SolverConfig,
    seed: u64,
) -> Result<Vec<PointSet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    reference.iter().map(|s| model.flow.sample(s.len(), solver, &mut rng)).collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(a.r > 0.0) {
        return Err(Error::Config("--r must be positive".into()));
    }
    let (model, file) = checkpoint::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    if data.train.first().is_some_and(|s| s.dim() != model.flow.point_dim()) {
        return Err(Error::Config("data and checkpoint dimensions differ".into()));
    }
    let sets = match a.split {
        Split::Train => &data.train,
        Split::Val => &data.val,
        Split::Test => &data.test,
    };
    let settings = eval_settings(&model, a.trace, a.rk4_steps)?;
    let model_name = file.kind.map_or_else(|| "custom".to_string(), |k| k.to_string());
    let row = |metric: &str, value: f64, std: f64| MetricRow {
        dataset: data.kind.to_string(),
        model: model_name.clone(),
        metric: metric.into(),
        value,
        std,
        seed: a.seed,
    };
    let mut rows = Vec::new();
    let needs_samples = a.metrics.iter().any(|m| *m != Metric::Nll);
    let samples = if needs_samples {
        matched_samples(&model, sets, &model.flow.config().eval_solver, a.seed)?
    } else {
        Vec::new()
    };
    for m in &a.metrics {
        match m {
            Metric::Nll => {
                let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
                let s = nll_report(&model, sets, &settings, &mut rng)?;
                rows.push(row("nll", s.mean, s.std));
            }
            Metric::Wasserstein => {
                let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
                rng.set_stream(5);
                let w = wasserstein1(&pooled_distances(sets), &pooled_distances(&samples), &mut rng)?;
                rows.push(row("wasserstein", w, 0.0));
            }
            Metric::Ripley => {
                let area = model.flow.domain().area();
                if !area.is_finite() {
                    return Err(Error::Config("ripley's K needs a bounded domain".into()));
                }
                rows.push(row("ripley_k_data", ripley_k(sets, a.r, area)?, 0.0));
                rows.push(row("ripley_k", ripley_k(&samples, a.r, area)?, 0.0));
            }
        }
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_metrics_csv(&a.out, &rows)
}

fn sample(a: SampleArgs) -> Result<()> {
    if a.n == Some(0) {
        return Err(Error::Config("--n must be positive".into()));
    }
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let solver = model.flow.config().eval_solver;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let sets = (0..a.count)
        .map(|_| match a.n {
            Some(n) => model.flow.sample(n, &solver, &mut rng),
            None => model.sample_poisson(&solver, &mut rng),
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_jsonl(&a.out, &sets)
}

/// A `resolution × resolution` grid of cell centres with scores and a
/// column normalized so its trapezoid integral over the grid is one.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major over `(y, x)`.
    pub log_score: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Trapezoid weights for nodes `0..k` with spacing `h`.
fn trapezoid_weights(k: usize, h: f64) -> Vec<f64> {
    (0..k).map(|i| if i == 0 || i + 1 == k { 0.5 * h } else { h }).collect()
}

/// Trapezoid integral of row-major `values` over the grid.
pub fn grid_integral(xs: &[f64], ys: &[f64], values: &[f64]) -> f64 {
    let wx = trapezoid_weights(xs.len(), xs[1] - xs[0]);
    let wy = trapezoid_weights(ys.len(), ys[1] - ys[0]);
    let mut total = 0.0;
    for (iy, w) in wy.iter().enumerate() {
        for (ix, v) in wx.iter().enumerate() {
            total += w * v * values[iy * xs.len() + ix];
        }
    }
    total
}

pub fn density_grid(
    model: &PointProcessModel,
    condition: Option<&PointSet>,
    resolution: usize,
    extent: f64,
    eval: &EvalSettings,
    seed: u64,
) -> Result<Grid> {
    if resolution < 2 {
        return Err(Error::Config("resolution must be at least 2".into()));
    }
    if model.flow.point_dim() != 2 {
        return Err(Error::Config("density grids need two-dimensional points".into()));
    }
    let dom = model.flow.domain();
    let axis = |j: usize| -> Vec<f64> {
        let (lo, hi) = if dom.bounded { (dom.lower[j], dom.upper[j]) } else { (-extent, extent) };
        let h = (hi - lo) / resolution as f64;
        (0..resolution).map(|i| lo + (i as f64 + 0.5) * h).collect()
    };
    let (xs, ys) = (axis(0), axis(1));
    let queries: Vec<Vec<f64>> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| vec![x, y])).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_score = match condition {
        Some(c) => model.conditional_log_density(c, &queries, eval, &mut rng)?,
        None => queries
            .iter()
            .map(|g| model.log_location_density(&PointSet::new(2, g.clone())?, eval, &mut rng))
            .collect::<Result<Vec<_>>>()?,
    };
    let shift = log_score.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = log_score.iter().map(|s| (s - shift).exp()).collect();
    let z = grid_integral(&xs, &ys, &unnorm);
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::NonFinite { op: "density grid normalization".into() });
    }
    let normalized = unnorm.iter().map(|u| u / z).collect();
    Ok(Grid {
        xs,
        ys,
        log_score,
        normalized,
    })
}

pub fn grid_csv(g: &Grid) -> String {
    let mut out = String::from("x,y,log_score,normalized\n");
    for (iy, y) in g.ys.iter().enumerate() {
        for (ix, x) in g.xs.iter().enumerate() {
            let k = iy * g.xs.len() + ix;
            out.push_str(&format!("{x:?},{y:?},{:?},{:?}\n", g.log_score[k], g.normalized[k]));
        }
    }
    out
}

fn density_grid_cmd(a: GridArgs) -> Result<()> {
    if a.resolution < 2 {
        return Err(Error::Config("resolution must be at least 2".into()));
    }
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let condition = match a.condition.as_str() {
        "none" => None,
        path => {
            let text = read(Path::new(path))?;
            let line = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .ok_or_else(|| Error::Config(format!("{path}: no set to condition on")))?;
            Some(PointSet::from_json(line, model.flow.point_dim())?)
        }
    };
    let grid = density_grid(&model, condition.as_ref(), a.resolution, a.extent, &model.default_settings(), a.seed)?;
    write(&a.out, &grid_csv(&grid))
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        n_list: a.n_list,
        d: a.d,
        hidden: a.hidden,
        modes: a.modes,
        repeats: a.repeats,
        warmup: a.warmup,
        dense_ceiling: a.dense_ceiling,
        seed: a.seed,
    };
    if !a.compare.is_empty() && a.compare.len() < 2 {
        return Err(Error::Config("--compare needs at least two checkpoints".into()));
    }
    let report = bench_trace(&cfg)?;
    for msg in &report.skipped {
        eprintln!("{msg}");
    }
    write(&a.out, &bench_csv(&report.rows))?;
    if !a.compare.is_empty() {
        let data_path = a
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("--compare needs --data".into()))?;
        let data = Dataset::load(data_path)?;
        let models = a
            .compare
            .iter()
            .map(|p| Ok((p.display().to_string(), checkpoint::load(p)?.0)))
            .collect::<Result<Vec<_>>>()?;
        let rows = nfe_comparison(&models, &data.val, None, a.seed)?;
        let path = a.nfe_out.unwrap_or_else(|| a.out.with_file_name("nfe.csv"));
        write(&path, &nfe_csv(&rows))?;
    }
    Ok(())
}
