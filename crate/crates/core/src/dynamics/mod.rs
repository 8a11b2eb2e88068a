//! Permutation-equivariant velocity fields over point sets.
//!
//! Coordinate `j` of point `i` moves with velocity
//! `tau(x_ij, g_ij, h_i, t)`, where `g_ij` comes from a masked network over
//! the other coordinates of the same point and `h_i` aggregates the other
//! points. Only the first argument of `tau` touches the Jacobian diagonal,
//! which makes the trace available exactly from one forward-mode pass.
//!
//! Rows are processed in lexicographic order of their coordinates and the
//! result is mapped back, so every reduction sees the same operand order
//! for any storage order of the input. That makes the field bitwise
//! equivariant and the divergence bitwise invariant.

mod aggregate;
mod config;

pub use aggregate::{aggregate_others, attend_others};
pub use config::{Aggregation, DynamicsConfig, DynamicsKind, TraceMode};

use rand::Rng;

use crate::autodiff::{canonical_sum, Dual, ParamVars, ParameterSet, Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::{Init, Linear, MaskedMlp, Mlp};
use crate::pointset::{Batch, PointSet};

#[derive(Clone, Debug)]
enum Within {
    Masked(MaskedMlp),
    Plain(Mlp),
}

#[derive(Clone, Debug)]
enum Between {
    None,
    DeepSet(Mlp),
    Attention {
        embed: Linear,
        key: Linear,
        value: Linear,
        query: Linear,
    },
}

/// Per-dimension output network. The first layer is split by input group so
/// the between-points term is computed once per point rather than once per
/// coordinate.
#[derive(Clone, Debug)]
struct Tau {
    w_self: Option<usize>,
    w_within: Option<usize>,
    w_between: Option<usize>,
    w_time: usize,
    bias: usize,
    width: usize,
    hidden: Vec<Linear>,
    out: Option<Linear>,
}

/// Velocity and divergence recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Field {
    /// `n x d`, rows in the caller's order.
    pub velocity: Var,
    /// `1 x 1`.
    pub divergence: Var,
}

/// How to evaluate the divergence inside [`Dynamics::field`].
#[derive(Clone, Copy, Debug)]
pub struct TraceRequest<'a> {
    pub mode: TraceMode,
    /// Rademacher probe, `n * d` entries in the caller's row order;
    /// required for [`TraceMode::Hutchinson`].
    pub probe: Option<&'a [f64]>,
    /// Keep the divergence differentiable with respect to parameters. When
    /// false, per-pass tangents are discarded as soon as they are read.
    pub differentiable: bool,
}

impl<'a> TraceRequest<'a> {
    pub fn value(mode: TraceMode, probe: Option<&'a [f64]>) -> Self {
        Self {
            mode,
            probe,
            differentiable: false,
        }
    }

    pub fn training(mode: TraceMode, probe: Option<&'a [f64]>) -> Self {
        Self {
            mode,
            probe,
            differentiable: true,
        }
    }
}

struct Recorded {
    velocity: Var,
    between: Option<Var>,
    self_col: Option<Var>,
    tau_out: Var,
}

/// Rademacher probe of length `len`.
pub fn rademacher(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Row order sorting points lexicographically by coordinates.
pub fn canonical_order(coords: &[f64], dim: usize) -> Vec<usize> {
    let n = coords.len() / dim;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by(|&a, &b| {
        let (pa, pb) = (&coords[a * dim..(a + 1) * dim], &coords[b * dim..(b + 1) * dim]);
        pa.iter()
            .zip(pb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    perm
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (r, &p) in perm.iter().enumerate() {
        inv[p] = r;
    }
    inv
}

/// Parameterized velocity field with a declared trace mode.
#[derive(Clone, Debug)]
pub struct Dynamics {
    cfg: DynamicsConfig,
    within: Option<Within>,
    between: Between,
    tau: Tau,
}

impl Dynamics {
    /// Registers all weights under `prefix` in `params`.
    pub fn new(
        cfg: DynamicsConfig,
        params: &mut ParameterSet,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.point_dim;
        let hid = cfg.hidden_dim;
        let within = if cfg.latent_dim == 0 {
            None
        } else if cfg.within_masked {
            Some(Within::Masked(MaskedMlp::new(
                params,
                &format!("{prefix}.within"),
                d,
                &[hid],
                cfg.latent_dim,
                rng,
            )?))
        } else {
            Some(Within::Plain(Mlp::new(
                params,
                &format!("{prefix}.within"),
                &[d, hid, d * cfg.latent_dim],
                Init::Uniform,
                rng,
            )?))
        };
        let between = match (cfg.kind, cfg.between_dim) {
            (DynamicsKind::DeepSet, 0) => Between::None,
            (DynamicsKind::DeepSet, dh) => Between::DeepSet(Mlp::new(
                params,
                &format!("{prefix}.between"),
                &[d + 1, hid, dh],
                Init::Uniform,
                rng,
            )?),
            (DynamicsKind::Attention, dh) => {
                let qk = cfg.num_heads * cfg.key_dim;
                let p = format!("{prefix}.attention");
                Between::Attention {
                    embed: Linear::new(params, &format!("{p}.embed"), d + 1, hid, Init::Uniform, rng)?,
                    key: Linear::new(params, &format!("{p}.key"), hid, qk, Init::Uniform, rng)?,
                    value: Linear::new(params, &format!("{p}.value"), hid, dh, Init::Uniform, rng)?,
                    query: Linear::new(params, &format!("{p}.query"), hid + 1, qk, Init::Uniform, rng)?,
                }
            }
        };
        let tau = Tau::new(&cfg, params, &format!("{prefix}.tau"), rng)?;
        Ok(Self {
            cfg,
            within,
            between,
            tau,
        })
    }

    pub fn config(&self) -> &DynamicsConfig {
        &self.cfg
    }

    pub fn trace_mode(&self) -> TraceMode {
        self.cfg.trace_mode
    }

    fn time_column(tape: &mut Tape, rows: usize, t: f64) -> Var {
        tape.constant(rows, 1, vec![t; rows])
    }

    /// `n x (d * d_g)` within-point features of the rows of `xs`.
    fn within_features(&self, tape: &mut Tape, vars: &ParamVars, xs: Var) -> Option<Var> {
        match self.within.as_ref()? {
            Within::Masked(net) => Some(net.forward(tape, vars, xs)),
            Within::Plain(net) => Some(net.forward(tape, vars, xs)),
        }
    }

    /// `n x d_h` between-points features of the rows of `xs`.
    fn between_features(&self, tape: &mut Tape, vars: &ParamVars, xs: Var, t: f64) -> Option<Var> {
        let n = tape.dims(xs).0;
        match &self.between {
            Between::None => None,
            Between::DeepSet(net) => {
                let tc = Self::time_column(tape, n, t);
                let inp = tape.concat_cols(&[xs, tc]);
                let h = net.forward(tape, vars, inp);
                Some(aggregate_others(tape, h, self.cfg.aggregation))
            }
            Between::Attention {
                embed,
                key,
                value,
                query,
            } => {
                let tc = Self::time_column(tape, n, t);
                let inp = tape.concat_cols(&[xs, tc]);
                let e = embed.forward(tape, vars, inp);
                let e = tape.tanh(e);
                let k = key.forward(tape, vars, e);
                let v = value.forward(tape, vars, e);
                // Queries read the mean embedding of the other points, so no
                // output row depends on its own point.
                let ctx = aggregate_others(tape, e, Aggregation::Mean);
                let qin = tape.concat_cols(&[ctx, tc]);
                let q = query.forward(tape, vars, qin);
                Some(attend_others(tape, q, k, v, self.cfg.num_heads))
            }
        }
    }

    /// Records the field on canonically ordered rows of `x` (`n x d`).
    fn record(&self, tape: &mut Tape, vars: &ParamVars, x: Var, t: f64) -> Recorded {
        let (n, d) = tape.dims(x);
        let perm = canonical_order(tape.value(x), d);
        let xs = tape.permute_rows(x, &perm);
        let g = self.within_features(tape, vars, xs);
        let h = self.between_features(tape, vars, xs, t);
        let self_col = self.tau.w_self.map(|_| tape.reshape(xs, n * d, 1));
        let tau_out = self.tau.forward(tape, vars, n, d, self_col, g, h, t);
        let v = tape.reshape(tau_out, n, d);
        let velocity = tape.permute_rows(v, &inverse(&perm));
        Recorded {
            velocity,
            between: h,
            self_col,
            tau_out,
        }
    }

    /// Velocity and divergence of the `n x d` node `x` at time `t`.
    pub fn field(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        t: f64,
        req: TraceRequest<'_>,
    ) -> Result<Field> {
        let (n, d) = tape.dims(x);
        if n == 0 {
            let velocity = tape.zeros(0, d);
            let divergence = tape.zeros(1, 1);
            return Ok(Field {
                velocity,
                divergence,
            });
        }
        let rec = self.record(tape, vars, x, t);
        let divergence = match req.mode {
            TraceMode::Zero => tape.zeros(1, 1),
            TraceMode::ClosedForm => match rec.self_col {
                None => tape.zeros(1, 1),
                Some(col) => {
                    let ones = tape.constant(n * d, 1, vec![1.0; n * d]);
                    let tangent = tape
                        .jvp(rec.tau_out, &[(col, ones)], &[])
                        .expect("output depends on the self slot");
                    tape.sum(tangent)
                }
            },
            TraceMode::Hutchinson => {
                let probe = req.probe.ok_or_else(|| {
                    crate::Error::Contract("hutchinson trace needs a probe".into())
                })?;
                assert_eq!(probe.len(), n * d, "probe length");
                let eps = tape.constant(n, d, probe.to_vec());
                let mark = tape.len();
                let div = match tape.jvp(rec.velocity, &[(x, eps)], &[]) {
                    Some(jv) => {
                        let prod = tape.mul(eps, jv);
                        tape.sum_canonical(prod)
                    }
                    None => tape.zeros(1, 1),
                };
                self.finish_value(tape, div, mark, req.differentiable)
            }
            TraceMode::BlockExact => {
                let stops: Vec<Var> = rec.between.into_iter().collect();
                let seeds: Vec<Vec<f64>> = (0..d)
                    .map(|k| (0..n * d).map(|s| if s % d == k { 1.0 } else { 0.0 }).collect())
                    .collect();
                self.sum_of_passes(tape, x, rec.velocity, &stops, seeds, req.differentiable)
            }
            TraceMode::ExactDense => {
                let seeds: Vec<Vec<f64>> = (0..n * d)
                    .map(|s| {
                        let mut e = vec![0.0; n * d];
                        e[s] = 1.0;
                        e
                    })
                    .collect();
                self.sum_of_passes(tape, x, rec.velocity, &[], seeds, req.differentiable)
            }
        };
        Ok(Field {
            velocity: rec.velocity,
            divergence,
        })
    }

    fn finish_value(&self, tape: &mut Tape, div: Var, mark: usize, differentiable: bool) -> Var {
        if differentiable {
            div
        } else {
            let v = tape.scalar(div);
            tape.truncate(mark);
            tape.constant(1, 1, vec![v])
        }
    }

    /// `sum_k <e_k, J e_k>` over the given seed directions, with `stops`
    /// held constant.
    fn sum_of_passes(
        &self,
        tape: &mut Tape,
        x: Var,
        out: Var,
        stops: &[Var],
        seeds: Vec<Vec<f64>>,
        differentiable: bool,
    ) -> Var {
        let (n, d) = tape.dims(x);
        if differentiable {
            let mut terms = Vec::with_capacity(seeds.len());
            for e in seeds {
                let e = tape.constant(n, d, e);
                if let Some(jv) = tape.jvp(out, &[(x, e)], stops) {
                    let prod = tape.mul(e, jv);
                    terms.push(tape.sum_canonical(prod));
                }
            }
            if terms.is_empty() {
                return tape.zeros(1, 1);
            }
            let row = tape.concat_cols(&terms);
            tape.sum_canonical(row)
        } else {
            let mark = tape.len();
            let mut terms = Vec::with_capacity(seeds.len());
            for e in seeds {
                let ev = tape.constant(n, d, e.clone());
                if let Some(jv) = tape.jvp(out, &[(x, ev)], stops) {
                    let prod: Vec<f64> = tape.value(jv).iter().zip(&e).map(|(a, b)| a * b).collect();
                    terms.push(canonical_sum(&prod));
                }
                tape.truncate(mark);
            }
            let v = canonical_sum(&terms);
            tape.constant(1, 1, vec![v])
        }
    }

    /// Binds `params` as constants and evaluates one set.
    fn eval_set(
        &self,
        params: &ParameterSet,
        set: &PointSet,
        t: f64,
        mode: TraceMode,
        probe: Option<&[f64]>,
    ) -> Result<(Vec<f64>, f64)> {
        let mut tape = Tape::new();
        let vars = tape.bind_frozen(params);
        let x = tape.constant(set.len(), set.dim(), set.coords().to_vec());
        let f = self.field(&mut tape, &vars, x, t, TraceRequest::value(mode, probe))?;
        tape.check_finite(f.velocity)?;
        tape.check_finite(f.divergence)?;
        Ok((tape.value(f.velocity).to_vec(), tape.scalar(f.divergence)))
    }

    /// Velocity and divergence of a single set; a Hutchinson probe is drawn
    /// from `rng` when needed.
    pub fn eval_point_set(
        &self,
        params: &ParameterSet,
        set: &PointSet,
        t: f64,
        mode: TraceMode,
        rng: &mut impl Rng,
    ) -> Result<(Vec<f64>, f64)> {
        let probe = mode
            .is_stochastic()
            .then(|| rademacher(set.len() * set.dim(), rng));
        self.eval_set(params, set, t, mode, probe.as_deref())
    }

    fn per_set_rows<F>(&self, batch: &Batch, width: usize, mut f: F) -> Result<Tensor>
    where
        F: FnMut(&PointSet) -> Result<Vec<f64>>,
    {
        let (b, n_max) = (batch.size(), batch.n_max());
        let mut out = vec![0.0; b * n_max * width];
        for k in 0..b {
            let set = batch.set(k);
            let rows = f(&set)?;
            out[k * n_max * width..k * n_max * width + rows.len()].copy_from_slice(&rows);
        }
        Tensor::new(vec![b, n_max, width], out)
    }

    /// `[B, n_max, d]`; padded slots are zero.
    pub fn velocity(&self, params: &ParameterSet, batch: &Batch, t: f64) -> Result<Tensor> {
        self.per_set_rows(batch, batch.dim(), |set| {
            Ok(self.eval_set(params, set, t, TraceMode::Zero, None)?.0)
        })
    }

    /// Per-set divergence, `[B]`.
    pub fn divergence(
        &self,
        params: &ParameterSet,
        batch: &Batch,
        t: f64,
        mode: TraceMode,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let mut out = Vec::with_capacity(batch.size());
        for k in 0..batch.size() {
            out.push(self.eval_point_set(params, &batch.set(k), t, mode, rng)?.1);
        }
        Ok(Tensor::vector(out))
    }

    fn features<F>(&self, params: &ParameterSet, set: &PointSet, width: usize, f: F) -> Vec<f64>
    where
        F: FnOnce(&Self, &mut Tape, &ParamVars, Var) -> Option<Var>,
    {
        let (n, d) = (set.len(), set.dim());
        if n == 0 {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let vars = tape.bind_frozen(params);
        let x = tape.constant(n, d, set.coords().to_vec());
        let perm = canonical_order(set.coords(), d);
        let xs = tape.permute_rows(x, &perm);
        match f(self, &mut tape, &vars, xs) {
            None => vec![0.0; n * width],
            Some(h) => {
                let back = tape.permute_rows(h, &inverse(&perm));
                tape.value(back).to_vec()
            }
        }
    }

    /// `[B, n_max, d_h]` aggregate of the other points (deep-set or
    /// attention conditioner).
    pub fn between_points(&self, params: &ParameterSet, batch: &Batch, t: f64) -> Result<Tensor> {
        let width = self.cfg.between_dim;
        self.per_set_rows(batch, width, |set| {
            Ok(self.features(params, set, width, |s, tape, vars, xs| {
                s.between_features(tape, vars, xs, t)
            }))
        })
    }

    /// Alias of [`Dynamics::between_points`] for attention dynamics.
    pub fn attention_conditioner(
        &self,
        params: &ParameterSet,
        batch: &Batch,
        t: f64,
    ) -> Result<Tensor> {
        self.between_points(params, batch, t)
    }

    /// `[B, n_max, d, d_g]` within-point features.
    pub fn within_point(&self, params: &ParameterSet, batch: &Batch) -> Result<Tensor> {
        let (d, dg) = (self.cfg.point_dim, self.cfg.latent_dim);
        let flat = self.per_set_rows(batch, d * dg, |set| {
            Ok(self.features(params, set, d * dg, |s, tape, vars, xs| {
                s.within_features(tape, vars, xs)
            }))
        })?;
        flat.reshape(vec![batch.size(), batch.n_max(), d, dg])
    }

    /// `∂tau/∂x_ij` for every slot of `set` with all conditioners frozen,
    /// computed slot by slot with dual numbers. Row order follows `set`.
    pub fn slot_partials(&self, params: &ParameterSet, set: &PointSet, t: f64) -> Vec<f64> {
        let (n, d) = (set.len(), set.dim());
        let Some(w_self) = self.tau.w_self else {
            return vec![0.0; n * d];
        };
        let mut tape = Tape::new();
        let vars = tape.bind_frozen(params);
        let x = tape.constant(n, d, set.coords().to_vec());
        let perm = canonical_order(set.coords(), d);
        let xs = tape.permute_rows(x, &perm);
        let g = self.within_features(&mut tape, &vars, xs);
        let h = self.between_features(&mut tape, &vars, xs, t);
        // First-layer pre-activation without the self term, per slot.
        let rest = self.tau.first_layer(&mut tape, &vars, n, d, None, g, h, t);
        let rest = tape.value(rest).to_vec();
        let width = self.tau.width;
        let ws = params.by_index(w_self).values().to_vec();
        let layers: Vec<(Vec<f64>, Vec<f64>, usize)> = self
            .tau
            .hidden
            .iter()
            .chain(self.tau.out.iter())
            .map(|l| {
                (
                    params.by_index(l.weight_index()).values().to_vec(),
                    params.by_index(l.bias_index()).values().to_vec(),
                    l.fan_out(),
                )
            })
            .collect();
        let tau = |xv: Dual, side: &[Tensor]| -> Dual {
            let c = side[0].values();
            let mut a: Vec<Dual> = (0..width).map(|u| xv * ws[u] + c[u]).collect();
            for (w, b, out) in &layers {
                a.iter_mut().for_each(|z| *z = z.tanh());
                let fan_in = a.len();
                a = (0..*out)
                    .map(|o| {
                        let mut s = Dual::constant(b[o]);
                        for i in 0..fan_in {
                            s = s + a[i] * w[i * out + o];
                        }
                        s
                    })
                    .collect();
            }
            a[0]
        };
        let inv = inverse(&perm);
        let mut xs_vals = Vec::with_capacity(n * d);
        let mut sides = Vec::with_capacity(n * d);
        for i in 0..n {
            let r = inv[i];
            for j in 0..d {
                xs_vals.push(set.coords()[i * d + j]);
                let slot = r * d + j;
                sides.push(vec![Tensor::vector(rest[slot * width..(slot + 1) * width].to_vec())]);
            }
        }
        crate::autodiff::scalar_partials(tau, &xs_vals, &sides)
    }
}

impl Tau {
    fn new(
        cfg: &DynamicsConfig,
        params: &mut ParameterSet,
        name: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let width = if cfg.tau_layers == 0 { 1 } else { cfg.hidden_dim };
        let first_init = if cfg.tau_layers == 0 {
            Init::Zero
        } else {
            Init::Uniform
        };
        let in_fan = usize::from(cfg.self_slot) + cfg.latent_dim + cfg.between_dim + 1;
        let bound = 1.0 / (in_fan as f64).sqrt();
        let mut block = |params: &mut ParameterSet, suffix: &str, rows: usize| -> Result<usize> {
            let vals = match first_init {
                Init::Zero => vec![0.0; rows * width],
                Init::Uniform => (0..rows * width).map(|_| rng.gen_range(-bound..bound)).collect(),
            };
            params.insert(format!("{name}.in.{suffix}"), Tensor::matrix(rows, width, vals)?)
        };
        let w_self = if cfg.self_slot {
            Some(block(params, "self", 1)?)
        } else {
            None
        };
        let w_within = if cfg.latent_dim > 0 {
            Some(block(params, "within", cfg.latent_dim)?)
        } else {
            None
        };
        let w_between = if cfg.between_dim > 0 {
            Some(block(params, "between", cfg.between_dim)?)
        } else {
            None
        };
        let w_time = block(params, "time", 1)?;
        let bias = block(params, "b", 1)?;
        let mut hidden = Vec::new();
        for l in 1..cfg.tau_layers {
            hidden.push(Linear::new(
                params,
                &format!("{name}.l{l}"),
                width,
                width,
                Init::Uniform,
                rng,
            )?);
        }
        let out = if cfg.tau_layers > 0 {
            Some(Linear::new(params, &format!("{name}.out"), width, 1, Init::Zero, rng)?)
        } else {
            None
        };
        Ok(Self {
            w_self,
            w_within,
            w_between,
            w_time,
            bias,
            width,
            hidden,
            out,
        })
    }

    /// First-layer pre-activation, `n*d x width`; the self term is included
    /// only when `self_col` is given.
    #[allow(clippy::too_many_arguments)]
    fn first_layer(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        n: usize,
        d: usize,
        self_col: Option<Var>,
        g: Option<Var>,
        h: Option<Var>,
        t: f64,
    ) -> Var {
        let mut acc: Option<Var> = None;
        let mut add = |tape: &mut Tape, v: Var| {
            acc = Some(match acc {
                None => v,
                Some(a) => tape.add(a, v),
            });
        };
        if let (Some(h), Some(w)) = (h, self.w_between) {
            let hw = tape.matmul(h, vars.get(w));
            let hw = tape.repeat_rows(hw, d);
            add(tape, hw);
        }
        if let (Some(g), Some(w)) = (g, self.w_within) {
            let dg = tape.dims(g).1 / d;
            let g = tape.reshape(g, n * d, dg);
            let gw = tape.matmul(g, vars.get(w));
            add(tape, gw);
        }
        if let (Some(c), Some(w)) = (self_col, self.w_self) {
            let cw = tape.matmul(c, vars.get(w));
            add(tape, cw);
        }
        let tw = tape.scale(vars.get(self.w_time), t);
        let row = tape.add(tw, vars.get(self.bias));
        let base = match acc {
            Some(a) => a,
            None => tape.zeros(n * d, self.width),
        };
        tape.add_row(base, row)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        n: usize,
        d: usize,
        self_col: Option<Var>,
        g: Option<Var>,
        h: Option<Var>,
        t: f64,
    ) -> Var {
        let mut a = self.first_layer(tape, vars, n, d, self_col, g, h, t);
        for layer in self.hidden.iter().chain(self.out.iter()) {
            a = tape.tanh(a);
            a = layer.forward(tape, vars, a);
        }
        a
    }
}
