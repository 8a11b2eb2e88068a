//! Affine coupling layers acting on each point independently.
//!
//! A layer copies one block of coordinates and moves the other:
//! `x_b = z_b * exp(s(z_a)) + t(z_a)`, with log-determinant `sum s(z_a)`.
//! Consecutive layers swap which block is copied.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVars, ParameterSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingConfig {
    pub layers: usize,
    pub hidden_dim: usize,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            hidden_dim: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CouplingLayer {
    dim: usize,
    /// Copied block is `[0, split)` when false, `[dim - split, dim)` when true.
    flip: bool,
    split: usize,
    net: Mlp,
}

impl CouplingLayer {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        dim: usize,
        flip: bool,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("coupling layers need at least two dimensions".into()));
        }
        let split = dim / 2;
        let moved = dim - split;
        let net = Mlp::new(params, name, &[split, hidden, 2 * moved], Init::Zero, rng)?;
        Ok(Self {
            dim,
            flip,
            split,
            net,
        })
    }

    fn blocks(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let moved = self.dim - self.split;
        if self.flip {
            (tape.slice_cols(x, moved, self.split), tape.slice_cols(x, 0, moved))
        } else {
            (tape.slice_cols(x, 0, self.split), tape.slice_cols(x, self.split, moved))
        }
    }

    fn join(&self, tape: &mut Tape, copied: Var, moved: Var) -> Var {
        if self.flip {
            tape.concat_cols(&[moved, copied])
        } else {
            tape.concat_cols(&[copied, moved])
        }
    }

    fn scale_shift(&self, tape: &mut Tape, vars: &ParamVars, copied: Var) -> (Var, Var) {
        let moved = self.dim - self.split;
        let st = self.net.forward(tape, vars, copied);
        (tape.slice_cols(st, 0, moved), tape.slice_cols(st, moved, moved))
    }

    /// Base side to data side. Returns the new rows and the per-row
    /// log-determinant (`n x 1`).
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, z: Var) -> (Var, Var) {
        let (a, b) = self.blocks(tape, z);
        let (s, t) = self.scale_shift(tape, vars, a);
        let es = tape.exp(s);
        let b = tape.mul(b, es);
        let b = tape.add(b, t);
        let logdet = tape.row_sums(s);
        (self.join(tape, a, b), logdet)
    }

    /// Data side to base side; the log-determinant is the negation of the
    /// forward one.
    pub fn inverse(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> (Var, Var) {
        let (a, b) = self.blocks(tape, x);
        let (s, t) = self.scale_shift(tape, vars, a);
        let b = tape.sub(b, t);
        let neg = tape.scale(s, -1.0);
        let ens = tape.exp(neg);
        let b = tape.mul(b, ens);
        let logdet = tape.row_sums(neg);
        (self.join(tape, a, b), logdet)
    }
}

/// Layers applied in order on the way to the data side.
#[derive(Clone, Debug)]
pub struct CouplingStack {
    layers: Vec<CouplingLayer>,
}

impl CouplingStack {
    pub fn new(
        cfg: &CouplingConfig,
        dim: usize,
        params: &mut ParameterSet,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden_dim == 0 {
            return Err(Error::Config("coupling stack needs layers and hidden units".into()));
        }
        let layers = (0..cfg.layers)
            .map(|l| CouplingLayer::new(params, &format!("{prefix}.{l}"), dim, l % 2 == 1, cfg.hidden_dim, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// Base side to data side; per-row log-determinant summed over layers.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, z: Var) -> (Var, Var) {
        let mut x = z;
        let mut total: Option<Var> = None;
        for layer in &self.layers {
            let (nx, ld) = layer.forward(tape, vars, x);
            x = nx;
            total = Some(match total {
                None => ld,
                Some(t) => tape.add(t, ld),
            });
        }
        (x, total.expect("non-empty stack"))
    }

    /// Data side to base side, layers in reverse order.
    pub fn inverse(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> (Var, Var) {
        let mut z = x;
        let mut total: Option<Var> = None;
        for layer in self.layers.iter().rev() {
            let (nz, ld) = layer.inverse(tape, vars, z);
            z = nz;
            total = Some(match total {
                None => ld,
                Some(t) => tape.add(t, ld),
            });
        }
        (z, total.expect("non-empty stack"))
    }
}

/// Applies a single layer to one point with frozen parameters.
pub fn coupling_forward(layer: &CouplingLayer, params: &ParameterSet, z: &[f64]) -> (Vec<f64>, f64) {
    let mut tape = Tape::new();
    let vars = tape.bind_frozen(params);
    let zv = tape.constant(1, z.len(), z.to_vec());
    let (x, ld) = layer.forward(&mut tape, &vars, zv);
    (tape.value(x).to_vec(), tape.scalar(ld))
}

pub fn coupling_inverse(layer: &CouplingLayer, params: &ParameterSet, x: &[f64]) -> (Vec<f64>, f64) {
    let mut tape = Tape::new();
    let vars = tape.bind_frozen(params);
    let xv = tape.constant(1, x.len(), x.to_vec());
    let (z, ld) = layer.inverse(&mut tape, &vars, xv);
    (tape.value(z).to_vec(), tape.scalar(ld))
}
