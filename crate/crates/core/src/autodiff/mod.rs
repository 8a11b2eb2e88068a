//! Differentiation engine for the small networks used by the flows.
//!
//! The [`Tape`] records matrix operations. A reverse pass gives gradients
//! and vector-Jacobian products; [`Tape::jvp`] records forward-mode tangents
//! as further tape nodes so they can be differentiated again. [`Dual`]
//! numbers cover exact scalar partials outside a tape.

mod backward;
mod dual;
mod jvp;
pub(crate) mod linalg;
mod params;
pub(crate) mod tape;
mod tensor;

pub use backward::Gradients;
pub use dual::Dual;
pub use linalg::canonical_sum;
pub use params::ParameterSet;
pub use tape::{sigmoid, softplus, tanh, ParamVars, Tape, Var, GATHER_NONE};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use tape::Op;

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::SubCol(..) => "sub_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::OneMinusSquare(..) => "one_minus_square",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::SumCanonical(..) => "sum_canonical",
            Op::SumRows(..) => "sum_rows",
            Op::RowSums(..) => "row_sums",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::Reshape(..) => "reshape",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::PermuteRows(..) => "permute_rows",
            Op::MaskRows(..) => "mask_rows",
            Op::Gather(..) => "gather",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::Dot(..) => "dot",
        }
    }
}

impl Tape {
    /// Index and operation name of the first node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Errors if `v` is non-finite, naming the operation that first went bad.
    pub fn check_finite(&self, v: Var) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            return Ok(());
        }
        let op = self
            .first_non_finite()
            .map(|(i, name)| format!("{name} (node {i})"))
            .unwrap_or_else(|| "unknown".into());
        Err(Error::NonFinite { op })
    }
}

/// Value and gradient of a scalar loss with respect to every parameter.
pub fn gradient<F>(params: &ParameterSet, loss: F) -> Result<(f64, ParameterSet)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Var,
{
    let mut tape = Tape::new();
    let vars = tape.bind(params);
    let out = loss(&mut tape, &vars);
    if tape.dims(out) != (1, 1) {
        return Err(Error::Contract("loss must be a scalar".into()));
    }
    tape.check_finite(out)?;
    let grads = tape.backward(out);
    Ok((tape.scalar(out), grads.params(&tape, &vars, params)))
}

/// `cotangentᵀ · J_func(input)`, shaped like `input`.
pub fn vjp<F>(func: F, input: &Tensor, cotangent: &Tensor) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.tensor_input(input);
    let y = func(&mut tape, x);
    if tape.value(y).len() != cotangent.len() {
        return Err(Error::Contract(format!(
            "cotangent has {} entries, function output has {}",
            cotangent.len(),
            tape.value(y).len()
        )));
    }
    tape.check_finite(y)?;
    let grads = tape.backward_with(y, cotangent.values(), &[]);
    Ok(grads.tensor(&tape, x, input.shape()))
}

/// Dense Jacobian over the flattened input and output; row `k` is the
/// vector-Jacobian product with the `k`-th basis cotangent.
pub fn full_jacobian<F>(func: F, input: &Tensor) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.tensor_input(input);
    let y = func(&mut tape, x);
    tape.check_finite(y)?;
    Ok(jacobian_on_tape(&tape, x, y, &[]))
}

/// Jacobian of recorded node `y` with respect to recorded node `x`, one
/// reverse pass per output entry.
pub fn jacobian_on_tape(tape: &Tape, x: Var, y: Var, stops: &[Var]) -> Tensor {
    let m = tape.value(y).len();
    let n = tape.value(x).len();
    let mut out = Vec::with_capacity(m * n);
    let mut seed = vec![0.0; m];
    for k in 0..m {
        seed[k] = 1.0;
        let g = tape.backward_with(y, &seed, stops);
        out.extend(g.get_or_zeros(tape, x));
        seed[k] = 0.0;
    }
    Tensor::matrix(m, n, out).expect("jacobian shape")
}

/// Exact `∂func/∂x` at `x`, with `side` held constant.
pub fn scalar_partial<F>(func: F, x: f64, side: &[Tensor]) -> f64
where
    F: Fn(Dual, &[Tensor]) -> Dual,
{
    func(Dual::var(x), side).eps
}

/// [`scalar_partial`] over many slots, each with its own side inputs.
pub fn scalar_partials<F>(func: F, xs: &[f64], sides: &[Vec<Tensor>]) -> Vec<f64>
where
    F: Fn(Dual, &[Tensor]) -> Dual,
{
    xs.iter()
        .zip(sides)
        .map(|(x, side)| func(Dual::var(*x), side).eps)
        .collect()
}

#[cfg(test)]
mod tests;
