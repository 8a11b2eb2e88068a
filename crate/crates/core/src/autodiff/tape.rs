//! Matrix-valued reverse-mode tape.
//!
//! Every node holds a row-major matrix. Operations append nodes; `backward`
//! walks them in reverse and `jvp` walks them forward, appending tangent
//! nodes so that forward-mode derivatives stay differentiable by a later
//! reverse pass.

use super::linalg::{canonical_sum, gemm, Layout};
use super::params::ParameterSet;
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marks an unused gather slot; the output entry is zero.
pub const GATHER_NONE: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    SubCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    OneMinusSquare(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    SumCanonical(Var),
    SumRows(Var, usize),
    RowSums(Var),
    BroadcastRows(Var),
    RepeatRows(Var, usize),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    PermuteRows(Var, Vec<usize>),
    MaskRows(Var, usize),
    Gather(Var, Vec<u32>),
    MaskedSoftmax(Var),
    Dot(Var, Var),
}

pub(crate) struct Node {
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Parameter handles bound onto a tape, aligned with a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Drops every node recorded after the first `len`; handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Number of stored scalars across all nodes.
    pub fn stored_values(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "input shape mismatch");
        self.push(rows, cols, value, Op::Leaf, true)
    }

    /// Constant that never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "constant shape mismatch");
        self.push(rows, cols, value, Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(rows, cols, vec![0.0; rows * cols])
    }

    pub fn tensor_input(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.as_matrix_dims();
        self.input(r, c, t.values().to_vec())
    }

    /// Binds every tensor of `params` as a differentiable leaf.
    pub fn bind(&mut self, params: &ParameterSet) -> ParamVars {
        let vars = params.iter().map(|(_, t)| self.tensor_input(t)).collect();
        ParamVars { vars }
    }

    /// Binds `params` as constants (no gradient flows into them).
    pub fn bind_frozen(&mut self, params: &ParameterSet) -> ParamVars {
        let vars = params
            .iter()
            .map(|(_, t)| {
                let (r, c) = t.as_matrix_dims();
                self.constant(r, c, t.values().to_vec())
            })
            .collect();
        ParamVars { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            Layout::row_major(k),
            &self.nodes[b.0].value,
            Layout::row_major(n),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        self.push(m, n, out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            Layout::row_major(k),
            &self.nodes[b.0].value,
            Layout::transposed(k),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        self.push(m, n, out, Op::MatMulNT(a, b), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!((r, c), self.dims(b), "elementwise shape mismatch");
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(r, c, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(b), (1, c), "row operand must be 1 x cols");
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(r * c);
        for row in self.nodes[a.0].value.chunks_exact(c.max(1)) {
            out.extend(row.iter().zip(bv).map(|(x, y)| f(*x, *y)));
        }
        if c == 0 {
            out.clear();
        }
        let rg = self.rg(&[a, b]);
        self.push(r, c, out, op, rg)
    }

    /// Adds the `1 x cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        self.row_broadcast(a, b, |x, y| x + y, Op::AddRow(a, b))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        self.row_broadcast(a, b, |x, y| x * y, Op::MulRow(a, b))
    }

    fn col_broadcast(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(b), (r, 1), "column operand must be rows x 1");
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(r * c);
        for (i, row) in self.nodes[a.0].value.chunks_exact(c.max(1)).enumerate() {
            out.extend(row.iter().map(|x| f(*x, bv[i])));
        }
        if c == 0 {
            out.clear();
        }
        let rg = self.rg(&[a, b]);
        self.push(r, c, out, op, rg)
    }

    /// Scales row `i` of `a` by `b[i]`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        self.col_broadcast(a, b, |x, y| x * y, Op::MulCol(a, b))
    }

    /// Subtracts `b[i]` from every entry of row `i`.
    pub fn sub_col(&mut self, a: Var, b: Var) -> Var {
        self.col_broadcast(a, b, |x, y| x - y, Op::SubCol(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, tanh, Op::Tanh(a))
    }

    /// `1 - a²`, the derivative of tanh expressed through its output.
    pub fn one_minus_square(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 - x * x, Op::OneMinusSquare(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// Sum of all entries in storage order, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    /// Sum of all entries in ascending value order; invariant to how the
    /// entries are arranged.
    pub fn sum_canonical(&mut self, a: Var) -> Var {
        let s = canonical_sum(&self.nodes[a.0].value);
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::SumCanonical(a), rg)
    }

    /// Column sums over the first `len` rows, as a `1 x cols` node.
    pub fn sum_rows(&mut self, a: Var, len: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(len <= r);
        let mut out = vec![0.0; c];
        for row in self.nodes[a.0].value.chunks_exact(c.max(1)).take(len) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        self.push(1, c, out, Op::SumRows(a, len), rg)
    }

    /// Per-row sums, as a `rows x 1` node.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = if c == 0 {
            vec![0.0; r]
        } else {
            self.nodes[a.0]
                .value
                .chunks_exact(c)
                .map(|row| row.iter().sum())
                .collect()
        };
        let rg = self.rg(&[a]);
        self.push(r, 1, out, Op::RowSums(a), rg)
    }

    /// Stacks the `1 x cols` node `a` into `rows` identical rows.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(r, 1, "broadcast_rows expects a single row");
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(v);
        }
        let rg = self.rg(&[a]);
        self.push(rows, c, out, Op::BroadcastRows(a), rg)
    }

    /// Repeats each row `k` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let (r, c) = self.dims(a);
        let mut out = Vec::with_capacity(r * k * c);
        if c > 0 {
            for row in self.nodes[a.0].value.chunks_exact(c) {
                for _ in 0..k {
                    out.extend_from_slice(row);
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(r * k, c, out, Op::RepeatRows(a, k), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(r * c, rows * cols, "reshape size mismatch");
        let out = self.nodes[a.0].value.clone();
        let rg = self.rg(&[a]);
        self.push(rows, cols, out, Op::Reshape(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = self.dims(*p);
                assert_eq!(r, rows, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(rows, total, out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.nodes[a.0].value[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(r, len, out, Op::SliceCols(a, start), rg)
    }

    /// Output row `r` is input row `perm[r]`.
    pub fn permute_rows(&mut self, a: Var, perm: &[usize]) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(perm.len(), r);
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(r * c);
        for &p in perm {
            out.extend_from_slice(&v[p * c..(p + 1) * c]);
        }
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::PermuteRows(a, perm.to_vec()), rg)
    }

    /// Zeroes every row at index `len` or beyond.
    pub fn mask_rows(&mut self, a: Var, len: usize) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.nodes[a.0].value.clone();
        for v in out.iter_mut().skip(len.min(r) * c) {
            *v = 0.0;
        }
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::MaskRows(a, len), rg)
    }

    /// `out[i, c] = a[sel[i * cols + c], c]`, zero where `sel` is
    /// [`GATHER_NONE`].
    pub fn gather_rows_per_col(&mut self, a: Var, sel: Vec<u32>) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(sel.len(), r * c);
        let v = &self.nodes[a.0].value;
        let out = sel
            .iter()
            .enumerate()
            .map(|(idx, &s)| {
                if s == GATHER_NONE {
                    0.0
                } else {
                    v[s as usize * c + idx % c]
                }
            })
            .collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Gather(a, sel), rg)
    }

    /// Row-wise softmax of a square score matrix over the first `len`
    /// columns, excluding the diagonal. Rows at or beyond `len`, and rows
    /// with no admissible column, are all zeros.
    pub fn masked_softmax(&mut self, a: Var, len: usize) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(r, c, "masked_softmax expects a square matrix");
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..len.min(r) {
            let row = &v[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate().take(len) {
                if j != i && x > max {
                    max = x;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for j in 0..len {
                if j != i {
                    o[j] = (row[j] - max).exp();
                    total += o[j];
                }
            }
            for x in o.iter_mut().take(len) {
                *x /= total;
            }
        }
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::MaskedSoftmax(a), rg)
    }

    /// Frobenius inner product as a `1 x 1` node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "dot shape mismatch");
        let s = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.rg(&[a, b]);
        self.push(1, 1, vec![s], Op::Dot(a, b), rg)
    }
}

/// Hyperbolic tangent with absolute error below 3e-16: a short odd series
/// near zero and `exp` elsewhere, which is markedly cheaper than libm.
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 0.05 {
        let x2 = x * x;
        return x * (1.0 + x2 * (-1.0 / 3.0 + x2 * (2.0 / 15.0 + x2 * (-17.0 / 315.0 + x2 * (62.0 / 2835.0)))));
    }
    let e = (-2.0 * a).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
