use std::collections::HashSet;

use super::linalg::{gemm, Layout};
use super::params::ParameterSet;
use super::tape::{sigmoid, Op, ParamVars, Tape, Var, GATHER_NONE};
use super::tensor::Tensor;

/// Gradients of one reverse pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(v).len()],
        }
    }

    /// Collects parameter gradients into a set shaped like `like`.
    pub fn params(&self, tape: &Tape, vars: &ParamVars, like: &ParameterSet) -> ParameterSet {
        let mut out = like.zeros_like();
        for (i, v) in vars.vars().iter().enumerate() {
            let g = self.get_or_zeros(tape, *v);
            out.by_index_mut(i).values_mut().copy_from_slice(&g);
        }
        out
    }

    pub fn tensor(&self, tape: &Tape, v: Var, shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), self.get_or_zeros(tape, v)).expect("gradient shape")
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], tape: &Tape, v: Var) -> &'a mut [f64] {
    let len = tape.nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    /// Reverse pass from `output`, seeded with `seed` (same shape as the
    /// output). Gradients do not propagate past nodes listed in `stops`.
    pub fn backward_with(&self, output: Var, seed: &[f64], stops: &[Var]) -> Gradients {
        assert_eq!(seed.len(), self.nodes[output.0].value.len(), "seed shape mismatch");
        let stops: HashSet<usize> = stops.iter().map(|v| v.0).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.to_vec());
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad || stops.contains(&i) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            // Only leaves are read back; intermediate buffers are released.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    /// Reverse pass from a `1 x 1` output with unit seed.
    pub fn backward(&self, output: Var) -> Gradients {
        self.backward_with(output, &[1.0], &[])
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let y = &node.value;
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if rg(a) {
                    let bv = &self.nodes[b.0].value;
                    let da = acc(grads, self, *a);
                    gemm(m, n, k, g, Layout::row_major(n), bv, Layout::transposed(n), da, 1.0);
                }
                if rg(b) {
                    let av = &self.nodes[a.0].value;
                    let db = acc(grads, self, *b);
                    gemm(k, m, n, av, Layout::transposed(k), g, Layout::row_major(n), db, 1.0);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if rg(a) {
                    let bv = &self.nodes[b.0].value;
                    let da = acc(grads, self, *a);
                    gemm(m, n, k, g, Layout::row_major(n), bv, Layout::row_major(k), da, 1.0);
                }
                if rg(b) {
                    let av = &self.nodes[a.0].value;
                    let db = acc(grads, self, *b);
                    gemm(n, m, k, g, Layout::transposed(n), av, Layout::row_major(k), db, 1.0);
                }
            }
            Op::Add(a, b) => {
                if rg(a) {
                    add_into(acc(grads, self, *a), g, 1.0);
                }
                if rg(b) {
                    add_into(acc(grads, self, *b), g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if rg(a) {
                    add_into(acc(grads, self, *a), g, 1.0);
                }
                if rg(b) {
                    add_into(acc(grads, self, *b), g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    let bv = &self.nodes[b.0].value;
                    for ((d, gi), bi) in acc(grads, self, *a).iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if rg(b) {
                    let av = &self.nodes[a.0].value;
                    for ((d, gi), ai) in acc(grads, self, *b).iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if rg(a) {
                    add_into(acc(grads, self, *a), g, 1.0);
                }
                if rg(b) {
                    let db = acc(grads, self, *b);
                    for row in g.chunks_exact(cols.max(1)) {
                        add_into(db, row, 1.0);
                    }
                }
            }
            Op::MulRow(a, b) => {
                let bv = &self.nodes[b.0].value;
                if rg(a) {
                    let da = acc(grads, self, *a);
                    for (drow, grow) in da.chunks_exact_mut(cols.max(1)).zip(g.chunks_exact(cols.max(1))) {
                        for ((d, gi), bi) in drow.iter_mut().zip(grow).zip(bv) {
                            *d += gi * bi;
                        }
                    }
                }
                if rg(b) {
                    let av = &self.nodes[a.0].value;
                    let db = acc(grads, self, *b);
                    for (arow, grow) in av.chunks_exact(cols.max(1)).zip(g.chunks_exact(cols.max(1))) {
                        for ((d, gi), ai) in db.iter_mut().zip(grow).zip(arow) {
                            *d += gi * ai;
                        }
                    }
                }
            }
            Op::MulCol(a, b) => {
                let bv = &self.nodes[b.0].value;
                if rg(a) {
                    let da = acc(grads, self, *a);
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] += g[r * cols + c] * bv[r];
                        }
                    }
                }
                if rg(b) {
                    let av = &self.nodes[a.0].value;
                    let db = acc(grads, self, *b);
                    for r in 0..rows {
                        let mut s = 0.0;
                        for c in 0..cols {
                            s += g[r * cols + c] * av[r * cols + c];
                        }
                        db[r] += s;
                    }
                }
            }
            Op::SubCol(a, b) => {
                if rg(a) {
                    add_into(acc(grads, self, *a), g, 1.0);
                }
                if rg(b) {
                    let db = acc(grads, self, *b);
                    for r in 0..rows {
                        db[r] -= g[r * cols..(r + 1) * cols].iter().sum::<f64>();
                    }
                }
            }
            Op::Scale(a, s) => {
                if rg(a) {
                    add_into(acc(grads, self, *a), g, *s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if rg(a) {
                    add_into(acc(grads, self, *a), g, 1.0);
                }
            }
            Op::Tanh(a) => unary(grads, self, *a, g, y, |_, yi| 1.0 - yi * yi),
            Op::OneMinusSquare(a) => {
                let av = &self.nodes[a.0].value;
                if rg(a) {
                    for ((d, gi), ai) in acc(grads, self, *a).iter_mut().zip(g).zip(av) {
                        *d -= 2.0 * ai * gi;
                    }
                }
            }
            Op::Exp(a) => unary(grads, self, *a, g, y, |_, yi| yi),
            Op::Log(a) => unary(grads, self, *a, g, y, |ai, _| 1.0 / ai),
            Op::Recip(a) => unary(grads, self, *a, g, y, |_, yi| -yi * yi),
            Op::Sigmoid(a) => unary(grads, self, *a, g, y, |_, yi| yi * (1.0 - yi)),
            Op::Softplus(a) => unary(grads, self, *a, g, y, |ai, _| sigmoid(ai)),
            Op::Square(a) => unary(grads, self, *a, g, y, |ai, _| 2.0 * ai),
            Op::Sum(a) | Op::SumCanonical(a) => {
                if rg(a) {
                    let s = g[0];
                    acc(grads, self, *a).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumRows(a, len) => {
                if rg(a) {
                    let da = acc(grads, self, *a);
                    for drow in da.chunks_exact_mut(cols.max(1)).take(*len) {
                        add_into(drow, g, 1.0);
                    }
                }
            }
            Op::RowSums(a) => {
                if rg(a) {
                    let (_, c) = self.dims(*a);
                    let da = acc(grads, self, *a);
                    for r in 0..rows {
                        for x in &mut da[r * c..(r + 1) * c] {
                            *x += g[r];
                        }
                    }
                }
            }
            Op::BroadcastRows(a) => {
                if rg(a) {
                    let da = acc(grads, self, *a);
                    for row in g.chunks_exact(cols.max(1)) {
                        add_into(da, row, 1.0);
                    }
                }
            }
            Op::RepeatRows(a, k) => {
                if rg(a) {
                    let da = acc(grads, self, *a);
                    for (r, drow) in da.chunks_exact_mut(cols.max(1)).enumerate() {
                        for q in 0..*k {
                            let src = (r * k + q) * cols;
                            add_into(drow, &g[src..src + cols], 1.0);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (_, w) = self.dims(*p);
                    if rg(p) {
                        let dp = acc(grads, self, *p);
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * cols + offset..r * cols + offset + w],
                                1.0,
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                if rg(a) {
                    let (_, c) = self.dims(*a);
                    let da = acc(grads, self, *a);
                    for r in 0..rows {
                        add_into(
                            &mut da[r * c + start..r * c + start + cols],
                            &g[r * cols..(r + 1) * cols],
                            1.0,
                        );
                    }
                }
            }
            Op::PermuteRows(a, perm) => {
                if rg(a) {
                    let da = acc(grads, self, *a);
                    for (r, &p) in perm.iter().enumerate() {
                        add_into(&mut da[p * cols..(p + 1) * cols], &g[r * cols..(r + 1) * cols], 1.0);
                    }
                }
            }
            Op::MaskRows(a, len) => {
                if rg(a) {
                    let keep = (*len).min(rows) * cols;
                    add_into(&mut acc(grads, self, *a)[..keep], &g[..keep], 1.0);
                }
            }
            Op::Gather(a, sel) => {
                if rg(a) {
                    let da = acc(grads, self, *a);
                    for (idx, &s) in sel.iter().enumerate() {
                        if s != GATHER_NONE {
                            da[s as usize * cols + idx % cols] += g[idx];
                        }
                    }
                }
            }
            Op::MaskedSoftmax(a) => {
                if rg(a) {
                    let da = acc(grads, self, *a);
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            da[r * cols + c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::Dot(a, b) => {
                let s = g[0];
                if rg(a) {
                    let bv = &self.nodes[b.0].value;
                    add_into(acc(grads, self, *a), bv, s);
                }
                if rg(b) {
                    let av = &self.nodes[a.0].value;
                    add_into(acc(grads, self, *b), av, s);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    if scale == 1.0 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    } else {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += scale * s;
        }
    }
}

fn unary(
    grads: &mut [Option<Vec<f64>>],
    tape: &Tape,
    a: Var,
    g: &[f64],
    y: &[f64],
    deriv: impl Fn(f64, f64) -> f64,
) {
    if !tape.requires_grad(a) {
        return;
    }
    let av = &tape.nodes[a.0].value;
    let da = acc(grads, tape, a);
    for i in 0..da.len() {
        da[i] += g[i] * deriv(av[i], y[i]);
    }
}
