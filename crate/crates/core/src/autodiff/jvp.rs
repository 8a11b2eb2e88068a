//! Forward-mode tangents recorded as ordinary tape nodes.
//!
//! `Tape::jvp` replays the recorded graph between the seeds and the output,
//! appending nodes that compute the directional derivative. Because the
//! tangent is itself part of the tape, a later `backward` differentiates it
//! with respect to parameters, which is what training through a stochastic
//! or block trace estimate needs.

use std::collections::HashSet;

use super::tape::{Op, Tape, Var};

impl Tape {
    /// Tangent of `output` given tangents for the `seeds` nodes. Nodes in
    /// `stops` are held constant. Returns `None` when `output` does not
    /// depend on any seed.
    pub fn jvp(&mut self, output: Var, seeds: &[(Var, Var)], stops: &[Var]) -> Option<Var> {
        for (node, tangent) in seeds {
            assert_eq!(self.dims(*node), self.dims(*tangent), "tangent shape mismatch");
        }
        let start = seeds.iter().map(|(n, _)| n.0).min()?;
        if start > output.0 {
            return None;
        }
        let stops: HashSet<usize> = stops.iter().map(|v| v.0).collect();
        let mut tan: Vec<Option<Var>> = vec![None; output.0 + 1 - start];
        for (node, tangent) in seeds {
            tan[node.0 - start] = Some(*tangent);
        }
        let get = |tan: &Vec<Option<Var>>, v: Var| -> Option<Var> {
            if v.0 < start {
                None
            } else {
                tan[v.0 - start]
            }
        };
        for i in start..=output.0 {
            if tan[i - start].is_some() || stops.contains(&i) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let me = Var(i);
            let t = match op {
                Op::Leaf => None,
                Op::MatMul(a, b) => {
                    let ta = get(&tan, a).map(|ta| self.matmul(ta, b));
                    let tb = get(&tan, b).map(|tb| self.matmul(a, tb));
                    self.add_opt(ta, tb)
                }
                Op::MatMulNT(a, b) => {
                    let ta = get(&tan, a).map(|ta| self.matmul_nt(ta, b));
                    let tb = get(&tan, b).map(|tb| self.matmul_nt(a, tb));
                    self.add_opt(ta, tb)
                }
                Op::Add(a, b) => {
                    let (ta, tb) = (get(&tan, a), get(&tan, b));
                    self.add_opt(ta, tb)
                }
                Op::Sub(a, b) => match (get(&tan, a), get(&tan, b)) {
                    (Some(x), Some(y)) => Some(self.sub(x, y)),
                    (Some(x), None) => Some(x),
                    (None, Some(y)) => Some(self.scale(y, -1.0)),
                    (None, None) => None,
                },
                Op::Mul(a, b) => {
                    let ta = get(&tan, a).map(|ta| self.mul(ta, b));
                    let tb = get(&tan, b).map(|tb| self.mul(a, tb));
                    self.add_opt(ta, tb)
                }
                Op::AddRow(a, b) => match (get(&tan, a), get(&tan, b)) {
                    (Some(x), Some(y)) => Some(self.add_row(x, y)),
                    (Some(x), None) => Some(x),
                    (None, Some(y)) => {
                        let rows = self.dims(a).0;
                        Some(self.broadcast_rows(y, rows))
                    }
                    (None, None) => None,
                },
                Op::MulRow(a, b) => {
                    let ta = get(&tan, a).map(|ta| self.mul_row(ta, b));
                    let tb = get(&tan, b).map(|tb| self.mul_row(a, tb));
                    self.add_opt(ta, tb)
                }
                Op::MulCol(a, b) => {
                    let ta = get(&tan, a).map(|ta| self.mul_col(ta, b));
                    let tb = get(&tan, b).map(|tb| self.mul_col(a, tb));
                    self.add_opt(ta, tb)
                }
                Op::SubCol(a, b) => match (get(&tan, a), get(&tan, b)) {
                    (Some(x), Some(y)) => Some(self.sub_col(x, y)),
                    (Some(x), None) => Some(x),
                    (None, Some(y)) => {
                        let (r, c) = self.dims(a);
                        let z = self.zeros(r, c);
                        Some(self.sub_col(z, y))
                    }
                    (None, None) => None,
                },
                Op::Scale(a, s) => get(&tan, a).map(|ta| self.scale(ta, s)),
                Op::AddScalar(a) => get(&tan, a),
                Op::Tanh(a) => get(&tan, a).map(|ta| {
                    let d = self.one_minus_square(me);
                    self.mul(ta, d)
                }),
                Op::OneMinusSquare(a) => get(&tan, a).map(|ta| {
                    let p = self.mul(a, ta);
                    self.scale(p, -2.0)
                }),
                Op::Exp(a) => get(&tan, a).map(|ta| self.mul(ta, me)),
                Op::Log(a) => get(&tan, a).map(|ta| {
                    let r = self.recip(a);
                    self.mul(ta, r)
                }),
                Op::Recip(a) => get(&tan, a).map(|ta| {
                    let sq = self.square(me);
                    let p = self.mul(ta, sq);
                    self.scale(p, -1.0)
                }),
                Op::Sigmoid(a) => get(&tan, a).map(|ta| {
                    let one_minus = self.scale(me, -1.0);
                    let one_minus = self.add_scalar(one_minus, 1.0);
                    let d = self.mul(me, one_minus);
                    self.mul(ta, d)
                }),
                Op::Softplus(a) => get(&tan, a).map(|ta| {
                    let s = self.sigmoid(a);
                    self.mul(ta, s)
                }),
                Op::Square(a) => get(&tan, a).map(|ta| {
                    let p = self.mul(a, ta);
                    self.scale(p, 2.0)
                }),
                Op::Sum(a) | Op::SumCanonical(a) => get(&tan, a).map(|ta| self.sum_canonical(ta)),
                Op::SumRows(a, len) => get(&tan, a).map(|ta| self.sum_rows(ta, len)),
                Op::RowSums(a) => get(&tan, a).map(|ta| self.row_sums(ta)),
                Op::BroadcastRows(a) => {
                    let rows = self.dims(me).0;
                    get(&tan, a).map(|ta| self.broadcast_rows(ta, rows))
                }
                Op::RepeatRows(a, k) => get(&tan, a).map(|ta| self.repeat_rows(ta, k)),
                Op::Reshape(a) => {
                    let (r, c) = self.dims(me);
                    get(&tan, a).map(|ta| self.reshape(ta, r, c))
                }
                Op::ConcatCols(parts) => {
                    let tparts: Vec<Option<Var>> = parts.iter().map(|p| get(&tan, *p)).collect();
                    if tparts.iter().all(Option::is_none) {
                        None
                    } else {
                        let filled: Vec<Var> = parts
                            .iter()
                            .zip(tparts)
                            .map(|(p, t)| {
                                t.unwrap_or_else(|| {
                                    let (r, c) = self.dims(*p);
                                    self.zeros(r, c)
                                })
                            })
                            .collect();
                        Some(self.concat_cols(&filled))
                    }
                }
                Op::SliceCols(a, start_col) => {
                    let len = self.dims(me).1;
                    get(&tan, a).map(|ta| self.slice_cols(ta, start_col, len))
                }
                Op::PermuteRows(a, perm) => get(&tan, a).map(|ta| self.permute_rows(ta, &perm)),
                Op::MaskRows(a, len) => get(&tan, a).map(|ta| self.mask_rows(ta, len)),
                Op::Gather(a, sel) => get(&tan, a).map(|ta| self.gather_rows_per_col(ta, sel)),
                Op::MaskedSoftmax(a) => get(&tan, a).map(|ta| {
                    let weighted = self.mul(me, ta);
                    let s = self.row_sums(weighted);
                    let centered = self.sub_col(ta, s);
                    self.mul(me, centered)
                }),
                Op::Dot(a, b) => {
                    let ta = get(&tan, a).map(|ta| self.dot(ta, b));
                    let tb = get(&tan, b).map(|tb| self.dot(a, tb));
                    self.add_opt(ta, tb)
                }
            };
            tan[i - start] = t;
        }
        tan[output.0 - start]
    }

    fn add_opt(&mut self, a: Option<Var>, b: Option<Var>) -> Option<Var> {
        match (a, b) {
            (Some(x), Some(y)) => Some(self.add(x, y)),
            (x, None) => x,
            (None, y) => y,
        }
    }
}
