//! Reductions where row `i` of the result depends only on the other rows.

use super::config::Aggregation;
use crate::autodiff::{Tape, Var, GATHER_NONE};

/// Row `i` is the reduction of rows `j != i` of the `n x c` node `h`.
/// A single row reduces to zeros.
///
/// `Max` returns the largest value among the other rows, so a strict
/// maximum receives the runner-up and tied maxima receive the maximum.
/// Gradients flow to the lowest-index row attaining that value.
pub fn aggregate_others(tape: &mut Tape, h: Var, agg: Aggregation) -> Var {
    let (n, c) = tape.dims(h);
    if n <= 1 {
        return tape.zeros(n, c);
    }
    match agg {
        Aggregation::Sum | Aggregation::Mean => {
            let total = tape.sum_rows(h, n);
            let total = tape.broadcast_rows(total, n);
            let others = tape.sub(total, h);
            if agg == Aggregation::Mean {
                tape.scale(others, 1.0 / (n - 1) as f64)
            } else {
                others
            }
        }
        Aggregation::Max => {
            let sel = max_of_others(tape.value(h), n, c);
            tape.gather_rows_per_col(h, sel)
        }
    }
}

fn max_of_others(v: &[f64], n: usize, c: usize) -> Vec<u32> {
    let mut sel = vec![GATHER_NONE; n * c];
    for col in 0..c {
        // Best and runner-up by (value, then lowest index).
        let mut best = 0usize;
        let mut second: Option<usize> = None;
        for i in 1..n {
            let x = v[i * c + col];
            if x > v[best * c + col] {
                second = Some(best);
                best = i;
            } else if second.is_none_or(|s| x > v[s * c + col]) {
                second = Some(i);
            }
        }
        let second = second.expect("at least two rows");
        for i in 0..n {
            let pick = if i == best { second } else { best };
            sel[i * c + col] = pick as u32;
        }
    }
    sel
}

/// Multi-head attention with the diagonal masked out: row `i` of the
/// result mixes value rows `j != i` only. `q` and `k` are `n x heads*key_dim`,
/// `v` is `n x heads*value_dim`.
pub fn attend_others(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let (n, qk) = tape.dims(q);
    let (_, vw) = tape.dims(v);
    let dk = qk / heads;
    let dv = vw / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk);
        let kh = tape.slice_cols(k, h * dk, dk);
        let vh = tape.slice_cols(v, h * dv, dv);
        let s = tape.matmul_nt(qh, kh);
        let s = tape.scale(s, scale);
        let a = tape.masked_softmax(s, n);
        outs.push(tape.matmul(a, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: &[f64], agg: Aggregation) -> Vec<f64> {
        let mut t = Tape::new();
        let h = t.input(x.len(), 1, x.to_vec());
        let o = aggregate_others(&mut t, h, agg);
        t.value(o).to_vec()
    }

    #[test]
    fn identity_features_examples() {
        assert_eq!(run(&[1.0, 2.0, 3.0], Aggregation::Sum), [5.0, 4.0, 3.0]);
        assert_eq!(run(&[1.0, 2.0, 3.0], Aggregation::Mean), [2.5, 2.0, 1.5]);
        assert_eq!(run(&[1.0, 5.0, 3.0], Aggregation::Max), [5.0, 3.0, 5.0]);
        for agg in [Aggregation::Sum, Aggregation::Mean, Aggregation::Max] {
            assert_eq!(run(&[7.0], agg), [0.0]);
        }
    }

    #[test]
    fn max_with_ties_is_the_max_over_the_others() {
        assert_eq!(run(&[5.0, 1.0, 5.0], Aggregation::Max), [5.0, 5.0, 5.0]);
        assert_eq!(run(&[2.0, 2.0], Aggregation::Max), [2.0, 2.0]);
        assert_eq!(run(&[4.0, 4.0, 4.0], Aggregation::Max), [4.0, 4.0, 4.0]);
        // Permuting the input permutes the output.
        let x = [0.3, 0.9, -0.2, 0.9, 0.1];
        let y = run(&x, Aggregation::Max);
        let perm = [3, 0, 4, 1, 2];
        let xp: Vec<f64> = perm.iter().map(|&p| x[p]).collect();
        let yp = run(&xp, Aggregation::Max);
        for (r, &p) in perm.iter().enumerate() {
            assert_eq!(yp[r], y[p]);
        }
    }

    #[test]
    fn max_matches_brute_force_per_column() {
        let n = 6;
        let c = 3;
        let v: Vec<f64> = (0..n * c).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        let mut t = Tape::new();
        let h = t.input(n, c, v.clone());
        let o = aggregate_others(&mut t, h, Aggregation::Max);
        for i in 0..n {
            for col in 0..c {
                let want = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| v[j * c + col])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(t.value(o)[i * c + col], want);
            }
        }
    }

    #[test]
    fn two_point_attention_swaps_values() {
        let mut t = Tape::new();
        let eye = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let o = attend_others(&mut t, eye, eye, eye, 1);
        assert_eq!(t.value(o), &[0.0, 1.0, 1.0, 0.0]);

        let single = t.constant(1, 2, vec![0.4, -0.3]);
        let o = attend_others(&mut t, single, single, single, 2);
        assert_eq!(t.value(o), &[0.0, 0.0]);
    }
}
