use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn gradient_of_square() {
    let mut p = ParameterSet::new();
    p.insert("theta", Tensor::scalar(3.0)).unwrap();
    let (v, g) = gradient(&p, |t, vars| t.square(vars.get(0))).unwrap();
    assert_eq!(v, 9.0);
    assert_eq!(g.get("theta").unwrap().values(), &[6.0]);
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut p = ParameterSet::new();
    p.insert("theta", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
    let (v, g) = gradient(&p, |t, vars| t.sum(vars.get(0))).unwrap();
    assert_eq!(v, 6.0);
    assert_eq!(g.get("theta").unwrap().values(), &[1.0, 1.0, 1.0]);
}

#[test]
fn non_finite_loss_names_the_operation() {
    let mut p = ParameterSet::new();
    p.insert("theta", Tensor::scalar(-1.0)).unwrap();
    let err = gradient(&p, |t, vars| {
        let l = t.log(vars.get(0));
        t.sum(l)
    })
    .unwrap_err();
    assert!(err.to_string().contains("log"), "{err}");
}

fn two_layer_params(rng: &mut ChaCha8Rng) -> ParameterSet {
    let mut p = ParameterSet::new();
    let mut rand_t = |r: usize, c: usize| {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    p.insert("w1", rand_t(3, 5)).unwrap();
    p.insert("b1", rand_t(1, 5)).unwrap();
    p.insert("w2", rand_t(5, 2)).unwrap();
    p.insert("b2", rand_t(1, 2)).unwrap();
    p
}

fn two_layer_loss(t: &mut Tape, v: &ParamVars, x: Var) -> Var {
    let h = t.matmul(x, v.get(0));
    let h = t.add_row(h, v.get(1));
    let h = t.tanh(h);
    let o = t.matmul(h, v.get(2));
    let o = t.add_row(o, v.get(3));
    let o = t.tanh(o);
    let s = t.square(o);
    t.sum(s)
}

#[test]
fn two_layer_tanh_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = two_layer_params(&mut rng);
    let xval: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, g) = gradient(&p, |t, v| {
        let x = t.constant(4, 3, xval.clone());
        two_layer_loss(t, v, x)
    })
    .unwrap();
    let f = |flat: &[f64]| {
        let mut q = p.clone();
        q.assign_flat(flat).unwrap();
        let mut t = Tape::new();
        let v = t.bind(&q);
        let x = t.constant(4, 3, xval.clone());
        let l = two_layer_loss(&mut t, &v, x);
        t.scalar(l)
    };
    let fd = central_diff(&f, &p.flatten(), 1e-4);
    for (a, b) in g.flatten().iter().zip(&fd) {
        assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
    }
}

#[test]
fn vjp_examples() {
    let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let x = Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap();
    // y = x Aᵀ so that J = A.
    let lin = |t: &mut Tape, x: Var| {
        let at = t.constant(2, 2, vec![1.0, 3.0, 2.0, 4.0]);
        t.matmul(x, at)
    };
    let r = vjp(lin, &x, &Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
    assert_eq!(r.values(), &[1.0, 2.0]);
    let j = full_jacobian(lin, &x).unwrap();
    assert_eq!(j.values(), a.values());

    let c = Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
    let xi = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
    let r = vjp(|_, x| x, &xi, &c).unwrap();
    assert_eq!(r.values(), c.values());

    let xt = Tensor::matrix(1, 3, vec![-0.7, 0.1, 1.3]).unwrap();
    let r = vjp(|t, x| t.tanh(x), &xt, &c).unwrap();
    for i in 0..3 {
        let th = xt.values()[i].tanh();
        assert!((r.values()[i] - c.values()[i] * (1.0 - th * th)).abs() < 1e-15);
    }

    let err = vjp(|t, x| t.tanh(x), &xt, &Tensor::vector(vec![1.0])).unwrap_err();
    assert!(matches!(err, crate::Error::Contract(_)));
}

#[test]
fn identity_jacobian() {
    let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
    let j = full_jacobian(|_, x| x, &x).unwrap();
    let mut eye = [0.0; 9];
    for i in 0..3 {
        eye[i * 4] = 1.0;
    }
    assert_eq!(j.values(), &eye[..]);
}

#[test]
fn scalar_partial_examples() {
    let w = Tensor::scalar(2.0);
    let d = scalar_partial(|x, side| x * side[0].item(), 5.0, &[w]);
    assert_eq!(d, 2.0);
    assert_eq!(scalar_partial(|x, _| x.tanh(), 0.0, &[]), 1.0);
    let ds = scalar_partials(
        |x, side| (x * side[0].item()).exp(),
        &[0.0, 1.0],
        &[vec![Tensor::scalar(1.0)], vec![Tensor::scalar(2.0)]],
    );
    assert_eq!(ds[0], 1.0);
    assert!((ds[1] - 2.0 * 2f64.exp()).abs() < 1e-12);
}

/// Exercises every tape operation in one differentiable function of a
/// `4 x 3` input.
fn op_zoo(t: &mut Tape, x: Var) -> Var {
    let w = t.constant(3, 3, vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6, 0.7, 0.2, -0.1]);
    let b = t.constant(1, 3, vec![0.1, -0.3, 0.2]);
    let h = t.matmul(x, w);
    let h = t.add_row(h, b);
    let h = t.tanh(h);
    let hnt = t.matmul_nt(h, x); // 4 x 4
    let sm = t.masked_softmax(hnt, 3); // last row padded
    let att = t.matmul(sm, x); // 4 x 3
    let s = t.sigmoid(att);
    let sp = t.softplus(x);
    let m = t.mul(s, sp);
    let ms = t.scale(m, 0.3);
    let e = t.exp(ms);
    let sq = t.add_scalar(e, 1.5);
    let lg = t.log(sq);
    let rc = t.recip(sq);
    let a1 = t.add(lg, rc);
    let a2 = t.sub(a1, h);
    let omq = t.one_minus_square(h);
    let a3 = t.mul_row(a2, b);
    let colsum = t.sum_rows(a3, 3);
    let bc = t.broadcast_rows(colsum, 4);
    let rs = t.row_sums(omq);
    let mc = t.mul_col(bc, rs);
    let sc = t.sub_col(mc, rs);
    let perm = t.permute_rows(sc, &[2, 0, 3, 1]);
    let masked = t.mask_rows(perm, 3);
    let rep = t.repeat_rows(masked, 2); // 8 x 3
    let rsh = t.reshape(rep, 4, 6);
    let left = t.slice_cols(rsh, 1, 3);
    let cat = t.concat_cols(&[left, x]); // 4 x 6
    let sel: Vec<u32> = (0..24)
        .map(|i| if i % 5 == 0 { GATHER_NONE } else { ((i * 7) % 4) as u32 })
        .collect();
    let g = t.gather_rows_per_col(cat, sel);
    let sq2 = t.square(g);
    let dd = t.dot(sq2, cat);
    let s1 = t.sum(g);
    let s2 = t.sum_canonical(sq2);
    let tot = t.add(dd, s1);
    t.add(tot, s2)
}

fn zoo_input() -> Tensor {
    let v: Vec<f64> = (0..12).map(|i| ((i as f64) * 1.3).sin() * 0.8).collect();
    Tensor::matrix(4, 3, v).unwrap()
}

#[test]
fn every_op_backward_matches_finite_differences() {
    let x = zoo_input();
    let j = full_jacobian(op_zoo, &x).unwrap();
    let f = |v: &[f64]| {
        let mut t = Tape::new();
        let xv = t.input(4, 3, v.to_vec());
        let y = op_zoo(&mut t, xv);
        t.scalar(y)
    };
    let fd = central_diff(&f, x.values(), 1e-6);
    for (a, b) in j.values().iter().zip(&fd) {
        assert!((a - b).abs() < 1e-7 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn jvp_matches_jacobian_vector_product_and_is_differentiable() {
    let x = zoo_input();
    let dir: Vec<f64> = (0..12).map(|i| ((i as f64) * 0.7).cos()).collect();
    let j = full_jacobian(op_zoo, &x).unwrap();
    let jv: f64 = j.values().iter().zip(&dir).map(|(a, b)| a * b).sum();

    let jvp_value = |v: &[f64]| {
        let mut t = Tape::new();
        let xv = t.input(4, 3, v.to_vec());
        let y = op_zoo(&mut t, xv);
        let d = t.constant(4, 3, dir.clone());
        let ty = t.jvp(y, &[(xv, d)], &[]).unwrap();
        (t, xv, ty)
    };
    let (t, xv, ty) = jvp_value(x.values());
    assert!((t.scalar(ty) - jv).abs() < 1e-12 * (1.0 + jv.abs()));

    // Reverse pass through the recorded tangent gives the directional
    // second derivative; compare against differences of the tangent.
    let g = t.backward(ty);
    let hess_dir = g.get_or_zeros(&t, xv);
    let f = |v: &[f64]| {
        let (t, _, ty) = jvp_value(v);
        t.scalar(ty)
    };
    let fd = central_diff(&f, x.values(), 1e-5);
    for (a, b) in hess_dir.iter().zip(&fd) {
        assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn full_jacobian_rows_equal_basis_vjps_exactly() {
    let x = zoo_input();
    let vec_fn = |t: &mut Tape, x: Var| {
        let w = t.constant(3, 2, vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]);
        let h = t.matmul(x, w);
        t.tanh(h)
    };
    let j = full_jacobian(vec_fn, &x).unwrap();
    for k in 0..8 {
        let mut c = vec![0.0; 8];
        c[k] = 1.0;
        let r = vjp(vec_fn, &x, &Tensor::matrix(4, 2, c).unwrap()).unwrap();
        assert_eq!(&j.values()[k * 12..(k + 1) * 12], r.values());
    }
}

#[test]
fn stops_block_gradient_flow() {
    let mut t = Tape::new();
    let x = t.input(1, 1, vec![2.0]);
    let y = t.square(x);
    let z = t.mul(y, x);
    let g = t.backward_with(z, &[1.0], &[y]);
    // d(y·x)/dx with y frozen = y = 4.
    assert_eq!(g.get(x).unwrap(), &[4.0]);
    let tangent = t.constant(1, 1, vec![1.0]);
    let tz = t.jvp(z, &[(x, tangent)], &[y]).unwrap();
    assert_eq!(t.scalar(tz), 4.0);
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let x = zoo_input();
    let a = full_jacobian(op_zoo, &x).unwrap();
    let b = full_jacobian(op_zoo, &x).unwrap();
    assert!(a.values().iter().zip(b.values()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn tanh_matches_libm() {
    let mut worst: f64 = 0.0;
    for i in -200_000..=200_000 {
        let x = i as f64 * 5e-5;
        worst = worst.max((super::tanh(x) - x.tanh()).abs());
    }
    for x in [1e-300, -1e-12, 0.049_999, 0.05, 20.0, -40.0, 800.0] {
        worst = worst.max((super::tanh(x) - x.tanh()).abs());
    }
    assert!(worst < 3e-16, "{worst:e}");
    assert_eq!(super::tanh(0.0), 0.0);
    assert_eq!(super::tanh(-0.3), -super::tanh(0.3));
}
