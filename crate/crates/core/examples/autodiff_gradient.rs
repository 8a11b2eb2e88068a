//! Reverse-mode gradient of a small loss, checked against central differences.

use setcnf::autodiff::{gradient, ParameterSet, Tensor};

fn main() -> setcnf::Result<()> {
    let mut params = ParameterSet::new();
    params.insert("w", Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6])?)?;
    params.insert("b", Tensor::new(vec![1, 3], vec![0.05, -0.1, 0.2])?)?;
    let x = vec![1.0, -0.5, 0.25, 2.0];

    // loss = sum(tanh(x·w + b)²)
    let loss = |p: &ParameterSet| {
        gradient(p, |tape, vars| {
            let xv = tape.constant(2, 2, x.clone());
            let h = tape.matmul(xv, vars.get(0));
            let h = tape.add_row(h, vars.get(1));
            let h = tape.tanh(h);
            let h = tape.square(h);
            tape.sum(h)
        })
    };
    let (value, grads) = loss(&params)?;
    println!("loss = {value:.6}");

    let eps = 1e-6;
    let flat = params.flatten();
    let analytic = grads.flatten();
    for (k, g) in analytic.iter().enumerate() {
        let mut p = params.clone();
        let mut f = flat.clone();
        f[k] += eps;
        p.assign_flat(&f)?;
        let up = loss(&p)?.0;
        f[k] -= 2.0 * eps;
        p.assign_flat(&f)?;
        let down = loss(&p)?.0;
        let fd = (up - down) / (2.0 * eps);
        println!("param {k}: reverse-mode {g:+.8}  finite-diff {fd:+.8}");
    }
    Ok(())
}
