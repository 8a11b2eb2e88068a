//! Fixed-step RK4 against adaptive Dormand–Prince on dy/dt = y.

use setcnf::ode::{solve, SolverConfig};

fn main() -> setcnf::Result<()> {
    let e = std::f64::consts::E;
    for cfg in [
        SolverConfig::rk4(10),
        SolverConfig::rk4(100),
        SolverConfig::dopri5(1e-5, 1e-5),
        SolverConfig::dopri5(1e-10, 1e-10),
    ] {
        let sol = solve(|_, y| Ok(y.to_vec()), &[1.0], 0.0, 1.0, &cfg)?;
        println!(
            "{:?} steps={} rtol={:e}: y(1) = {:.12}  error {:.3e}  nfe {}",
            cfg.scheme,
            cfg.steps,
            cfg.rtol,
            sol.y[0],
            (sol.y[0] - e).abs(),
            sol.nfe
        );
    }
    Ok(())
}
