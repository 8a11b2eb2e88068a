//! Divergence of one random set under every trace mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use setcnf::bench::{random_dynamics, random_points};
use setcnf::dynamics::TraceMode;

fn main() -> setcnf::Result<()> {
    let (dy, params) = random_dynamics(2, 32, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let set = random_points(12, 2, &mut rng);
    for mode in [TraceMode::ClosedForm, TraceMode::BlockExact, TraceMode::ExactDense] {
        let (_, div) = dy.eval_point_set(&params, &set, 0.5, mode, &mut rng)?;
        println!("{mode:12} {div:+.12}");
    }
    let probes = 2000;
    let mut total = 0.0;
    for _ in 0..probes {
        total += dy.eval_point_set(&params, &set, 0.5, TraceMode::Hutchinson, &mut rng)?.1;
    }
    println!("{:12} {:+.12} (mean of {probes} probes)", TraceMode::Hutchinson, total / probes as f64);
    Ok(())
}
