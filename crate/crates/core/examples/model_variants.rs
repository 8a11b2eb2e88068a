//! Every model family on the same set: parameter count, trace mode and
//! log-density at initialization and after a small perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setcnf::flow::FlowModel;
use setcnf::pointset::PointSet;
use setcnf::process::ModelKind;

fn main() -> setcnf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set = PointSet::new(2, (0..16).map(|_| rng.gen_range(0.1..0.9)).collect())?;
    println!("{:20} {:>8} {:>12} {:>14} {:>14}", "model", "params", "trace", "log p (init)", "log p (moved)");
    for kind in ModelKind::ALL {
        let mut flow = FlowModel::new(kind.flow_config(2, None)?, 0)?;
        let mode = flow.exact_trace_mode();
        let solver = flow.config().eval_solver;
        let init = flow.log_density(&set, mode, &solver, &mut rng)?;
        for (_, t) in flow.params_mut().iter_mut() {
            for v in t.values_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let moved = flow.log_density(&set, mode, &solver, &mut rng)?;
        println!(
            "{:20} {:>8} {:>12} {init:>14.6} {moved:>14.6}",
            kind.as_str(),
            flow.params().num_scalars(),
            if flow.blocks().is_empty() { "none" } else { mode.as_str() },
        );
    }
    Ok(())
}
