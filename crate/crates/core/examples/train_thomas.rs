//! Trains the IHP baseline and a deep-set CNF on Thomas data and compares
//! test per-point NLL.
//!
//! Usage: `train_thomas [count] [epochs] [train_steps]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use setcnf::data::{make_dataset, SimKind};
use setcnf::flow::FlowModel;
use setcnf::metrics::nll_report;
use setcnf::process::{ModelKind, PointProcessModel};
use setcnf::train::{train, TrainConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> setcnf::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, default: usize| args.get(i).map_or(default, |s| s.parse().expect("integer argument"));
    let (count, epochs, steps) = (arg(1, 200), arg(2, 20), arg(3, 10));
    let ds = make_dataset(SimKind::Thomas, count, 1)?;
    let cfg = TrainConfig {
        max_epochs: epochs,
        train_steps: Some(steps),
        ..TrainConfig::default()
    };
    for kind in [ModelKind::Ihp, ModelKind::CnfDeepset] {
        let flow = FlowModel::new(kind.flow_config(2, None)?, 0)?;
        let out = train(PointProcessModel::new(flow, 0.0)?, &ds.train, &ds.val, &cfg)?;
        let eval = out.model.default_settings();
        let nll = nll_report(&out.model, &ds.test, &eval, &mut ChaCha8Rng::seed_from_u64(0))?;
        println!(
            "{kind:12} best epoch {:3}  test NLL {:+.4} ± {:.4}  rate {:.2}",
            out.best_epoch,
            nll.mean,
            nll.std,
            out.model.rate()
        );
    }
    Ok(())
}
