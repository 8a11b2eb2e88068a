//! Likelihood with the Poisson cardinality term, intensity, and Poisson
//! sampling of an IHP model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use setcnf::data::{make_dataset, SimKind};
use setcnf::flow::FlowModel;
use setcnf::process::{ModelKind, PointProcessModel};

fn main() -> setcnf::Result<()> {
    let ds = make_dataset(SimKind::Mixture, 50, 4)?;
    let flow = FlowModel::new(ModelKind::Ihp.flow_config(2, None)?, 0)?;
    let mut model = PointProcessModel::new(flow, 0.0)?;
    let rate = model.fit_rate(&ds.train)?;
    println!("fitted rate {rate:.3}");
    let eval = model.default_settings();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let set = &ds.test[0];
    println!(
        "test set of {} points: log-likelihood {:.4}, per-point NLL {:.4} (with cardinality {:.4})",
        set.len(),
        model.log_likelihood(set, &eval, &mut rng)?,
        model.per_point_nll(set, false, &eval, &mut rng)?,
        model.per_point_nll(set, true, &eval, &mut rng)?
    );
    println!("intensity at the centre {:.4}", model.intensity(&[0.5, 0.5], None, &eval, &mut rng)?);
    for _ in 0..3 {
        println!("poisson sample with {} points", model.sample_poisson(&eval.solver, &mut rng)?.len());
    }
    Ok(())
}
