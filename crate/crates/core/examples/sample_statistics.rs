//! Ripley's K over several radii and Wasserstein distances between the
//! inter-point distance distributions of the synthetic processes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use setcnf::data::{make_dataset, SimKind};
use setcnf::metrics::{pooled_distances, ripley_k, wasserstein1};

fn main() -> setcnf::Result<()> {
    let sets: Vec<_> = SimKind::ALL
        .iter()
        .map(|&k| make_dataset(k, 300, 5).map(|d| (k, d.train)))
        .collect::<setcnf::Result<_>>()?;

    println!("{:8} {:>8} {:>8} {:>8}", "K(r)", "r=0.05", "r=0.1", "r=0.2");
    for (kind, train) in &sets {
        let k: Vec<f64> = [0.05, 0.1, 0.2].iter().map(|&r| ripley_k(train, r, 1.0)).collect::<setcnf::Result<_>>()?;
        println!("{:8} {:8.4} {:8.4} {:8.4}", kind.as_str(), k[0], k[1], k[2]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pooled: Vec<Vec<f64>> = sets.iter().map(|(_, s)| pooled_distances(s)).collect();
    println!("\nW1 between pooled inter-point distances");
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let w = wasserstein1(&pooled[i], &pooled[j], &mut rng)?;
            println!("  {} vs {}: {w:.4}", sets[i].0.as_str(), sets[j].0.as_str());
        }
    }
    Ok(())
}
