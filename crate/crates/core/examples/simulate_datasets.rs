//! Simulates the three synthetic processes and summarizes them.
//!
//! Usage: `simulate_datasets [count] [seed] [out_dir]`

use std::path::PathBuf;

use setcnf::data::{make_dataset, SimKind};
use setcnf::metrics::{ripley_k, summarize};

fn main() -> setcnf::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let count = args.get(1).map_or(Ok(200), |s| s.parse()).expect("count");
    let seed = args.get(2).map_or(Ok(0), |s| s.parse()).expect("seed");
    let out = args.get(3).map(PathBuf::from);
    for kind in SimKind::ALL {
        let ds = make_dataset(kind, count, seed)?;
        let sizes: Vec<f64> = ds.train.iter().map(|s| s.len() as f64).collect();
        let s = summarize(&sizes);
        let k = ripley_k(&ds.train, 0.1, 1.0)?;
        println!(
            "{kind:8} train/val/test {}/{}/{}  points per set {:.2} ± {:.2}  K(0.1) = {k:.3} (Poisson ≈ {:.3})",
            ds.train.len(),
            ds.val.len(),
            ds.test.len(),
            s.mean,
            s.std,
            std::f64::consts::PI * 0.01
        );
        if let Some(dir) = &out {
            let manifest = ds.write(&dir.join(kind.as_str()))?;
            println!("         written to {}", manifest.display());
        }
    }
    Ok(())
}
