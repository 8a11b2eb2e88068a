//! Divergence timing per trace mode and set size, printed as CSV.
//!
//! Usage: `trace_benchmark [n,n,...] [repeats]`

use setcnf::bench::{bench_csv, bench_trace, BenchConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> setcnf::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = BenchConfig::default();
    if let Some(list) = args.get(1) {
        cfg.n_list = list.split(',').map(|s| s.parse().expect("set size")).collect();
    }
    if let Some(r) = args.get(2) {
        cfg.repeats = r.parse().expect("repeats");
    }
    let report = bench_trace(&cfg)?;
    print!("{}", bench_csv(&report.rows));
    for msg in report.skipped {
        eprintln!("{msg}");
    }
    Ok(())
}
