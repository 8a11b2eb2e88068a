//! Conditional density of one extra point given an observed cluster, on a
//! coarse grid printed as text.

use setcnf::cli::density_grid;
use setcnf::dynamics::DynamicsConfig;
use setcnf::flow::{FlowConfig, FlowModel};
use setcnf::pointset::PointSet;
use setcnf::process::PointProcessModel;

fn main() -> setcnf::Result<()> {
    let mut flow = FlowModel::new(FlowConfig::cnf(DynamicsConfig::deep_set(2)), 2)?;
    for (_, t) in flow.params_mut().iter_mut() {
        for (k, v) in t.values_mut().iter_mut().enumerate() {
            *v += 0.1 * ((k as f64) * 0.9).cos();
        }
    }
    let model = PointProcessModel::with_rate(flow, 10.0)?;
    let cluster = PointSet::new(2, vec![0.3, 0.3, 0.32, 0.31, 0.29, 0.33])?;
    let eval = model.default_settings();
    let res = 12;
    let plain = density_grid(&model, None, res, 0.0, &eval, 0)?;
    let cond = density_grid(&model, Some(&cluster), res, 0.0, &eval, 0)?;
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for (title, grid) in [("unconditional", &plain), ("given the cluster", &cond)] {
        println!("{title}:");
        let max = grid.normalized.iter().copied().fold(0.0, f64::max);
        for iy in (0..res).rev() {
            let row: String = (0..res)
                .map(|ix| {
                    let v = grid.normalized[iy * res + ix] / max;
                    shades[((v * 9.0).round() as usize).min(9)]
                })
                .collect();
            println!("  |{row}|");
        }
    }
    Ok(())
}
