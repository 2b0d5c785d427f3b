//! Excitation level of the localized regressor along a periodic orbit and
//! along a trajectory parked halfway between two centers.

use std::f64::consts::PI;

use formation_learning::analysis::pe_metric;
use formation_learning::rbf::{build_grid, partition_zeta, Widths, DEFAULT_MAX_NEURONS};

fn main() -> formation_learning::Result<()> {
    let grid = build_grid(6, 4, &[(-100.0, 100.0); 6], Widths::Uniform(90.0), DEFAULT_MAX_NEURONS)?;
    let a = 100.0 * 2f64.sqrt() / 3.0;
    let t: Vec<f64> = (0..=2000).map(|r| r as f64 * 0.01).collect();
    let orbit: Vec<Vec<f64>> = t
        .iter()
        .map(|&s| {
            let (p, v) = (a * s.sin(), a * s.cos());
            vec![p, p, p, v, v, v]
        })
        .collect();
    let parked: Vec<Vec<f64>> = t
        .iter()
        .map(|_| {
            vec![
                0.0,
                33.333333333333336,
                33.333333333333336,
                33.333333333333336,
                33.333333333333336,
                33.333333333333336,
            ]
        })
        .collect();

    for (name, xs) in [("orbit", &orbit), ("parked", &parked)] {
        let part = partition_zeta(&grid, xs.iter().map(|x| x.as_slice()), 45.0);
        println!("{name}: {} neurons within 45 of the path", part.zeta.len());
        for start in [0.0, 5.0, 10.0] {
            let w = pe_metric(&t, xs, &grid, &part.zeta, start, 2.0 * PI)?;
            println!(
                "  window [{:5.2}, {:5.2}]  eta = {:.3e}  normalized {:.3e}",
                w.start, w.end, w.eta, w.eta_normalized
            );
        }
    }
    Ok(())
}
