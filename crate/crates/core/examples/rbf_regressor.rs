//! Evaluates the Gaussian regressor on the 4^6 lattice and shows how few
//! neurons matter at a point.

use formation_learning::rbf::{build_grid, Widths, DEFAULT_MAX_NEURONS};

fn main() -> formation_learning::Result<()> {
    let grid = build_grid(6, 4, &[(-100.0, 100.0); 6], Widths::Uniform(90.0), DEFAULT_MAX_NEURONS)?;
    let x = [30.0, 40.0, -30.0, 35.0, -35.0, 90.0];
    let dense = grid.regressor(&x)?;
    println!("{} neurons, |S(x)| = {:.6}", grid.n_neurons(), dense.norm());
    for radius in [30.0, 45.0, 61.0, 80.0] {
        let s = grid.localized_regressor(&x, radius)?;
        let kept = s.entries.iter().fold(0.0, |a, (_, v)| a + v * v).sqrt();
        println!(
            "radius {radius:>4}: {:>4} neurons kept, |S_local| = {kept:.6}, tail bound {:.3e}",
            s.len(),
            grid.tail_bound(radius, 1.0)
        );
    }
    let (j, v) = dense
        .iter()
        .enumerate()
        .fold((0, 0.0), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
    println!("strongest neuron {j} at {:?}: {v:.4}", grid.center(j));
    Ok(())
}
