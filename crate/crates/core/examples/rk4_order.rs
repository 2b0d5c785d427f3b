//! Step-halving check of the integrator on the full closed loop with a wide
//! smoothing layer, so the right-hand side is smooth.

use std::path::Path;

use formation_learning::cli::load;
use formation_learning::sim::convergence_ratio;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/synthetic_oracle.toml");
    let (_, built) = load(&file, &["observer.smoothing_eps=1e3".into()]).map_err(|e| e.to_string())?;
    for (dt, steps) in [(0.08, 10), (0.04, 20), (0.02, 40)] {
        let r = convergence_ratio(&built.scenario, dt, steps)?;
        println!(
            "dt = {dt:<5} horizon {:.2} s: error ratio {r:.3} (ideal 16)",
            dt * steps as f64
        );
    }
    Ok(())
}
