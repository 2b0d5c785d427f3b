//! Closed loop on a plant whose uncertainty is exactly representable on the
//! grid. Prints how far each agent's learned weights are from the true ones
//! on the neurons its trajectory visits, including agents the leader cannot
//! reach directly.
//!
//! `cargo run --release --example synthetic_learning -- [t_end]`

use std::path::Path;

use formation_learning::analysis::trajectory_partition;
use formation_learning::cli::load;
use formation_learning::sim::run_scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/synthetic_oracle.toml");
    let t_end = std::env::args().nth(1).unwrap_or_else(|| "60".into());
    let (_, built) = load(&file, &[format!("run.t_end={t_end}")]).map_err(|e| e.to_string())?;
    let scn = &built.scenario;
    let ideal = built
        .ideal_weights
        .as_ref()
        .ok_or("scenario does not use the synthetic plant")?;

    let log = run_scenario(scn, &built.run)?;
    let t = log.times();
    let part = trajectory_partition(&log, &scn.grid, 0.5 * t[t.len() - 1], built.analysis.zeta_radius)?;
    println!("{} neurons near the steady orbit", part.zeta.len());

    let nn = scn.grid.n_neurons();
    let n = scn.plant.dim();
    for cp in &log.checkpoints {
        let errs: Vec<String> = (0..scn.topology.n_followers())
            .map(|i| {
                let (mut num, mut den) = (0.0, 0.0);
                for k in 0..n {
                    for &j in &part.zeta {
                        let w = cp.weights[(i * n + k) * nn + j];
                        num += (w - ideal[k][j]).powi(2);
                        den += ideal[k][j].powi(2);
                    }
                }
                format!("{:.3e}", (num / den).sqrt())
            })
            .collect();
        println!(
            "{:>6} t = {:7.2}  relative weight error per agent {}",
            cp.label,
            cp.t,
            errs.join(" ")
        );
    }
    Ok(())
}
