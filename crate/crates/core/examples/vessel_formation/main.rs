//! The four-vessel scenario end to end: load `scenario.toml`, simulate,
//! write the run directory and print the verdicts.
//!
//! `cargo run --release --example vessel_formation -- [t_end]`

use std::path::Path;

use formation_learning::analysis::analyze;
use formation_learning::cli::{io, load, resolve_out_dir};
use formation_learning::sim::run_scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/vessel_formation/scenario.toml");
    let overrides: Vec<String> = std::env::args()
        .nth(1)
        .map(|t| format!("run.t_end={t}"))
        .into_iter()
        .collect();
    let (cfg, built) = load(&file, &overrides).map_err(|e| e.to_string())?;
    for w in &built.warnings {
        eprintln!("warning: {w}");
    }
    let started = std::time::Instant::now();
    let log = run_scenario(&built.scenario, &built.run)?;
    println!(
        "simulated {} s in {:.1} s, {} neurons ever active",
        built.run.t_end,
        started.elapsed().as_secs_f64(),
        log.active_neurons.len()
    );
    let dir = resolve_out_dir(None, &cfg.output.dir);
    io::write_run(&dir, &cfg, &log)?;
    let report = analyze(&log, &built.scenario, &built.analysis)?;
    io::write_json(&dir.join(io::REPORT_FILE), &report)?;
    io::write_metrics_csv(&dir.join(io::METRICS_FILE), &report)?;
    for v in &report.verdicts {
        println!("{} {}: {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.name);
        println!("    {}", v.detail);
    }
    println!("outputs in {}", dir.display());
    Ok(())
}
