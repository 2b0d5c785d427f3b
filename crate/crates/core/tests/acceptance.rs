//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use formation_learning::analysis::{analyze, pe_sweep, trajectory_partition, MetricReport};
use formation_learning::cli::{io, load, BuiltScenario};
use formation_learning::controller::closed_loop_residual_check;
use formation_learning::rbf::partition_zeta;
use formation_learning::sim::{convergence_ratio, run_scenario, RunLog};
use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const ESTIMATOR_FRACTION: f64 = 0.01;
const ESTIMATOR_DEADLINE: f64 = 10.0;
const RUNTIME_LIMIT: Duration = Duration::from_secs(120);
const TRACKING_STEADY_MAX: f64 = 1.0;
const FORMATION_MAX: f64 = 1.5;
const CONSENSUS_RATIO: f64 = 0.10;
const CONSENSUS_RIPPLE: f64 = 0.05;
const APPROXIMATION_RELATIVE_RMS: f64 = 0.20;
const FAR_NEURON_RATIO: f64 = 0.05;
const RESIDUAL_MAX: f64 = 1e-8;
const RESIDUAL_SAMPLES: usize = 100;
const ORACLE_WEIGHT_ERROR: f64 = 0.05;
const PE_TOLERANCE: f64 = 1e-9;
const RK4_RATIO: f64 = 16.0;
const RK4_RATIO_TOLERANCE: f64 = 0.30;

struct Outcome {
    pass: bool,
    detail: String,
}

fn scenario(rel: &str, overrides: &[&str]) -> BuiltScenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(rel);
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    load(&path, &o).unwrap_or_else(|e| panic!("{}: {e}", path.display())).1
}

struct VesselRun {
    built: BuiltScenario,
    log: RunLog,
    report: MetricReport,
    elapsed: Duration,
}

fn vessel_run() -> VesselRun {
    let built = scenario("examples/vessel_formation/scenario.toml", &[]);
    let started = Instant::now();
    let log = run_scenario(&built.scenario, &built.run).expect("vessel run");
    let elapsed = started.elapsed();
    let report = analyze(&log, &built.scenario, &built.analysis).expect("vessel analysis");
    VesselRun {
        built,
        log,
        report,
        elapsed,
    }
}

fn estimator(v: &VesselRun) -> Outcome {
    let threshold = ESTIMATOR_FRACTION * v.built.analysis.leader_amplitude;
    let e = &v.report.estimator;
    let pass = (e.threshold - threshold).abs() < 1e-12
        && e.settle_time.is_some_and(|t| t <= ESTIMATOR_DEADLINE)
        && v.elapsed <= RUNTIME_LIMIT;
    Outcome {
        pass,
        detail: format!(
            "max |p_hat - p0| below {threshold:.3} from t = {:?} s (deadline {ESTIMATOR_DEADLINE} s), final {:.3e}; {} s run simulated in {:.1} s (limit {} s)",
            e.settle_time,
            e.final_error,
            v.built.run.t_end,
            v.elapsed.as_secs_f64(),
            RUNTIME_LIMIT.as_secs()
        ),
    }
}

fn tracking(v: &VesselRun) -> Outcome {
    let a = &v.report.tracking.agents;
    let pass = v.built.run.t_end == 200.0
        && a.len() == 4
        && a.iter()
            .all(|x| x.steady_mean <= TRACKING_STEADY_MAX && x.decay_rate.is_some_and(|d| d > 0.0));
    Outcome {
        pass,
        detail: format!(
            "steady means {:?} (limit {TRACKING_STEADY_MAX}) over {:?}, decay rates {:?}",
            a.iter().map(|x| x.steady_mean).collect::<Vec<_>>(),
            v.report.tracking.window,
            a.iter().map(|x| x.decay_rate).collect::<Vec<_>>()
        ),
    }
}

fn formation(v: &VesselRun) -> Outcome {
    let f = &v.report.formation;
    Outcome {
        pass: f.max_pair_error <= FORMATION_MAX,
        detail: format!(
            "max pairwise displacement error {:.4e} (limit {FORMATION_MAX}), mean {:.4e}",
            f.max_pair_error, f.mean_pair_error
        ),
    }
}

fn consensus(v: &VesselRun) -> Outcome {
    let c = &v.report.consensus;
    let pass = c.final_ratio.len() == 3
        && c.final_ratio.iter().all(|&x| x <= CONSENSUS_RATIO)
        && c.worst_rise.iter().all(|&x| x <= CONSENSUS_RIPPLE);
    Outcome {
        pass,
        detail: format!(
            "final disagreement ratios {:?} (limit {CONSENSUS_RATIO}), worst rise over the last half {:?} (limit {CONSENSUS_RIPPLE})",
            c.final_ratio, c.worst_rise
        ),
    }
}

fn learning(v: &VesselRun) -> Outcome {
    let Some(a) = &v.report.approximation else {
        return Outcome {
            pass: false,
            detail: "no mean weight snapshot".into(),
        };
    };
    let rel: Vec<f64> = a.channels.iter().filter_map(|c| c.relative_mean).collect();
    let worst = rel.iter().copied().fold(0.0f64, f64::max);
    let far = &v.report.far_neurons;
    let far_ok = !far.applicable || far.worst_ratio <= FAR_NEURON_RATIO;
    Outcome {
        pass: !rel.is_empty() && worst <= APPROXIMATION_RELATIVE_RMS && far_ok,
        detail: format!(
            "worst relative RMS of G - W_mean^T S {worst:.4e} over {} (agent, channel) pairs (limit {APPROXIMATION_RELATIVE_RMS}); far/near weight ratio {:.4e} (limit {FAR_NEURON_RATIO}); max |W| reached {:.3e}",
            rel.len(),
            far.worst_ratio,
            v.report.boundedness.sup_w_inf
        ),
    }
}

fn oracle() -> Outcome {
    let built = scenario("scenarios/synthetic_oracle.toml", &[]);
    let scn = &built.scenario;
    let ideal = built.ideal_weights.clone().expect("synthetic plant");
    let n = scn.plant.dim();
    let nn = scn.grid.n_neurons();

    let mut rng = StdRng::seed_from_u64(7);
    let mut worst_residual = 0.0f64;
    let mut residual_err = None;
    for _ in 0..RESIDUAL_SAMPLES {
        let mut v = |scale: f64, len: usize| DVector::from_fn(len, |_, _| rng.gen_range(-scale..scale));
        let (p, nu) = (v(100.0, n), v(100.0, n));
        let (z1, z2, beta_dot) = (v(10.0, n), v(10.0, n), v(50.0, n));
        let x: Vec<f64> = p.iter().chain(nu.iter()).copied().collect();
        let s = scn
            .grid
            .localized_regressor(&x, scn.regressor_radius)
            .expect("regressor");
        let weights: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut w = vec![0.0; nn];
                for &(j, _) in &s.entries {
                    w[j] = rng.gen_range(-50.0..50.0);
                }
                w
            })
            .collect();
        let w: Vec<&[f64]> = weights.iter().map(|c| c.as_slice()).collect();
        match closed_loop_residual_check(
            &scn.plant,
            &ideal,
            &w,
            &s,
            &p,
            &nu,
            &z1,
            &z2,
            &beta_dot,
            &scn.gains.h2[0],
            None,
        ) {
            Ok(r) => worst_residual = worst_residual.max(r),
            Err(e) => residual_err = Some(e.to_string()),
        }
    }

    let log = run_scenario(scn, &built.run).expect("oracle run");
    let t_end = log.times().last().copied().unwrap_or(0.0);
    let part = trajectory_partition(&log, &scn.grid, 0.5 * t_end, built.analysis.zeta_radius).expect("partition");
    let last = log.final_checkpoint().expect("final weights");
    let errs: Vec<f64> = (0..scn.topology.n_followers())
        .map(|i| {
            let (mut num, mut den) = (0.0, 0.0);
            for k in 0..n {
                for &j in &part.zeta {
                    num += (last.weights[(i * n + k) * nn + j] - ideal[k][j]).powi(2);
                    den += ideal[k][j].powi(2);
                }
            }
            (num / den).sqrt()
        })
        .collect();
    let links = scn.topology.leader_links();
    let unlinked: Vec<usize> = (0..links.len()).filter(|&i| links[i] == 0.0).map(|i| i + 1).collect();
    let pass = residual_err.is_none()
        && worst_residual <= RESIDUAL_MAX
        && !part.zeta.is_empty()
        && !unlinked.is_empty()
        && log.divergence.is_none()
        && errs.iter().all(|&e| e <= ORACLE_WEIGHT_ERROR);
    Outcome {
        pass,
        detail: format!(
            "(a) worst residual {worst_residual:.3e} over {RESIDUAL_SAMPLES} random states (limit {RESIDUAL_MAX:.0e}){}; (b) relative weight error on {} near neurons at t = {t_end}: {:?} (limit {ORACLE_WEIGHT_ERROR}); agents {:?} have no leader link",
            residual_err.map(|e| format!(", error: {e}")).unwrap_or_default(),
            part.zeta.len(),
            errs,
            unlinked
        ),
    }
}

fn excitation(v: &VesselRun) -> Outcome {
    let sweeps = &v.report.excitation;
    let levels: Vec<f64> = sweeps
        .iter()
        .map(|s| s.worst.as_ref().map_or(f64::NAN, |w| w.eta_normalized))
        .collect();
    let orbit_ok =
        !sweeps.is_empty() && sweeps.iter().all(|s| s.windows > 0) && levels.iter().all(|&l| l > PE_TOLERANCE);

    // Halfway between two centers: both neurons see identical activations.
    let grid = &v.built.scenario.grid;
    let c = grid.axis_value(1, 2);
    let parked = vec![0.0, c, c, c, c, c];
    let t: Vec<f64> = (0..=2000).map(|r| r as f64 * 0.01).collect();
    let xs = vec![parked; t.len()];
    let part = partition_zeta(grid, xs.iter().map(|x| x.as_slice()), v.built.analysis.zeta_radius);
    let still = pe_sweep(&t, &xs, grid, &part.zeta, 0.0, v.built.analysis.pe_window, 0).expect("stationary sweep");
    let still_level = still.worst.as_ref().map_or(f64::NAN, |w| w.eta_normalized);
    let still_ok = part.zeta.len() >= 2 && still.windows > 0 && still_level <= PE_TOLERANCE;
    Outcome {
        pass: orbit_ok && still_ok,
        detail: format!(
            "post-transient worst normalized eta per agent {levels:?} over {:?} windows (must exceed {PE_TOLERANCE:.0e}); stationary trajectory on {} neurons gives {still_level:.3e} (must not)",
            sweeps.iter().map(|s| s.windows).collect::<Vec<_>>(),
            part.zeta.len()
        ),
    }
}

fn numerics() -> Outcome {
    let smooth = scenario("scenarios/synthetic_oracle.toml", &["observer.smoothing_eps=1e3"]);
    let ratio = convergence_ratio(&smooth.scenario, 0.02, 40).expect("step halving");
    let ratio_ok = (ratio - RK4_RATIO).abs() <= RK4_RATIO_TOLERANCE * RK4_RATIO;

    let tmp = tempfile::tempdir().expect("tempdir");
    let dirs: Vec<PathBuf> = (0..2)
        .map(|k| {
            let dir = tmp.path().join(format!("run{k}"));
            let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/synthetic_oracle.toml");
            let cfg =
                formation_learning::cli::parse_config(&fs::read_to_string(&path).unwrap(), &["run.t_end=5".into()])
                    .unwrap();
            let b = cfg.build().unwrap();
            let log = run_scenario(&b.scenario, &b.run).expect("short run");
            io::write_run(&dir, &cfg, &log).expect("write run");
            dir
        })
        .collect();
    let same: Vec<bool> = [io::LOG_FILE, io::WEIGHTS_FILE, io::METADATA_FILE]
        .iter()
        .map(|f| fs::read(dirs[0].join(f)).unwrap() == fs::read(dirs[1].join(f)).unwrap())
        .collect();
    Outcome {
        pass: ratio_ok && same.iter().all(|&s| s),
        detail: format!(
            "step-halving error ratio {ratio:.3} (target {RK4_RATIO} +/- {:.0}%); log, weights, metadata byte-identical across two runs: {same:?}",
            RK4_RATIO_TOLERANCE * 100.0
        ),
    }
}

fn boundedness(v: &VesselRun) -> Outcome {
    let b = &v.report.boundedness;
    let finite = v.log.data.iter().all(|x| x.is_finite());
    let pass = finite
        && b.all_finite
        && b.completed
        && b.sup_z1 <= b.ceilings.z1
        && b.sup_z2 <= b.ceilings.z2
        && b.sup_w_inf <= b.ceilings.w_inf;
    Outcome {
        pass,
        detail: format!(
            "finite {finite}, completed {}; sup |z1| {:.4e} (<= {}), sup |z2| {:.4e} (<= {}), sup |W|inf {:.4e} (<= {})",
            b.completed, b.sup_z1, b.ceilings.z1, b.sup_z2, b.ceilings.z2, b.sup_w_inf, b.ceilings.w_inf
        ),
    }
}

fn main() {
    // Sequential, so the timed vessel run has the machine to itself.
    let vessel = vessel_run();
    let oracle_outcome = oracle();
    let numerics_outcome = numerics();
    let results = [
        (1, "estimator convergence", estimator(&vessel)),
        (2, "tracking", tracking(&vessel)),
        (3, "formation geometry", formation(&vessel)),
        (4, "weight consensus", consensus(&vessel)),
        (5, "learning accuracy", learning(&vessel)),
        (6, "exactly representable oracle", oracle_outcome),
        (7, "excitation measurement", excitation(&vessel)),
        (8, "numerics", numerics_outcome),
        (9, "boundedness monitor", boundedness(&vessel)),
    ];
    let mut failed = 0;
    for (id, name, o) in &results {
        println!(
            "criterion {id} {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
