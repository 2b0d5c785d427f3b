//! Runs only the distributed leader observer on the vessel scenario's leader
//! and prints each agent's position-estimate error.

use formation_learning::estimator::{Observer, ObserverParams};
use formation_learning::graph::Topology;
use formation_learning::models::{InputSignal, LeaderModel};
use formation_learning::sim::rk4_step;
use nalgebra::{DMatrix, DVector};

fn main() -> formation_learning::Result<()> {
    let mut a0 = DMatrix::zeros(3, 6);
    a0[(0, 0)] = -1.0;
    a0[(2, 2)] = -1.0;
    let b0 = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
    let input = InputSignal::Sinusoid {
        amplitude: vec![-80.0],
        omega: 1.0,
        phase: 0.0,
    };
    let leader = LeaderModel::new(a0, b0, input, 80.0)?;
    let topo = Topology::ring_with_leader(4)?;
    let observer = Observer::new(ObserverParams::tuned_default(&leader, 1.0, 200.0)?, &leader, &topo)?;

    // y = [x0; x_hat_1; ...; x_hat_4]
    let mut y = vec![0.0f64; 30];
    y[..6].copy_from_slice(&[0.0, 80.0, 0.0, 80.0, 0.0, 80.0]);
    let f = |t: f64, y: &[f64]| -> formation_learning::Result<Vec<f64>> {
        let x0 = DVector::from_column_slice(&y[..6]);
        let est: Vec<_> = (0..4)
            .map(|i| DVector::from_column_slice(&y[6 + 6 * i..12 + 6 * i]))
            .collect();
        let mut out = leader.derivative(&x0, t)?.as_slice().to_vec();
        for r in observer.derivative(&est, &x0)? {
            out.extend_from_slice(r.as_slice());
        }
        Ok(out)
    };
    let dt = 1e-3;
    for step in 0..=12_000 {
        let t = step as f64 * dt;
        if step % 1000 == 0 {
            let errs: Vec<String> = (0..4)
                .map(|i| {
                    let e: f64 = (0..3).map(|k| (y[6 + 6 * i + k] - y[k]).powi(2)).sum::<f64>().sqrt();
                    format!("{e:9.3e}")
                })
                .collect();
            println!("t = {t:5.1}  |p_hat - p0| = {}", errs.join("  "));
        }
        y = rk4_step(t, &y, dt, &f, |i| format!("state[{i}]"))?;
    }
    Ok(())
}
