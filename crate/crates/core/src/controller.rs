//! Per-agent backstepping with a neural feedforward term and the cooperative
//! weight-update law shared across neighbors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_len, Error, Result};
use crate::graph::Topology;
use crate::models::Plant;
use crate::rbf::{nn_output, SparseRegressor, WeightBank};

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGains {
    /// Position-loop gain, one per agent.
    pub h1: Vec<DMatrix<f64>>,
    /// Velocity-loop gain, one per agent.
    pub h2: Vec<DMatrix<f64>>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub sigma: f64,
}

fn check_spd(name: String, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotPositiveDefinite {
            name,
            detail: format!("not square ({}x{})", m.nrows(), m.ncols()),
        });
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::NotPositiveDefinite {
            name,
            detail: "not symmetric".into(),
        });
    }
    let lmin = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if !(lmin > 0.0) {
        return Err(Error::NotPositiveDefinite {
            name,
            detail: format!("smallest eigenvalue is {lmin:.6e}"),
        });
    }
    Ok(())
}

impl ControllerGains {
    pub fn new(h1: Vec<DMatrix<f64>>, h2: Vec<DMatrix<f64>>, gamma1: f64, gamma2: f64, sigma: f64) -> Result<Self> {
        check_len("H2 gains", h1.len(), h2.len())?;
        for (i, (a, b)) in h1.iter().zip(&h2).enumerate() {
            check_spd(format!("controller.h1 (agent {})", i + 1), a)?;
            check_spd(format!("controller.h2 (agent {})", i + 1), b)?;
            check_len("H2 size", a.nrows(), b.nrows())?;
        }
        for (name, v) in [("gamma1", gamma1), ("gamma2", gamma2), ("sigma", sigma)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter {
                    name: format!("controller.{name}"),
                    detail: format!("must be positive, got {v}"),
                });
            }
        }
        Ok(Self {
            h1,
            h2,
            gamma1,
            gamma2,
            sigma,
        })
    }

    /// Same `H1`, `H2` for all agents.
    pub fn shared(
        n_agents: usize,
        h1: DMatrix<f64>,
        h2: DMatrix<f64>,
        gamma1: f64,
        gamma2: f64,
        sigma: f64,
    ) -> Result<Self> {
        Self::new(vec![h1; n_agents], vec![h2; n_agents], gamma1, gamma2, sigma)
    }

    /// Agents whose `H2 - H1` is not positive definite.
    pub fn margin_warnings(&self) -> Vec<String> {
        self.h1
            .iter()
            .zip(&self.h2)
            .enumerate()
            .filter_map(|(i, (a, b))| {
                let lmin = SymmetricEigen::new(b - a).eigenvalues.min();
                (lmin <= 0.0).then(|| {
                    format!(
                        "agent {}: H2 - H1 is not positive definite (smallest eigenvalue {lmin:.3e})",
                        i + 1
                    )
                })
            })
            .collect()
    }
}

/// Constant per-agent displacement from the leader position.
#[derive(Debug, Clone, PartialEq)]
pub struct FormationGeometry {
    pub offsets: Vec<DVector<f64>>,
}

/// Backstepping quantities of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct BackstepState {
    pub z1: DVector<f64>,
    pub z2: DVector<f64>,
    pub beta: DVector<f64>,
}

impl BackstepState {
    pub fn compute(
        p: &DVector<f64>,
        nu: &DVector<f64>,
        p_hat: &DVector<f64>,
        p_hat_rate: &DVector<f64>,
        offset: &DVector<f64>,
        rotation: &DMatrix<f64>,
        h1: &DMatrix<f64>,
    ) -> Self {
        let z1 = tracking_error(p, p_hat, offset);
        let beta = virtual_control(rotation, h1, &z1, p_hat_rate);
        let z2 = nu - &beta;
        Self { z1, z2, beta }
    }
}

/// `p - p_hat - offset`.
pub fn tracking_error(p: &DVector<f64>, p_hat: &DVector<f64>, offset: &DVector<f64>) -> DVector<f64> {
    p - p_hat - offset
}

/// `J^T (-H1 z1 + p_hat')`.
pub fn virtual_control(
    rotation: &DMatrix<f64>,
    h1: &DMatrix<f64>,
    z1: &DVector<f64>,
    p_hat_rate: &DVector<f64>,
) -> DVector<f64> {
    rotation.tr_mul(&(p_hat_rate - h1 * z1))
}

/// `W^T S - H2 z2 - J^T z1`.
pub fn control_law(
    weights: &[&[f64]],
    regressor: &SparseRegressor,
    h2: &DMatrix<f64>,
    z2: &DVector<f64>,
    rotation: &DMatrix<f64>,
    z1: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len("controller weight channels", z2.len(), weights.len())?;
    Ok(control_from_output(
        &nn_output(weights, regressor)?,
        h2,
        z2,
        rotation,
        z1,
    ))
}

/// Same law with the network output `W^T S` already evaluated.
pub fn control_from_output(
    nn: &DVector<f64>,
    h2: &DMatrix<f64>,
    z2: &DVector<f64>,
    rotation: &DMatrix<f64>,
    z1: &DVector<f64>,
) -> DVector<f64> {
    nn - h2 * z2 - rotation.tr_mul(z1)
}

/// Time derivative of the virtual control:
/// `J'^T (p_hat' - H1 z1) + J^T (p_hat'' - H1 z1')` with `z1' = J nu - p_hat'`.
#[allow(clippy::too_many_arguments)]
pub fn beta_rate(
    rotation: &DMatrix<f64>,
    rotation_rate: &DMatrix<f64>,
    h1: &DMatrix<f64>,
    z1: &DVector<f64>,
    nu: &DVector<f64>,
    p_hat_rate: &DVector<f64>,
    p_hat_accel: &DVector<f64>,
) -> DVector<f64> {
    let z1_rate = rotation * nu - p_hat_rate;
    rotation_rate.tr_mul(&(p_hat_rate - h1 * z1)) + rotation.tr_mul(&(p_hat_accel - h1 * z1_rate))
}

/// Rate of one weight entry; shared by the dense and sparse integrators so
/// both produce identical bits.
#[inline]
pub(crate) fn weight_rate(gamma1: f64, sigma: f64, gamma2: f64, s: f64, z2k: f64, w: f64, disagreement: f64) -> f64 {
    -gamma1 * (s * z2k + sigma * w) - gamma2 * disagreement
}

/// Dense cooperative update for every agent, channel and neuron:
/// `-g1 (S z2_k + sigma W) - g2 sum_j a_ij (W_i - W_j)` with `j` over followers.
pub fn weight_update_derivative(
    weights: &WeightBank,
    regressors: &[SparseRegressor],
    z2: &[DVector<f64>],
    gains: &ControllerGains,
    topology: &Topology,
) -> Result<WeightBank> {
    let n_agents = weights.n_agents();
    check_len("weight-bank agents", topology.n_followers(), n_agents)?;
    check_len("regressors", n_agents, regressors.len())?;
    check_len("velocity errors", n_agents, z2.len())?;
    let nn = weights.n_neurons();
    let neighbors = topology.neighbors();
    let mut out = vec![0.0; weights.as_slice().len()];
    let mut s_dense = vec![0.0; nn];
    for i in 0..n_agents {
        check_len("velocity error", weights.n_outputs(), z2[i].len())?;
        s_dense.iter_mut().for_each(|v| *v = 0.0);
        for &(j, s) in &regressors[i].entries {
            s_dense[j] = s;
        }
        for k in 0..weights.n_outputs() {
            let own = weights.channel(i, k);
            let o = weights.offset(i, k);
            for j in 0..nn {
                let mut dis = 0.0;
                for &(m, a) in &neighbors[i] {
                    dis += a * (own[j] - weights.channel(m, k)[j]);
                }
                out[o + j] = weight_rate(
                    gains.gamma1,
                    gains.sigma,
                    gains.gamma2,
                    s_dense[j],
                    z2[i][k],
                    own[j],
                    dis,
                );
            }
        }
    }
    WeightBank::from_flat(n_agents, weights.n_outputs(), nn, out)
}

/// Velocity-error dynamics evaluated two ways on a plant whose uncertainty is
/// exactly `W*^T S`: through the plant with the applied input, and through
/// the reduced form `M^-1 (W~^T S - J^T z1 - H2 z2)`. Returns the norm of the
/// difference.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop_residual_check(
    plant: &Plant,
    ideal_weights: &[Vec<f64>],
    weights: &[&[f64]],
    regressor: &SparseRegressor,
    p: &DVector<f64>,
    nu: &DVector<f64>,
    z1: &DVector<f64>,
    z2: &DVector<f64>,
    beta_dot: &DVector<f64>,
    h2: &DMatrix<f64>,
    input_perturbation: Option<&DVector<f64>>,
) -> Result<f64> {
    if !plant.model().needs_reference_acceleration() || ideal_weights.len() != plant.dim() {
        return Err(Error::Parameter {
            name: "plant".into(),
            detail: format!(
                "closed-loop residual check needs an exactly representable plant, `{}` is not",
                plant.model().name()
            ),
        });
    }
    let rotation = plant.model().rotation(p);
    let mut tau = control_law(weights, regressor, h2, z2, &rotation, z1)?;
    if let Some(d) = input_perturbation {
        tau += d;
    }
    let (_, nu_dot) = plant.derivative(p, nu, &tau, Some(beta_dot))?;
    let via_plant = nu_dot - beta_dot;

    let ideal: Vec<&[f64]> = ideal_weights.iter().map(|w| w.as_slice()).collect();
    let err_out = nn_output(weights, regressor)? - nn_output(&ideal, regressor)?;
    let reduced = plant.solve_inertia(&(err_out - rotation.tr_mul(z1) - h2 * z2));
    Ok((via_plant - reduced).norm())
}
