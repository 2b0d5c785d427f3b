//! Coupled closed-loop system, fixed-step RK4 integration and run logging.
//!
//! Flat state layout (`n` = plant dimension, `N` = followers, `Nn` = neurons):
//!
//! ```text
//! [ x0 (2n) | agent 1: p (n), nu (n), xh (2n) | ... | agent N | weights ]
//! ```
//!
//! Weights are agent-major, then output channel, then neuron, giving a total
//! length of `2n + N (4n + n Nn)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::controller::{
    beta_rate, control_from_output, weight_rate, BackstepState, ControllerGains, FormationGeometry,
};
use crate::error::{check_len, Error, Result};
use crate::estimator::Observer;
use crate::graph::{check_assumption3, Topology};
use crate::models::{LeaderModel, Plant};
use crate::rbf::{nn_output, RbfGrid, SparseRegressor, WeightBank};

/// Version of the run-log column schema.
pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub dim: usize,
    pub n_agents: usize,
    pub n_neurons: usize,
}

impl StateLayout {
    pub fn len(&self) -> usize {
        self.weights_start() + self.n_agents * self.dim * self.n_neurons
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leader(&self) -> usize {
        0
    }

    fn agent_block(&self) -> usize {
        4 * self.dim
    }

    pub fn position(&self, i: usize) -> usize {
        2 * self.dim + i * self.agent_block()
    }

    pub fn velocity(&self, i: usize) -> usize {
        self.position(i) + self.dim
    }

    pub fn estimate(&self, i: usize) -> usize {
        self.position(i) + 2 * self.dim
    }

    pub fn weights_start(&self) -> usize {
        2 * self.dim + self.n_agents * self.agent_block()
    }

    pub fn weight(&self, i: usize, k: usize, j: usize) -> usize {
        self.weights_start() + (i * self.dim + k) * self.n_neurons + j
    }

    /// Human-readable name of the state entry at `idx`.
    pub fn component_name(&self, idx: usize) -> String {
        let n = self.dim;
        if idx < 2 * n {
            return format!("leader state[{idx}]");
        }
        if idx < self.weights_start() {
            let rel = idx - 2 * n;
            let (i, r) = (rel / self.agent_block(), rel % self.agent_block());
            let what = match r / n {
                0 => "position",
                1 => "velocity",
                _ => "leader estimate",
            };
            let k = if r < 2 * n { r % n } else { r - 2 * n };
            return format!("agent {} {what}[{k}]", i + 1);
        }
        let rel = idx - self.weights_start();
        let (ik, j) = (rel / self.n_neurons, rel % self.n_neurons);
        format!("agent {} weights (channel {}, neuron {j})", ik / n + 1, ik % n + 1)
    }
}

/// Initial conditions; weights always start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialConditions {
    pub leader: DVector<f64>,
    pub positions: Vec<DVector<f64>>,
    pub velocities: Vec<DVector<f64>>,
    pub estimates: Vec<DVector<f64>>,
}

/// Everything needed to evaluate the closed loop.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub leader: LeaderModel,
    pub plant: Plant,
    pub topology: Topology,
    pub observer: Observer,
    pub gains: ControllerGains,
    pub formation: FormationGeometry,
    pub grid: Arc<RbfGrid>,
    /// Neurons farther than this from the input are dropped from `S(x)`.
    pub regressor_radius: f64,
    pub initial: InitialConditions,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl Scenario {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        leader: LeaderModel,
        plant: Plant,
        topology: Topology,
        observer: Observer,
        gains: ControllerGains,
        formation: FormationGeometry,
        grid: Arc<RbfGrid>,
        regressor_radius: f64,
        initial: InitialConditions,
    ) -> Result<Self> {
        let n = plant.dim();
        let na = topology.n_followers();
        check_len("leader dimension", n, leader.dim())?;
        check_len("observer agents", na, observer.n_agents())?;
        check_len("H1 gains", na, gains.h1.len())?;
        check_len("formation offsets", na, formation.offsets.len())?;
        check_len("RBF input dimension", 2 * n, grid.dim())?;
        for (h1, h2) in gains.h1.iter().zip(&gains.h2) {
            check_len("H1 size", n, h1.nrows())?;
            check_len("H2 size", n, h2.nrows())?;
        }
        for off in &formation.offsets {
            check_len("formation offset", n, off.len())?;
        }
        check_len("initial leader state", 2 * n, initial.leader.len())?;
        for (what, v, len) in [
            ("initial positions", &initial.positions, n),
            ("initial velocities", &initial.velocities, n),
            ("initial estimates", &initial.estimates, 2 * n),
        ] {
            check_len(what, na, v.len())?;
            for x in v {
                check_len(what, len, x.len())?;
            }
        }
        let conn = check_assumption3(&topology);
        if !conn.satisfied {
            return Err(Error::Topology(conn.diagnostic()));
        }
        if !(regressor_radius > 0.0) {
            return Err(Error::Parameter {
                name: "rbf.regressor_radius".into(),
                detail: format!("must be positive, got {regressor_radius}"),
            });
        }
        let neighbors = topology.neighbors();
        Ok(Self {
            leader,
            plant,
            topology,
            observer,
            gains,
            formation,
            grid,
            regressor_radius,
            initial,
            neighbors,
        })
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout {
            dim: self.plant.dim(),
            n_agents: self.topology.n_followers(),
            n_neurons: self.grid.n_neurons(),
        }
    }

    pub fn initial_state(&self) -> Vec<f64> {
        let weights = WeightBank::zeros(self.topology.n_followers(), self.plant.dim(), self.grid.n_neurons());
        pack(
            &self.layout(),
            &self.initial.leader,
            &self.initial.positions,
            &self.initial.velocities,
            &self.initial.estimates,
            &weights,
        )
    }
}

/// Unpacked view of a flat state.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub leader: DVector<f64>,
    pub positions: Vec<DVector<f64>>,
    pub velocities: Vec<DVector<f64>>,
    pub estimates: Vec<DVector<f64>>,
    pub weights: WeightBank,
}

pub fn pack(
    layout: &StateLayout,
    leader: &DVector<f64>,
    positions: &[DVector<f64>],
    velocities: &[DVector<f64>],
    estimates: &[DVector<f64>],
    weights: &WeightBank,
) -> Vec<f64> {
    let n = layout.dim;
    let mut y = vec![0.0; layout.len()];
    y[..2 * n].copy_from_slice(leader.as_slice());
    for i in 0..layout.n_agents {
        y[layout.position(i)..][..n].copy_from_slice(positions[i].as_slice());
        y[layout.velocity(i)..][..n].copy_from_slice(velocities[i].as_slice());
        y[layout.estimate(i)..][..2 * n].copy_from_slice(estimates[i].as_slice());
    }
    y[layout.weights_start()..].copy_from_slice(weights.as_slice());
    y
}

pub fn unpack(layout: &StateLayout, y: &[f64]) -> Result<SimState> {
    check_len("flat state", layout.len(), y.len())?;
    let n = layout.dim;
    let seg = |o: usize, len: usize| DVector::from_column_slice(&y[o..o + len]);
    Ok(SimState {
        leader: seg(0, 2 * n),
        positions: (0..layout.n_agents).map(|i| seg(layout.position(i), n)).collect(),
        velocities: (0..layout.n_agents).map(|i| seg(layout.velocity(i), n)).collect(),
        estimates: (0..layout.n_agents).map(|i| seg(layout.estimate(i), 2 * n)).collect(),
        weights: WeightBank::from_flat(
            layout.n_agents,
            n,
            layout.n_neurons,
            y[layout.weights_start()..].to_vec(),
        )?,
    })
}

/// Per-agent quantities of one evaluation of the closed loop.
#[derive(Debug, Clone)]
pub struct AgentSignals {
    pub backstep: BackstepState,
    pub tau: DVector<f64>,
    pub nn_output: DVector<f64>,
    pub regressor: SparseRegressor,
    pub beta_dot: Option<DVector<f64>>,
}

/// Everything except the weight rates at one `(t, y)`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub leader_rate: DVector<f64>,
    pub estimate_rates: Vec<DVector<f64>>,
    pub agents: Vec<AgentSignals>,
    pub position_rates: Vec<DVector<f64>>,
    pub velocity_rates: Vec<DVector<f64>>,
}

fn weight_channels<'a>(layout: &StateLayout, y: &'a [f64], i: usize) -> Vec<&'a [f64]> {
    (0..layout.dim)
        .map(|k| {
            let o = layout.weight(i, k, 0);
            &y[o..o + layout.n_neurons]
        })
        .collect()
}

/// Evaluates observers, backstepping signals, control inputs and plant rates.
/// The reference acceleration is computed when the plant needs it or when
/// `with_beta_dot` is set.
pub fn evaluate(scn: &Scenario, t: f64, y: &[f64], with_beta_dot: bool) -> Result<Evaluation> {
    let layout = scn.layout();
    check_len("flat state", layout.len(), y.len())?;
    let n = layout.dim;
    let na = layout.n_agents;
    let seg = |o: usize, len: usize| DVector::from_column_slice(&y[o..o + len]);
    let x0 = seg(0, 2 * n);
    let estimates: Vec<_> = (0..na).map(|i| seg(layout.estimate(i), 2 * n)).collect();

    let leader_rate = scn.leader.derivative(&x0, t)?;
    let estimate_rates = scn.observer.derivative(&estimates, &x0)?;
    let model = scn.plant.model();
    let needs_beta_dot = with_beta_dot || model.needs_reference_acceleration();
    let accel = if needs_beta_dot {
        Some(scn.observer.position_acceleration(&estimate_rates, &leader_rate)?)
    } else {
        None
    };

    let mut agents = Vec::with_capacity(na);
    let mut position_rates = Vec::with_capacity(na);
    let mut velocity_rates = Vec::with_capacity(na);
    for i in 0..na {
        let p = seg(layout.position(i), n);
        let nu = seg(layout.velocity(i), n);
        let p_hat = estimates[i].rows(0, n).into_owned();
        let p_hat_rate = estimate_rates[i].rows(0, n).into_owned();
        let rotation = model.rotation(&p);
        let bs = BackstepState::compute(
            &p,
            &nu,
            &p_hat,
            &p_hat_rate,
            &scn.formation.offsets[i],
            &rotation,
            &scn.gains.h1[i],
        );
        let x: Vec<f64> = p.iter().chain(nu.iter()).copied().collect();
        let regressor = scn.grid.localized_regressor(&x, scn.regressor_radius)?;
        let channels = weight_channels(&layout, y, i);
        let nn_output = nn_output(&channels, &regressor)?;
        let tau = control_from_output(&nn_output, &scn.gains.h2[i], &bs.z2, &rotation, &bs.z1);
        let beta_dot = match &accel {
            Some(acc) => {
                let rotation_rate = model.rotation_rate(&p, &(&rotation * &nu));
                Some(beta_rate(
                    &rotation,
                    &rotation_rate,
                    &scn.gains.h1[i],
                    &bs.z1,
                    &nu,
                    &p_hat_rate,
                    &acc[i],
                ))
            }
            None => None,
        };
        let (pd, vd) = scn.plant.derivative(&p, &nu, &tau, beta_dot.as_ref())?;
        position_rates.push(pd);
        velocity_rates.push(vd);
        agents.push(AgentSignals {
            backstep: bs,
            tau,
            nn_output,
            regressor,
            beta_dot,
        });
    }
    Ok(Evaluation {
        leader_rate,
        estimate_rates,
        agents,
        position_rates,
        velocity_rates,
    })
}

fn write_dense_part(layout: &StateLayout, ev: &Evaluation, out: &mut [f64]) {
    let n = layout.dim;
    out[..2 * n].copy_from_slice(ev.leader_rate.as_slice());
    for i in 0..layout.n_agents {
        out[layout.position(i)..][..n].copy_from_slice(ev.position_rates[i].as_slice());
        out[layout.velocity(i)..][..n].copy_from_slice(ev.velocity_rates[i].as_slice());
        out[layout.estimate(i)..][..2 * n].copy_from_slice(ev.estimate_rates[i].as_slice());
    }
}

/// Writes the weight rates of the listed neurons for every agent and channel.
/// `scratch` must be all zeros of length `Nn` on entry and is left that way.
fn write_weight_rates(
    scn: &Scenario,
    y: &[f64],
    ev: &Evaluation,
    neurons: &[usize],
    scratch: &mut [f64],
    out: &mut [f64],
) {
    let layout = scn.layout();
    let g = &scn.gains;
    let nn = layout.n_neurons;
    for i in 0..layout.n_agents {
        for &(j, s) in &ev.agents[i].regressor.entries {
            scratch[j] = s;
        }
        let z2 = &ev.agents[i].backstep.z2;
        for k in 0..layout.dim {
            let own = &y[layout.weight(i, k, 0)..][..nn];
            let others: Vec<(f64, &[f64])> = scn.neighbors[i]
                .iter()
                .map(|&(m, a)| (a, &y[layout.weight(m, k, 0)..][..nn]))
                .collect();
            let rates = &mut out[layout.weight(i, k, 0)..][..nn];
            for &j in neurons {
                let w = own[j];
                let mut dis = 0.0;
                for &(a, wm) in &others {
                    dis += a * (w - wm[j]);
                }
                rates[j] = weight_rate(g.gamma1, g.sigma, g.gamma2, scratch[j], z2[k], w, dis);
            }
        }
        for &(j, _) in &ev.agents[i].regressor.entries {
            scratch[j] = 0.0;
        }
    }
}

/// Full derivative of the flat state, every neuron included.
pub fn system_derivative(scn: &Scenario, t: f64, y: &[f64]) -> Result<Vec<f64>> {
    let layout = scn.layout();
    let ev = evaluate(scn, t, y, false)?;
    let mut out = vec![0.0; layout.len()];
    write_dense_part(&layout, &ev, &mut out);
    let all: Vec<usize> = (0..layout.n_neurons).collect();
    let mut scratch = vec![0.0; layout.n_neurons];
    write_weight_rates(scn, y, &ev, &all, &mut scratch, &mut out);
    Ok(out)
}

fn first_non_finite(v: &[f64]) -> Option<usize> {
    v.iter().position(|x| !x.is_finite())
}

/// Classical RK4 step on a flat vector. A non-finite stage derivative aborts
/// with the offending index named by `name`.
pub fn rk4_step<F, N>(t: f64, y: &[f64], dt: f64, mut f: F, name: N) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
    N: Fn(usize) -> String,
{
    if !(dt > 0.0) {
        return Err(Error::Parameter {
            name: "run.dt".into(),
            detail: format!("step must be positive, got {dt}"),
        });
    }
    let half = dt * 0.5;
    let check = |tt: f64, k: Vec<f64>| -> Result<Vec<f64>> {
        match first_non_finite(&k) {
            Some(idx) => Err(Error::NonFinite {
                component: name(idx),
                t: tt,
            }),
            None => Ok(k),
        }
    };
    let k1 = check(t, f(t, y)?)?;
    let s: Vec<f64> = y.iter().zip(&k1).map(|(a, b)| a + half * b).collect();
    let k2 = check(t + half, f(t + half, &s)?)?;
    let s: Vec<f64> = y.iter().zip(&k2).map(|(a, b)| a + half * b).collect();
    let k3 = check(t + half, f(t + half, &s)?)?;
    let s: Vec<f64> = y.iter().zip(&k3).map(|(a, b)| a + dt * b).collect();
    let k4 = check(t + dt, f(t + dt, &s)?)?;
    let next: Vec<f64> = (0..y.len())
        .map(|m| combine(y[m], dt, k1[m], k2[m], k3[m], k4[m]))
        .collect();
    if let Some(idx) = first_non_finite(&next) {
        return Err(Error::NonFinite {
            component: name(idx),
            t: t + dt,
        });
    }
    Ok(next)
}

#[inline]
fn combine(y: f64, dt: f64, k1: f64, k2: f64, k3: f64, k4: f64) -> f64 {
    y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// RK4 over the closed loop that only touches neurons which have ever been
/// inside some agent's regressor support. All other weights and their rates
/// are exactly zero, so the result equals the dense step bit for bit.
#[derive(Debug, Clone)]
pub struct ActiveSetStepper<'a> {
    scn: &'a Scenario,
    layout: StateLayout,
    active: Vec<usize>,
    /// Position of each neuron in `active`, `usize::MAX` if inactive.
    slot: Vec<usize>,
    /// Stage rates of the non-weight part.
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
    /// Compact weight buffers, channel `c` at `c * Nn`, slot order within.
    w0: Vec<f64>,
    ws: Vec<f64>,
    kw: [Vec<f64>; 4],
    s_slot: Vec<f64>,
    dis: Vec<f64>,
}

impl<'a> ActiveSetStepper<'a> {
    /// Neurons with a nonzero weight in `y` start out active.
    pub fn new(scn: &'a Scenario, y: &[f64]) -> Self {
        let layout = scn.layout();
        let nn = layout.n_neurons;
        let dense = layout.weights_start();
        let compact = layout.n_agents * layout.dim * nn;
        let mut s = Self {
            scn,
            layout,
            active: Vec::new(),
            slot: vec![usize::MAX; nn],
            k: std::array::from_fn(|_| vec![0.0; dense]),
            stage: y.to_vec(),
            w0: vec![0.0; compact],
            ws: vec![0.0; compact],
            kw: std::array::from_fn(|_| vec![0.0; compact]),
            s_slot: vec![0.0; nn],
            dis: vec![0.0; nn],
        };
        for i in 0..layout.n_agents {
            for k in 0..layout.dim {
                for j in 0..nn {
                    if y[layout.weight(i, k, j)] != 0.0 {
                        s.activate(j);
                    }
                }
            }
        }
        s
    }

    fn activate(&mut self, j: usize) {
        if self.slot[j] == usize::MAX {
            self.slot[j] = self.active.len();
            self.active.push(j);
        }
    }

    /// Active neuron indices in activation order.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Flat indices of all active weights.
    pub fn active_weight_indices(&self) -> impl Iterator<Item = usize> + '_ {
        let l = self.layout;
        (0..l.n_agents)
            .flat_map(move |i| (0..l.dim).flat_map(move |k| self.active.iter().map(move |&j| l.weight(i, k, j))))
    }

    fn n_channels(&self) -> usize {
        self.layout.n_agents * self.layout.dim
    }

    fn eval_into(&mut self, stage_idx: usize, t: f64, from_stage: bool, y: &[f64]) -> Result<()> {
        let src: &[f64] = if from_stage { &self.stage } else { y };
        let ev = evaluate(self.scn, t, src, false)?;
        for a in &ev.agents {
            for &(j, _) in &a.regressor.entries {
                if self.slot[j] == usize::MAX {
                    self.slot[j] = self.active.len();
                    self.active.push(j);
                }
            }
        }
        let l = self.layout;
        write_dense_part(&l, &ev, &mut self.k[stage_idx]);
        let n_active = self.active.len();
        let w = if from_stage { &self.ws } else { &self.w0 };
        compact_weight_rates(
            self.scn,
            &ev,
            &self.slot,
            n_active,
            w,
            &mut self.s_slot,
            &mut self.dis,
            &mut self.kw[stage_idx],
        );
        let mut bad = first_non_finite(&self.k[stage_idx]);
        if bad.is_none() {
            let kw = &self.kw[stage_idx];
            for c in 0..self.n_channels() {
                if let Some(a) = kw[c * l.n_neurons..][..n_active].iter().position(|v| !v.is_finite()) {
                    bad = Some(l.weights_start() + c * l.n_neurons + self.active[a]);
                    break;
                }
            }
        }
        match bad {
            Some(idx) => Err(Error::NonFinite {
                component: l.component_name(idx),
                t,
            }),
            None => Ok(()),
        }
    }

    /// Copies the active weights of `y` into the compact base buffer.
    fn gather(&mut self, y: &[f64]) {
        let l = self.layout;
        let ws = l.weights_start();
        for c in 0..self.n_channels() {
            let yc = &y[ws + c * l.n_neurons..][..l.n_neurons];
            let wc = &mut self.w0[c * l.n_neurons..][..self.active.len()];
            for (w, &j) in wc.iter_mut().zip(&self.active) {
                *w = yc[j];
            }
        }
    }

    fn fill_stage(&mut self, y: &[f64], from: usize, h: f64) {
        let l = self.layout;
        let ws = l.weights_start();
        let k = &self.k[from];
        for m in 0..ws {
            self.stage[m] = y[m] + h * k[m];
        }
        let n_active = self.active.len();
        for c in 0..self.n_channels() {
            let base = c * l.n_neurons;
            let (w0, kc) = (&self.w0[base..][..n_active], &self.kw[from][base..][..n_active]);
            let sc = &mut self.ws[base..][..n_active];
            for ((s, &w), &r) in sc.iter_mut().zip(w0).zip(kc) {
                *s = w + h * r;
            }
            let full = &mut self.stage[ws + base..][..l.n_neurons];
            for (&s, &j) in sc.iter().zip(&self.active) {
                full[j] = s;
            }
        }
    }

    /// Advances `y` from `t` to `t + dt` in place.
    pub fn step(&mut self, t: f64, y: &mut [f64], dt: f64) -> Result<()> {
        let half = dt * 0.5;
        self.gather(y);
        self.eval_into(0, t, false, y)?;
        self.fill_stage(y, 0, half);
        self.eval_into(1, t + half, true, y)?;
        self.fill_stage(y, 1, half);
        self.eval_into(2, t + half, true, y)?;
        self.fill_stage(y, 2, dt);
        self.eval_into(3, t + dt, true, y)?;
        let l = self.layout;
        let ws = l.weights_start();
        let [k1, k2, k3, k4] = &self.k;
        for m in 0..ws {
            y[m] = combine(y[m], dt, k1[m], k2[m], k3[m], k4[m]);
        }
        let n_active = self.active.len();
        let [a, b, d, e] = &self.kw;
        for c in 0..self.n_channels() {
            let base = c * l.n_neurons;
            let yc = &mut y[ws + base..][..l.n_neurons];
            let w0 = &self.w0[base..][..n_active];
            let (a, b, d, e) = (&a[base..], &b[base..], &d[base..], &e[base..]);
            for (s, &j) in self.active.iter().enumerate() {
                yc[j] = combine(w0[s], dt, a[s], b[s], d[s], e[s]);
            }
        }
        if let Some(idx) = first_non_finite(&y[..ws]) {
            return Err(Error::NonFinite {
                component: self.layout.component_name(idx),
                t: t + dt,
            });
        }
        Ok(())
    }
}

/// Weight rates on the compact buffers: same law and summation order as
/// [`write_weight_rates`], over slots `0..n_active` of every channel.
#[allow(clippy::too_many_arguments)]
fn compact_weight_rates(
    scn: &Scenario,
    ev: &Evaluation,
    slot: &[usize],
    n_active: usize,
    w: &[f64],
    s_slot: &mut [f64],
    dis: &mut [f64],
    out: &mut [f64],
) {
    let layout = scn.layout();
    let g = &scn.gains;
    let nn = layout.n_neurons;
    let s_slot = &mut s_slot[..n_active];
    let dis = &mut dis[..n_active];
    for i in 0..layout.n_agents {
        for &(j, s) in &ev.agents[i].regressor.entries {
            s_slot[slot[j]] = s;
        }
        let z2 = &ev.agents[i].backstep.z2;
        for k in 0..layout.dim {
            let c = i * layout.dim + k;
            let own = &w[c * nn..][..n_active];
            dis.fill(0.0);
            for &(m, a) in &scn.neighbors[i] {
                let other = &w[(m * layout.dim + k) * nn..][..n_active];
                for ((d, &x), &xm) in dis.iter_mut().zip(own).zip(other) {
                    *d += a * (x - xm);
                }
            }
            let rates = &mut out[c * nn..][..n_active];
            for (((r, &x), &s), &d) in rates.iter_mut().zip(own).zip(s_slot.iter()).zip(dis.iter()) {
                *r = weight_rate(g.gamma1, g.sigma, g.gamma2, s, z2[k], x, d);
            }
        }
        for &(j, _) in &ev.agents[i].regressor.entries {
            s_slot[slot[j]] = 0.0;
        }
    }
}

/// Final state after `n_steps` steps of size `dt` from the initial conditions.
pub fn integrate(scn: &Scenario, dt: f64, n_steps: usize) -> Result<Vec<f64>> {
    let mut y = scn.initial_state();
    let mut stepper = ActiveSetStepper::new(scn, &y);
    for s in 0..n_steps {
        stepper.step(s as f64 * dt, &mut y, dt)?;
    }
    Ok(y)
}

/// Step-halving ratio `|y_h - y_h/2| / |y_h/2 - y_h/4|` at `t = n_steps * dt`.
/// Tends to 16 for a fourth-order method on a smooth right-hand side.
pub fn convergence_ratio(scn: &Scenario, dt: f64, n_steps: usize) -> Result<f64> {
    let a = integrate(scn, dt, n_steps)?;
    let b = integrate(scn, dt / 2.0, 2 * n_steps)?;
    let c = integrate(scn, dt / 4.0, 4 * n_steps)?;
    let dist = |u: &[f64], v: &[f64]| u.iter().zip(v).fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y)).sqrt();
    Ok(dist(&a, &b) / dist(&b, &c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dt: f64,
    pub t_end: f64,
    pub log_stride: usize,
    /// Fractions of `t_end` at which full weight snapshots are kept.
    pub checkpoint_fractions: Vec<f64>,
    /// Fractions of `t_end` bounding the weight-averaging window.
    pub mean_window: (f64, f64),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_end: 200.0,
            log_stride: 10,
            checkpoint_fractions: vec![0.0, 0.5, 0.8, 1.0],
            mean_window: (0.8, 1.0),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, detail: String| {
            Err(Error::Parameter {
                name: format!("run.{name}"),
                detail,
            })
        };
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("dt", format!("must be positive, got {}", self.dt));
        }
        if !(self.t_end >= self.dt) || !self.t_end.is_finite() {
            return bad("t_end", format!("must be >= dt = {}, got {}", self.dt, self.t_end));
        }
        if self.log_stride == 0 {
            return bad("log_stride", "must be >= 1".into());
        }
        if self.checkpoint_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("checkpoint_fractions", "entries must lie in [0, 1]".into());
        }
        let (a, b) = self.mean_window;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || !(b > a) {
            return bad("mean_window", format!("needs 0 <= start < end <= 1, got [{a}, {b}]"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        ((self.t_end / self.dt).round() as usize).max(1)
    }
}

/// Full weight snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightCheckpoint {
    pub label: String,
    pub t: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub t: f64,
    pub component: String,
}

/// Logged time series plus weight snapshots of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub layout: StateLayout,
    pub columns: Vec<String>,
    /// Row-major, `columns.len()` values per row.
    pub data: Vec<f64>,
    pub checkpoints: Vec<WeightCheckpoint>,
    /// Entries of every neuron ever active.
    pub active_neurons: Vec<usize>,
    pub divergence: Option<Divergence>,
}

/// Column names for a layout, in log order.
pub fn log_columns(layout: &StateLayout) -> Vec<String> {
    let n = layout.dim;
    let mut c = vec!["t".to_string()];
    for k in 1..=n {
        c.push(format!("x0_p{k}"));
    }
    for k in 1..=n {
        c.push(format!("x0_v{k}"));
    }
    for i in 1..=layout.n_agents {
        for field in ["p", "v", "ph", "vh", "z1_", "z2_", "tau", "beta", "dbeta", "nn"] {
            for k in 1..=n {
                c.push(format!("a{i}_{field}{k}"));
            }
        }
        c.push(format!("a{i}_est_err"));
        c.push(format!("a{i}_track_err"));
        for k in 1..=n {
            c.push(format!("a{i}_wnorm{k}"));
        }
    }
    for k in 1..=n {
        c.push(format!("cons{k}"));
    }
    c.push("w_inf".into());
    c
}

impl RunLog {
    pub fn n_rows(&self) -> usize {
        self.data.len() / self.columns.len().max(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.columns.len();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Log(format!("missing column `{name}`")))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column_index(name)?;
        Ok((0..self.n_rows()).map(|r| self.row(r)[c]).collect())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.row(r)[0]).collect()
    }

    /// `n` consecutive columns starting at `name`, read from one row.
    pub fn vector(&self, r: usize, name: &str, n: usize) -> Result<DVector<f64>> {
        let c = self.column_index(name)?;
        Ok(DVector::from_column_slice(&self.row(r)[c..c + n]))
    }

    pub fn checkpoint(&self, label: &str) -> Option<&WeightCheckpoint> {
        self.checkpoints.iter().find(|c| c.label == label)
    }

    /// Last snapshot in time that is not the averaged one.
    pub fn final_checkpoint(&self) -> Option<&WeightCheckpoint> {
        self.checkpoints
            .iter()
            .filter(|c| c.label != MEAN_LABEL)
            .max_by(|a, b| a.t.total_cmp(&b.t))
    }

    /// Checks that rows are strictly increasing in time.
    pub fn check_schema(&self) -> Result<()> {
        if self.columns != log_columns(&self.layout) {
            return Err(Error::Log("column schema does not match the state layout".into()));
        }
        if self.data.len() % self.columns.len() != 0 {
            return Err(Error::Log("ragged row data".into()));
        }
        let t = self.times();
        if let Some(w) = t.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::Log(format!(
                "time is not strictly increasing at row {} (t = {} then {})",
                w + 1,
                t[w],
                t[w + 1]
            )));
        }
        Ok(())
    }
}

/// Label of the window-averaged weight snapshot.
pub const MEAN_LABEL: &str = "mean";

fn log_row(scn: &Scenario, layout: &StateLayout, t: f64, y: &[f64], active: &[usize]) -> Result<Vec<f64>> {
    let n = layout.dim;
    let na = layout.n_agents;
    let ev = evaluate(scn, t, y, true)?;
    let mut row = Vec::with_capacity(1 + 2 * n + na * (10 * n + 2 + n) + n + 1);
    row.push(t);
    row.extend_from_slice(&y[..2 * n]);
    for i in 0..na {
        let a = &ev.agents[i];
        row.extend_from_slice(&y[layout.position(i)..][..n]);
        row.extend_from_slice(&y[layout.velocity(i)..][..n]);
        row.extend_from_slice(&y[layout.estimate(i)..][..2 * n]);
        row.extend_from_slice(a.backstep.z1.as_slice());
        row.extend_from_slice(a.backstep.z2.as_slice());
        row.extend_from_slice(a.tau.as_slice());
        row.extend_from_slice(a.backstep.beta.as_slice());
        row.extend_from_slice(a.beta_dot.as_ref().expect("requested").as_slice());
        row.extend_from_slice(a.nn_output.as_slice());
        let est_err = (0..2 * n)
            .fold(0.0, |acc, m| acc + (y[layout.estimate(i) + m] - y[m]).powi(2))
            .sqrt();
        let track = (0..n)
            .fold(0.0, |acc, m| {
                acc + (y[layout.position(i) + m] - y[m] - scn.formation.offsets[i][m]).powi(2)
            })
            .sqrt();
        row.push(est_err);
        row.push(track);
        for k in 0..n {
            let sq = active
                .iter()
                .fold(0.0, |acc, &j| acc + y[layout.weight(i, k, j)].powi(2));
            row.push(sq.sqrt());
        }
    }
    let mut w_inf: f64 = 0.0;
    for k in 0..n {
        let mut worst: f64 = 0.0;
        for i in 0..na {
            for m in (i + 1)..na {
                let d2 = active.iter().fold(0.0, |acc, &j| {
                    acc + (y[layout.weight(i, k, j)] - y[layout.weight(m, k, j)]).powi(2)
                });
                worst = worst.max(d2.sqrt());
            }
            for &j in active {
                w_inf = w_inf.max(y[layout.weight(i, k, j)].abs());
            }
        }
        row.push(worst);
    }
    row.push(w_inf);
    Ok(row)
}

fn checkpoint_label(f: f64) -> String {
    format!("t{:.2}", f)
}

/// Integrates a scenario. Divergence stops the run and is reported in the
/// returned log, which keeps every row written so far.
pub fn run_scenario(scn: &Scenario, cfg: &RunConfig) -> Result<RunLog> {
    cfg.validate()?;
    let layout = scn.layout();
    let columns = log_columns(&layout);
    let n_steps = cfg.n_steps();
    let mut y = scn.initial_state();
    let mut stepper = ActiveSetStepper::new(scn, &y);

    let mut checkpoint_steps: Vec<(usize, f64)> = cfg
        .checkpoint_fractions
        .iter()
        .map(|&f| (((f * n_steps as f64).round() as usize).min(n_steps), f))
        .collect();
    checkpoint_steps.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let (fa, fb) = cfg.mean_window;
    let t_total = n_steps as f64 * cfg.dt;
    let mut mean = crate::rbf::MeanAccumulator::new(layout.len() - layout.weights_start(), fa * t_total, fb * t_total);

    let mut data = Vec::new();
    let mut checkpoints = Vec::new();
    let mut divergence = None;
    let ws = layout.weights_start();

    for step in 0..=n_steps {
        let t = step as f64 * cfg.dt;
        if step % cfg.log_stride == 0 || step == n_steps {
            data.extend(log_row(scn, &layout, t, &y, stepper.active())?);
            if mean.contains(t) {
                let idx: Vec<usize> = stepper.active_weight_indices().map(|m| m - ws).collect();
                mean.add_indices(&y[ws..], idx.into_iter());
            }
        }
        for &(s, f) in &checkpoint_steps {
            if s == step {
                checkpoints.push(WeightCheckpoint {
                    label: checkpoint_label(f),
                    t,
                    weights: y[ws..].to_vec(),
                });
            }
        }
        if step == n_steps {
            break;
        }
        match stepper.step(t, &mut y, cfg.dt) {
            Ok(()) => {}
            Err(Error::NonFinite { component, t }) => {
                divergence = Some(Divergence { t, component });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if divergence.is_none() && mean.count() > 0 {
        let (t_a, t_b) = mean.window();
        checkpoints.push(WeightCheckpoint {
            label: MEAN_LABEL.into(),
            t: 0.5 * (t_a + t_b),
            weights: mean.mean()?,
        });
    }
    let mut active_neurons = stepper.active().to_vec();
    active_neurons.sort_unstable();
    Ok(RunLog {
        layout,
        columns,
        data,
        checkpoints,
        active_neurons,
        divergence,
    })
}

/// `[p; nu]`, the network input of agent `i` on log row `r`.
pub fn network_input(log: &RunLog, r: usize, i: usize) -> Result<Vec<f64>> {
    let n = log.layout.dim;
    let p = log.vector(r, &format!("a{}_p1", i + 1), n)?;
    let v = log.vector(r, &format!("a{}_v1", i + 1), n)?;
    Ok(p.iter().chain(v.iter()).copied().collect())
}

/// Helper for building block-diagonal gains from a diagonal.
pub fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(values))
}
