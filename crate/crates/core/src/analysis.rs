//! Post-run metrics: tracking and formation errors, observer convergence,
//! weight consensus, approximation accuracy, excitation level, far-neuron
//! weights and boundedness.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rbf::{partition_zeta, RbfGrid, ZetaPartition};
use crate::sim::{network_input, RunLog, Scenario, StateLayout, MEAN_LABEL};

/// Pass/fail limits used by the verdicts.
pub mod limits {
    /// Observer position error as a fraction of the leader amplitude.
    pub const ESTIMATOR_FRACTION: f64 = 0.01;
    /// Simulated time by which the observer must have settled.
    pub const ESTIMATOR_DEADLINE: f64 = 10.0;
    pub const TRACKING_STEADY_MAX: f64 = 1.0;
    pub const FORMATION_MAX: f64 = 1.5;
    pub const CONSENSUS_RATIO: f64 = 0.10;
    pub const CONSENSUS_RIPPLE: f64 = 0.05;
    pub const APPROXIMATION_RELATIVE_RMS: f64 = 0.20;
    pub const FAR_NEURON_RATIO: f64 = 0.05;
    /// Normalized Gram eigenvalue below which a window is not exciting.
    pub const PE_TOLERANCE: f64 = 1e-9;
    /// Relative agreement between analytic and differenced reference acceleration.
    pub const BETA_DOT_AGREEMENT: f64 = 1e-2;
}

/// Time windows and radii used by the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisParams {
    /// Trailing fraction of the run treated as steady state.
    pub steady_fraction: f64,
    /// Leading fraction of the run treated as transient for excitation windows.
    pub transient_fraction: f64,
    pub zeta_radius: f64,
    pub pe_window: f64,
    pub leader_amplitude: f64,
    pub ceilings: Ceilings,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ceilings {
    pub z1: f64,
    pub z2: f64,
    pub w_inf: f64,
    /// Monitoring starts at this time.
    pub after: f64,
}

fn steady_window(log: &RunLog, fraction: f64) -> (f64, f64) {
    let t = log.times();
    let end = t.last().copied().unwrap_or(0.0);
    let start = t.first().copied().unwrap_or(0.0);
    (end - fraction * (end - start), end)
}

fn rows_in(log: &RunLog, window: (f64, f64)) -> Vec<usize> {
    let slack = 1e-9 * window.1.abs().max(1.0);
    log.times()
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= window.0 - slack && t <= window.1 + slack)
        .map(|(r, _)| r)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x * x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        (s / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentTracking {
    pub steady_mean: f64,
    pub steady_max: f64,
    /// Rate of the exponential fit over the transient, if it had two samples.
    pub decay_rate: Option<f64>,
    pub fit_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingMetrics {
    pub window: (f64, f64),
    pub agents: Vec<AgentTracking>,
    #[serde(skip)]
    pub series: Vec<Vec<f64>>,
}

/// Least-squares slope of `ln e` against `t` over `[0, first time e < 5 * steady]`.
pub fn decay_rate(t: &[f64], e: &[f64], steady: f64) -> (Option<f64>, f64) {
    let stop = e.iter().position(|&v| v < 5.0 * steady).unwrap_or(e.len());
    let pts: Vec<(f64, f64)> = t[..stop]
        .iter()
        .zip(&e[..stop])
        .filter(|(_, &v)| v > 0.0)
        .map(|(&tt, &v)| (tt, v.ln()))
        .collect();
    let fit_end = if stop < t.len() {
        t[stop]
    } else {
        t.last().copied().unwrap_or(0.0)
    };
    if pts.len() < 2 {
        return (None, fit_end);
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    if sxx == 0.0 {
        return (None, fit_end);
    }
    (Some(-sxy / sxx), fit_end)
}

/// `e_i(t) = |p_i - p0 - offset_i|` with steady mean over the trailing window.
pub fn tracking_metrics(log: &RunLog, offsets: &[DVector<f64>], steady_fraction: f64) -> Result<TrackingMetrics> {
    let n = log.layout.dim;
    let window = steady_window(log, steady_fraction);
    let rows = rows_in(log, window);
    let t = log.times();
    let mut agents = Vec::new();
    let mut series = Vec::new();
    for (i, off) in offsets.iter().enumerate() {
        let mut e = Vec::with_capacity(log.n_rows());
        for r in 0..log.n_rows() {
            let p = log.vector(r, &format!("a{}_p1", i + 1), n)?;
            let p0 = log.vector(r, "x0_p1", n)?;
            e.push((p - p0 - off).norm());
        }
        let steady: Vec<f64> = rows.iter().map(|&r| e[r]).collect();
        let steady_mean = mean(&steady);
        let (decay_rate, fit_end) = decay_rate(&t, &e, steady_mean);
        agents.push(AgentTracking {
            steady_mean,
            steady_max: steady.iter().copied().fold(f64::NAN, f64::max),
            decay_rate,
            fit_end,
        });
        series.push(e);
    }
    Ok(TrackingMetrics { window, agents, series })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorMetrics {
    pub threshold: f64,
    /// First time after which `max_i |p_hat_i - p0|` stays below the threshold.
    pub settle_time: Option<f64>,
    pub final_error: f64,
    #[serde(skip)]
    pub series: Vec<f64>,
}

/// First sample time after which `series` stays strictly below `threshold`.
pub fn settle_time(t: &[f64], series: &[f64], threshold: f64) -> Option<f64> {
    match series.iter().rposition(|&v| !(v < threshold)) {
        None => t.first().copied(),
        Some(r) if r + 1 < t.len() => Some(t[r + 1]),
        Some(_) => None,
    }
}

pub fn estimator_metrics(log: &RunLog, threshold: f64) -> Result<EstimatorMetrics> {
    let n = log.layout.dim;
    let mut series = vec![0.0f64; log.n_rows()];
    for r in 0..log.n_rows() {
        let p0 = log.vector(r, "x0_p1", n)?;
        for i in 0..log.layout.n_agents {
            let ph = log.vector(r, &format!("a{}_ph1", i + 1), n)?;
            series[r] = series[r].max((ph - &p0).norm());
        }
    }
    Ok(EstimatorMetrics {
        threshold,
        settle_time: settle_time(&log.times(), &series, threshold),
        final_error: series.last().copied().unwrap_or(f64::NAN),
        series,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormationMetrics {
    pub window: (f64, f64),
    /// Max over the window and agent pairs of `|(p_i - p_j) - (off_i - off_j)|`.
    pub max_pair_error: f64,
    pub mean_pair_error: f64,
}

pub fn formation_metrics(log: &RunLog, offsets: &[DVector<f64>], steady_fraction: f64) -> Result<FormationMetrics> {
    let n = log.layout.dim;
    let window = steady_window(log, steady_fraction);
    let (mut worst, mut sum, mut count) = (0.0f64, 0.0, 0usize);
    for r in rows_in(log, window) {
        let p: Vec<_> = (0..offsets.len())
            .map(|i| log.vector(r, &format!("a{}_p1", i + 1), n))
            .collect::<Result<_>>()?;
        for i in 0..offsets.len() {
            for j in (i + 1)..offsets.len() {
                let e = ((&p[i] - &p[j]) - (&offsets[i] - &offsets[j])).norm();
                worst = worst.max(e);
                sum += e;
                count += 1;
            }
        }
    }
    Ok(FormationMetrics {
        window,
        max_pair_error: worst,
        mean_pair_error: if count == 0 { f64::NAN } else { sum / count as f64 },
    })
}

/// Pairwise disagreement and per-agent norms of one weight snapshot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsensusSnapshot {
    pub label: String,
    pub t: f64,
    /// Per channel `max_{i,j} |W_ki - W_kj|`.
    pub max_pairwise: Vec<f64>,
    /// `[agent][channel]` norms.
    pub norms: Vec<Vec<f64>>,
}

pub fn consensus_snapshot(layout: &StateLayout, label: &str, t: f64, weights: &[f64]) -> ConsensusSnapshot {
    let nn = layout.n_neurons;
    let chan = |i: usize, k: usize| &weights[(i * layout.dim + k) * nn..][..nn];
    let norms: Vec<Vec<f64>> = (0..layout.n_agents)
        .map(|i| {
            (0..layout.dim)
                .map(|k| chan(i, k).iter().map(|w| w * w).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    let max_pairwise = (0..layout.dim)
        .map(|k| {
            let mut worst = 0.0f64;
            for i in 0..layout.n_agents {
                for j in (i + 1)..layout.n_agents {
                    let d: f64 = chan(i, k).iter().zip(chan(j, k)).map(|(a, b)| (a - b).powi(2)).sum();
                    worst = worst.max(d.sqrt());
                }
            }
            worst
        })
        .collect();
    ConsensusSnapshot {
        label: label.into(),
        t,
        max_pairwise,
        norms,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsensusMetrics {
    pub snapshots: Vec<ConsensusSnapshot>,
    /// Final per-channel `max_pairwise / max_i |W_ki|`.
    pub final_ratio: Vec<f64>,
    /// Per channel: largest `c(t2) / c(t1)` with `t1 < t2` over the last half.
    pub worst_rebound: Vec<f64>,
    /// Per channel: largest `q(t2) - q(t1)` with `t1 < t2` over the last half,
    /// where `q = c / max_i |W_ki|`.
    pub worst_rise: Vec<f64>,
}

/// Largest ratio `v[b] / v[a]` over `a < b`, ignoring exact zeros on both ends.
pub fn worst_rebound(v: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let mut running_min = f64::INFINITY;
    for &x in v {
        if running_min.is_finite() && running_min > 0.0 {
            worst = worst.max(x / running_min);
        } else if running_min == 0.0 && x > 0.0 {
            worst = f64::INFINITY;
        }
        running_min = running_min.min(x);
    }
    worst
}

/// Largest `v[b] - v[a]` over `a < b`; zero for non-increasing input.
pub fn worst_rise(v: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let mut running_min = f64::INFINITY;
    for &x in v {
        worst = worst.max(x - running_min);
        running_min = running_min.min(x);
    }
    worst
}

pub fn consensus_metrics(log: &RunLog) -> Result<ConsensusMetrics> {
    if log.layout.n_agents < 2 {
        return Err(Error::Log("weight consensus needs at least two agents".into()));
    }
    let snapshots: Vec<_> = log
        .checkpoints
        .iter()
        .filter(|c| c.label != MEAN_LABEL)
        .map(|c| consensus_snapshot(&log.layout, &c.label, c.t, &c.weights))
        .collect();
    let last = snapshots
        .iter()
        .max_by(|a, b| a.t.total_cmp(&b.t))
        .ok_or_else(|| Error::Log("no weight checkpoints".into()))?;
    let final_ratio = (0..log.layout.dim)
        .map(|k| {
            let top = last.norms.iter().map(|n| n[k]).fold(0.0, f64::max);
            if top == 0.0 {
                0.0
            } else {
                last.max_pairwise[k] / top
            }
        })
        .collect();
    let half = steady_window(log, 0.5);
    let rows = rows_in(log, half);
    let worst_rebound = (1..=log.layout.dim)
        .map(|k| {
            let c = log.column(&format!("cons{k}"))?;
            Ok(worst_rebound(&rows.iter().map(|&r| c[r]).collect::<Vec<_>>()))
        })
        .collect::<Result<_>>()?;
    let worst_rise = (1..=log.layout.dim)
        .map(|k| {
            let c = log.column(&format!("cons{k}"))?;
            let norms = (1..=log.layout.n_agents)
                .map(|i| log.column(&format!("a{i}_wnorm{k}")))
                .collect::<Result<Vec<_>>>()?;
            let q: Vec<f64> = rows
                .iter()
                .map(|&r| {
                    let top = norms.iter().map(|n| n[r]).fold(0.0, f64::max);
                    if top == 0.0 {
                        0.0
                    } else {
                        c[r] / top
                    }
                })
                .collect();
            Ok(worst_rise(&q))
        })
        .collect::<Result<_>>()?;
    Ok(ConsensusMetrics {
        snapshots,
        final_ratio,
        worst_rebound,
        worst_rise,
    })
}

/// Per `(agent, channel)` approximation statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelApproximation {
    pub agent: usize,
    pub channel: usize,
    pub rms_true: f64,
    /// `RMS(G - W_mean^T S)`.
    pub rms_error_mean: f64,
    /// `RMS(G - W(t)^T S)`.
    pub rms_error_instant: f64,
    /// `None` when `RMS(G) = 0`; the absolute values then apply.
    pub relative_mean: Option<f64>,
    pub relative_instant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApproximationMetrics {
    pub window: (f64, f64),
    pub channels: Vec<ChannelApproximation>,
    /// `RMS(fd - analytic) / RMS(analytic)` of the reference acceleration.
    pub beta_dot_fd_disagreement: f64,
}

/// Compares the true uncertainty along the logged trajectory with the mean
/// and instantaneous network outputs.
pub fn approximation_error(log: &RunLog, scn: &Scenario, window: (f64, f64)) -> Result<ApproximationMetrics> {
    let layout = log.layout;
    let n = layout.dim;
    let mean_w = log
        .checkpoint(MEAN_LABEL)
        .ok_or_else(|| Error::Log("mean weight snapshot missing".into()))?;
    let rows = rows_in(log, window);
    if rows.is_empty() {
        return Err(Error::EmptyWindow {
            start: window.0,
            end: window.1,
        });
    }
    let nn = layout.n_neurons;
    let mut channels = Vec::new();
    for i in 0..layout.n_agents {
        let mut g_true = vec![Vec::with_capacity(rows.len()); n];
        let mut e_mean = vec![Vec::with_capacity(rows.len()); n];
        let mut e_inst = vec![Vec::with_capacity(rows.len()); n];
        for &r in &rows {
            let x = network_input(log, r, i)?;
            let bd = log.vector(r, &format!("a{}_dbeta1", i + 1), n)?;
            let g = scn.plant.true_g(&DVector::from_column_slice(&x), &bd)?;
            let s = scn.grid.localized_regressor(&x, scn.regressor_radius)?;
            let inst = log.vector(r, &format!("a{}_nn1", i + 1), n)?;
            for k in 0..n {
                let w = &mean_w.weights[(i * n + k) * nn..][..nn];
                g_true[k].push(g[k]);
                e_mean[k].push(g[k] - s.dot(w));
                e_inst[k].push(g[k] - inst[k]);
            }
        }
        for k in 0..n {
            let rt = rms(g_true[k].iter().copied());
            let rm = rms(e_mean[k].iter().copied());
            let ri = rms(e_inst[k].iter().copied());
            channels.push(ChannelApproximation {
                agent: i,
                channel: k,
                rms_true: rt,
                rms_error_mean: rm,
                rms_error_instant: ri,
                relative_mean: (rt > 0.0).then(|| rm / rt),
                relative_instant: (rt > 0.0).then(|| ri / rt),
            });
        }
    }
    Ok(ApproximationMetrics {
        window,
        channels,
        beta_dot_fd_disagreement: beta_dot_disagreement(log, &rows)?,
    })
}

/// Centered differences of the logged virtual control against its logged
/// analytic rate, over interior rows of `rows`.
pub fn beta_dot_disagreement(log: &RunLog, rows: &[usize]) -> Result<f64> {
    let n = log.layout.dim;
    let t = log.times();
    let (mut num, mut den) = (0.0, 0.0);
    for &r in rows {
        if r == 0 || r + 1 >= log.n_rows() {
            continue;
        }
        for i in 0..log.layout.n_agents {
            let name = format!("a{}_beta1", i + 1);
            let fd = (log.vector(r + 1, &name, n)? - log.vector(r - 1, &name, n)?) / (t[r + 1] - t[r - 1]);
            let an = log.vector(r, &format!("a{}_dbeta1", i + 1), n)?;
            num += (fd - &an).norm_squared();
            den += an.norm_squared();
        }
    }
    Ok(if den == 0.0 { num.sqrt() } else { (num / den).sqrt() })
}

/// Excitation level of one window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeWindow {
    pub start: f64,
    pub end: f64,
    /// Smallest eigenvalue of the Gram integral.
    pub eta: f64,
    /// Smallest eigenvalue after scaling the Gram integral to unit diagonal.
    pub eta_normalized: f64,
}

/// Trapezoid Gram integral `sum w_r S_zeta(x_r) S_zeta(x_r)^T` over samples.
pub fn gram_integral(t: &[f64], s: &[DVector<f64>]) -> DMatrix<f64> {
    let m = s.first().map_or(0, |v| v.len());
    let mut g = DMatrix::zeros(m, m);
    for r in 0..t.len().saturating_sub(1) {
        let h = 0.5 * (t[r + 1] - t[r]);
        g.ger(h, &s[r], &s[r], 1.0);
        g.ger(h, &s[r + 1], &s[r + 1], 1.0);
    }
    g
}

/// `(eta, eta_normalized)` of a Gram matrix.
pub fn gram_levels(g: &DMatrix<f64>) -> (f64, f64) {
    if g.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eta = SymmetricEigen::new(g.clone()).eigenvalues.min();
    let d: Vec<f64> = (0..g.nrows()).map(|a| g[(a, a)]).collect();
    if d.iter().any(|&v| !(v > 0.0)) {
        return (eta, 0.0);
    }
    let gn = DMatrix::from_fn(g.nrows(), g.ncols(), |a, b| g[(a, b)] / (d[a] * d[b]).sqrt());
    (eta, SymmetricEigen::new(gn).eigenvalues.min())
}

/// Excitation of the regressor subvector `zeta` along `(t, x)` samples
/// restricted to `[start, start + length]`.
pub fn pe_metric(
    t: &[f64],
    xs: &[Vec<f64>],
    grid: &RbfGrid,
    zeta: &[usize],
    start: f64,
    length: f64,
) -> Result<PeWindow> {
    if zeta.is_empty() {
        return Err(Error::Parameter {
            name: "analysis.zeta_radius".into(),
            detail: "the localized neuron set is empty".into(),
        });
    }
    let slack = 1e-9 * (start + length).abs().max(1.0);
    let idx: Vec<usize> = (0..t.len())
        .filter(|&r| t[r] >= start - slack && t[r] <= start + length + slack)
        .collect();
    if idx.len() < 2 {
        return Err(Error::EmptyWindow {
            start,
            end: start + length,
        });
    }
    let tw: Vec<f64> = idx.iter().map(|&r| t[r]).collect();
    let s: Vec<DVector<f64>> = idx
        .iter()
        .map(|&r| DVector::from_iterator(zeta.len(), zeta.iter().map(|&j| grid.activation(&xs[r], j))))
        .collect();
    let (eta, eta_normalized) = gram_levels(&gram_integral(&tw, &s));
    Ok(PeWindow {
        start: tw[0],
        end: *tw.last().unwrap(),
        eta,
        eta_normalized,
    })
}

/// Every window of `length` whose start is a sample at or after `from`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeSweep {
    pub agent: usize,
    pub zeta_size: usize,
    pub windows: usize,
    pub worst: Option<PeWindow>,
    pub min_eta: f64,
}

pub fn pe_sweep(
    t: &[f64],
    xs: &[Vec<f64>],
    grid: &RbfGrid,
    zeta: &[usize],
    from: f64,
    length: f64,
    agent: usize,
) -> Result<PeSweep> {
    if zeta.is_empty() {
        return Err(Error::Parameter {
            name: "analysis.zeta_radius".into(),
            detail: format!("the localized neuron set of agent {} is empty", agent + 1),
        });
    }
    let s: Vec<DVector<f64>> = xs
        .iter()
        .map(|x| DVector::from_iterator(zeta.len(), zeta.iter().map(|&j| grid.activation(x, j))))
        .collect();
    let slack = 1e-9 * t.last().copied().unwrap_or(1.0).abs().max(1.0);
    let mut worst: Option<PeWindow> = None;
    let mut min_eta = f64::INFINITY;
    let mut windows = 0;
    let mut end = 0;
    for a in 0..t.len() {
        if t[a] < from - slack {
            continue;
        }
        let stop = t[a] + length;
        while end < t.len() && t[end] < stop - slack {
            end += 1;
        }
        if end >= t.len() {
            break;
        }
        let (eta, eta_normalized) = gram_levels(&gram_integral(&t[a..=end], &s[a..=end]));
        windows += 1;
        min_eta = min_eta.min(eta);
        if worst.as_ref().map_or(true, |w| eta_normalized < w.eta_normalized) {
            worst = Some(PeWindow {
                start: t[a],
                end: t[end],
                eta,
                eta_normalized,
            });
        }
    }
    Ok(PeSweep {
        agent,
        zeta_size: zeta.len(),
        windows,
        worst,
        min_eta: if windows == 0 { f64::NAN } else { min_eta },
    })
}

/// Samples `(t, x_i)` of agent `i` on rows at or after `from`.
pub fn agent_samples(log: &RunLog, i: usize, from: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let t = log.times();
    let mut ts = Vec::new();
    let mut xs = Vec::new();
    for r in 0..log.n_rows() {
        if t[r] >= from {
            ts.push(t[r]);
            xs.push(network_input(log, r, i)?);
        }
    }
    Ok((ts, xs))
}

/// Far-neuron weights relative to the localized ones at the final snapshot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FarNeuronMetrics {
    /// `false` when the far set is empty.
    pub applicable: bool,
    /// `[agent][channel]` max |w| over the far set.
    pub max_far: Vec<Vec<f64>>,
    /// `[agent][channel]` max |w| over the localized set.
    pub max_near: Vec<Vec<f64>>,
    /// Largest `max_far / max_near` over agents and channels.
    pub worst_ratio: f64,
}

pub fn far_neuron_check(layout: &StateLayout, weights: &[f64], partition: &ZetaPartition) -> FarNeuronMetrics {
    let nn = layout.n_neurons;
    let max_over = |i: usize, k: usize, set: &[usize]| {
        let w = &weights[(i * layout.dim + k) * nn..][..nn];
        set.iter().map(|&j| w[j].abs()).fold(0.0, f64::max)
    };
    let max_far: Vec<Vec<f64>> = (0..layout.n_agents)
        .map(|i| (0..layout.dim).map(|k| max_over(i, k, &partition.zeta_bar)).collect())
        .collect();
    let max_near: Vec<Vec<f64>> = (0..layout.n_agents)
        .map(|i| (0..layout.dim).map(|k| max_over(i, k, &partition.zeta)).collect())
        .collect();
    let mut worst_ratio = 0.0f64;
    for (f, m) in max_far.iter().flatten().zip(max_near.iter().flatten()) {
        let r = if *m > 0.0 {
            f / m
        } else if *f > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        worst_ratio = worst_ratio.max(r);
    }
    FarNeuronMetrics {
        applicable: !partition.zeta_bar.is_empty(),
        max_far,
        max_near,
        worst_ratio,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundednessMetrics {
    pub all_finite: bool,
    pub completed: bool,
    pub sup_z1: f64,
    pub sup_z2: f64,
    pub sup_w_inf: f64,
    pub ceilings: Ceilings,
}

pub fn boundedness(log: &RunLog, ceilings: &Ceilings) -> Result<BoundednessMetrics> {
    let n = log.layout.dim;
    let t = log.times();
    let w = log.column("w_inf")?;
    let (mut z1, mut z2, mut wi) = (0.0f64, 0.0f64, 0.0f64);
    let mut finite = log.data.iter().all(|v| v.is_finite());
    for r in 0..log.n_rows() {
        if t[r] < ceilings.after {
            continue;
        }
        for i in 1..=log.layout.n_agents {
            z1 = z1.max(log.vector(r, &format!("a{i}_z1_1"), n)?.norm());
            z2 = z2.max(log.vector(r, &format!("a{i}_z2_1"), n)?.norm());
        }
        wi = wi.max(w[r]);
    }
    finite &= z1.is_finite() && z2.is_finite() && wi.is_finite();
    Ok(BoundednessMetrics {
        all_finite: finite,
        completed: log.divergence.is_none(),
        sup_z1: z1,
        sup_z2: z2,
        sup_w_inf: wi,
        ceilings: ceilings.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub id: u8,
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// All metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub params: AnalysisParams,
    pub estimator: EstimatorMetrics,
    pub tracking: TrackingMetrics,
    pub formation: FormationMetrics,
    pub consensus: ConsensusMetrics,
    pub approximation: Option<ApproximationMetrics>,
    pub partition_sizes: (usize, usize),
    pub far_neurons: FarNeuronMetrics,
    pub excitation: Vec<PeSweep>,
    pub boundedness: BoundednessMetrics,
    pub verdicts: Vec<Verdict>,
}

/// Union localized set of all agents' samples at or after `from`.
pub fn trajectory_partition(log: &RunLog, grid: &RbfGrid, from: f64, radius: f64) -> Result<ZetaPartition> {
    let mut samples = Vec::new();
    for i in 0..log.layout.n_agents {
        samples.extend(agent_samples(log, i, from)?.1);
    }
    Ok(partition_zeta(grid, samples.iter().map(|v| v.as_slice()), radius))
}

pub fn analyze(log: &RunLog, scn: &Scenario, params: &AnalysisParams) -> Result<MetricReport> {
    log.check_schema()?;
    let t_end = log.times().last().copied().unwrap_or(0.0);
    for w in [
        steady_window(log, params.steady_fraction),
        (params.transient_fraction * t_end, t_end),
    ] {
        if rows_in(log, w).len() < 2 {
            return Err(Error::EmptyWindow { start: w.0, end: w.1 });
        }
    }
    let estimator = estimator_metrics(log, limits::ESTIMATOR_FRACTION * params.leader_amplitude)?;
    let tracking = tracking_metrics(log, &scn.formation.offsets, params.steady_fraction)?;
    let formation = formation_metrics(log, &scn.formation.offsets, params.steady_fraction)?;
    let consensus = consensus_metrics(log)?;
    let mean_window = log
        .checkpoint(MEAN_LABEL)
        .map(|_| steady_window(log, params.steady_fraction));
    let approximation = match mean_window {
        Some(w) => Some(approximation_error(log, scn, w)?),
        None => None,
    };
    let steady_from = steady_window(log, params.steady_fraction).0;
    let partition = trajectory_partition(log, &scn.grid, steady_from, params.zeta_radius)?;
    let final_w = log
        .final_checkpoint()
        .ok_or_else(|| Error::Log("no weight checkpoints".into()))?;
    let far_neurons = far_neuron_check(&log.layout, &final_w.weights, &partition);
    let pe_from = params.transient_fraction * t_end;
    let mut excitation = Vec::new();
    for i in 0..log.layout.n_agents {
        let (t, xs) = agent_samples(log, i, pe_from)?;
        let own = partition_zeta(&scn.grid, xs.iter().map(|v| v.as_slice()), params.zeta_radius);
        excitation.push(pe_sweep(&t, &xs, &scn.grid, &own.zeta, pe_from, params.pe_window, i)?);
    }
    let boundedness = boundedness(log, &params.ceilings)?;

    let mut report = MetricReport {
        params: params.clone(),
        estimator,
        tracking,
        formation,
        consensus,
        approximation,
        partition_sizes: (partition.zeta.len(), partition.zeta_bar.len()),
        far_neurons,
        excitation,
        boundedness,
        verdicts: Vec::new(),
    };
    report.verdicts = verdicts(&report);
    Ok(report)
}

fn fmt_list(v: impl Iterator<Item = f64>) -> String {
    let parts: Vec<String> = v.map(|x| format!("{x:.4e}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Pass/fail per criterion computed from a report.
pub fn verdicts(r: &MetricReport) -> Vec<Verdict> {
    let mut out = Vec::new();
    let est_pass = r.estimator.settle_time.is_some_and(|t| t <= limits::ESTIMATOR_DEADLINE);
    out.push(Verdict {
        id: 1,
        name: "observer convergence".into(),
        pass: est_pass,
        detail: format!(
            "max position-estimate error settles below {:.3} at t = {:?} (deadline {} s)",
            r.estimator.threshold,
            r.estimator.settle_time,
            limits::ESTIMATOR_DEADLINE
        ),
    });

    let tr_pass = r
        .tracking
        .agents
        .iter()
        .all(|a| a.steady_mean <= limits::TRACKING_STEADY_MAX && a.decay_rate.is_some_and(|d| d > 0.0));
    out.push(Verdict {
        id: 2,
        name: "tracking".into(),
        pass: tr_pass,
        detail: format!(
            "steady mean errors {}, decay rates {:?}",
            fmt_list(r.tracking.agents.iter().map(|a| a.steady_mean)),
            r.tracking.agents.iter().map(|a| a.decay_rate).collect::<Vec<_>>()
        ),
    });

    out.push(Verdict {
        id: 3,
        name: "formation geometry".into(),
        pass: r.formation.max_pair_error <= limits::FORMATION_MAX,
        detail: format!(
            "max pairwise displacement error {:.4e} (limit {})",
            r.formation.max_pair_error,
            limits::FORMATION_MAX
        ),
    });

    let cons_pass = r.consensus.final_ratio.iter().all(|&x| x <= limits::CONSENSUS_RATIO)
        && r.consensus.worst_rise.iter().all(|&x| x <= limits::CONSENSUS_RIPPLE);
    out.push(Verdict {
        id: 4,
        name: "weight consensus".into(),
        pass: cons_pass,
        detail: format!(
            "final disagreement ratios {} (limit {}), worst rise of the ratio over the last half {} (limit {}), raw rebound factors {}",
            fmt_list(r.consensus.final_ratio.iter().copied()),
            limits::CONSENSUS_RATIO,
            fmt_list(r.consensus.worst_rise.iter().copied()),
            limits::CONSENSUS_RIPPLE,
            fmt_list(r.consensus.worst_rebound.iter().copied())
        ),
    });

    let (approx_pass, approx_detail) = match &r.approximation {
        Some(a) => {
            let worst = a.channels.iter().filter_map(|c| c.relative_mean).fold(0.0f64, f64::max);
            let far_ok = !r.far_neurons.applicable || r.far_neurons.worst_ratio <= limits::FAR_NEURON_RATIO;
            (
                worst <= limits::APPROXIMATION_RELATIVE_RMS && far_ok,
                format!(
                    "worst relative RMS {:.4e} (limit {}), far/near weight ratio {:.4e} (limit {}), reference-acceleration difference check {:.2e}",
                    worst,
                    limits::APPROXIMATION_RELATIVE_RMS,
                    r.far_neurons.worst_ratio,
                    limits::FAR_NEURON_RATIO,
                    a.beta_dot_fd_disagreement
                ),
            )
        }
        None => (false, "mean weights unavailable".into()),
    };
    out.push(Verdict {
        id: 5,
        name: "learning accuracy".into(),
        pass: approx_pass,
        detail: approx_detail,
    });

    let pe_pass = !r.excitation.is_empty()
        && r.excitation.iter().all(|s| {
            s.windows > 0
                && s.worst
                    .as_ref()
                    .is_some_and(|w| w.eta_normalized > limits::PE_TOLERANCE)
        });
    out.push(Verdict {
        id: 7,
        name: "persistent excitation".into(),
        pass: pe_pass,
        detail: format!(
            "per-agent worst normalized eta {}, raw eta {}",
            fmt_list(
                r.excitation
                    .iter()
                    .map(|s| s.worst.as_ref().map_or(f64::NAN, |w| w.eta_normalized))
            ),
            fmt_list(r.excitation.iter().map(|s| s.min_eta))
        ),
    });

    let b = &r.boundedness;
    out.push(Verdict {
        id: 9,
        name: "boundedness".into(),
        pass: b.all_finite
            && b.completed
            && b.sup_z1 <= b.ceilings.z1
            && b.sup_z2 <= b.ceilings.z2
            && b.sup_w_inf <= b.ceilings.w_inf,
        detail: format!(
            "sup |z1| = {:.4e} (<= {}), sup |z2| = {:.4e} (<= {}), sup |W|inf = {:.4e} (<= {})",
            b.sup_z1, b.ceilings.z1, b.sup_z2, b.ceilings.z2, b.sup_w_inf, b.ceilings.w_inf
        ),
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rbf::{build_grid, Widths};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn decay_fit_recovers_rate() {
        let t: Vec<f64> = (0..200).map(|k| k as f64 * 0.05).collect();
        let e: Vec<f64> = t.iter().map(|&s| 3.0 * (-0.7 * s).exp()).collect();
        let (rate, end) = decay_rate(&t, &e, 0.01);
        assert_relative_eq!(rate.unwrap(), 0.7, max_relative = 1e-9);
        assert!(end > 5.8 && end < 5.95, "{end}");
    }

    #[test]
    fn settle_time_cases() {
        let t = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(settle_time(&t, &[5.0, 0.5, 2.0, 0.1], 1.0), Some(3.0));
        assert_eq!(settle_time(&t, &[0.1; 4], 1.0), Some(0.0));
        assert_eq!(settle_time(&t, &[0.1, 0.1, 0.1, 3.0], 1.0), None);
    }

    #[test]
    fn rebound_cases() {
        assert_relative_eq!(worst_rebound(&[3.0, 2.0, 1.0]), 2.0 / 3.0);
        assert_relative_eq!(worst_rebound(&[3.0, 2.0, 2.2]), 1.1);
        assert_eq!(worst_rebound(&[0.0, 0.0]), 0.0);
        assert_eq!(worst_rise(&[3.0, 2.0, 1.0]), 0.0);
        assert_relative_eq!(worst_rise(&[0.5, 0.1, 0.3, 0.2]), 0.2);
    }

    #[test]
    fn consensus_snapshot_cases() {
        let layout = StateLayout {
            dim: 1,
            n_agents: 2,
            n_neurons: 3,
        };
        let same = consensus_snapshot(&layout, "x", 0.0, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(same.max_pairwise, vec![0.0]);
        let opp = consensus_snapshot(&layout, "x", 0.0, &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        assert_eq!(opp.max_pairwise, vec![2.0]);
        assert_eq!(opp.norms, vec![vec![1.0], vec![1.0]]);
    }

    fn grid1() -> RbfGrid {
        build_grid(1, 5, &[(-2.0, 2.0)], Widths::Uniform(0.5), 100).unwrap()
    }

    #[test]
    fn stationary_trajectory_is_not_exciting() {
        let g = grid1();
        let t: Vec<f64> = (0..101).map(|k| k as f64 * 0.1).collect();
        let xs = vec![vec![0.3]; t.len()];
        let w = pe_metric(&t, &xs, &g, &[1, 2, 3], 0.0, 10.0).unwrap();
        assert!(w.eta_normalized < limits::PE_TOLERANCE, "{}", w.eta_normalized);
        assert!(w.eta.abs() < 1e-12);
        // one neuron at its center: eta = T0
        let xs = vec![vec![0.0]; t.len()];
        let w = pe_metric(&t, &xs, &g, &[2], 0.0, 10.0).unwrap();
        assert_relative_eq!(w.eta, 10.0, max_relative = 1e-12);
        assert!(pe_metric(&t, &xs, &g, &[], 0.0, 10.0).is_err());
    }

    #[test]
    fn moving_trajectory_is_exciting() {
        let g = grid1();
        let t: Vec<f64> = (0..629).map(|k| k as f64 * 0.01).collect();
        let xs: Vec<Vec<f64>> = t.iter().map(|&s| vec![1.5 * s.sin()]).collect();
        let sweep = pe_sweep(&t, &xs, &g, &[1, 2, 3], 0.0, 3.0, 0).unwrap();
        assert!(sweep.windows > 100);
        assert!(sweep.worst.unwrap().eta_normalized > 1e-3);
    }

    #[test]
    fn far_neuron_cases() {
        let layout = StateLayout {
            dim: 1,
            n_agents: 1,
            n_neurons: 4,
        };
        let part = ZetaPartition {
            zeta: vec![0, 1],
            zeta_bar: vec![2, 3],
            radius: 1.0,
        };
        let m = far_neuron_check(&layout, &[0.0; 4], &part);
        assert_eq!(m.worst_ratio, 0.0);
        let m = far_neuron_check(&layout, &[2.0, -4.0, 0.1, -0.2], &part);
        assert_relative_eq!(m.worst_ratio, 0.05);
        let none = ZetaPartition {
            zeta: vec![0, 1, 2, 3],
            zeta_bar: vec![],
            radius: 1e9,
        };
        assert!(!far_neuron_check(&layout, &[1.0; 4], &none).applicable);
    }

    proptest! {
        #[test]
        fn gram_is_monotone_in_window(
            xs in prop::collection::vec(-2.0f64..2.0, 20..60),
            split in 0.2f64..0.9,
        ) {
            let g = grid1();
            let t: Vec<f64> = (0..xs.len()).map(|k| k as f64 * 0.1).collect();
            let s: Vec<DVector<f64>> = xs
                .iter()
                .map(|&x| DVector::from_iterator(5, (0..5).map(|j| g.activation(&[x], j))))
                .collect();
            let cut = ((xs.len() as f64 * split) as usize).max(2);
            let small = gram_integral(&t[..cut], &s[..cut]);
            let big = gram_integral(&t, &s);
            let lo = SymmetricEigen::new(small).eigenvalues.min();
            let hi = SymmetricEigen::new(big).eigenvalues.min();
            prop_assert!(hi >= lo - 1e-12);
        }
    }
}
