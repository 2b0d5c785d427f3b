//! Gaussian RBF networks on a regular lattice of centers.
//!
//! Neuron `j` sits at lattice multi-index `(m_0, .., m_{q-1})` with
//! `j = sum_d m_d * per_dim^(q-1-d)` (axis 0 most significant). One grid and
//! one regressor `S(x)` are shared by every output channel.

use nalgebra::DVector;

use crate::error::{check_len, Error, Result};

/// Default cap on the number of neurons a grid may allocate.
pub const DEFAULT_MAX_NEURONS: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq)]
pub enum Widths {
    Uniform(f64),
    PerNeuron(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbfGrid {
    dim: usize,
    per_dim: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    spacing: Vec<f64>,
    widths: Widths,
    n_neurons: usize,
}

/// Lattice grid with `per_dim` evenly spaced centers per axis, endpoints included.
pub fn build_grid(
    dim_q: usize,
    per_dim: usize,
    bounds: &[(f64, f64)],
    widths: Widths,
    max_neurons: usize,
) -> Result<RbfGrid> {
    if dim_q == 0 {
        return Err(Error::Parameter {
            name: "rbf.dim".into(),
            detail: "input dimension must be positive".into(),
        });
    }
    if per_dim < 2 {
        return Err(Error::Parameter {
            name: "rbf.per_dim".into(),
            detail: format!("need at least 2 centers per axis, got {per_dim}"),
        });
    }
    check_len("rbf bounds", dim_q, bounds.len())?;
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Parameter {
                name: format!("rbf.bounds[{d}]"),
                detail: format!("need finite lo < hi, got [{lo}, {hi}]"),
            });
        }
    }
    let requested = (per_dim as u128).checked_pow(dim_q as u32).unwrap_or(u128::MAX);
    if requested > max_neurons as u128 {
        return Err(Error::GridTooLarge {
            requested,
            cap: max_neurons,
        });
    }
    let n_neurons = requested as usize;
    match &widths {
        Widths::Uniform(w) => {
            if !(*w > 0.0) || !w.is_finite() {
                return Err(Error::Parameter {
                    name: "rbf.width".into(),
                    detail: format!("width must be positive, got {w}"),
                });
            }
        }
        Widths::PerNeuron(ws) => {
            check_len("per-neuron widths", n_neurons, ws.len())?;
            if let Some((j, w)) = ws.iter().enumerate().find(|(_, w)| !(**w > 0.0) || !w.is_finite()) {
                return Err(Error::Parameter {
                    name: format!("rbf.widths[{j}]"),
                    detail: format!("width must be positive, got {w}"),
                });
            }
        }
    }
    let lower: Vec<f64> = bounds.iter().map(|b| b.0).collect();
    let upper: Vec<f64> = bounds.iter().map(|b| b.1).collect();
    let spacing = bounds
        .iter()
        .map(|&(lo, hi)| (hi - lo) / (per_dim - 1) as f64)
        .collect();
    Ok(RbfGrid {
        dim: dim_q,
        per_dim,
        lower,
        upper,
        spacing,
        widths,
        n_neurons,
    })
}

impl RbfGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn per_dim(&self) -> usize {
        self.per_dim
    }

    pub fn n_neurons(&self) -> usize {
        self.n_neurons
    }

    pub fn widths(&self) -> &Widths {
        &self.widths
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.lower.iter().copied().zip(self.upper.iter().copied()).collect()
    }

    /// Coordinate of lattice point `m` on axis `d`.
    pub fn axis_value(&self, d: usize, m: usize) -> f64 {
        let lo = self.lower[d];
        let hi = self.upper[d];
        lo + (hi - lo) * (m as f64 / (self.per_dim - 1) as f64)
    }

    pub fn axis_values(&self, d: usize) -> Vec<f64> {
        (0..self.per_dim).map(|m| self.axis_value(d, m)).collect()
    }

    pub fn multi_index(&self, mut j: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim];
        for d in (0..self.dim).rev() {
            idx[d] = j % self.per_dim;
            j /= self.per_dim;
        }
        idx
    }

    pub fn flat_index(&self, multi: &[usize]) -> Option<usize> {
        if multi.len() != self.dim || multi.iter().any(|&m| m >= self.per_dim) {
            return None;
        }
        Some(multi.iter().fold(0, |acc, &m| acc * self.per_dim + m))
    }

    pub fn center(&self, j: usize) -> Vec<f64> {
        self.multi_index(j)
            .iter()
            .enumerate()
            .map(|(d, &m)| self.axis_value(d, m))
            .collect()
    }

    pub fn width(&self, j: usize) -> f64 {
        match &self.widths {
            Widths::Uniform(w) => *w,
            Widths::PerNeuron(ws) => ws[j],
        }
    }

    pub fn max_width(&self) -> f64 {
        match &self.widths {
            Widths::Uniform(w) => *w,
            Widths::PerNeuron(ws) => ws.iter().copied().fold(0.0, f64::max),
        }
    }

    /// Euclidean length of the box diagonal.
    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| (hi - lo).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn squared_distance(&self, x: &[f64], j: usize) -> f64 {
        self.multi_index(j)
            .iter()
            .enumerate()
            .map(|(d, &m)| (x[d] - self.axis_value(d, m)).powi(2))
            .sum()
    }

    /// Single Gaussian activation `exp(-|x - xi_j|^2 / gamma_j)`.
    pub fn activation(&self, x: &[f64], j: usize) -> f64 {
        (-self.squared_distance(x, j) / self.width(j)).exp()
    }

    /// Dense regressor `S(x)` over every neuron.
    pub fn regressor(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_len("regressor input", self.dim, x.len())?;
        Ok(DVector::from_fn(self.n_neurons, |j, _| self.activation(x, j)))
    }

    /// Neurons whose centers lie within `radius` of `x`, in ascending index order.
    pub fn neighbors_within(&self, x: &[f64], radius: f64, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let r2 = radius * radius;
        // candidate lattice indices per axis
        let mut ranges = Vec::with_capacity(self.dim);
        for d in 0..self.dim {
            let h = self.spacing[d];
            let lo = ((x[d] - radius - self.lower[d]) / h).ceil().max(0.0);
            let hi = ((x[d] + radius - self.lower[d]) / h)
                .floor()
                .min((self.per_dim - 1) as f64);
            if !(lo <= hi) {
                return;
            }
            ranges.push((lo as usize, hi as usize));
        }
        let mut idx = vec![0usize; self.dim];
        self.walk(x, r2, &ranges, 0, 0, 0.0, &mut idx, out);
    }

    #[allow(clippy::too_many_arguments)]
    fn walk(
        &self,
        x: &[f64],
        r2: f64,
        ranges: &[(usize, usize)],
        d: usize,
        flat: usize,
        acc: f64,
        idx: &mut [usize],
        out: &mut Vec<(usize, f64)>,
    ) {
        if d == self.dim {
            out.push((flat, acc));
            return;
        }
        let (lo, hi) = ranges[d];
        for m in lo..=hi {
            let delta = x[d] - self.axis_value(d, m);
            let next = acc + delta * delta;
            if next <= r2 {
                idx[d] = m;
                self.walk(x, r2, ranges, d + 1, flat * self.per_dim + m, next, idx, out);
            }
        }
    }

    /// Sparse regressor restricted to centers with `|x - xi_i| <= radius`.
    pub fn localized_regressor(&self, x: &[f64], radius: f64) -> Result<SparseRegressor> {
        check_len("regressor input", self.dim, x.len())?;
        let mut entries = Vec::new();
        self.localized_into(x, radius, &mut entries);
        Ok(SparseRegressor { entries })
    }

    /// Allocation-free variant of [`RbfGrid::localized_regressor`] used in the hot loop.
    pub(crate) fn localized_into(&self, x: &[f64], radius: f64, out: &mut Vec<(usize, f64)>) {
        self.neighbors_within(x, radius, out);
        for e in out.iter_mut() {
            e.1 = (-e.1 / self.width(e.0)).exp();
        }
    }

    /// Worst-case change of `W^T S` from dropping every center farther than `radius`.
    pub fn tail_bound(&self, radius: f64, max_abs_weight: f64) -> f64 {
        self.n_neurons as f64 * (-radius * radius / self.max_width()).exp() * max_abs_weight
    }
}

/// `(neuron index, activation)` pairs in ascending index order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRegressor {
    pub entries: Vec<(usize, f64)>,
}

impl SparseRegressor {
    pub fn from_dense(s: &DVector<f64>) -> Self {
        Self {
            entries: s.iter().copied().enumerate().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        self.entries.iter().map(|&(j, s)| w[j] * s).sum()
    }
}

/// `output_k = W_k^T S` for each channel weight vector.
pub fn nn_output(weights: &[&[f64]], s: &SparseRegressor) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(weights.len());
    for (k, w) in weights.iter().enumerate() {
        if let Some(&(j, _)) = s.entries.last() {
            if j >= w.len() {
                return Err(Error::Dimension {
                    context: "nn_output weights",
                    expected: j + 1,
                    actual: w.len(),
                });
            }
        }
        out[k] = s.dot(w);
    }
    Ok(out)
}

/// Estimated weights of every agent and output channel, stored agent-major,
/// then channel, then neuron. Starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBank {
    n_agents: usize,
    n_outputs: usize,
    n_neurons: usize,
    data: Vec<f64>,
}

impl WeightBank {
    pub fn zeros(n_agents: usize, n_outputs: usize, n_neurons: usize) -> Self {
        Self {
            n_agents,
            n_outputs,
            n_neurons,
            data: vec![0.0; n_agents * n_outputs * n_neurons],
        }
    }

    pub fn from_flat(n_agents: usize, n_outputs: usize, n_neurons: usize, data: Vec<f64>) -> Result<Self> {
        check_len("weight bank", n_agents * n_outputs * n_neurons, data.len())?;
        Ok(Self {
            n_agents,
            n_outputs,
            n_neurons,
            data,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn n_neurons(&self) -> usize {
        self.n_neurons
    }

    pub fn offset(&self, agent: usize, k: usize) -> usize {
        (agent * self.n_outputs + k) * self.n_neurons
    }

    pub fn channel(&self, agent: usize, k: usize) -> &[f64] {
        let o = self.offset(agent, k);
        &self.data[o..o + self.n_neurons]
    }

    pub fn channel_mut(&mut self, agent: usize, k: usize) -> &mut [f64] {
        let o = self.offset(agent, k);
        &mut self.data[o..o + self.n_neurons]
    }

    pub fn agent_channels(&self, agent: usize) -> Vec<&[f64]> {
        (0..self.n_outputs).map(|k| self.channel(agent, k)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Arithmetic mean of the weight samples whose time lies in `[t_a, t_b]`.
pub fn mean_weights(history: &[(f64, &[f64])], t_a: f64, t_b: f64) -> Result<Vec<f64>> {
    if !(t_b > t_a) {
        return Err(Error::EmptyWindow { start: t_a, end: t_b });
    }
    let mut acc = MeanAccumulator::new(history.first().map_or(0, |h| h.1.len()), t_a, t_b);
    for &(t, w) in history {
        if acc.contains(t) {
            check_len("weight history sample", acc.sum.len(), w.len())?;
            acc.add(w);
        }
    }
    acc.mean()
}

/// Running sum for the post-transient mean weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanAccumulator {
    sum: Vec<f64>,
    count: usize,
    t_a: f64,
    t_b: f64,
}

impl MeanAccumulator {
    pub fn new(len: usize, t_a: f64, t_b: f64) -> Self {
        Self {
            sum: vec![0.0; len],
            count: 0,
            t_a,
            t_b,
        }
    }

    pub fn window(&self) -> (f64, f64) {
        (self.t_a, self.t_b)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn contains(&self, t: f64) -> bool {
        // small relative slack so window edges survive rounding
        t >= self.t_a - 1e-9 * self.t_b.abs().max(1.0) && t <= self.t_b + 1e-9 * self.t_b.abs().max(1.0)
    }

    pub fn add(&mut self, w: &[f64]) {
        for (s, x) in self.sum.iter_mut().zip(w) {
            *s += x;
        }
        self.count += 1;
    }

    /// Adds only the listed entries; the rest are known to be zero.
    pub fn add_indices(&mut self, w: &[f64], indices: impl Iterator<Item = usize>) {
        for i in indices {
            self.sum[i] += w[i];
        }
        self.count += 1;
    }

    pub fn mean(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::EmptyWindow {
                start: self.t_a,
                end: self.t_b,
            });
        }
        let n = self.count as f64;
        Ok(self.sum.iter().map(|s| s / n).collect())
    }
}

/// Neurons near (`zeta`) and far from (`zeta_bar`) a set of trajectory samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ZetaPartition {
    pub zeta: Vec<usize>,
    pub zeta_bar: Vec<usize>,
    pub radius: f64,
}

pub fn partition_zeta<'a>(grid: &RbfGrid, samples: impl IntoIterator<Item = &'a [f64]>, radius: f64) -> ZetaPartition {
    let mut near = vec![false; grid.n_neurons()];
    let mut buf = Vec::new();
    for x in samples {
        grid.neighbors_within(x, radius, &mut buf);
        for &(j, _) in &buf {
            near[j] = true;
        }
    }
    let (zeta, zeta_bar): (Vec<usize>, Vec<usize>) = (0..grid.n_neurons()).partition(|&j| near[j]);
    ZetaPartition { zeta, zeta_bar, radius }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn vessel_grid() -> RbfGrid {
        build_grid(6, 4, &[(-100.0, 100.0); 6], Widths::Uniform(90.0), DEFAULT_MAX_NEURONS).unwrap()
    }

    #[test]
    fn vessel_grid_has_4096_centers() {
        let g = vessel_grid();
        assert_eq!(g.n_neurons(), 4096);
        let axis = g.axis_values(0);
        let expected = [-100.0, -100.0 / 3.0, 100.0 / 3.0, 100.0];
        for (a, e) in axis.iter().zip(expected) {
            assert_relative_eq!(*a, e, max_relative = 1e-15);
        }
    }

    #[test]
    fn small_grids() {
        let g = build_grid(1, 2, &[(0.0, 1.0)], Widths::Uniform(1.0), 100).unwrap();
        assert_eq!(g.center(0), vec![0.0]);
        assert_eq!(g.center(1), vec![1.0]);
        let g = build_grid(2, 3, &[(-1.0, 1.0); 2], Widths::Uniform(1.0), 100).unwrap();
        assert_eq!(g.n_neurons(), 9);
        assert!((0..9).any(|j| g.center(j) == vec![0.0, 0.0]));
    }

    #[test]
    fn memory_cap_and_bad_inputs() {
        assert!(matches!(
            build_grid(6, 4, &[(-1.0, 1.0); 6], Widths::Uniform(1.0), 4095),
            Err(Error::GridTooLarge { requested: 4096, .. })
        ));
        assert!(build_grid(1, 1, &[(0.0, 1.0)], Widths::Uniform(1.0), 10).is_err());
        assert!(build_grid(1, 2, &[(1.0, 0.0)], Widths::Uniform(1.0), 10).is_err());
        assert!(build_grid(1, 2, &[(0.0, 1.0)], Widths::Uniform(0.0), 10).is_err());
    }

    #[test]
    fn gaussian_values() {
        let g = vessel_grid();
        let c = g.center(1234);
        assert_eq!(g.activation(&c, 1234), 1.0);
        // |x - xi|^2 = gamma
        let mut x = c.clone();
        x[0] += 90f64.sqrt();
        assert_relative_eq!(g.activation(&x, 1234), (-1.0f64).exp(), max_relative = 1e-14);
        let mut x = c.clone();
        x[3] += 3.0;
        assert_relative_eq!(g.activation(&x, 1234), 0.904_837_418_035_959_6, max_relative = 1e-14);
    }

    #[test]
    fn localized_cases() {
        let g = build_grid(2, 3, &[(-1.0, 1.0); 2], Widths::Uniform(0.5), 100).unwrap();
        let x = [0.3, -0.2];
        let full = g.regressor(&x).unwrap();
        let loc = g.localized_regressor(&x, 10.0 * g.diameter()).unwrap();
        assert_eq!(loc, SparseRegressor::from_dense(&full));
        let at_center = g.center(4);
        let loc = g.localized_regressor(&at_center, 0.5 * g.min_spacing()).unwrap();
        assert_eq!(loc.entries, vec![(4, 1.0)]);
    }

    #[test]
    fn vessel_tail_entries_are_tiny() {
        let g = vessel_grid();
        let x = [12.0, -40.0, 70.0, 5.0, -90.0, 33.0];
        let full = g.regressor(&x).unwrap();
        let loc = g.localized_regressor(&x, 45.0).unwrap();
        let kept: std::collections::HashSet<usize> = loc.entries.iter().map(|e| e.0).collect();
        let bound = (-22.5f64).exp();
        assert!(bound < 1.7e-10);
        for j in 0..g.n_neurons() {
            if !kept.contains(&j) {
                assert!(full[j] < bound);
            }
        }
    }

    #[test]
    fn nn_output_cases() {
        let g = vessel_grid();
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let s = SparseRegressor::from_dense(&g.regressor(&x).unwrap());
        let zero = vec![0.0; 4096];
        let out = nn_output(&[&zero, &zero], &s).unwrap();
        assert_eq!(out, DVector::zeros(2));
        let mut onehot = vec![0.0; 4096];
        onehot[2000] = 1.0;
        let out = nn_output(&[&onehot], &s).unwrap();
        assert_eq!(out[0], g.activation(&x, 2000));
        assert!(nn_output(&[&onehot[..10]], &s).is_err());
    }

    #[test]
    fn mean_weights_cases() {
        let w = vec![1.0, -2.0];
        let hist: Vec<(f64, &[f64])> = (0..5).map(|i| (i as f64, w.as_slice())).collect();
        assert_eq!(mean_weights(&hist, 0.0, 4.0).unwrap(), w);
        assert_eq!(mean_weights(&hist, 2.0, 2.5).unwrap(), w);
        assert!(mean_weights(&hist, 4.5, 5.0).is_err());
        assert!(mean_weights(&hist, 3.0, 3.0).is_err());

        let ramp: Vec<Vec<f64>> = (0..=1000).map(|i| vec![4.0 * i as f64 / 1000.0]).collect();
        let hist: Vec<(f64, &[f64])> = ramp
            .iter()
            .enumerate()
            .map(|(i, w)| (i as f64 / 1000.0, w.as_slice()))
            .collect();
        assert_relative_eq!(mean_weights(&hist, 0.0, 1.0).unwrap()[0], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn zeta_cases() {
        let g = build_grid(2, 4, &[(0.0, 3.0); 2], Widths::Uniform(1.0), 100).unwrap();
        let c = g.center(5);
        let p = partition_zeta(&g, [c.as_slice()], 0.5);
        assert_eq!(p.zeta, vec![5]);
        assert_eq!(p.zeta_bar.len(), 15);
        let p = partition_zeta(&g, [c.as_slice()], g.diameter());
        assert!(p.zeta_bar.is_empty());
    }

    #[test]
    fn zeta_bar_is_far_from_every_sample() {
        let g = build_grid(3, 5, &[(-2.0, 2.0); 3], Widths::Uniform(0.7), 1000).unwrap();
        let samples: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 * 0.157;
                vec![1.5 * t.sin(), 1.5 * t.cos(), 0.3 * t - 1.0]
            })
            .collect();
        let r = 0.9;
        let p = partition_zeta(&g, samples.iter().map(|s| s.as_slice()), r);
        assert_eq!(p.zeta.len() + p.zeta_bar.len(), g.n_neurons());
        for &j in &p.zeta_bar {
            let c = g.center(j);
            for s in &samples {
                let d: f64 = c.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d > r);
            }
        }
        for &j in &p.zeta {
            let c = g.center(j);
            assert!(samples
                .iter()
                .any(|s| { c.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() <= r }));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn regressor_bounds(x in proptest::collection::vec(-150.0f64..150.0, 6)) {
            let g = vessel_grid();
            let s = g.regressor(&x).unwrap();
            prop_assert!(s.iter().all(|&v| v >= 0.0 && v <= 1.0));
            prop_assert!(s.norm() <= (g.n_neurons() as f64).sqrt());
        }

        #[test]
        fn localized_within_tail_bound(
            x in proptest::collection::vec(-120.0f64..120.0, 6),
            seed in proptest::collection::vec(-1.0f64..1.0, 32),
            scale in 0.1f64..1e5,
        ) {
            let g = vessel_grid();
            let w: Vec<f64> = (0..g.n_neurons()).map(|j| scale * seed[j % 32] * ((j % 7) as f64 - 3.0)).collect();
            let max_w = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let full = SparseRegressor::from_dense(&g.regressor(&x).unwrap());
            let loc = g.localized_regressor(&x, 45.0).unwrap();
            let diff = (full.dot(&w) - loc.dot(&w)).abs();
            // summation-order rounding on top of the analytic bound
            let slack = 1e-12 * full.entries.iter().map(|&(j, s)| (w[j] * s).abs()).sum::<f64>();
            prop_assert!(diff <= g.tail_bound(45.0, max_w) + slack);
        }
    }
}
