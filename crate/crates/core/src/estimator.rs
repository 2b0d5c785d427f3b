//! Distributed observer: every follower estimates the leader state from its
//! neighbors' estimates, and only leader-linked agents see the leader itself.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::graph::Topology;
use crate::models::LeaderModel;

/// Default boundary-layer width of the normalized switching term.
pub const DEFAULT_SMOOTHING_EPS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverParams {
    /// `2n x 2n` gain on the full consensus error.
    pub k1: DMatrix<f64>,
    /// `n_r x 2n` projection feeding the switching term.
    pub k2: DMatrix<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    /// 0 selects the exact discontinuous law.
    pub smoothing_eps: f64,
}

impl ObserverParams {
    pub fn new(k1: DMatrix<f64>, k2: DMatrix<f64>, alpha1: f64, alpha2: f64, smoothing_eps: f64) -> Result<Self> {
        let p = Self {
            k1,
            k2,
            alpha1,
            alpha2,
            smoothing_eps,
        };
        p.check()?;
        Ok(p)
    }

    /// `K1 = -5 I` and a switching surface `-(5 e_p + e_v)` projected on `B0^T`.
    pub fn tuned_default(leader: &LeaderModel, alpha1: f64, alpha2: f64) -> Result<Self> {
        let n = leader.dim();
        let k1 = DMatrix::identity(2 * n, 2 * n) * -5.0;
        let bt = leader.b0().transpose();
        let mut k2 = DMatrix::zeros(bt.nrows(), 2 * n);
        k2.view_mut((0, 0), (bt.nrows(), n)).copy_from(&(&bt * -5.0));
        k2.view_mut((0, n), (bt.nrows(), n)).copy_from(&(-&bt));
        Self::new(k1, k2, alpha1, alpha2, DEFAULT_SMOOTHING_EPS)
    }

    fn check(&self) -> Result<()> {
        let bad = |name: &str, detail: String| {
            Err(Error::Parameter {
                name: format!("observer.{name}"),
                detail,
            })
        };
        if !(self.alpha1 > 0.0) || !self.alpha1.is_finite() {
            return bad("alpha1", format!("must be positive, got {}", self.alpha1));
        }
        if !(self.alpha2 > 0.0) || !self.alpha2.is_finite() {
            return bad("alpha2", format!("must be positive, got {}", self.alpha2));
        }
        if !(self.smoothing_eps >= 0.0) || !self.smoothing_eps.is_finite() {
            return bad("smoothing_eps", format!("must be >= 0, got {}", self.smoothing_eps));
        }
        if self.k1.nrows() != self.k1.ncols() || self.k1.nrows() % 2 != 0 {
            return bad(
                "k1",
                format!("must be 2n x 2n, got {}x{}", self.k1.nrows(), self.k1.ncols()),
            );
        }
        if self.k2.ncols() != self.k1.ncols() {
            return bad(
                "k2",
                format!("must have {} columns, got {}", self.k1.ncols(), self.k2.ncols()),
            );
        }
        Ok(())
    }
}

/// `phi_i = sum_j a_ij (xh_i - xh_j) + a_i0 (xh_i - x0)`.
pub fn consensus_error(
    estimates: &[DVector<f64>],
    leader_state: &DVector<f64>,
    topology: &Topology,
) -> Result<Vec<DVector<f64>>> {
    let n = topology.n_followers();
    check_len("observer estimates", n, estimates.len())?;
    let a = topology.adjacency();
    let links = topology.leader_links();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        check_len("observer estimate", leader_state.len(), estimates[i].len())?;
        let mut phi = DVector::zeros(leader_state.len());
        for j in 0..n {
            if a[(i, j)] != 0.0 {
                phi += (&estimates[i] - &estimates[j]) * a[(i, j)];
            }
        }
        if links[i] != 0.0 {
            phi += (&estimates[i] - leader_state) * links[i];
        }
        out.push(phi);
    }
    Ok(out)
}

/// `v / |v|` (0 at the origin) for `eps = 0`, `v / max(|v|, eps)` otherwise.
pub fn sign_normalize(v: &DVector<f64>, eps: f64) -> DVector<f64> {
    let norm = v.norm();
    let scale = if eps > 0.0 { norm.max(eps) } else { norm };
    if scale == 0.0 {
        DVector::zeros(v.len())
    } else {
        v / scale
    }
}

/// Observer bank for all followers.
#[derive(Debug, Clone)]
pub struct Observer {
    params: ObserverParams,
    state_matrix: DMatrix<f64>,
    /// `[0; B0]`, `2n x n_r`.
    input_map: DMatrix<f64>,
    neighbors: Vec<Vec<(usize, f64)>>,
    leader_links: Vec<f64>,
    /// Top `n` rows of `K1`.
    k1_top: DMatrix<f64>,
}

impl Observer {
    pub fn new(params: ObserverParams, leader: &LeaderModel, topology: &Topology) -> Result<Self> {
        let n = leader.dim();
        check_len("observer K1 size", 2 * n, params.k1.nrows())?;
        check_len("observer K2 rows", leader.input_dim(), params.k2.nrows())?;
        let mut input_map = DMatrix::zeros(2 * n, leader.input_dim());
        input_map
            .view_mut((n, 0), (n, leader.input_dim()))
            .copy_from(leader.b0());
        let k1_top = params.k1.rows(0, n).into_owned();
        Ok(Self {
            params,
            state_matrix: leader.state_matrix(),
            input_map,
            neighbors: topology.neighbors(),
            leader_links: topology.leader_links().iter().copied().collect(),
            k1_top,
        })
    }

    pub fn params(&self) -> &ObserverParams {
        &self.params
    }

    pub fn n_agents(&self) -> usize {
        self.neighbors.len()
    }

    fn phi(&self, i: usize, estimates: &[DVector<f64>], leader: &DVector<f64>) -> DVector<f64> {
        let mut phi = DVector::zeros(leader.len());
        self.phi_into(i, estimates, leader, &mut phi);
        phi
    }

    fn phi_into(&self, i: usize, estimates: &[DVector<f64>], leader: &DVector<f64>, phi: &mut DVector<f64>) {
        phi.fill(0.0);
        let own = &estimates[i];
        for &(j, a) in &self.neighbors[i] {
            for (r, v) in phi.iter_mut().enumerate() {
                *v += (own[r] - estimates[j][r]) * a;
            }
        }
        let b = self.leader_links[i];
        if b != 0.0 {
            for (r, v) in phi.iter_mut().enumerate() {
                *v += (own[r] - leader[r]) * b;
            }
        }
    }

    /// `xh_i' = Abar xh_i + a1 K1 phi_i + a2 [0; B0] f1(K2 phi_i)` for every agent.
    pub fn derivative(&self, estimates: &[DVector<f64>], leader_state: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        check_len("observer estimates", self.n_agents(), estimates.len())?;
        check_len("leader state", self.state_matrix.nrows(), leader_state.len())?;
        let p = &self.params;
        let mut phi = DVector::zeros(leader_state.len());
        let mut surface = DVector::zeros(p.k2.nrows());
        Ok((0..self.n_agents())
            .map(|i| {
                self.phi_into(i, estimates, leader_state, &mut phi);
                surface.gemv(1.0, &p.k2, &phi, 0.0);
                let norm = surface.norm();
                let scale = if p.smoothing_eps > 0.0 {
                    norm.max(p.smoothing_eps)
                } else {
                    norm
                };
                let mut rate = DVector::zeros(phi.len());
                rate.gemv(1.0, &self.state_matrix, &estimates[i], 0.0);
                rate.gemv(p.alpha1, &p.k1, &phi, 1.0);
                if scale != 0.0 {
                    rate.gemv(p.alpha2 / scale, &self.input_map, &surface, 1.0);
                }
                rate
            })
            .collect())
    }

    /// Second derivative of each position estimate. The switching term only
    /// enters the velocity rows, so this is exact for every `eps`.
    pub fn position_acceleration(
        &self,
        estimate_rates: &[DVector<f64>],
        leader_rate: &DVector<f64>,
    ) -> Result<Vec<DVector<f64>>> {
        check_len("observer estimate rates", self.n_agents(), estimate_rates.len())?;
        check_len("leader rate", self.state_matrix.nrows(), leader_rate.len())?;
        let n = self.k1_top.nrows();
        Ok((0..self.n_agents())
            .map(|i| {
                let phi_rate = self.phi(i, estimate_rates, leader_rate);
                estimate_rates[i].rows(n, n) + &self.k1_top * phi_rate * self.params.alpha1
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::InputSignal;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn vessel_leader() -> LeaderModel {
        let mut a0 = DMatrix::zeros(3, 6);
        a0[(0, 0)] = -1.0;
        a0[(2, 2)] = -1.0;
        let b0 = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        let input = InputSignal::Sinusoid {
            amplitude: vec![-80.0],
            omega: 1.0,
            phase: 0.0,
        };
        LeaderModel::new(a0, b0, input, 80.0).unwrap()
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn consensus_error_cases() {
        let t = Topology::from_edges(2, &[(0, 1, 1.0)], &[(0, 1.0)]).unwrap();
        let x0 = dv(&[1.0, 2.0]);
        let same = vec![x0.clone(), x0.clone()];
        for phi in consensus_error(&same, &x0, &t).unwrap() {
            assert_eq!(phi, DVector::zeros(2));
        }

        let single = Topology::from_edges(1, &[], &[(0, 1.0)]).unwrap();
        let e = dv(&[0.5, -1.5]);
        let phi = consensus_error(&[&x0 + &e], &x0, &single).unwrap();
        assert_eq!(phi[0], e);

        let x2 = dv(&[4.0, -1.0]);
        let phi = consensus_error(&[x0.clone(), x2.clone()], &x0, &t).unwrap();
        assert_eq!(phi[0], &x0 - &x2);
        assert_eq!(phi[1], &x2 - &x0);
    }

    #[test]
    fn sign_normalize_cases() {
        assert_eq!(sign_normalize(&DVector::zeros(2), 0.0), DVector::zeros(2));
        assert_eq!(sign_normalize(&DVector::zeros(2), 0.5), DVector::zeros(2));
        assert_relative_eq!(sign_normalize(&dv(&[3.0, 4.0]), 0.0), dv(&[0.6, 0.8]), epsilon = 1e-15);
        assert_relative_eq!(sign_normalize(&dv(&[0.3, 0.4]), 1.0), dv(&[0.3, 0.4]), epsilon = 1e-15);
    }

    #[test]
    fn agreement_is_an_equilibrium() {
        let mut a0 = DMatrix::zeros(3, 6);
        a0[(0, 0)] = -1.0;
        a0[(2, 2)] = -1.0;
        let leader = LeaderModel::new(
            a0,
            DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]),
            InputSignal::Zero { dim: 1 },
            1.0,
        )
        .unwrap();
        let topo = Topology::ring_with_leader(4).unwrap();
        let obs = Observer::new(
            ObserverParams::tuned_default(&leader, 1.0, 200.0).unwrap(),
            &leader,
            &topo,
        )
        .unwrap();
        let x0 = DVector::zeros(6);
        let d = obs.derivative(&vec![x0.clone(); 4], &x0).unwrap();
        assert!(d.iter().all(|v| v.amax() == 0.0));

        // nonzero leader state, estimates equal: error dynamics stay at zero
        let mut x = dv(&[1.0, -2.0, 0.5, 0.3, 0.7, -0.4]);
        let mut est = vec![x.clone(); 4];
        let h = 1e-3;
        for _ in 0..1000 {
            let lx = leader.derivative(&x, 0.0).unwrap();
            let d = obs.derivative(&est, &x).unwrap();
            x += lx * h;
            for (e, de) in est.iter_mut().zip(d) {
                *e += de * h;
            }
            for e in &est {
                assert!((e - &x).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn open_loop_copy_without_corrections() {
        let leader = vessel_leader();
        let topo = Topology::ring_with_leader(4).unwrap();
        let mut params = ObserverParams::tuned_default(&leader, 1.0, 1.0).unwrap();
        params.k1 = DMatrix::zeros(6, 6);
        params.k2 = DMatrix::zeros(1, 6);
        let obs = Observer::new(params, &leader, &topo).unwrap();
        let est: Vec<_> = (0..4).map(|i| DVector::from_fn(6, |r, _| (r + i) as f64)).collect();
        let x0 = DVector::from_element(6, 3.0);
        let d = obs.derivative(&est, &x0).unwrap();
        for (e, de) in est.iter().zip(d) {
            assert_eq!(de, leader.state_matrix() * e);
        }
    }

    #[test]
    fn vessel_initial_rate_golden() {
        let leader = vessel_leader();
        let topo = Topology::ring_with_leader(4).unwrap();
        let obs = Observer::new(
            ObserverParams::tuned_default(&leader, 1.0, 200.0).unwrap(),
            &leader,
            &topo,
        )
        .unwrap();
        let x0 = dv(&[0.0, 80.0, 0.0, 80.0, 0.0, 80.0]);
        let d = obs.derivative(&vec![DVector::zeros(6); 4], &x0).unwrap();
        // agent 1 sees the leader: phi = -x0; K2 phi = 5 * 80 = 400 > eps
        assert_relative_eq!(d[0], dv(&[0.0, 400.0, 0.0, 400.0, 200.0, 400.0]), epsilon = 1e-12);
        for agent in &d[1..] {
            assert_eq!(agent.amax(), 0.0);
        }
    }

    #[test]
    fn position_acceleration_matches_finite_difference() {
        let leader = vessel_leader();
        let topo = Topology::ring_with_leader(4).unwrap();
        let obs = Observer::new(
            ObserverParams::tuned_default(&leader, 1.0, 200.0).unwrap(),
            &leader,
            &topo,
        )
        .unwrap();
        let x0 = dv(&[0.0, 80.0, 0.0, 80.0, 0.0, 80.0]);
        let est: Vec<_> = (0..4)
            .map(|i| DVector::from_fn(6, |r, _| ((r * 7 + i * 3) % 11) as f64 - 5.0))
            .collect();
        let rates = obs.derivative(&est, &x0).unwrap();
        let x0_rate = leader.derivative(&x0, 0.0).unwrap();
        let acc = obs.position_acceleration(&rates, &x0_rate).unwrap();

        let h = 1e-6;
        let shift = |s: f64| -> Vec<DVector<f64>> {
            let e: Vec<_> = est.iter().zip(&rates).map(|(e, r)| e + r * s).collect();
            obs.derivative(&e, &(&x0 + &x0_rate * s)).unwrap()
        };
        let (plus, minus) = (shift(h), shift(-h));
        for i in 0..4 {
            let fd = (plus[i].rows(0, 3) - minus[i].rows(0, 3)) / (2.0 * h);
            assert_relative_eq!(acc[i], fd, epsilon = 1e-5, max_relative = 1e-6);
        }
    }

    #[test]
    fn rejects_bad_params() {
        let leader = vessel_leader();
        let good = ObserverParams::tuned_default(&leader, 1.0, 200.0).unwrap();
        assert!(ObserverParams::new(good.k1.clone(), good.k2.clone(), 0.0, 1.0, 0.0).is_err());
        assert!(ObserverParams::new(good.k1.clone(), good.k2.clone(), 1.0, 1.0, -1.0).is_err());
        assert!(ObserverParams::new(DMatrix::zeros(6, 5), good.k2.clone(), 1.0, 1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn normalized_norm_at_most_one(v in prop::collection::vec(-1e3f64..1e3, 1..5), eps in 0.0f64..10.0) {
            let v = DVector::from_vec(v);
            let u = sign_normalize(&v, eps);
            prop_assert!(u.norm() <= 1.0 + 1e-12);
            if eps == 0.0 && v.norm() > 0.0 {
                prop_assert!((u.norm() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
