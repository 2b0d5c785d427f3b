//! Virtual-leader reference dynamics and Euler-Lagrange plant models.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rbf::RbfGrid;

/// Bounded leader input `r(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSignal {
    Zero {
        dim: usize,
    },
    Constant {
        value: Vec<f64>,
    },
    /// `r_k(t) = amplitude_k * cos(omega * t + phase)`.
    Sinusoid {
        amplitude: Vec<f64>,
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl InputSignal {
    pub fn dim(&self) -> usize {
        match self {
            InputSignal::Zero { dim } => *dim,
            InputSignal::Constant { value } => value.len(),
            InputSignal::Sinusoid { amplitude, .. } => amplitude.len(),
        }
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        match self {
            InputSignal::Zero { dim } => DVector::zeros(*dim),
            InputSignal::Constant { value } => DVector::from_column_slice(value),
            InputSignal::Sinusoid {
                amplitude,
                omega,
                phase,
            } => {
                let c = (omega * t + phase).cos();
                DVector::from_iterator(amplitude.len(), amplitude.iter().map(|a| a * c))
            }
        }
    }

    /// Supremum of `|r(t)|` over all t.
    pub fn bound(&self) -> f64 {
        match self {
            InputSignal::Zero { .. } => 0.0,
            InputSignal::Constant { value } => value.iter().map(|v| v * v).sum::<f64>().sqrt(),
            InputSignal::Sinusoid { amplitude, .. } => amplitude.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

/// `p0' = v0`, `v0' = A0 x0 + B0 r(t)` with `x0 = (p0, v0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderModel {
    a0: DMatrix<f64>,
    b0: DMatrix<f64>,
    input: InputSignal,
    r_star: f64,
}

impl LeaderModel {
    pub fn new(a0: DMatrix<f64>, b0: DMatrix<f64>, input: InputSignal, r_star: f64) -> Result<Self> {
        let n = a0.nrows();
        check_len("leader A0 columns", 2 * n, a0.ncols())?;
        check_len("leader B0 rows", n, b0.nrows())?;
        check_len("leader input dimension", b0.ncols(), input.dim())?;
        if !(r_star > 0.0) {
            return Err(Error::Parameter {
                name: "leader.r_star".into(),
                detail: format!("input bound must be positive, got {r_star}"),
            });
        }
        if input.bound() > r_star * (1.0 + 1e-12) {
            return Err(Error::Parameter {
                name: "leader.r_star".into(),
                detail: format!("|r(t)| reaches {} which exceeds r_star = {r_star}", input.bound()),
            });
        }
        Ok(Self { a0, b0, input, r_star })
    }

    pub fn dim(&self) -> usize {
        self.a0.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b0.ncols()
    }

    pub fn a0(&self) -> &DMatrix<f64> {
        &self.a0
    }

    pub fn b0(&self) -> &DMatrix<f64> {
        &self.b0
    }

    pub fn input(&self) -> &InputSignal {
        &self.input
    }

    pub fn r_star(&self) -> f64 {
        self.r_star
    }

    /// `[[0, I], [A0]]`, the linear part shared with the observers.
    pub fn state_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut a = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            a[(i, n + i)] = 1.0;
        }
        a.view_mut((n, 0), (n, 2 * n)).copy_from(&self.a0);
        a
    }

    pub fn derivative(&self, x0: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let n = self.dim();
        check_len("leader state", 2 * n, x0.len())?;
        let mut dx = DVector::zeros(2 * n);
        dx.rows_mut(0, n).copy_from(&x0.rows(n, n));
        let accel = &self.a0 * x0 + &self.b0 * self.input.eval(t);
        dx.rows_mut(n, n).copy_from(&accel);
        Ok(dx)
    }
}

/// Mechanical dynamics `p' = J(p) nu`, `M nu' + C nu + D nu + g = tau` with constant `M`.
pub trait PlantModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn inertia(&self) -> &DMatrix<f64>;

    fn coriolis(&self, p: &DVector<f64>, nu: &DVector<f64>) -> DMatrix<f64>;

    fn damping(&self, p: &DVector<f64>, nu: &DVector<f64>) -> DMatrix<f64>;

    fn gravity(&self, p: &DVector<f64>) -> DVector<f64>;

    /// `C(p, nu) nu + D(p, nu) nu + g(p)`.
    fn velocity_force(&self, p: &DVector<f64>, nu: &DVector<f64>) -> DVector<f64> {
        self.coriolis(p, nu) * nu + self.damping(p, nu) * nu + self.gravity(p)
    }

    fn rotation(&self, p: &DVector<f64>) -> DMatrix<f64>;

    /// Time derivative of `J(p)` along `p' = p_dot`.
    fn rotation_rate(&self, p: &DVector<f64>, p_dot: &DVector<f64>) -> DMatrix<f64>;

    /// Extra generalized force that depends on the controller's reference
    /// acceleration. Only constructed oracle plants use it.
    fn reference_coupled_force(
        &self,
        _p: &DVector<f64>,
        _nu: &DVector<f64>,
        _beta_dot: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        None
    }

    fn needs_reference_acceleration(&self) -> bool {
        false
    }
}

/// A validated plant with its inertia factorized once.
#[derive(Debug, Clone)]
pub struct Plant {
    model: Arc<dyn PlantModel>,
    inertia_chol: Cholesky<f64, Dyn>,
}

impl Plant {
    pub fn new(model: Arc<dyn PlantModel>) -> Result<Self> {
        let m = model.inertia().clone();
        check_len("inertia rows", model.dim(), m.nrows())?;
        check_len("inertia columns", model.dim(), m.ncols())?;
        if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
            return Err(Error::NotPositiveDefinite {
                name: format!("{} inertia", model.name()),
                detail: "matrix is not symmetric".into(),
            });
        }
        let inertia_chol = Cholesky::new(m).ok_or_else(|| Error::NotPositiveDefinite {
            name: format!("{} inertia", model.name()),
            detail: "Cholesky factorization failed".into(),
        })?;
        Ok(Self { model, inertia_chol })
    }

    pub fn model(&self) -> &dyn PlantModel {
        self.model.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Solves `M y = rhs`.
    pub fn solve_inertia(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.inertia_chol.solve(rhs)
    }

    /// `C nu + D nu + g` plus any reference-coupled term.
    pub fn uncertain_force(
        &self,
        p: &DVector<f64>,
        nu: &DVector<f64>,
        beta_dot: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let m = self.model.as_ref();
        let mut f = m.velocity_force(p, nu);
        if m.needs_reference_acceleration() {
            let bd = beta_dot.ok_or_else(|| Error::MissingReferenceAcceleration(m.name().into()))?;
            if let Some(extra) = m.reference_coupled_force(p, nu, bd) {
                f += extra;
            }
        }
        Ok(f)
    }

    /// Returns `(p', nu')`.
    pub fn derivative(
        &self,
        p: &DVector<f64>,
        nu: &DVector<f64>,
        tau: &DVector<f64>,
        beta_dot: Option<&DVector<f64>>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = self.dim();
        check_len("plant position", n, p.len())?;
        check_len("plant velocity", n, nu.len())?;
        check_len("plant input", n, tau.len())?;
        let p_dot = self.model.rotation(p) * nu;
        let rhs = tau - self.uncertain_force(p, nu, beta_dot)?;
        Ok((p_dot, self.solve_inertia(&rhs)))
    }

    /// `G = M beta' + C nu + D nu + g`, the lumped uncertainty the networks learn.
    pub fn true_g(&self, x: &DVector<f64>, beta_dot: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.dim();
        check_len("plant state", 2 * n, x.len())?;
        check_len("reference acceleration", n, beta_dot.len())?;
        let p = x.rows(0, n).into_owned();
        let nu = x.rows(n, n).into_owned();
        Ok(self.model.inertia() * beta_dot + self.uncertain_force(&p, &nu, Some(beta_dot))?)
    }
}

/// The four-vessel example: coupled surge/sway/yaw-like inertia, skew Coriolis,
/// quadratic damping, no gravity, `J = I`.
#[derive(Debug, Clone)]
pub struct ExampleVesselPlant {
    inertia: DMatrix<f64>,
}

impl Default for ExampleVesselPlant {
    fn default() -> Self {
        Self {
            inertia: DMatrix::from_row_slice(3, 3, &[25.0, 0.0, 0.0, 0.0, 33.0, 1.15, 0.0, 1.15, 2.8]),
        }
    }
}

impl PlantModel for ExampleVesselPlant {
    fn name(&self) -> &str {
        "example_vessel"
    }

    fn dim(&self) -> usize {
        3
    }

    fn inertia(&self) -> &DMatrix<f64> {
        &self.inertia
    }

    fn coriolis(&self, _p: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let a = 33.0 * v[1] + 1.15 * v[2];
        let b = 25.0 * v[0];
        DMatrix::from_row_slice(3, 3, &[0.0, 0.0, -a, 0.0, 0.0, b, a, -b, 0.0])
    }

    fn damping(&self, _p: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            3,
            &[
                0.8 + 1.3 * v[0].abs(),
                0.0,
                0.0,
                0.0,
                0.9 + 36.0 * v[1].abs(),
                -0.1,
                0.0,
                -0.1,
                0.0,
            ],
        )
    }

    fn gravity(&self, _p: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(3)
    }

    fn velocity_force(&self, _p: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let a = 33.0 * v[1] + 1.15 * v[2];
        let b = 25.0 * v[0];
        let d0 = 0.8 + 1.3 * v[0].abs();
        let d1 = 0.9 + 36.0 * v[1].abs();
        DVector::from_vec(vec![
            -a * v[2] + d0 * v[0],
            b * v[2] + d1 * v[1] - 0.1 * v[2],
            a * v[0] - b * v[1] - 0.1 * v[1],
        ])
    }

    fn rotation(&self, _p: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(3, 3)
    }

    fn rotation_rate(&self, _p: &DVector<f64>, _p_dot: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(3, 3)
    }
}

/// Constant inertia, linear plus diagonal quadratic damping, constant gravity
/// and no Coriolis term. With `heading_rotation`, `J(p)` rotates the first two
/// axes by the angle `p[n-1]` (requires `n >= 3`).
#[derive(Debug, Clone)]
pub struct ConstantMatrixPlant {
    inertia: DMatrix<f64>,
    linear_damping: DMatrix<f64>,
    quadratic_damping: Vec<f64>,
    gravity: DVector<f64>,
    heading_rotation: bool,
}

impl ConstantMatrixPlant {
    pub fn new(
        inertia: DMatrix<f64>,
        linear_damping: DMatrix<f64>,
        quadratic_damping: Vec<f64>,
        gravity: DVector<f64>,
        heading_rotation: bool,
    ) -> Result<Self> {
        let n = inertia.nrows();
        check_len("linear damping rows", n, linear_damping.nrows())?;
        check_len("linear damping columns", n, linear_damping.ncols())?;
        check_len("quadratic damping", n, quadratic_damping.len())?;
        check_len("gravity", n, gravity.len())?;
        if heading_rotation && n < 3 {
            return Err(Error::Parameter {
                name: "plant.heading_rotation".into(),
                detail: "needs at least three coordinates".into(),
            });
        }
        Ok(Self {
            inertia,
            linear_damping,
            quadratic_damping,
            gravity,
            heading_rotation,
        })
    }
}

impl PlantModel for ConstantMatrixPlant {
    fn name(&self) -> &str {
        "constant_matrix"
    }

    fn dim(&self) -> usize {
        self.inertia.nrows()
    }

    fn inertia(&self) -> &DMatrix<f64> {
        &self.inertia
    }

    fn coriolis(&self, _p: &DVector<f64>, _nu: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), self.dim())
    }

    fn damping(&self, _p: &DVector<f64>, nu: &DVector<f64>) -> DMatrix<f64> {
        let mut d = self.linear_damping.clone();
        for (k, q) in self.quadratic_damping.iter().enumerate() {
            d[(k, k)] += q * nu[k].abs();
        }
        d
    }

    fn gravity(&self, _p: &DVector<f64>) -> DVector<f64> {
        self.gravity.clone()
    }

    fn rotation(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut j = DMatrix::identity(n, n);
        if self.heading_rotation {
            let (s, c) = p[n - 1].sin_cos();
            j[(0, 0)] = c;
            j[(0, 1)] = -s;
            j[(1, 0)] = s;
            j[(1, 1)] = c;
        }
        j
    }

    fn rotation_rate(&self, p: &DVector<f64>, p_dot: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut jd = DMatrix::zeros(n, n);
        if self.heading_rotation {
            let (s, c) = p[n - 1].sin_cos();
            let w = p_dot[n - 1];
            jd[(0, 0)] = -s * w;
            jd[(0, 1)] = -c * w;
            jd[(1, 0)] = c * w;
            jd[(1, 1)] = -s * w;
        }
        jd
    }
}

/// Oracle plant whose lumped uncertainty is exactly `G(x) = W*^T S(x)` on a
/// given grid: `C = D = 0`, `g = 0`, `J = I`, and a reference-coupled force
/// `W*^T S(x) - M beta'` cancels the `M beta'` part of `G`.
#[derive(Debug, Clone)]
pub struct SyntheticPlant {
    inertia: DMatrix<f64>,
    grid: Arc<RbfGrid>,
    /// `(output channel, neuron, weight)`.
    ideal: Vec<(usize, usize, f64)>,
}

impl SyntheticPlant {
    pub fn new(inertia: DMatrix<f64>, grid: Arc<RbfGrid>, ideal: Vec<(usize, usize, f64)>) -> Result<Self> {
        let n = inertia.nrows();
        check_len("synthetic plant input dimension", 2 * n, grid.dim())?;
        for &(k, j, _) in &ideal {
            if k >= n || j >= grid.n_neurons() {
                return Err(Error::Parameter {
                    name: "plant.ideal_weights".into(),
                    detail: format!("entry (k = {k}, neuron = {j}) is out of range"),
                });
            }
        }
        Ok(Self { inertia, grid, ideal })
    }

    pub fn grid(&self) -> &RbfGrid {
        &self.grid
    }

    /// Dense ideal weight vector per output channel.
    pub fn ideal_weights(&self) -> Vec<Vec<f64>> {
        let mut w = vec![vec![0.0; self.grid.n_neurons()]; self.inertia.nrows()];
        for &(k, j, v) in &self.ideal {
            w[k][j] += v;
        }
        w
    }

    pub fn ideal_entries(&self) -> &[(usize, usize, f64)] {
        &self.ideal
    }

    /// `W*^T S(x)` evaluated on the support only.
    pub fn representable_g(&self, x: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.inertia.nrows());
        for &(k, j, v) in &self.ideal {
            g[k] += v * self.grid.activation(x, j);
        }
        g
    }
}

impl PlantModel for SyntheticPlant {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn dim(&self) -> usize {
        self.inertia.nrows()
    }

    fn inertia(&self) -> &DMatrix<f64> {
        &self.inertia
    }

    fn coriolis(&self, _p: &DVector<f64>, _nu: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), self.dim())
    }

    fn damping(&self, _p: &DVector<f64>, _nu: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), self.dim())
    }

    fn gravity(&self, _p: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dim())
    }

    fn rotation(&self, _p: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim())
    }

    fn rotation_rate(&self, _p: &DVector<f64>, _p_dot: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), self.dim())
    }

    fn reference_coupled_force(
        &self,
        p: &DVector<f64>,
        nu: &DVector<f64>,
        beta_dot: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        let x: Vec<f64> = p.iter().chain(nu.iter()).copied().collect();
        Some(self.representable_g(&x) - &self.inertia * beta_dot)
    }

    fn needs_reference_acceleration(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn vessel() -> Plant {
        Plant::new(Arc::new(ExampleVesselPlant::default())).unwrap()
    }

    fn v3(a: f64, b: f64, c: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b, c])
    }

    #[test]
    fn leader_derivative_at_start() {
        let x0 = DVector::from_vec(vec![0.0, 80.0, 0.0, 80.0, 0.0, 80.0]);
        let d = vessel_leader().derivative(&x0, 0.0).unwrap();
        assert_eq!(d.as_slice(), &[80.0, 0.0, 80.0, -0.0, -80.0, -0.0]);
    }

    #[test]
    fn leader_equilibrium_and_integrator() {
        let a0 = DMatrix::zeros(3, 6);
        let b0 = DMatrix::zeros(3, 1);
        let l = LeaderModel::new(a0, b0, InputSignal::Zero { dim: 1 }, 1.0).unwrap();
        assert_eq!(l.derivative(&DVector::zeros(6), 3.0).unwrap(), DVector::zeros(6));
        let x0 = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(
            l.derivative(&x0, 0.0).unwrap().as_slice(),
            &[4.0, 5.0, 6.0, 0.0, 0.0, 0.0]
        );
        assert!(l.derivative(&DVector::zeros(5), 0.0).is_err());
    }

    #[test]
    fn leader_rejects_unbounded_input() {
        let err = LeaderModel::new(
            DMatrix::zeros(1, 2),
            DMatrix::identity(1, 1),
            InputSignal::Constant { value: vec![3.0] },
            2.0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn vessel_rest_and_push() {
        let pl = vessel();
        let z = DVector::zeros(3);
        let (pd, vd) = pl.derivative(&z, &z, &z, None).unwrap();
        assert_eq!(pd, z);
        assert_eq!(vd, z);
        let (_, vd) = pl.derivative(&z, &z, &v3(25.0, 0.0, 0.0), None).unwrap();
        assert_relative_eq!(vd, v3(1.0, 0.0, 0.0), epsilon = 1e-15);
        let nu = v3(3.0, -2.0, 7.0);
        let (pd, _) = pl.derivative(&z, &nu, &z, None).unwrap();
        assert_eq!(pd, nu);
    }

    #[test]
    fn true_g_cases() {
        let pl = vessel();
        let z6 = DVector::zeros(6);
        assert_eq!(pl.true_g(&z6, &DVector::zeros(3)).unwrap(), DVector::zeros(3));
        assert_eq!(pl.true_g(&z6, &v3(1.0, 0.0, 0.0)).unwrap(), v3(25.0, 0.0, 0.0));

        let g = v3(0.5, -9.81, 2.0);
        let cm = ConstantMatrixPlant::new(
            DMatrix::identity(3, 3),
            DMatrix::zeros(3, 3),
            vec![0.0; 3],
            g.clone(),
            false,
        )
        .unwrap();
        let pl = Plant::new(Arc::new(cm)).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        assert_eq!(pl.true_g(&x, &DVector::zeros(3)).unwrap(), g);
    }

    #[test]
    fn rejects_indefinite_inertia() {
        let cm = ConstantMatrixPlant::new(
            DMatrix::from_diagonal(&v3(1.0, -1.0, 1.0)),
            DMatrix::zeros(3, 3),
            vec![0.0; 3],
            DVector::zeros(3),
            false,
        )
        .unwrap();
        assert!(matches!(
            Plant::new(Arc::new(cm)),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn synthetic_needs_reference_acceleration() {
        let grid =
            Arc::new(crate::rbf::build_grid(2, 3, &[(-1.0, 1.0); 2], crate::rbf::Widths::Uniform(0.5), 100).unwrap());
        let sp = SyntheticPlant::new(DMatrix::identity(1, 1), grid.clone(), vec![(0, 4, 2.0)]).unwrap();
        let pl = Plant::new(Arc::new(sp)).unwrap();
        let z = DVector::zeros(1);
        assert!(matches!(
            pl.derivative(&z, &z, &z, None),
            Err(Error::MissingReferenceAcceleration(_))
        ));
        // G(x) = W*^T S(x) no matter what beta' is
        let x = DVector::from_vec(vec![0.1, -0.2]);
        let g = pl.true_g(&x, &DVector::from_vec(vec![123.0])).unwrap();
        assert_relative_eq!(g[0], 2.0 * grid.activation(x.as_slice(), 4), max_relative = 1e-12);
    }

    #[test]
    fn heading_rotation_rate_matches_finite_difference() {
        let cm = ConstantMatrixPlant::new(
            DMatrix::identity(3, 3),
            DMatrix::zeros(3, 3),
            vec![0.0; 3],
            DVector::zeros(3),
            true,
        )
        .unwrap();
        let p = v3(1.0, 2.0, 0.7);
        let pd = v3(0.3, -0.1, 1.9);
        let h = 1e-6;
        let fd = (cm.rotation(&(&p + &pd * h)) - cm.rotation(&(&p - &pd * h))) / (2.0 * h);
        assert_relative_eq!(cm.rotation_rate(&p, &pd), fd, epsilon = 1e-8);
    }

    #[test]
    fn energy_balance_without_input() {
        // d/dt (1/2 nu^T M nu) = -nu^T D nu: Coriolis does no work
        let pl = vessel();
        let m = pl.model().inertia().clone();
        let p = DVector::zeros(3);
        let tau = DVector::zeros(3);
        let mut nu = v3(1.2, -0.7, 0.9);
        let h = 1e-5;
        let energy = |v: &DVector<f64>| 0.5 * v.dot(&(&m * v));
        for _ in 0..5 {
            let f = |v: &DVector<f64>| pl.derivative(&p, v, &tau, None).unwrap().1;
            let k1 = f(&nu);
            let k2 = f(&(&nu + &k1 * (h / 2.0)));
            let k3 = f(&(&nu + &k2 * (h / 2.0)));
            let k4 = f(&(&nu + &k3 * h));
            let next = &nu + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            let rate_fd = (energy(&next) - energy(&nu)) / h;
            let mid = (&nu + &next) * 0.5;
            let rate = -mid.dot(&(pl.model().damping(&p, &mid) * &mid));
            assert_relative_eq!(rate_fd, rate, max_relative = 1e-4);
            nu = next;
        }
    }

    #[test]
    fn rotations_are_orthogonal() {
        let cm = ConstantMatrixPlant::new(
            DMatrix::identity(3, 3),
            DMatrix::zeros(3, 3),
            vec![0.0; 3],
            DVector::zeros(3),
            true,
        )
        .unwrap();
        let vessel = ExampleVesselPlant::default();
        for i in 0..50 {
            let p = v3(i as f64, -0.3 * i as f64, 0.37 * i as f64 - 4.0);
            for j in [cm.rotation(&p), vessel.rotation(&p)] {
                assert!((&j * j.transpose() - DMatrix::<f64>::identity(3, 3)).norm() <= 1e-10);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn vessel_coriolis_is_skew(a in -100.0f64..100.0, b in -100.0f64..100.0, c in -100.0f64..100.0) {
            let v = v3(a, b, c);
            let cm = ExampleVesselPlant::default().coriolis(&DVector::zeros(3), &v);
            let s = &cm + cm.transpose();
            prop_assert!(s.amax() <= 1e-12);
        }

        #[test]
        fn vessel_force_matches_matrix_form(a in -100.0f64..100.0, b in -100.0f64..100.0, c in -100.0f64..100.0) {
            let v = v3(a, b, c);
            let z = DVector::zeros(3);
            let m = ExampleVesselPlant::default();
            let direct = m.velocity_force(&z, &v);
            let matrix = m.coriolis(&z, &v) * &v + m.damping(&z, &v) * &v + m.gravity(&z);
            prop_assert!((direct - &matrix).amax() <= 1e-12 * matrix.amax().max(1.0));
        }
    }
}
