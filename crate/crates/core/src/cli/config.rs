//! Scenario files: TOML schema, defaults, dotted-path overrides, exhaustive
//! validation and construction of a runnable [`Scenario`].
//!
//! Agent numbers in the file are 1-based. Lattice indices of ideal weights
//! are 0-based per axis.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::{AnalysisParams, Ceilings};
use crate::controller::{ControllerGains, FormationGeometry};
use crate::estimator::{Observer, ObserverParams, DEFAULT_SMOOTHING_EPS};
use crate::graph::{check_assumption3, Topology};
use crate::models::{
    ConstantMatrixPlant, ExampleVesselPlant, InputSignal, LeaderModel, Plant, PlantModel, SyntheticPlant,
};
use crate::rbf::{build_grid, Widths, DEFAULT_MAX_NEURONS};
use crate::sim::{InitialConditions, RunConfig, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Free-form label echoed into the run metadata. Default `"scenario"`.
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub run: RunSection,
    pub topology: TopologySection,
    pub leader: LeaderSection,
    pub plant: PlantSection,
    #[serde(default)]
    pub observer: ObserverSection,
    pub controller: ControllerSection,
    pub formation: FormationSection,
    pub rbf: RbfSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub monitor: MonitorSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_name() -> String {
    "scenario".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Step size, default `1e-3`.
    pub dt: f64,
    /// Duration, default `200`.
    pub t_end: f64,
    /// Steps between log rows, default `10`.
    pub log_stride: usize,
    /// Default `[0, 0.5, 0.8, 1]`.
    pub checkpoint_fractions: Vec<f64>,
    /// Weight-averaging window as fractions of `t_end`, default `[0.8, 1]`.
    pub mean_window: [f64; 2],
}

impl Default for RunSection {
    fn default() -> Self {
        let r = RunConfig::default();
        Self {
            dt: r.dt,
            t_end: r.t_end,
            log_stride: r.log_stride,
            checkpoint_fractions: r.checkpoint_fractions,
            mean_window: [r.mean_window.0, r.mean_window.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub n_followers: usize,
    /// Undirected `[i, j, weight]`. Default: unit ring `1-2-...-N-1`.
    #[serde(default)]
    pub edges: Option<Vec<(usize, usize, f64)>>,
    /// `[i, weight]` links from the leader. Default `[[1, 1.0]]`.
    #[serde(default = "default_leader_links")]
    pub leader_links: Vec<(usize, f64)>,
}

fn default_leader_links() -> Vec<(usize, f64)> {
    vec![(1, 1.0)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderSection {
    /// `n x 2n`.
    pub a0: Vec<Vec<f64>>,
    /// `n x n_r`.
    pub b0: Vec<Vec<f64>>,
    pub input: InputSignal,
    /// Input bound. Default: the bound of `input`, or 1 if that is zero.
    #[serde(default)]
    pub r_star: Option<f64>,
    /// `[p0; v0]`.
    pub initial: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSection {
    ExampleVessel {},
    ConstantMatrix {
        inertia: Vec<Vec<f64>>,
        /// Default zero.
        #[serde(default)]
        linear_damping: Option<Vec<Vec<f64>>>,
        /// Diagonal `|nu_k|` coefficients. Default zero.
        #[serde(default)]
        quadratic_damping: Option<Vec<f64>>,
        /// Default zero.
        #[serde(default)]
        gravity: Option<Vec<f64>>,
        /// Default `false`.
        #[serde(default)]
        heading_rotation: bool,
    },
    Synthetic {
        inertia: Vec<Vec<f64>>,
        ideal_weights: Vec<IdealWeight>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdealWeight {
    /// 1-based output channel.
    pub channel: usize,
    /// Lattice index of the center along each input axis, 0-based.
    pub center: Vec<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverSection {
    /// Default `1`.
    pub alpha1: f64,
    /// Default `200`.
    pub alpha2: f64,
    /// Default `-5 I`.
    pub k1: Option<Vec<Vec<f64>>>,
    /// Default `-[5 B0^T | B0^T]`.
    pub k2: Option<Vec<Vec<f64>>>,
    /// Default `0.1`; `0` selects the exact switching law.
    pub smoothing_eps: f64,
    /// Default zero for every agent.
    pub initial_estimates: Option<Vec<Vec<f64>>>,
}

impl Default for ObserverSection {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 200.0,
            k1: None,
            k2: None,
            smoothing_eps: DEFAULT_SMOOTHING_EPS,
            initial_estimates: None,
        }
    }
}

/// A gain given either as its diagonal or as a full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainMatrix {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub h1: GainMatrix,
    pub h2: GainMatrix,
    pub gamma1: f64,
    pub gamma2: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormationSection {
    pub offsets: Vec<Vec<f64>>,
    pub initial_positions: Vec<Vec<f64>>,
    /// Default zero.
    #[serde(default)]
    pub initial_velocities: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridBounds {
    /// `[lo, hi]` on every axis.
    Uniform([f64; 2]),
    PerAxis(Vec<[f64; 2]>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbfSection {
    pub points_per_dim: usize,
    pub bounds: GridBounds,
    /// Gaussian width `gamma` in `exp(-|x - c|^2 / gamma)`.
    pub width: f64,
    /// Activations below this are dropped from the regressor. Default `1e-16`.
    #[serde(default = "default_truncation")]
    pub truncation: f64,
    /// Default `4194304`.
    #[serde(default = "default_max_neurons")]
    pub max_neurons: usize,
}

fn default_truncation() -> f64 {
    1e-16
}

fn default_max_neurons() -> usize {
    DEFAULT_MAX_NEURONS
}

impl RbfSection {
    /// Distance beyond which an activation falls under `truncation`.
    pub fn regressor_radius(&self) -> f64 {
        (self.width * (1.0 / self.truncation).ln()).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Trailing fraction treated as steady state. Default `0.2`.
    pub steady_fraction: f64,
    /// Leading fraction skipped by the excitation sweep. Default `0.2`.
    pub transient_fraction: f64,
    /// Localization radius of the near-neuron set. Default `45`.
    pub zeta_radius: f64,
    /// Excitation window. Default: one period of a sinusoidal leader input, else `2 pi`.
    pub pe_window: Option<f64>,
    /// Leader amplitude that scales the observer tolerance. Default: max `|p0(0)|`
    /// component over the first state block, or 1 if that is zero.
    pub leader_amplitude: Option<f64>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            steady_fraction: 0.2,
            transient_fraction: 0.2,
            zeta_radius: 45.0,
            pe_window: None,
            leader_amplitude: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorSection {
    /// Default `1e9` for every ceiling.
    pub z1_max: f64,
    pub z2_max: f64,
    pub w_inf_max: f64,
    /// Default `0`.
    pub after: f64,
}

impl Default for MonitorSection {
    fn default() -> Self {
        Self {
            z1_max: 1e9,
            z2_max: 1e9,
            w_inf_max: 1e9,
            after: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Default `"out"`; the `FORMATION_OUT_DIR` environment variable wins.
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

/// One validation failure, tied to its location in the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone)]
pub struct BuiltScenario {
    pub scenario: Scenario,
    pub run: RunConfig,
    pub analysis: AnalysisParams,
    /// `[channel][neuron]` true weights when the plant is synthetic.
    pub ideal_weights: Option<Vec<Vec<f64>>>,
    pub warnings: Vec<String>,
}

/// Parses TOML text after applying `key=value` overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ScenarioConfig, Vec<Issue>> {
    let mut value: toml::Value = toml::from_str(text).map_err(|e| {
        vec![Issue {
            path: "<file>".into(),
            message: e.to_string(),
        }]
    })?;
    let mut issues = Vec::new();
    for o in overrides {
        if let Err(message) = apply_override(&mut value, o) {
            issues.push(Issue {
                path: format!("--override {o}"),
                message,
            });
        }
    }
    if !issues.is_empty() {
        return Err(issues);
    }
    value.try_into().map_err(|e: toml::de::Error| {
        vec![Issue {
            path: "<file>".into(),
            message: e.to_string(),
        }]
    })
}

/// Sets a dotted `key=value` in a TOML tree, creating tables on the way.
/// The value is read as TOML, falling back to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| "expected key=value".to_string())?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("malformed key `{key}`"));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| format!("`{p}` is not inside a table"))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| format!("parent of `{}` is not a table", parts[parts.len() - 1]))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

struct Issues(Vec<Issue>);

impl Issues {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(Issue {
            path: path.into(),
            message: message.into(),
        });
    }

    fn check<T>(&mut self, path: &str, r: crate::Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.push(path, e.to_string());
                None
            }
        }
    }
}

fn matrix(issues: &mut Issues, path: &str, rows: &[Vec<f64>], shape: Option<(usize, usize)>) -> Option<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |v| v.len());
    if r == 0 || c == 0 {
        issues.push(path, "matrix must be non-empty");
        return None;
    }
    if rows.iter().any(|row| row.len() != c) {
        issues.push(path, "rows have different lengths");
        return None;
    }
    if let Some((er, ec)) = shape {
        if (r, c) != (er, ec) {
            issues.push(path, format!("expected a {er}x{ec} matrix, got {r}x{c}"));
            return None;
        }
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        issues.push(path, "entries must be finite");
        return None;
    }
    Some(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn vector(issues: &mut Issues, path: &str, v: &[f64], len: usize) -> Option<DVector<f64>> {
    if v.len() != len {
        issues.push(path, format!("expected {len} entries, got {}", v.len()));
        return None;
    }
    if v.iter().any(|x| !x.is_finite()) {
        issues.push(path, "entries must be finite");
        return None;
    }
    Some(DVector::from_column_slice(v))
}

fn vectors(issues: &mut Issues, path: &str, v: &[Vec<f64>], count: usize, len: usize) -> Option<Vec<DVector<f64>>> {
    if v.len() != count {
        issues.push(path, format!("expected {count} agents, got {}", v.len()));
        return None;
    }
    let out: Vec<_> = v
        .iter()
        .enumerate()
        .map(|(i, x)| vector(issues, &format!("{path}[{}]", i + 1), x, len))
        .collect();
    out.into_iter().collect()
}

fn gain(issues: &mut Issues, path: &str, g: &GainMatrix, n: usize) -> Option<DMatrix<f64>> {
    match g {
        GainMatrix::Diagonal(d) => vector(issues, path, d, n).map(|v| DMatrix::from_diagonal(&v)),
        GainMatrix::Full(rows) => matrix(issues, path, rows, Some((n, n))),
    }
}

impl ScenarioConfig {
    /// Runs every check and reports all failures, or builds the scenario.
    pub fn build(&self) -> Result<BuiltScenario, Vec<Issue>> {
        let mut is = Issues(Vec::new());
        let mut warnings = Vec::new();

        let run = RunConfig {
            dt: self.run.dt,
            t_end: self.run.t_end,
            log_stride: self.run.log_stride,
            checkpoint_fractions: self.run.checkpoint_fractions.clone(),
            mean_window: (self.run.mean_window[0], self.run.mean_window[1]),
        };
        if let Err(e) = run.validate() {
            is.push("run", e.to_string());
        }

        // topology
        let na = self.topology.n_followers;
        let topology = if na == 0 {
            is.push("topology.n_followers", "at least one follower is required");
            None
        } else {
            let edges: Vec<(usize, usize, f64)> = match &self.topology.edges {
                Some(e) => e.clone(),
                None if na == 1 => Vec::new(),
                None if na == 2 => vec![(1, 2, 1.0)],
                None => (1..=na).map(|i| (i, i % na + 1, 1.0)).collect(),
            };
            let mut ok = true;
            for (m, &(i, j, w)) in edges.iter().enumerate() {
                if i == 0 || j == 0 || i > na || j > na {
                    is.push(
                        format!("topology.edges[{}]", m + 1),
                        format!("agents must lie in 1..={na}"),
                    );
                    ok = false;
                }
                if !(w > 0.0) || !w.is_finite() {
                    is.push(
                        format!("topology.edges[{}]", m + 1),
                        format!("weight must be positive, got {w}"),
                    );
                    ok = false;
                }
            }
            for (m, &(i, w)) in self.topology.leader_links.iter().enumerate() {
                if i == 0 || i > na {
                    is.push(
                        format!("topology.leader_links[{}]", m + 1),
                        format!("agent must lie in 1..={na}"),
                    );
                    ok = false;
                }
                if !(w > 0.0) || !w.is_finite() {
                    is.push(
                        format!("topology.leader_links[{}]", m + 1),
                        format!("weight must be positive, got {w}"),
                    );
                    ok = false;
                }
            }
            if ok {
                let zero_edges: Vec<_> = edges.iter().map(|&(i, j, w)| (i - 1, j - 1, w)).collect();
                let links: Vec<_> = self.topology.leader_links.iter().map(|&(i, w)| (i - 1, w)).collect();
                is.check("topology", Topology::from_edges(na, &zero_edges, &links))
                    .and_then(|t| {
                        let c = check_assumption3(&t);
                        if c.satisfied {
                            Some(t)
                        } else {
                            is.push("topology", format!("leader connectivity fails: {}", c.diagnostic()));
                            None
                        }
                    })
            } else {
                None
            }
        };

        // leader
        let a0 = matrix(&mut is, "leader.a0", &self.leader.a0, None);
        let n = a0.as_ref().map(|m| m.nrows());
        if let (Some(a), Some(n)) = (&a0, n) {
            if a.ncols() != 2 * n {
                is.push("leader.a0", format!("must be n x 2n, got {}x{}", n, a.ncols()));
            }
        }
        let b0 = matrix(&mut is, "leader.b0", &self.leader.b0, None);
        if let (Some(b), Some(n)) = (&b0, n) {
            if b.nrows() != n {
                is.push("leader.b0", format!("must have {n} rows, got {}", b.nrows()));
            }
            if b.ncols() != self.leader.input.dim() {
                is.push(
                    "leader.input",
                    format!(
                        "has dimension {} but leader.b0 has {} columns",
                        self.leader.input.dim(),
                        b.ncols()
                    ),
                );
            }
        }
        let r_star = self.leader.r_star.unwrap_or_else(|| {
            let b = self.leader.input.bound();
            if b > 0.0 {
                b
            } else {
                1.0
            }
        });
        let leader = match (&a0, &b0) {
            (Some(a), Some(b)) if is.0.iter().all(|i| !i.path.starts_with("leader")) => is.check(
                "leader",
                LeaderModel::new(a.clone(), b.clone(), self.leader.input.clone(), r_star),
            ),
            _ => None,
        };
        let x0 = n.and_then(|n| vector(&mut is, "leader.initial", &self.leader.initial, 2 * n));

        // rbf
        let grid = n.and_then(|n| {
            let dim = 2 * n;
            let bounds: Vec<(f64, f64)> = match &self.rbf.bounds {
                GridBounds::Uniform([lo, hi]) => vec![(*lo, *hi); dim],
                GridBounds::PerAxis(b) => {
                    if b.len() != dim {
                        is.push("rbf.bounds", format!("expected {dim} axes, got {}", b.len()));
                        return None;
                    }
                    b.iter().map(|&[lo, hi]| (lo, hi)).collect()
                }
            };
            if !(self.rbf.truncation > 0.0 && self.rbf.truncation < 1.0) {
                is.push(
                    "rbf.truncation",
                    format!("must lie in (0, 1), got {}", self.rbf.truncation),
                );
            }
            is.check(
                "rbf",
                build_grid(
                    dim,
                    self.rbf.points_per_dim,
                    &bounds,
                    Widths::Uniform(self.rbf.width),
                    self.rbf.max_neurons,
                ),
            )
            .map(Arc::new)
        });

        // plant
        let mut true_weights = None;
        let plant = n.and_then(|n| {
            let model: Option<Arc<dyn PlantModel>> = match &self.plant {
                PlantSection::ExampleVessel {} => {
                    if n != 3 {
                        is.push(
                            "plant.kind",
                            format!("example_vessel is three-dimensional but the leader has n = {n}"),
                        );
                        None
                    } else {
                        Some(Arc::new(ExampleVesselPlant::default()))
                    }
                }
                PlantSection::ConstantMatrix {
                    inertia,
                    linear_damping,
                    quadratic_damping,
                    gravity,
                    heading_rotation,
                } => {
                    let m = matrix(&mut is, "plant.inertia", inertia, Some((n, n)));
                    let d = match linear_damping {
                        Some(d) => matrix(&mut is, "plant.linear_damping", d, Some((n, n))),
                        None => Some(DMatrix::zeros(n, n)),
                    };
                    let q = match quadratic_damping {
                        Some(q) => {
                            vector(&mut is, "plant.quadratic_damping", q, n).map(|v| v.iter().copied().collect())
                        }
                        None => Some(vec![0.0; n]),
                    };
                    let g = match gravity {
                        Some(g) => vector(&mut is, "plant.gravity", g, n),
                        None => Some(DVector::zeros(n)),
                    };
                    match (m, d, q, g) {
                        (Some(m), Some(d), Some(q), Some(g)) => is
                            .check("plant", ConstantMatrixPlant::new(m, d, q, g, *heading_rotation))
                            .map(|p| Arc::new(p) as Arc<dyn PlantModel>),
                        _ => None,
                    }
                }
                PlantSection::Synthetic { inertia, ideal_weights } => {
                    let m = matrix(&mut is, "plant.inertia", inertia, Some((n, n)));
                    match (m, &grid) {
                        (Some(m), Some(grid)) => {
                            let mut entries = Vec::new();
                            for (q, w) in ideal_weights.iter().enumerate() {
                                let path = format!("plant.ideal_weights[{}]", q + 1);
                                if w.channel == 0 || w.channel > n {
                                    is.push(&path, format!("channel must lie in 1..={n}"));
                                    continue;
                                }
                                match grid.flat_index(&w.center) {
                                    Some(j) => entries.push((w.channel - 1, j, w.weight)),
                                    None => is.push(
                                        &path,
                                        format!(
                                            "center index {:?} is not on the {}-point lattice of dimension {}",
                                            w.center,
                                            grid.per_dim(),
                                            grid.dim()
                                        ),
                                    ),
                                }
                            }
                            is.check("plant", SyntheticPlant::new(m, grid.clone(), entries))
                                .map(|p| {
                                    true_weights = Some(p.ideal_weights());
                                    Arc::new(p) as Arc<dyn PlantModel>
                                })
                        }
                        _ => None,
                    }
                }
            };
            model.and_then(|m| is.check("plant.inertia", Plant::new(m)))
        });

        // observer
        let obs_params = leader.as_ref().and_then(|l| {
            let o = &self.observer;
            let n = l.dim();
            let default = ObserverParams::tuned_default(l, 1.0, 1.0).expect("positive defaults");
            let k1 = match &o.k1 {
                Some(k) => matrix(&mut is, "observer.k1", k, Some((2 * n, 2 * n))),
                None => Some(default.k1),
            };
            let k2 = match &o.k2 {
                Some(k) => matrix(&mut is, "observer.k2", k, Some((l.input_dim(), 2 * n))),
                None => Some(default.k2),
            };
            match (k1, k2) {
                (Some(k1), Some(k2)) => is.check(
                    "observer",
                    ObserverParams::new(k1, k2, o.alpha1, o.alpha2, o.smoothing_eps),
                ),
                _ => None,
            }
        });
        let estimates = match (&self.observer.initial_estimates, n) {
            (Some(e), Some(n)) => vectors(&mut is, "observer.initial_estimates", e, na, 2 * n),
            (None, Some(n)) => Some(vec![DVector::zeros(2 * n); na]),
            _ => None,
        };

        // controller
        let gains = n.and_then(|n| {
            let h1 = gain(&mut is, "controller.h1", &self.controller.h1, n);
            let h2 = gain(&mut is, "controller.h2", &self.controller.h2, n);
            let c = &self.controller;
            match (h1, h2) {
                (Some(h1), Some(h2)) => is.check(
                    "controller",
                    ControllerGains::shared(na.max(1), h1, h2, c.gamma1, c.gamma2, c.sigma),
                ),
                _ => None,
            }
        });
        if let Some(g) = &gains {
            warnings.extend(g.margin_warnings());
        }

        // formation
        let (offsets, positions, velocities) = match n {
            Some(n) => (
                vectors(&mut is, "formation.offsets", &self.formation.offsets, na, n),
                vectors(
                    &mut is,
                    "formation.initial_positions",
                    &self.formation.initial_positions,
                    na,
                    n,
                ),
                match &self.formation.initial_velocities {
                    Some(v) => vectors(&mut is, "formation.initial_velocities", v, na, n),
                    None => Some(vec![DVector::zeros(n); na]),
                },
            ),
            None => (None, None, None),
        };

        // analysis and monitor
        let a = &self.analysis;
        for (path, v) in [
            ("analysis.steady_fraction", a.steady_fraction),
            ("analysis.transient_fraction", a.transient_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                is.push(path, format!("must lie in (0, 1), got {v}"));
            }
        }
        if !(a.zeta_radius > 0.0) {
            is.push(
                "analysis.zeta_radius",
                format!("must be positive, got {}", a.zeta_radius),
            );
        }
        let pe_window = a.pe_window.unwrap_or(match &self.leader.input {
            InputSignal::Sinusoid { omega, .. } if *omega > 0.0 => 2.0 * PI / omega,
            _ => 2.0 * PI,
        });
        if !(pe_window > 0.0) {
            is.push("analysis.pe_window", format!("must be positive, got {pe_window}"));
        }
        let leader_amplitude = a.leader_amplitude.unwrap_or_else(|| {
            let m = n
                .map(|n| self.leader.initial.iter().take(n).fold(0.0f64, |m, v| m.max(v.abs())))
                .unwrap_or(0.0);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        });
        let mon = &self.monitor;
        for (path, v) in [
            ("monitor.z1_max", mon.z1_max),
            ("monitor.z2_max", mon.z2_max),
            ("monitor.w_inf_max", mon.w_inf_max),
        ] {
            if !(v > 0.0) {
                is.push(path, format!("must be positive, got {v}"));
            }
        }
        if self.output.dir.trim().is_empty() {
            is.push("output.dir", "must not be empty");
        }

        let observer = match (&obs_params, &leader, &topology) {
            (Some(p), Some(l), Some(t)) => is.check("observer", Observer::new(p.clone(), l, t)),
            _ => None,
        };

        if !is.0.is_empty() {
            return Err(is.0);
        }
        let (Some(leader), Some(plant), Some(topology), Some(observer), Some(gains), Some(grid)) =
            (leader, plant, topology, observer, gains, grid)
        else {
            return Err(vec![Issue {
                path: "<file>".into(),
                message: "incomplete scenario".into(),
            }]);
        };
        let regressor_radius = self.rbf.regressor_radius();
        let initial = InitialConditions {
            leader: x0.expect("checked"),
            positions: positions.expect("checked"),
            velocities: velocities.expect("checked"),
            estimates: estimates.expect("checked"),
        };
        let scenario = Scenario::new(
            leader,
            plant,
            topology,
            observer,
            gains,
            FormationGeometry {
                offsets: offsets.expect("checked"),
            },
            grid,
            regressor_radius,
            initial,
        )
        .map_err(|e| {
            vec![Issue {
                path: "<file>".into(),
                message: e.to_string(),
            }]
        })?;
        Ok(BuiltScenario {
            scenario,
            run,
            analysis: AnalysisParams {
                steady_fraction: a.steady_fraction,
                transient_fraction: a.transient_fraction,
                zeta_radius: a.zeta_radius,
                pe_window,
                leader_amplitude,
                ceilings: Ceilings {
                    z1: mon.z1_max,
                    z2: mon.z2_max,
                    w_inf: mon.w_inf_max,
                    after: mon.after,
                },
            },
            ideal_weights: true_weights,
            warnings,
        })
    }
}
