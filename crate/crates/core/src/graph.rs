//! Fixed communication topology between the virtual leader and the followers.
//!
//! Agents are indexed `0..n` in code. The leader is not a row of the
//! adjacency matrix; its links live in `leader_links` (the diagonal of Δ).

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue tolerance used to call `L1` positive definite.
pub const PD_RELATIVE_TOL: f64 = 1e-9;

/// Undirected, weighted follower graph plus directed leader links.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    adjacency: DMatrix<f64>,
    leader_links: DVector<f64>,
}

impl Topology {
    pub fn new(adjacency: DMatrix<f64>, leader_links: DVector<f64>) -> Result<Self> {
        let n = adjacency.nrows();
        if n == 0 {
            return Err(Error::Topology("at least one follower is required".into()));
        }
        if adjacency.ncols() != n {
            return Err(Error::Topology(format!(
                "adjacency must be square, got {}x{}",
                n,
                adjacency.ncols()
            )));
        }
        if leader_links.len() != n {
            return Err(Error::Dimension {
                context: "leader links",
                expected: n,
                actual: leader_links.len(),
            });
        }
        for i in 0..n {
            if adjacency[(i, i)] != 0.0 {
                return Err(Error::Topology(format!("self loop on agent {}", i + 1)));
            }
            if !(leader_links[i] >= 0.0) || !leader_links[i].is_finite() {
                return Err(Error::Topology(format!(
                    "leader link weight of agent {} must be finite and >= 0, got {}",
                    i + 1,
                    leader_links[i]
                )));
            }
            for j in 0..n {
                let a = adjacency[(i, j)];
                if !(a >= 0.0) || !a.is_finite() {
                    return Err(Error::Topology(format!(
                        "edge weight a[{}][{}] must be finite and >= 0, got {a}",
                        i + 1,
                        j + 1
                    )));
                }
                if a != adjacency[(j, i)] {
                    return Err(Error::Topology(format!(
                        "follower graph must be undirected: a[{}][{}] = {a} but a[{}][{}] = {}",
                        i + 1,
                        j + 1,
                        j + 1,
                        i + 1,
                        adjacency[(j, i)]
                    )));
                }
            }
        }
        Ok(Self {
            adjacency,
            leader_links,
        })
    }

    /// Builds a topology from 0-based undirected edges `(i, j, weight)` and
    /// leader links `(i, weight)`. Repeated edges accumulate.
    pub fn from_edges(
        n_followers: usize,
        edges: &[(usize, usize, f64)],
        leader_links: &[(usize, f64)],
    ) -> Result<Self> {
        let mut adjacency = DMatrix::zeros(n_followers, n_followers);
        for &(i, j, w) in edges {
            if i >= n_followers || j >= n_followers {
                return Err(Error::Topology(format!(
                    "edge ({}, {}) references an agent outside 1..={n_followers}",
                    i + 1,
                    j + 1
                )));
            }
            if i == j {
                return Err(Error::Topology(format!("self loop on agent {}", i + 1)));
            }
            adjacency[(i, j)] += w;
            adjacency[(j, i)] += w;
        }
        let mut links = DVector::zeros(n_followers);
        for &(i, w) in leader_links {
            if i >= n_followers {
                return Err(Error::Topology(format!(
                    "leader link to agent {} outside 1..={n_followers}",
                    i + 1
                )));
            }
            links[i] += w;
        }
        Self::new(adjacency, links)
    }

    /// Follower ring `1-2-...-n-1` with unit weights and the leader linked to agent 1.
    pub fn ring_with_leader(n_followers: usize) -> Result<Self> {
        let edges: Vec<_> = match n_followers {
            0 | 1 => Vec::new(),
            2 => vec![(0, 1, 1.0)],
            n => (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect(),
        };
        Self::from_edges(n_followers, &edges, &[(0, 1.0)])
    }

    pub fn n_followers(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn leader_links(&self) -> &DVector<f64> {
        &self.leader_links
    }

    /// Neighbor lists `(j, a_ij)` over followers only.
    pub fn neighbors(&self) -> Vec<Vec<(usize, f64)>> {
        let n = self.n_followers();
        (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| self.adjacency[(i, j)] != 0.0)
                    .map(|j| (j, self.adjacency[(i, j)]))
                    .collect()
            })
            .collect()
    }

    /// Laplacian of the follower subgraph alone (no leader pinning).
    pub fn follower_subgraph_laplacian(&self) -> DMatrix<f64> {
        let n = self.n_followers();
        let mut l = -self.adjacency.clone();
        for i in 0..n {
            l[(i, i)] = self.adjacency.row(i).sum();
        }
        l
    }

    /// Returns the same graph with agents relabeled so that new agent `k` is
    /// old agent `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_followers();
        crate::error::check_len("permutation", n, perm.len())?;
        let adjacency = DMatrix::from_fn(n, n, |i, j| self.adjacency[(perm[i], perm[j])]);
        let links = DVector::from_fn(n, |i, _| self.leader_links[perm[i]]);
        Self::new(adjacency, links)
    }
}

/// Laplacians of the full graph `L`, the pinned follower block `L1` and Δ.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianPair {
    pub full: DMatrix<f64>,
    pub follower: DMatrix<f64>,
    pub delta: DMatrix<f64>,
}

/// `L = [[0, 0], [-Δ 1, L1]]` with `L1 = L_s + Δ`, so that `L 1 = 0`.
pub fn build_laplacians(topology: &Topology) -> LaplacianPair {
    let n = topology.n_followers();
    let delta = DMatrix::from_diagonal(topology.leader_links());
    let follower = topology.follower_subgraph_laplacian() + &delta;
    let mut full = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        full[(i + 1, 0)] = 0.0 - topology.leader_links()[i];
        for j in 0..n {
            full[(i + 1, j + 1)] = follower[(i, j)];
        }
    }
    LaplacianPair { full, follower, delta }
}

/// Outcome of the leader-reachability check.
#[derive(Debug, Clone, PartialEq)]
pub struct Connectivity {
    pub satisfied: bool,
    /// 0-based agents with no path from the leader.
    pub unreachable: Vec<usize>,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

impl Connectivity {
    pub fn diagnostic(&self) -> String {
        if self.satisfied {
            format!(
                "leader reaches every follower; lambda_min(L1) = {:.6e}",
                self.min_eigenvalue
            )
        } else if self.unreachable.is_empty() {
            format!(
                "L1 is not positive definite; lambda_min(L1) = {:.3e}",
                self.min_eigenvalue
            )
        } else {
            let ids: Vec<String> = self.unreachable.iter().map(|i| (i + 1).to_string()).collect();
            format!(
                "leader has no path to agents {{{}}}; lambda_min(L1) = {:.3e}",
                ids.join(", "),
                self.min_eigenvalue
            )
        }
    }
}

/// Leader reachability through leader links and the undirected follower graph.
pub fn check_assumption3(topology: &Topology) -> Connectivity {
    let n = topology.n_followers();
    let mut reached = vec![false; n];
    let mut queue = VecDeque::new();
    for i in 0..n {
        if topology.leader_links()[i] > 0.0 {
            reached[i] = true;
            queue.push_back(i);
        }
    }
    let neighbors = topology.neighbors();
    while let Some(i) = queue.pop_front() {
        for &(j, _) in &neighbors[i] {
            if !reached[j] {
                reached[j] = true;
                queue.push_back(j);
            }
        }
    }
    let unreachable: Vec<usize> = (0..n).filter(|&i| !reached[i]).collect();

    let eig = SymmetricEigen::new(build_laplacians(topology).follower).eigenvalues;
    let min_eigenvalue = eig.min();
    let max_eigenvalue = eig.max();
    let pd = min_eigenvalue > PD_RELATIVE_TOL * max_eigenvalue.max(f64::MIN_POSITIVE);
    Connectivity {
        satisfied: unreachable.is_empty() && pd,
        unreachable,
        min_eigenvalue,
        max_eigenvalue,
    }
}
