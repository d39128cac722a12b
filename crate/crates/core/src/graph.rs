//! Communication digraph with leader pinning.
//!
//! `a_ij > 0` means agent `i` receives information from agent `j`
//! (information flows `j -> i`). Edge lists use 1-based agent ids, as in
//! configuration files; every other method takes 0-based agent indices.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::linalg::{min_singular_value, Mat, Vector};

/// Singular values of `L + G` below this are treated as structural singularity.
pub const SIGMA_MIN_THRESHOLD: f64 = 1e-12;

/// A directed edge `from -> to` with 1-based agent ids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

impl Edge {
    pub fn new(from: usize, to: usize, weight: f64) -> Self {
        Self { from, to, weight }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphTopology {
    adjacency: Mat,
    pinning: Vector,
    in_degrees: Vector,
    laplacian: Mat,
    neighbors: Vec<Vec<usize>>,
}

impl GraphTopology {
    /// Builds the topology and checks that every follower is reachable from
    /// the leader through pinning links and graph edges.
    pub fn build(n_agents: usize, edges: &[Edge], pins: &[usize]) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::Validation("n_agents must be positive".into()));
        }
        let check_id = |id: usize| {
            if id == 0 || id > n_agents {
                Err(Error::AgentOutOfRange { id, n: n_agents })
            } else {
                Ok(id - 1)
            }
        };

        let mut adjacency = Mat::zeros(n_agents, n_agents);
        for e in edges {
            let from = check_id(e.from)?;
            let to = check_id(e.to)?;
            if from == to {
                return Err(Error::SelfLoop(e.from));
            }
            if !(e.weight > 0.0) || !e.weight.is_finite() {
                return Err(Error::NonPositiveWeight {
                    from: e.from,
                    to: e.to,
                    weight: e.weight,
                });
            }
            if adjacency[(to, from)] != 0.0 {
                return Err(Error::Validation(format!(
                    "duplicate edge {}->{}",
                    e.from, e.to
                )));
            }
            adjacency[(to, from)] = e.weight;
        }

        let mut pinning = Vector::zeros(n_agents);
        for &p in pins {
            pinning[check_id(p)?] = 1.0;
        }

        let in_degrees = Vector::from_iterator(n_agents, adjacency.row_iter().map(|r| r.sum()));
        let laplacian = Mat::from_diagonal(&in_degrees) - &adjacency;
        let neighbors = (0..n_agents)
            .map(|i| (0..n_agents).filter(|&j| adjacency[(i, j)] > 0.0).collect())
            .collect();

        let topology = Self {
            adjacency,
            pinning,
            in_degrees,
            laplacian,
            neighbors,
        };
        topology.check_spanning_tree()?;
        Ok(topology)
    }

    /// BFS from a virtual leader node over pinning links and `j -> i` edges.
    fn check_spanning_tree(&self) -> Result<()> {
        let n = self.n_agents();
        let mut reached = vec![false; n];
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| self.pinning[i] > 0.0).collect();
        for &i in &queue {
            reached[i] = true;
        }
        while let Some(j) = queue.pop_front() {
            for i in 0..n {
                if !reached[i] && self.adjacency[(i, j)] > 0.0 {
                    reached[i] = true;
                    queue.push_back(i);
                }
            }
        }
        let unreachable: Vec<usize> = (0..n).filter(|&i| !reached[i]).map(|i| i + 1).collect();
        if unreachable.is_empty() {
            Ok(())
        } else {
            Err(Error::NoSpanningTree { unreachable })
        }
    }

    pub fn n_agents(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &Mat {
        &self.adjacency
    }

    pub fn pinning(&self) -> &Vector {
        &self.pinning
    }

    pub fn in_degrees(&self) -> &Vector {
        &self.in_degrees
    }

    pub fn laplacian(&self) -> &Mat {
        &self.laplacian
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i, j)]
    }

    pub fn in_degree(&self, i: usize) -> f64 {
        self.in_degrees[i]
    }

    pub fn pin(&self, i: usize) -> f64 {
        self.pinning[i]
    }

    /// `d_i + g_i`.
    pub fn coupling(&self, i: usize) -> f64 {
        self.in_degrees[i] + self.pinning[i]
    }

    /// Neighbors of agent `i` (0-based, ascending).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Edge list with 1-based ids, ordered by receiver then sender.
    pub fn edges(&self) -> Vec<Edge> {
        let n = self.n_agents();
        let mut out = Vec::new();
        for i in 0..n {
            for &j in &self.neighbors[i] {
                out.push(Edge::new(j + 1, i + 1, self.adjacency[(i, j)]));
            }
        }
        out
    }

    pub fn pins(&self) -> Vec<usize> {
        (0..self.n_agents())
            .filter(|&i| self.pinning[i] > 0.0)
            .map(|i| i + 1)
            .collect()
    }

    /// `L + G`.
    pub fn pinned_laplacian(&self) -> Mat {
        &self.laplacian + Mat::from_diagonal(&self.pinning)
    }

    /// Local neighborhood tracking error of agent `i`.
    pub fn neighborhood_error(
        &self,
        followers: &[Vector],
        leader: &Vector,
        i: usize,
    ) -> Result<Vector> {
        let n_agents = self.n_agents();
        if followers.len() != n_agents {
            return Err(Error::DimensionMismatch {
                context: "follower states",
                expected: n_agents,
                got: followers.len(),
            });
        }
        if i >= n_agents {
            return Err(Error::UnknownAgent(i));
        }
        let n = leader.len();
        if let Some(bad) = followers.iter().find(|x| x.len() != n) {
            return Err(Error::DimensionMismatch {
                context: "follower state",
                expected: n,
                got: bad.len(),
            });
        }
        let xi = &followers[i];
        let mut delta = (leader - xi) * self.pinning[i];
        for &j in &self.neighbors[i] {
            delta += (&followers[j] - xi) * self.adjacency[(i, j)];
        }
        Ok(delta)
    }

    pub fn neighborhood_errors(&self, followers: &[Vector], leader: &Vector) -> Result<Vec<Vector>> {
        (0..self.n_agents())
            .map(|i| self.neighborhood_error(followers, leader, i))
            .collect()
    }

    /// Stacked form `δ = −((L+G) ⊗ I_n) ε` with `ε = x − 1 ⊗ x_0`.
    pub fn stacked_errors(&self, followers: &[Vector], leader: &Vector) -> Vector {
        let n = leader.len();
        let eps = disagreement(followers, leader);
        -(self.pinned_laplacian().kronecker(&Mat::identity(n, n)) * eps)
    }

    /// `σ_min((L+G) ⊗ I_n)`, which equals `σ_min(L+G)`.
    pub fn sigma_min(&self) -> f64 {
        min_singular_value(&self.pinned_laplacian())
    }

    /// Upper bound `‖δ‖ / σ_min((L+G) ⊗ I_n)` on the global disagreement norm.
    pub fn disagreement_bound(&self, delta_norm: f64, n: usize) -> Result<f64> {
        let lg = self.pinned_laplacian().kronecker(&Mat::identity(n, n));
        let sigma_min = min_singular_value(&lg);
        if sigma_min < SIGMA_MIN_THRESHOLD {
            return Err(Error::SingularPinnedLaplacian { sigma_min });
        }
        Ok(delta_norm / sigma_min)
    }
}

/// Global disagreement vector `x − 1 ⊗ x_0`.
pub fn disagreement(followers: &[Vector], leader: &Vector) -> Vector {
    let n = leader.len();
    let mut eps = Vector::zeros(n * followers.len());
    for (i, x) in followers.iter().enumerate() {
        eps.rows_mut(i * n, n).copy_from(&(x - leader));
    }
    eps
}
