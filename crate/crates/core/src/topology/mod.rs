//! Stage 1: topology identification from a fitted weighted Laplacian.

mod cluster;
mod fit;
mod robustness;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::normalize_minmax;

pub use cluster::{
    auto_radius, dbscan_1d, default_gamma, recover_topology, ClusterMode, DbscanLabels, Radius,
    RecoveryConfig,
};
pub use fit::{fit_laplacian, fit_laplacian_unconstrained, MAX_CONDITION, MIN_SAMPLES_PER_BUS};
pub use robustness::{verify_prop3, RobustnessCertificate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("{samples} samples supplied, at least {required} required")]
    InsufficientSamples { samples: usize, required: usize },
    #[error("normal equations are ill-conditioned (condition number {0:e}); the data lack excitation")]
    IllConditioned(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("row {0} of the estimate has identical off-diagonal entries")]
    DegenerateRow(usize),
    #[error("no density cluster found in row {0}")]
    NoClusterFound(usize),
    #[error("at least 3 points and more than gamma = {gamma} are required, got {points}")]
    TooFewPoints { points: usize, gamma: usize },
    #[error("normal-equation matrix is singular")]
    SingularNormalMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// `Y` constrained symmetric (upper triangle plus diagonal are the unknowns).
    Symmetric,
    /// All `n^2` entries of `Y` free.
    Unconstrained,
}

/// Fitted weighted Laplacian and R/X ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianEstimate {
    pub y: DMatrix<f64>,
    pub lambda: f64,
    /// `||e||_2` at the optimum.
    pub residual_norm: f64,
    /// Condition number of the normal-equation matrix.
    pub condition: f64,
    pub parameterization: Parameterization,
}

impl LaplacianEstimate {
    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    /// Relabels buses: new bus `i + 1` is old bus `perm[i] + 1`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n();
        LaplacianEstimate {
            y: DMatrix::from_fn(n, n, |i, j| self.y[(perm[i], perm[j])]),
            ..self.clone()
        }
    }

    /// Row-wise min-max normalized off-diagonal entries; diagonal set to 1.
    pub fn normalized(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::from_element(n, n, 1.0);
        for i in 0..n {
            let off: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| self.y[(i, j)]).collect();
            if let Ok(norm) = normalize_minmax(&off) {
                for (j, v) in (0..n).filter(|&j| j != i).zip(norm) {
                    out[(i, j)] = v;
                }
            }
        }
        out
    }
}

/// Per-row output of the clustering step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDiagnostics {
    pub bus: usize,
    pub gamma: usize,
    pub xi: f64,
    pub clusters: usize,
    pub noise: usize,
    /// Buses flagged as connected from this row.
    pub flagged: Vec<usize>,
    /// Normalized upper edge of the unconnected cluster.
    pub boundary: f64,
    /// `sum_j y_ij / y_ii`: positive for substation children, near 0 otherwise.
    pub row_sum_ratio: f64,
}

/// Recovered connectivity among buses `1..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyEstimate {
    pub n: usize,
    /// Unordered pairs `(i, j)`, `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// Buses judged adjacent to the substation, one per connected component.
    pub root_buses: Vec<usize>,
    pub gamma: usize,
    pub rows: Vec<RowDiagnostics>,
}

impl AdjacencyEstimate {
    pub fn is_connected(&self, i: usize, j: usize) -> bool {
        let key = (i.min(j), i.max(j));
        self.edges.binary_search(&key).is_ok()
    }

    /// Connectivity labels (`1` connected) indexed `[i - 1][j - 1]`.
    pub fn labels(&self) -> Vec<Vec<u8>> {
        let mut m = vec![vec![0u8; self.n]; self.n];
        for &(i, j) in &self.edges {
            m[i - 1][j - 1] = 1;
            m[j - 1][i - 1] = 1;
        }
        m
    }

    /// Edges among `1..=n` plus the substation edges `(0, r)`.
    pub fn all_edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<_> = self.root_buses.iter().map(|&r| (0, r)).collect();
        e.extend(self.edges.iter().copied());
        e
    }
}
