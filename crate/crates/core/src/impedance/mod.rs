//! Stage 2: per-branch impedance regression and the leaf-to-root sweep.
//!
//! With the conductor ratio `λ_z` fixed, the branch-flow voltage equation
//! leaves the reactance `x` as the only unknown and the mismatch of every
//! sample is a quadratic in `x`. Each regression is therefore solved exactly
//! by enumerating the library and minimizing a univariate piecewise
//! polynomial.

mod branch;
pub mod poly;
mod sweep;

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::powerflow::PowerFlowError;

pub use branch::{
    mismatch, mismatch_coefficients, solve_branch, solve_branch_lad, solve_branch_linearized,
    solve_branch_linearized_free, solve_branch_ls, unexcited_fallback,
};
pub use sweep::{orient_tree, reconstruct_flows, sweep, tree_from_adjacency, SweepOptions, SweepResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImpedanceError {
    #[error("branch carries no power in any sample; every library entry fits equally")]
    AllCandidatesDegenerate,
    #[error("conductor library is empty")]
    EmptyLibrary,
    #[error("branch regression needs at least one sample")]
    NoSamples,
    #[error("non-positive receiving-end voltage in sample {sample}")]
    NonPositiveVoltage { sample: usize },
    #[error("edges do not form a tree spanning buses 0..={n}")]
    NotATree { n: usize },
    #[error("recovered topology cannot be oriented into a tree rooted at the substation")]
    UnrootedTopology,
    #[error("layer {layer}, branch {branch}: {source}")]
    InBranch {
        layer: usize,
        branch: usize,
        #[source]
        source: Box<ImpedanceError>,
    },
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
}

/// Regression objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Least absolute deviations.
    #[default]
    Lad,
    /// Least squares.
    Ls,
    /// Least squares on the mismatch without the loss term, library constrained.
    LinearizedLs,
    /// Least squares on the mismatch without the loss term, `r` and `x` free.
    LinearizedFree,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lad" => Ok(Method::Lad),
            "ls" => Ok(Method::Ls),
            "linearized-ls" | "linearized_ls" => Ok(Method::LinearizedLs),
            "linearized-free" | "linearized_free" => Ok(Method::LinearizedFree),
            other => Err(format!("unknown method `{other}` (expected lad or ls)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Upper end of the reactance search interval, p.u.
    pub x_max: f64,
    /// A branch whose largest `P² + Q²` is at or below this is unexcited.
    pub excitation_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            x_max: 1.0,
            excitation_tol: 1e-16,
        }
    }
}

/// One sample of a branch regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchSample {
    /// `v_i - v_j`, squared magnitudes.
    pub dv: f64,
    /// Receiving-end flows.
    pub p: f64,
    pub q: f64,
    /// Receiving-end squared voltage magnitude.
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRegressionInput {
    samples: Vec<BranchSample>,
}

impl BranchRegressionInput {
    pub fn new(samples: Vec<BranchSample>) -> Result<Self, ImpedanceError> {
        if samples.is_empty() {
            return Err(ImpedanceError::NoSamples);
        }
        if let Some(k) = samples.iter().position(|s| !(s.v > crate::powerflow::MIN_VOLTAGE)) {
            return Err(ImpedanceError::NonPositiveVoltage { sample: k });
        }
        Ok(BranchRegressionInput { samples })
    }

    pub fn samples(&self) -> &[BranchSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Largest `P² + Q²` over the samples.
    pub fn excitation(&self) -> f64 {
        self.samples.iter().map(|s| s.p * s.p + s.q * s.q).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    Normal,
    /// A single sample: any root of its mismatch fits exactly.
    Underdetermined,
    /// No excitation; ratio and reactance are placeholders.
    Unexcited,
    /// Impedance imposed by the caller instead of estimated.
    Overridden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchEstimate {
    pub r: f64,
    pub x: f64,
    /// Index into the sorted library; `None` when the ratio was not constrained.
    pub z: Option<usize>,
    pub lambda: f64,
    pub objective: f64,
    pub residuals: Vec<f64>,
    /// Optimal objective for each library entry.
    pub per_z_objectives: Vec<f64>,
    pub confidence: Confidence,
}
