//! Certificate for the distance between the fitted and true Laplacian on
//! heterogeneous networks.
//!
//! With LinDistFlow data the mismatch at the true `(Y*, lambda*)` is
//! `2 Δλ p`. Writing the regressor of sample `k` as `M = [G p]` (the
//! `lambda` column rescaled by `-2`), the least-squares error obeys
//! `||y★ - y*|| <= 2 ||(Σ MᵀM)^{-1}|| Σ ||Mᵀ|| ||p|| ||Δλ||`.
//! Matrix norms are spectral; `||Mᵀ||₂ = sqrt(||d||² + ||p||²)` because
//! `M Mᵀ = ||d||² I + p pᵀ`. The reported bound uses the Frobenius norm of
//! `Δλ`, which dominates the spectral one.

use serde::{Deserialize, Serialize};

use super::fit::{data_matrices, unconstrained_normal_extremes};
use super::{LaplacianEstimate, TopologyError};
use crate::network::RadialNetwork;
use crate::powerflow::SampleSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCertificate {
    /// `||vec(Y★) - vec(Y*)||₂`.
    pub lhs: f64,
    pub eps: f64,
    /// Frobenius norm of the heterogeneity matrix.
    pub delta_norm: f64,
    pub delta_norm_spectral: f64,
    /// `eps * delta_norm`.
    pub rhs: f64,
    pub holds: bool,
}

/// Relative round-off allowance on `||vec(Y*)||`.
const ROUNDOFF: f64 = 1e-9;

/// Evaluates both sides of the bound for `est` (normally the unconstrained fit).
pub fn verify_prop3(
    net: &RadialNetwork,
    samples: &SampleSet,
    est: &LaplacianEstimate,
) -> Result<RobustnessCertificate, TopologyError> {
    let n = net.n();
    for got in [samples.n(), est.n()] {
        if got != n {
            return Err(TopologyError::DimensionMismatch { expected: n, got });
        }
    }
    let dm = data_matrices(samples)?;
    let (lo, _) = unconstrained_normal_extremes(&dm)?;
    if !(lo > 0.0) {
        return Err(TopologyError::SingularNormalMatrix);
    }
    let sum: f64 = (0..samples.len())
        .map(|k| {
            let d2 = dm.d.row(k).norm_squared();
            let p2 = dm.p.row(k).norm_squared();
            (d2 + p2).sqrt() * p2.sqrt()
        })
        .sum();
    let eps = 2.0 / lo * sum;

    let delta = net.delta_lambda_matrix();
    let delta_norm = delta.norm();
    let delta_norm_spectral = delta.clone().svd(false, false).singular_values.max();
    let truth = net.weighted_laplacian();
    let lhs = (&est.y - &truth).norm();
    let rhs = eps * delta_norm;
    // round-off floor so an exact homogeneous fit still certifies
    let slack = ROUNDOFF * truth.norm();
    Ok(RobustnessCertificate {
        lhs,
        eps,
        delta_norm,
        delta_norm_spectral,
        rhs,
        holds: lhs <= rhs + slack,
    })
}
