//! Least-squares fit of the weighted Laplacian and the common R/X ratio.
//!
//! Per snapshot `k` the mismatch is `e = Y (v - v0 1) - 2 lambda p - 2 q`.
//! Stacking snapshots row-wise with `D[k, i] = v_i - v0`, `P[k, i] = p_i`,
//! `Q[k, i] = q_i`, the residual matrix is `E = D Y^T - 2 lambda P - 2 Q`.
//!
//! The symmetric fit restricts `Y` to symmetric matrices, which is the same
//! problem as the upper-triangle parameterization `(y_ij, i <= j)` with
//! `y_ji = y_ij` substituted. Its normal equations are the Lyapunov
//! equation `S Y + Y S = D^T R + R^T D` with `S = D^T D` and
//! `R = 2 lambda P + 2 Q`, solved exactly in the right singular basis of `D`.
//! `Y` is affine in `lambda`, so `lambda` follows from a scalar fit.
//!
//! The unconstrained fit treats all `n^2` entries (`vec(Y)` with
//! `G = I ⊗ (v - v0 1)^T`) as free. Rows decouple given `lambda` and are
//! solved by QR of `D`.

use nalgebra::{DMatrix, DVector};

use super::{LaplacianEstimate, Parameterization, TopologyError};
use crate::powerflow::SampleSet;

/// Minimum samples per bus accepted by the fits.
pub const MIN_SAMPLES_PER_BUS: usize = 2;
/// Largest admissible condition number of the normal-equation matrix.
pub const MAX_CONDITION: f64 = 1e12;

pub(crate) struct DataMatrices {
    pub d: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

pub(crate) fn data_matrices(samples: &SampleSet) -> Result<DataMatrices, TopologyError> {
    let n = samples.n();
    let k = samples.len();
    if n == 0 || k < MIN_SAMPLES_PER_BUS * n {
        return Err(TopologyError::InsufficientSamples {
            samples: k,
            required: MIN_SAMPLES_PER_BUS * n.max(1),
        });
    }
    let mut d = DMatrix::zeros(k, n);
    let mut p = DMatrix::zeros(k, n);
    let mut q = DMatrix::zeros(k, n);
    for (row, s) in samples.snapshots().iter().enumerate() {
        for i in 0..n {
            d[(row, i)] = s.v[i] - s.v0;
            p[(row, i)] = s.p[i];
            q[(row, i)] = s.q[i];
        }
    }
    Ok(DataMatrices { d, p, q })
}

/// Thin SVD of `D`: left vectors `U` (K×n), singular values, right vectors `V` (n×n).
struct Basis {
    u: DMatrix<f64>,
    sigma: DVector<f64>,
    v: DMatrix<f64>,
}

fn basis(d: &DMatrix<f64>) -> Result<Basis, TopologyError> {
    let svd = d.clone().svd(true, true);
    let u = svd.u.ok_or(TopologyError::IllConditioned(f64::INFINITY))?;
    let v = svd
        .v_t
        .ok_or(TopologyError::IllConditioned(f64::INFINITY))?
        .transpose();
    if svd.singular_values.iter().any(|s| !(*s > 0.0)) {
        return Err(TopologyError::IllConditioned(f64::INFINITY));
    }
    Ok(Basis {
        u,
        sigma: svd.singular_values,
        v,
    })
}

impl Basis {
    /// Symmetric minimizer of `||D Y - R||_F`.
    fn lyapunov(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.u.transpose() * r * &self.v;
        let n = self.sigma.len();
        let s = &self.sigma;
        let rotated = DMatrix::from_fn(n, n, |a, b| {
            (s[a] * m[(a, b)] + s[b] * m[(b, a)]) / (s[a] * s[a] + s[b] * s[b])
        });
        let y = &self.v * rotated * self.v.transpose();
        // exact symmetry; the two triangles agree up to rounding
        (&y + y.transpose()) * 0.5
    }
}

/// Extreme eigenvalues of the symmetric arrowhead matrix `[[diag(l), b], [b^T, c]]`.
pub(crate) fn arrowhead_extremes(l: &[f64], b: &[f64], c: f64) -> (f64, f64) {
    let secular = |mu: f64| {
        c - mu
            - l.iter()
                .zip(b)
                .filter(|(_, bi)| **bi != 0.0)
                .map(|(li, bi)| bi * bi / (li - mu))
                .sum::<f64>()
    };
    let coupled = || l.iter().zip(b).filter(|(_, bi)| **bi != 0.0).map(|(li, _)| *li);
    let l_min = l.iter().copied().fold(f64::INFINITY, f64::min);
    let l_max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let b_norm2: f64 = b.iter().map(|x| x * x).sum();
    let spread = (b_norm2.sqrt() + c.abs() + l_max.abs().max(l_min.abs())).max(f64::MIN_POSITIVE);

    let (min_root, max_root) = match (
        coupled().fold(f64::INFINITY, f64::min),
        coupled().fold(f64::NEG_INFINITY, f64::max),
    ) {
        (lo, hi) if lo.is_finite() => {
            // secular(mu) decreases on each side of the coupled poles
            let mut a = lo.min(c) - 2.0 * spread;
            let mut z = lo;
            for _ in 0..300 {
                let mid = 0.5 * (a + z);
                if mid <= a || mid >= z {
                    break;
                }
                if secular(mid) > 0.0 {
                    a = mid;
                } else {
                    z = mid;
                }
            }
            let min_root = 0.5 * (a + z);
            let mut a = hi;
            let mut z = hi.max(c) + 2.0 * spread;
            for _ in 0..300 {
                let mid = 0.5 * (a + z);
                if mid <= a || mid >= z {
                    break;
                }
                if secular(mid) > 0.0 {
                    a = mid;
                } else {
                    z = mid;
                }
            }
            (min_root, 0.5 * (a + z))
        }
        _ => (c, c),
    };
    (min_root.min(l_min), max_root.max(l_max))
}

/// Condition number of the normal-equation matrix in an orthonormal
/// parameterization of (symmetric `Y`, `lambda`).
fn symmetric_condition(basis: &Basis, p: &DMatrix<f64>) -> f64 {
    let n = basis.sigma.len();
    let s2: Vec<f64> = basis.sigma.iter().map(|s| s * s).collect();
    // coupling of lambda with Y: <D E, -2P> = -2 <E, sym(D^T P)>
    let np = basis.u.transpose() * p * &basis.v;
    let g = DMatrix::from_fn(n, n, |a, b| 0.5 * (basis.sigma[a] * np[(a, b)] + basis.sigma[b] * np[(b, a)]));
    let mut diag = Vec::with_capacity(n * (n + 1) / 2);
    let mut border = Vec::with_capacity(n * (n + 1) / 2);
    for a in 0..n {
        diag.push(s2[a]);
        border.push(-2.0 * g[(a, a)]);
        for b in a + 1..n {
            diag.push(0.5 * (s2[a] + s2[b]));
            border.push(-2.0 * std::f64::consts::SQRT_2 * g[(a, b)]);
        }
    }
    let corner = 4.0 * p.norm_squared();
    let (lo, hi) = arrowhead_extremes(&diag, &border, corner);
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Condition number of `sum_k H^(k)` for the full `vec(Y)` parameterization
/// with regressor `[G^(k) p^(k)]`; also returns its smallest eigenvalue.
pub(crate) fn unconstrained_normal_extremes(dm: &DataMatrices) -> Result<(f64, f64), TopologyError> {
    let b = basis(&dm.d)?;
    let n = b.sigma.len();
    let s2: Vec<f64> = b.sigma.iter().map(|s| s * s).collect();
    // border blocks w_i = D^T P[:, i]; in the eigenbasis of S aggregate per eigenvalue
    let wt = b.v.transpose() * dm.d.transpose() * &dm.p;
    let g: Vec<f64> = (0..n).map(|a| wt.row(a).norm()).collect();
    let corner = dm.p.norm_squared();
    let (lo, hi) = arrowhead_extremes(&s2, &g, corner);
    Ok((lo, hi))
}

fn frobenius_residual(dm: &DataMatrices, y: &DMatrix<f64>, lambda: f64) -> f64 {
    (&dm.d * y.transpose() - &dm.p * (2.0 * lambda) - &dm.q * 2.0).norm()
}

/// Symmetric least-squares fit of `(Y, lambda)`.
pub fn fit_laplacian(samples: &SampleSet) -> Result<LaplacianEstimate, TopologyError> {
    let dm = data_matrices(samples)?;
    let b = basis(&dm.d)?;
    let condition = symmetric_condition(&b, &dm.p);
    if !(condition <= MAX_CONDITION) {
        return Err(TopologyError::IllConditioned(condition));
    }
    let y_q = b.lyapunov(&(&dm.q * 2.0));
    let y_p = b.lyapunov(&(&dm.p * 2.0));
    let e0 = &dm.d * &y_q - &dm.q * 2.0;
    let e1 = &dm.d * &y_p - &dm.p * 2.0;
    let lambda = -e0.dot(&e1) / e1.norm_squared();
    let y = y_q + y_p * lambda;
    let residual_norm = frobenius_residual(&dm, &y, lambda);
    Ok(LaplacianEstimate {
        y,
        lambda,
        residual_norm,
        condition,
        parameterization: Parameterization::Symmetric,
    })
}

/// Unconstrained least-squares fit over all `n^2` entries of `Y` plus `lambda`.
pub fn fit_laplacian_unconstrained(samples: &SampleSet) -> Result<LaplacianEstimate, TopologyError> {
    let dm = data_matrices(samples)?;
    let (lo, hi) = unconstrained_normal_extremes(&dm)?;
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(TopologyError::IllConditioned(condition));
    }
    let qr = dm.d.clone().qr();
    let qm = qr.q();
    let rm = qr.r();
    let project_out = |x: &DMatrix<f64>| x - &qm * (qm.transpose() * x);
    let pp = project_out(&dm.p);
    let lambda = -pp.dot(&dm.q) / pp.norm_squared();
    let rhs = &dm.p * (2.0 * lambda) + &dm.q * 2.0;
    // row i of Y solves D y_i = rhs[:, i]
    let coeffs = rm
        .solve_upper_triangular(&(qm.transpose() * rhs))
        .ok_or(TopologyError::IllConditioned(f64::INFINITY))?;
    let y = coeffs.transpose();
    let residual_norm = frobenius_residual(&dm, &y, lambda);
    Ok(LaplacianEstimate {
        y,
        lambda,
        residual_norm,
        condition,
        parameterization: Parameterization::Unconstrained,
    })
}
