use nalgebra::{Matrix2, Vector2};

use super::poly::{derivative, eval, real_roots_in};
use super::{
    BranchEstimate, BranchRegressionInput, BranchSample, Confidence, ImpedanceError, Method,
    SolverConfig,
};
use crate::network::ConductorLibrary;

/// Relative tolerance under which two objectives count as equal.
const TIE_TOL: f64 = 1e-12;

fn tie(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOL * a.abs().max(b.abs())
}

fn improves(candidate: f64, best: f64) -> bool {
    candidate < best && !tie(candidate, best)
}

/// `[c0, c1, c2]` with `e(x) = c0 + c1 x + c2 x²` for ratio `lambda`.
pub fn mismatch_coefficients(lambda: f64, s: &BranchSample) -> [f64; 3] {
    [
        s.dv,
        -2.0 * (lambda * s.p + s.q),
        -(1.0 + lambda * lambda) * (s.p * s.p + s.q * s.q) / s.v,
    ]
}

/// `ΔV - 2x(λP + Q) - (1 + λ²) x² (P² + Q²) / v`.
pub fn mismatch(x: f64, lambda: f64, s: &BranchSample) -> f64 {
    eval(&mismatch_coefficients(lambda, s), x)
}

fn ls_objective(coeffs: &[[f64; 3]], x: f64) -> f64 {
    coeffs.iter().map(|c| eval(c, x).powi(2)).sum()
}

fn lad_objective(coeffs: &[[f64; 3]], x: f64) -> f64 {
    coeffs.iter().map(|c| eval(c, x).abs()).sum()
}

fn argmin(candidates: &mut [f64], objective: impl Fn(f64) -> f64) -> (f64, f64) {
    candidates.sort_by(f64::total_cmp);
    let mut best = (candidates[0], objective(candidates[0]));
    for &x in &candidates[1..] {
        let obj = objective(x);
        if improves(obj, best.1) {
            best = (x, obj);
        }
    }
    best
}

/// Minimizes the quartic `Σ e_k(x)²` over `[0, x_max]`.
fn minimize_ls(coeffs: &[[f64; 3]], x_max: f64) -> (f64, f64) {
    let mut quartic = [0.0; 5];
    for c in coeffs {
        for a in 0..3 {
            for b in 0..3 {
                quartic[a + b] += c[a] * c[b];
            }
        }
    }
    let slope = derivative(&quartic);
    let mut candidates = vec![0.0, x_max];
    candidates.extend(real_roots_in(&slope, 0.0, x_max));
    let (mut x, mut obj) = argmin(&mut candidates, |x| ls_objective(coeffs, x));

    // polish against the summed-coefficient round-off with exact derivatives
    for _ in 0..4 {
        let (mut g1, mut g2) = (0.0, 0.0);
        for c in coeffs {
            let e = eval(c, x);
            let de = c[1] + 2.0 * c[2] * x;
            g1 += 2.0 * e * de;
            g2 += 2.0 * (de * de + 2.0 * e * c[2]);
        }
        if !(g2 > 0.0) {
            break;
        }
        let next = (x - g1 / g2).clamp(0.0, x_max);
        let next_obj = ls_objective(coeffs, next);
        if next_obj <= obj {
            x = next;
            obj = next_obj;
        } else {
            break;
        }
    }
    (x, obj)
}

/// Minimizes `Σ |e_k(x)|` over `[0, x_max]`. Between consecutive zeros of
/// the `e_k` every sign is fixed, so the objective is one quadratic there.
fn minimize_lad(coeffs: &[[f64; 3]], x_max: f64) -> (f64, f64) {
    let mut breaks = vec![0.0, x_max];
    for c in coeffs {
        breaks.extend(real_roots_in(c, 0.0, x_max));
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let mut candidates = breaks.clone();
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        let (mut c1, mut c2) = (0.0, 0.0);
        for c in coeffs {
            let s = eval(c, mid).signum();
            c1 += s * c[1];
            c2 += s * c[2];
        }
        if c2 > 0.0 {
            let vertex = -c1 / (2.0 * c2);
            if vertex > a && vertex < b {
                candidates.push(vertex);
            }
        }
    }
    argmin(&mut candidates, |x| lad_objective(coeffs, x))
}

fn residuals(input: &BranchRegressionInput, lambda: f64, x: f64) -> Vec<f64> {
    input.samples().iter().map(|s| mismatch(x, lambda, s)).collect()
}

fn check(input: &BranchRegressionInput, library: &ConductorLibrary, cfg: &SolverConfig) -> Result<(), ImpedanceError> {
    if library.is_empty() {
        return Err(ImpedanceError::EmptyLibrary);
    }
    if input.excitation() <= cfg.excitation_tol {
        return Err(ImpedanceError::AllCandidatesDegenerate);
    }
    Ok(())
}

/// With one sample any root of its mismatch is optimal: the smallest
/// nonnegative root for the first library entry that has one.
fn single_sample(input: &BranchRegressionInput, library: &ConductorLibrary, cfg: &SolverConfig) -> Option<(usize, f64)> {
    let s = &input.samples()[0];
    (0..library.len()).find_map(|z| {
        real_roots_in(&mismatch_coefficients(library.get(z), s), 0.0, cfg.x_max)
            .first()
            .map(|&x| (z, x))
    })
}

fn solve_enumerated(
    input: &BranchRegressionInput,
    library: &ConductorLibrary,
    cfg: &SolverConfig,
    minimize: fn(&[[f64; 3]], f64) -> (f64, f64),
    objective: fn(&[[f64; 3]], f64) -> f64,
) -> Result<BranchEstimate, ImpedanceError> {
    check(input, library, cfg)?;
    let per_z: Vec<(f64, f64)> = library
        .ratios()
        .iter()
        .map(|&lambda| {
            let coeffs: Vec<[f64; 3]> = input.samples().iter().map(|s| mismatch_coefficients(lambda, s)).collect();
            minimize(&coeffs, cfg.x_max)
        })
        .collect();
    let per_z_objectives: Vec<f64> = per_z.iter().map(|p| p.1).collect();

    let (z, x, confidence) = match (input.len(), single_sample(input, library, cfg)) {
        (1, Some((z, x))) => (z, x, Confidence::Underdetermined),
        (k, _) => {
            let mut z = 0;
            for (i, p) in per_z.iter().enumerate().skip(1) {
                if improves(p.1, per_z[z].1) {
                    z = i;
                }
            }
            let conf = if k == 1 {
                Confidence::Underdetermined
            } else {
                Confidence::Normal
            };
            (z, per_z[z].0, conf)
        }
    };
    let lambda = library.get(z);
    let coeffs: Vec<[f64; 3]> = input.samples().iter().map(|s| mismatch_coefficients(lambda, s)).collect();
    Ok(BranchEstimate {
        r: lambda * x,
        x,
        z: Some(z),
        lambda,
        objective: objective(&coeffs, x),
        residuals: residuals(input, lambda, x),
        per_z_objectives,
        confidence,
    })
}

/// Library-constrained least squares, solved globally.
pub fn solve_branch_ls(
    input: &BranchRegressionInput,
    library: &ConductorLibrary,
    cfg: &SolverConfig,
) -> Result<BranchEstimate, ImpedanceError> {
    solve_enumerated(input, library, cfg, minimize_ls, ls_objective)
}

/// Library-constrained least absolute deviations, solved globally.
pub fn solve_branch_lad(
    input: &BranchRegressionInput,
    library: &ConductorLibrary,
    cfg: &SolverConfig,
) -> Result<BranchEstimate, ImpedanceError> {
    solve_enumerated(input, library, cfg, minimize_lad, lad_objective)
}

fn linear_fit(input: &BranchRegressionInput, lambda: f64, x_max: f64) -> (f64, f64) {
    let (mut num, mut den) = (0.0, 0.0);
    for s in input.samples() {
        let a = 2.0 * (lambda * s.p + s.q);
        num += s.dv * a;
        den += a * a;
    }
    let x = if den > 0.0 { (num / den).clamp(0.0, x_max) } else { 0.0 };
    let obj = input
        .samples()
        .iter()
        .map(|s| (s.dv - 2.0 * x * (lambda * s.p + s.q)).powi(2))
        .sum();
    (x, obj)
}

/// Least squares on `ΔV - 2x(λP + Q)`, library constrained.
pub fn solve_branch_linearized(
    input: &BranchRegressionInput,
    library: &ConductorLibrary,
    cfg: &SolverConfig,
) -> Result<BranchEstimate, ImpedanceError> {
    check(input, library, cfg)?;
    let per_z: Vec<(f64, f64)> = library.ratios().iter().map(|&l| linear_fit(input, l, cfg.x_max)).collect();
    let mut z = 0;
    for (i, p) in per_z.iter().enumerate().skip(1) {
        if improves(p.1, per_z[z].1) {
            z = i;
        }
    }
    let (lambda, x) = (library.get(z), per_z[z].0);
    Ok(BranchEstimate {
        r: lambda * x,
        x,
        z: Some(z),
        lambda,
        objective: per_z[z].1,
        residuals: input.samples().iter().map(|s| s.dv - 2.0 * x * (lambda * s.p + s.q)).collect(),
        per_z_objectives: per_z.iter().map(|p| p.1).collect(),
        confidence: Confidence::Normal,
    })
}

/// Least squares on `ΔV - 2(rP + xQ)` with `r` and `x` unconstrained.
pub fn solve_branch_linearized_free(
    input: &BranchRegressionInput,
    cfg: &SolverConfig,
) -> Result<BranchEstimate, ImpedanceError> {
    if input.excitation() <= cfg.excitation_tol {
        return Err(ImpedanceError::AllCandidatesDegenerate);
    }
    let mut normal = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    for s in input.samples() {
        let a = Vector2::new(2.0 * s.p, 2.0 * s.q);
        normal += a * a.transpose();
        rhs += a * s.dv;
    }
    let sol = normal
        .svd(true, true)
        .solve(&rhs, f64::EPSILON * normal.norm())
        .map_err(|_| ImpedanceError::AllCandidatesDegenerate)?;
    let (r, x) = (sol[0], sol[1]);
    let res: Vec<f64> = input.samples().iter().map(|s| s.dv - 2.0 * (r * s.p + x * s.q)).collect();
    Ok(BranchEstimate {
        r,
        x,
        z: None,
        lambda: if x != 0.0 { r / x } else { f64::NAN },
        objective: res.iter().map(|e| e * e).sum(),
        residuals: res,
        per_z_objectives: Vec::new(),
        confidence: if input.len() < 2 {
            Confidence::Underdetermined
        } else {
            Confidence::Normal
        },
    })
}

/// Dispatches on `method`.
pub fn solve_branch(
    input: &BranchRegressionInput,
    library: &ConductorLibrary,
    method: Method,
    cfg: &SolverConfig,
) -> Result<BranchEstimate, ImpedanceError> {
    match method {
        Method::Lad => solve_branch_lad(input, library, cfg),
        Method::Ls => solve_branch_ls(input, library, cfg),
        Method::LinearizedLs => solve_branch_linearized(input, library, cfg),
        Method::LinearizedFree => solve_branch_linearized_free(input, cfg),
    }
}

/// Placeholder for a branch without excitation: library entry `z` and the
/// reactance from the linear part of the mismatch alone (zero when that is
/// undefined too).
pub fn unexcited_fallback(
    input: &BranchRegressionInput,
    library: &ConductorLibrary,
    z: usize,
    method: Method,
    cfg: &SolverConfig,
) -> BranchEstimate {
    let lambda = library.get(z);
    let (x, _) = linear_fit(input, lambda, cfg.x_max);
    let res = residuals(input, lambda, x);
    let objective = match method {
        Method::Lad => res.iter().map(|e| e.abs()).sum(),
        _ => res.iter().map(|e| e * e).sum(),
    };
    BranchEstimate {
        r: lambda * x,
        x,
        z: Some(z),
        lambda,
        objective,
        residuals: res,
        per_z_objectives: Vec::new(),
        confidence: Confidence::Unexcited,
    }
}
