//! Real roots of low-degree polynomials on a bounded interval.
//!
//! Coefficients are stored lowest degree first. Roots are isolated between
//! the critical points (roots of the derivative, found recursively) and then
//! refined by Newton steps safeguarded by bisection, which stays accurate
//! when the leading coefficient is tiny compared with the others.

/// `c[0] + c[1] x + c[2] x² + ...`, Horner form.
pub fn eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

pub fn derivative(c: &[f64]) -> Vec<f64> {
    c.iter().enumerate().skip(1).map(|(i, &a)| i as f64 * a).collect()
}

fn trimmed(c: &[f64]) -> &[f64] {
    let mut len = c.len();
    while len > 0 && c[len - 1] == 0.0 {
        len -= 1;
    }
    &c[..len]
}

fn refine(c: &[f64], dc: &[f64], mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    let mut x = 0.5 * (a + b);
    for _ in 0..200 {
        let fx = eval(c, x);
        if fx == 0.0 {
            return x;
        }
        if (fx < 0.0) == (fa < 0.0) {
            a = x;
            fa = fx;
        } else {
            b = x;
        }
        if b - a <= 4.0 * f64::EPSILON * x.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        let step = fx / eval(dc, x);
        let newton = x - step;
        x = if step.is_finite() && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
    }
    x
}

/// All real roots in `[lo, hi]`, ascending. Roots of even multiplicity are
/// reported when they coincide with a critical point at which the value is
/// exactly zero; otherwise only sign changes are found.
pub fn real_roots_in(c: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let c = trimmed(c);
    if c.len() <= 1 || lo > hi {
        return Vec::new();
    }
    if c.len() == 2 {
        let x = -c[0] / c[1];
        return if (lo..=hi).contains(&x) { vec![x] } else { Vec::new() };
    }
    let dc = derivative(c);
    let mut knots = vec![lo];
    knots.extend(real_roots_in(&dc, lo, hi));
    knots.push(hi);

    let mut roots: Vec<f64> = Vec::new();
    let push = |x: f64, roots: &mut Vec<f64>| {
        if roots.last().is_none_or(|&l| x > l) {
            roots.push(x);
        }
    };
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (fa, fb) = (eval(c, a), eval(c, b));
        if fa == 0.0 {
            push(a, &mut roots);
        }
        if fa != 0.0 && fb != 0.0 && (fa < 0.0) != (fb < 0.0) {
            push(refine(c, &dc, a, b, fa), &mut roots);
        }
    }
    if eval(c, hi) == 0.0 {
        push(hi, &mut roots);
    }
    roots
}
