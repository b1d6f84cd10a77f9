//! Small dense linear algebra on row-major `Vec<f64>` buffers.
//!
//! Systems here are at most a few dozen unknowns, so plain loops beat
//! pulling in a matrix library for the hot paths.

/// Cholesky factor `L` (row-major, lower triangle) of a symmetric
/// positive-definite `p x p` matrix. Returns `None` when a pivot falls below
/// `1e-12` times the largest diagonal entry.
pub fn cholesky(a: &[f64], p: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), p * p);
    let scale = (0..p).map(|i| a[i * p + i].abs()).fold(0.0, f64::max);
    if p > 0 && !(scale > 0.0 && scale.is_finite()) {
        return None;
    }
    let floor = 1e-12 * scale;
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if !(s > floor) {
                    return None;
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Some(l)
}

pub fn cholesky_solve(l: &[f64], p: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..p {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * p + k] * y[k];
        }
        y[i] = s / l[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = y[i];
        for k in i + 1..p {
            s -= l[k * p + i] * y[k];
        }
        y[i] = s / l[i * p + i];
    }
    y
}

pub fn solve_spd(a: &[f64], p: usize, b: &[f64]) -> Option<Vec<f64>> {
    let l = cholesky(a, p)?;
    Some(cholesky_solve(&l, p, b))
}

/// Squared ratio of the extreme diagonal entries of a Cholesky factor; a
/// cheap lower bound on the 2-norm condition number.
pub fn condition_estimate(l: &[f64], p: usize) -> f64 {
    let (lo, hi) = (0..p)
        .map(|i| l[i * p + i])
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
    (hi / lo).powi(2)
}

/// Least squares via Householder QR. Returns coefficients and the residual
/// sum of squares, or `None` when `x` is numerically rank deficient.
pub fn lstsq(x: &[f64], n: usize, p: usize, y: &[f64]) -> Option<(Vec<f64>, f64)> {
    debug_assert_eq!(x.len(), n * p);
    if n < p {
        return None;
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    let col_norm = |a: &[f64], j: usize, from: usize| -> f64 {
        (from..n).map(|i| a[i * p + j].powi(2)).sum::<f64>().sqrt()
    };
    let scale = (0..p).map(|j| col_norm(&a, j, 0)).fold(0.0, f64::max);
    for j in 0..p {
        let norm = col_norm(&a, j, j);
        if !(norm > 1e-12 * scale) {
            return None;
        }
        let alpha = if a[j * p + j] > 0.0 { -norm } else { norm };
        // v = a[j.., j] - alpha e_1, stored in place
        a[j * p + j] -= alpha;
        let vnorm2: f64 = (j..n).map(|i| a[i * p + j].powi(2)).sum();
        if vnorm2 > 0.0 {
            for k in j + 1..p {
                let dot: f64 = (j..n).map(|i| a[i * p + j] * a[i * p + k]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in j..n {
                    a[i * p + k] -= f * a[i * p + j];
                }
            }
            let dot: f64 = (j..n).map(|i| a[i * p + j] * b[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..n {
                b[i] -= f * a[i * p + j];
            }
        }
        a[j * p + j] = alpha;
    }
    let mut coef = vec![0.0; p];
    for j in (0..p).rev() {
        let mut s = b[j];
        for k in j + 1..p {
            s -= a[j * p + k] * coef[k];
        }
        coef[j] = s / a[j * p + j];
    }
    let rss = b[p..].iter().map(|v| v * v).sum();
    Some((coef, rss))
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
