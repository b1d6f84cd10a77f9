//! Weighted estimating equations for the marginal mean model with an
//! independence working correlation.
//!
//! Only visit rows enter:
//!
//! ```text
//! sum_v w_v D_v (y_v - mu_v) / V(mu_v) = 0,   D_v = d mu_v / d beta
//! ```
//!
//! Solved by Fisher scoring with step-halving on the weighted
//! quasi-likelihood. Identity link with constant variance is weighted least
//! squares and is solved directly.

use std::io::Write;

use crate::data::{Dataset, ModelMatrixSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::weights::WeightSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Link {
    #[default]
    Identity,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Variance {
    #[default]
    Constant,
    Poisson,
    /// `V = mu + theta mu^2`.
    NegativeBinomial(f64),
}

impl Variance {
    #[inline]
    fn of(self, mu: f64) -> f64 {
        match self {
            Variance::Constant => 1.0,
            Variance::Poisson => mu,
            Variance::NegativeBinomial(theta) => mu + theta * mu * mu,
        }
    }

    /// Quasi-likelihood `q(y, mu)` with `dq/dmu = (y - mu) / V(mu)`.
    fn quasi(self, y: f64, mu: f64) -> f64 {
        match self {
            Variance::Constant => -0.5 * (y - mu).powi(2),
            Variance::Poisson => y * mu.ln() - mu,
            Variance::NegativeBinomial(0.0) => y * mu.ln() - mu,
            Variance::NegativeBinomial(theta) => {
                let a = theta * mu;
                y * (mu / (1.0 + a)).ln() - (1.0 + a).ln() / theta
            }
        }
    }

    fn needs_positive_mean(self) -> bool {
        !matches!(self, Variance::Constant)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalModelSpec {
    pub xspec: ModelMatrixSpec,
    pub link: Link,
    pub variance: Variance,
}

impl MarginalModelSpec {
    pub fn new(xspec: ModelMatrixSpec, link: Link, variance: Variance) -> Result<Self> {
        if let Variance::NegativeBinomial(theta) = variance {
            if !(theta >= 0.0 && theta.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "negative binomial theta must be a non-negative number, got {theta}"
                )));
            }
        }
        Ok(Self {
            xspec,
            link,
            variance,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeeOptions {
    /// Bound on the max-norm of the equations divided by the total weight.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for GeeOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeeFit {
    pub terms: Vec<String>,
    pub beta: Vec<f64>,
    pub n_iter: usize,
    pub max_eq_norm: f64,
    pub converged: bool,
    /// Fitted means at the visit rows.
    pub fitted_means: Vec<f64>,
}

/// Fits the marginal model on the visit rows with one weight per visit.
pub fn fit_weighted_gee(
    dataset: &Dataset,
    model: &MarginalModelSpec,
    weights: &WeightSet,
    opts: &GeeOptions,
) -> Result<GeeFit> {
    if weights.weights.len() != dataset.n_visits() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} visits",
            weights.weights.len(),
            dataset.n_visits()
        )));
    }
    let fitted = model.xspec.fit(dataset)?;
    let p = fitted.dim();
    let m = dataset.n_visits();
    let mut x = vec![0.0; m * p];
    for (i, &r) in dataset.visit_rows().iter().enumerate() {
        fitted.eval_row(dataset, r, &mut x[i * p..(i + 1) * p]);
    }
    let y = dataset.visit_outcomes();
    let (beta, n_iter, max_eq_norm, fitted_means) =
        fit_gee_design(&x, p, &y, &weights.weights, model.link, model.variance, opts)?;
    Ok(GeeFit {
        terms: fitted.names().to_vec(),
        beta,
        n_iter,
        max_eq_norm,
        converged: true,
        fitted_means,
    })
}

fn inverse_link(link: Link, eta: f64) -> f64 {
    match link {
        Link::Identity => eta,
        Link::Log => eta.exp(),
    }
}

/// Solves the weighted equations for a dense row-major design `x` with `p`
/// columns. Returns `(beta, iterations, equation norm, fitted means)`.
pub fn fit_gee_design(
    x: &[f64],
    p: usize,
    y: &[f64],
    w: &[f64],
    link: Link,
    variance: Variance,
    opts: &GeeOptions,
) -> Result<(Vec<f64>, usize, f64, Vec<f64>)> {
    let m = y.len();
    if x.len() != m * p || w.len() != m {
        return Err(Error::InvalidInput("design, outcome and weight lengths differ".into()));
    }
    if m == 0 {
        return Err(Error::InvalidInput("no visits to fit".into()));
    }
    if let Some(v) = w.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput(format!("weights must be non-negative, found {v}")));
    }
    if link == Link::Log && y.iter().any(|&v| v < 0.0) && variance.needs_positive_mean() {
        return Err(Error::InvalidInput("log link with count variance needs non-negative outcomes".into()));
    }
    let total_w: f64 = w.iter().sum();
    if !(total_w > 0.0) {
        return Err(Error::InvalidInput("weights sum to zero".into()));
    }
    let row = |i: usize| &x[i * p..(i + 1) * p];
    let eta_of = |beta: &[f64], i: usize| -> f64 { row(i).iter().zip(beta).map(|(a, b)| a * b).sum() };
    let what = "marginal mean model";

    // Quantities at beta: quasi-likelihood, equations, Fisher information.
    let evaluate = |beta: &[f64], want_info: bool| -> Option<(f64, Vec<f64>, Vec<f64>)> {
        let mut ql = 0.0;
        let mut u = vec![0.0; p];
        let mut info = vec![0.0; if want_info { p * p } else { 0 }];
        for i in 0..m {
            let mu = inverse_link(link, eta_of(beta, i));
            if !mu.is_finite() || (variance.needs_positive_mean() && !(mu > 0.0)) {
                return None;
            }
            let dmu = match link {
                Link::Identity => 1.0,
                Link::Log => mu,
            };
            let v = variance.of(mu);
            ql += w[i] * variance.quasi(y[i], mu);
            let c = w[i] * dmu * (y[i] - mu) / v;
            let a = w[i] * dmu * dmu / v;
            let xi = row(i);
            for j in 0..p {
                u[j] += c * xi[j];
                if want_info {
                    for k in 0..=j {
                        info[j * p + k] += a * xi[j] * xi[k];
                    }
                }
            }
        }
        if want_info {
            for j in 0..p {
                for k in 0..j {
                    info[k * p + j] = info[j * p + k];
                }
            }
        }
        Some((ql, u, info))
    };
    let means = |beta: &[f64]| -> Vec<f64> { (0..m).map(|i| inverse_link(link, eta_of(beta, i))).collect() };

    if link == Link::Identity && variance == Variance::Constant {
        let (xs, ys) = root_weighted(x, p, y, w);
        let (beta, _) = linalg::lstsq(&xs, m, p, &ys).ok_or(Error::RankDeficient { what })?;
        let (_, u, _) = evaluate(&beta, false).expect("identity link has no mean constraint");
        let mu = means(&beta);
        return Ok((beta, 1, linalg::max_abs(&u) / total_w, mu));
    }

    let mut beta = start_values(x, p, y, w, link);
    let mut state = match evaluate(&beta, true) {
        Some(s) => s,
        None => {
            beta = vec![0.0; p];
            evaluate(&beta, true).ok_or(Error::NonPositiveMean)?
        }
    };
    for iter in 0..opts.max_iter {
        let (ql, u, info) = &state;
        let norm = linalg::max_abs(u) / total_w;
        if norm <= opts.tolerance {
            // One more full step is nearly free and, near the root, squares
            // the remaining error.
            let (mut beta, mut norm) = (beta, norm);
            if let Some(step) = linalg::solve_spd(info, p, u) {
                let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, d)| b + d).collect();
                if let Some((_, tu, _)) = evaluate(&trial, false) {
                    let tn = linalg::max_abs(&tu) / total_w;
                    if tn <= norm {
                        beta = trial;
                        norm = tn;
                    }
                }
            }
            let mu = means(&beta);
            return Ok((beta, iter, norm, mu));
        }
        let step = linalg::solve_spd(info, p, u).ok_or(Error::RankDeficient { what })?;
        let mut alpha = 1.0;
        let mut next = None;
        let mut saw_invalid = false;
        for _ in 0..50 {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, d)| b + alpha * d).collect();
            match evaluate(&trial, true) {
                Some(cand) if cand.0 >= ql - 1e-12 * ql.abs() => {
                    next = Some((trial, cand));
                    break;
                }
                Some(_) => {}
                None => saw_invalid = true,
            }
            alpha *= 0.5;
        }
        match next {
            Some((b, s)) => {
                beta = b;
                state = s;
            }
            None if saw_invalid => return Err(Error::NonPositiveMean),
            None => {
                return Err(Error::NonConvergence {
                    what,
                    iterations: iter + 1,
                    norm,
                })
            }
        }
    }
    let norm = linalg::max_abs(&state.1) / total_w;
    if norm <= opts.tolerance {
        let mu = means(&beta);
        return Ok((beta, opts.max_iter, norm, mu));
    }
    Err(Error::NonConvergence {
        what,
        iterations: opts.max_iter,
        norm,
    })
}

/// Rows of `x` and `y` scaled by `sqrt(w)`.
fn root_weighted(x: &[f64], p: usize, y: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    for (i, wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        xs[i * p..(i + 1) * p].iter_mut().for_each(|v| *v *= s);
        ys[i] *= s;
    }
    (xs, ys)
}

/// Least-squares fit on the link scale; zero when that fails.
fn start_values(x: &[f64], p: usize, y: &[f64], w: &[f64], link: Link) -> Vec<f64> {
    let m = y.len();
    let z: Vec<f64> = match link {
        Link::Identity => y.to_vec(),
        Link::Log => y.iter().map(|&v| (v.max(0.0) + 0.1).ln()).collect(),
    };
    let (xs, zs) = root_weighted(x, p, &z, w);
    linalg::lstsq(&xs, m, p, &zs)
        .map(|(b, _)| b)
        .filter(|b| b.iter().all(|v| v.is_finite()))
        .unwrap_or_else(|| vec![0.0; p])
}

/// Weighted moment estimate of the negative binomial dispersion,
/// `sum w [(y - mu)^2 - mu] / sum w mu^2`, floored at zero.
pub fn estimate_dispersion(fit: &GeeFit, dataset: &Dataset, weights: &WeightSet) -> Result<f64> {
    let y = dataset.visit_outcomes();
    dispersion_from(&y, &fit.fitted_means, &weights.weights)
}

pub fn dispersion_from(y: &[f64], mu: &[f64], w: &[f64]) -> Result<f64> {
    if y.len() != mu.len() || y.len() != w.len() {
        return Err(Error::InvalidInput("outcome, mean and weight lengths differ".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&yi, &mi), &wi) in y.iter().zip(mu).zip(w) {
        num += wi * ((yi - mi).powi(2) - mi);
        den += wi * mi * mi;
    }
    if !(den > 0.0) {
        return Ok(0.0);
    }
    Ok((num / den).max(0.0))
}

/// Writes `term,estimate`.
pub fn write_coefficients_csv<W: Write>(fit: &GeeFit, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["term", "estimate"])?;
    for (term, b) in fit.terms.iter().zip(&fit.beta) {
        wtr.write_record([term.clone(), b.to_string()])?;
    }
    wtr.flush().map_err(|source| Error::Io {
        path: "<coefficient csv>".into(),
        source,
    })?;
    Ok(())
}
