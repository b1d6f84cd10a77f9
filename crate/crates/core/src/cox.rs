//! Proportional-intensity model for the visit process.
//!
//! The coefficients solve the score equations of the Cox partial likelihood
//! in which each visit's counting-process increment is multiplied by a
//! known factor `Q > 0`:
//!
//! ```text
//! sum_k sum_{v in D_k} Q_v [ z_v - S1_k(g) / S0_k(g) ] = 0,
//! S0_k(g) = sum_{l in R_k} exp(g'z_l),  S1_k(g) = sum_{l in R_k} z_l exp(g'z_l)
//! ```
//!
//! Tied visits share one risk set (Breslow convention). The system is the
//! gradient of a concave Q-case-weighted log partial likelihood, which the
//! solver maximizes by damped Newton steps.

use crate::data::{Dataset, FittedSpec, ModelMatrixSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::risk::RiskSets;

/// Per-visit factors `Q = exp(-q)`, aligned with [`Dataset::visit_rows`].
#[derive(Debug, Clone, PartialEq)]
pub struct QValues(pub Vec<f64>);

impl QValues {
    pub fn ones(dataset: &Dataset) -> Self {
        QValues(vec![1.0; dataset.n_visits()])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check(&self, dataset: &Dataset) -> Result<()> {
        if self.0.len() != dataset.n_visits() {
            return Err(Error::InvalidInput(format!(
                "{} Q values for {} visits",
                self.0.len(),
                dataset.n_visits()
            )));
        }
        if let Some(q) = self.0.iter().find(|q| !(**q > 0.0 && q.is_finite())) {
            return Err(Error::InvalidInput(format!("Q values must be positive, got {q}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxOptions {
    /// Bound on the max-norm of the score divided by the number of patients.
    pub tolerance: f64,
    pub max_iter: usize,
    /// Relative change of the log partial likelihood below which a run of
    /// damped steps counts as stalled.
    pub rel_loglik_tol: f64,
    /// Coefficients beyond this magnitude are reported as separation.
    pub max_coefficient: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iter: 100,
            rel_loglik_tol: 1e-10,
            max_coefficient: 50.0,
        }
    }
}

/// Modified Breslow increments at the distinct visit times.
#[derive(Debug, Clone, PartialEq)]
pub struct BreslowTable {
    pub times: Vec<f64>,
    pub increments: Vec<f64>,
}

impl BreslowTable {
    pub fn cumulative(&self) -> Vec<f64> {
        self.increments
            .iter()
            .scan(0.0, |acc, d| {
                *acc += d;
                Some(*acc)
            })
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.increments.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxFit {
    pub term_names: Vec<String>,
    pub gamma_s: Vec<f64>,
    pub breslow: BreslowTable,
    pub n_iter: usize,
    /// Max-norm of the score at `gamma_s`, divided by the number of patients.
    pub max_score_norm: f64,
    pub converged: bool,
    pub log_partial_likelihood: f64,
}

/// Risk sets and covariates evaluated once, reused across Newton steps.
pub(crate) struct CoxProblem<'a> {
    risk: &'a RiskSets,
    p: usize,
    /// Covariates per risk-set slot, row-major.
    slot_z: Vec<f64>,
    /// Sum of Q over tied visits at each event time.
    q_event: Vec<f64>,
    /// Sum over visits of Q_v z_v.
    qz_total: Vec<f64>,
    /// Visits as (slot, Q).
    visits: Vec<(usize, f64)>,
}

struct Evaluation {
    loglik: f64,
    score: Vec<f64>,
    info: Vec<f64>,
}

impl<'a> CoxProblem<'a> {
    pub(crate) fn new(risk: &'a RiskSets, dataset: &Dataset, spec: &FittedSpec, q: &QValues) -> Self {
        let p = spec.dim();
        let slot_z = risk.evaluate(dataset, spec);
        let mut q_event = vec![0.0; risk.n_events()];
        let mut qz_total = vec![0.0; p];
        let mut visits = Vec::with_capacity(q.len());
        for (v, &qv) in q.values().iter().enumerate() {
            let slot = risk.visit_slot()[v];
            q_event[risk.visit_event()[v]] += qv;
            for j in 0..p {
                qz_total[j] += qv * slot_z[slot * p + j];
            }
            visits.push((slot, qv));
        }
        Self {
            risk,
            p,
            slot_z,
            q_event,
            qz_total,
            visits,
        }
    }

    fn z(&self, slot: usize) -> &[f64] {
        &self.slot_z[slot * self.p..(slot + 1) * self.p]
    }

    fn linear(&self, slot: usize, gamma: &[f64]) -> f64 {
        self.z(slot).iter().zip(gamma).map(|(a, b)| a * b).sum()
    }

    fn evaluate(&self, gamma: &[f64], want_info: bool) -> Evaluation {
        let p = self.p;
        let mut loglik = 0.0;
        let mut score = self.qz_total.clone();
        let mut info = vec![0.0; if want_info { p * p } else { 0 }];
        for &(slot, qv) in &self.visits {
            loglik += qv * self.linear(slot, gamma);
        }
        let mut s1 = vec![0.0; p];
        let mut s2 = vec![0.0; p * p];
        for k in 0..self.risk.n_events() {
            let qk = self.q_event[k];
            let slots = self.risk.slots(k);
            let shift = slots
                .clone()
                .map(|s| self.linear(s, gamma))
                .fold(f64::NEG_INFINITY, f64::max);
            let mut s0 = 0.0;
            s1.iter_mut().for_each(|x| *x = 0.0);
            if want_info {
                s2.iter_mut().for_each(|x| *x = 0.0);
            }
            for s in slots {
                let w = (self.linear(s, gamma) - shift).exp();
                let z = self.z(s);
                s0 += w;
                for a in 0..p {
                    let wa = w * z[a];
                    s1[a] += wa;
                    if want_info {
                        for b in 0..=a {
                            s2[a * p + b] += wa * z[b];
                        }
                    }
                }
            }
            loglik -= qk * (shift + s0.ln());
            for a in 0..p {
                let ma = s1[a] / s0;
                score[a] -= qk * ma;
                if want_info {
                    for b in 0..=a {
                        let v = qk * (s2[a * p + b] / s0 - ma * s1[b] / s0);
                        info[a * p + b] += v;
                    }
                }
            }
        }
        if want_info {
            for a in 0..p {
                for b in 0..a {
                    info[b * p + a] = info[a * p + b];
                }
            }
        }
        Evaluation {
            loglik,
            score,
            info,
        }
    }

    /// Score of the estimating equations at `gamma`, unnormalized.
    pub(crate) fn score(&self, gamma: &[f64]) -> Vec<f64> {
        self.evaluate(gamma, false).score
    }

    pub(crate) fn solve(&self, opts: &CoxOptions) -> Result<(Vec<f64>, usize, f64, f64)> {
        let p = self.p;
        let n = self.risk.n_patients().max(1) as f64;
        let mut gamma = vec![0.0; p];
        let mut ev = self.evaluate(&gamma, true);
        let norm = |s: &[f64]| linalg::max_abs(s) / n;
        if p == 0 {
            return Ok((gamma, 0, 0.0, ev.loglik));
        }
        if linalg::cholesky(&ev.info, p).is_none() {
            return Err(Error::RankDeficient {
                what: "visit intensity model",
            });
        }
        // Curvature that collapses relative to the start means the likelihood
        // has gone flat along that coordinate; the score and step can both
        // underflow to zero there.
        let diag0: Vec<f64> = (0..p).map(|j| ev.info[j * p + j]).collect();
        let mut stalled = 0;
        for iter in 1..=opts.max_iter {
            if (0..p).any(|j| !(ev.info[j * p + j] > 1e-10 * diag0[j])) {
                return Err(separation(&gamma));
            }
            let step = match linalg::solve_spd(&ev.info, p, &ev.score) {
                Some(step) => step,
                // The information was positive definite at zero, so losing
                // it along the path means the likelihood flattens out.
                None => return Err(separation(&gamma)),
            };
            // A small score alone is not enough: under monotone likelihood the
            // score decays while Newton steps stay of order one.
            let scale = 1.0 + linalg::max_abs(&gamma);
            if norm(&ev.score) <= opts.tolerance && linalg::max_abs(&step) <= 1e-4 * scale {
                return Ok((gamma, iter - 1, norm(&ev.score), ev.loglik));
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let trial: Vec<f64> = gamma.iter().zip(&step).map(|(g, d)| g + alpha * d).collect();
                let cand = self.evaluate(&trial, true);
                if cand.loglik.is_finite() && cand.loglik >= ev.loglik - 1e-12 * ev.loglik.abs() {
                    accepted = Some((trial, cand));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((next, cand)) = accepted else {
                return Err(Error::NonConvergence {
                    what: "visit intensity model",
                    iterations: iter,
                    norm: norm(&ev.score),
                });
            };
            let rel = (cand.loglik - ev.loglik).abs() / (ev.loglik.abs() + 1e-300);
            stalled = if rel <= opts.rel_loglik_tol { stalled + 1 } else { 0 };
            gamma = next;
            ev = cand;
            if gamma.iter().any(|g| !g.is_finite() || g.abs() > opts.max_coefficient) {
                return Err(separation(&gamma));
            }
            if stalled >= 5 && norm(&ev.score) > opts.tolerance {
                break;
            }
        }
        Err(Error::NonConvergence {
            what: "visit intensity model",
            iterations: opts.max_iter,
            norm: norm(&ev.score),
        })
    }

    /// Modified Breslow increments at `gamma`.
    pub(crate) fn breslow(&self, gamma: &[f64]) -> BreslowTable {
        let increments = (0..self.risk.n_events())
            .map(|k| {
                let s0: f64 = self
                    .risk
                    .slots(k)
                    .map(|s| self.linear(s, gamma).exp())
                    .sum();
                self.q_event[k] / s0
            })
            .collect();
        BreslowTable {
            times: self.risk.event_times().to_vec(),
            increments,
        }
    }
}

fn separation(gamma: &[f64]) -> Error {
    let coefficient = (0..gamma.len())
        .max_by(|&a, &b| gamma[a].abs().total_cmp(&gamma[b].abs()))
        .unwrap_or(0);
    Error::Separation {
        coefficient,
        value: gamma.get(coefficient).copied().unwrap_or(0.0),
    }
}

/// Fits the Q-weighted proportional-intensity model for the visit process.
pub fn fit_cox(
    dataset: &Dataset,
    zspec: &ModelMatrixSpec,
    q: &QValues,
    opts: &CoxOptions,
) -> Result<CoxFit> {
    let risk = RiskSets::new(dataset)?;
    let fitted = zspec.fit(dataset)?;
    fit_cox_with(&risk, dataset, &fitted, q, opts)
}

pub fn fit_cox_with(
    risk: &RiskSets,
    dataset: &Dataset,
    zspec: &FittedSpec,
    q: &QValues,
    opts: &CoxOptions,
) -> Result<CoxFit> {
    q.check(dataset)?;
    if dataset.n_visits() == 0 {
        return Err(Error::InvalidInput("no visits to model".into()));
    }
    let problem = CoxProblem::new(risk, dataset, zspec, q);
    let (gamma_s, n_iter, max_score_norm, loglik) = problem.solve(opts)?;
    let breslow = problem.breslow(&gamma_s);
    Ok(CoxFit {
        term_names: zspec.names().to_vec(),
        gamma_s,
        breslow,
        n_iter,
        max_score_norm,
        converged: true,
        log_partial_likelihood: loglik,
    })
}

/// Modified Breslow increments `sum Q dN / sum xi exp(gamma'z)` at each
/// distinct visit time.
pub fn breslow_increments(
    dataset: &Dataset,
    zspec: &ModelMatrixSpec,
    gamma: &[f64],
    q: &QValues,
) -> Result<BreslowTable> {
    let risk = RiskSets::new(dataset)?;
    let fitted = zspec.fit(dataset)?;
    breslow_with(&risk, dataset, &fitted, gamma, q)
}

pub fn breslow_with(
    risk: &RiskSets,
    dataset: &Dataset,
    zspec: &FittedSpec,
    gamma: &[f64],
    q: &QValues,
) -> Result<BreslowTable> {
    q.check(dataset)?;
    if gamma.len() != zspec.dim() {
        return Err(Error::InvalidInput(format!(
            "gamma has {} entries for {} terms",
            gamma.len(),
            zspec.dim()
        )));
    }
    Ok(CoxProblem::new(risk, dataset, zspec, q).breslow(gamma))
}

/// Max-norm of the estimating equations at `gamma`, divided by the number
/// of patients.
pub fn score_norm(
    dataset: &Dataset,
    zspec: &ModelMatrixSpec,
    q: &QValues,
    gamma: &[f64],
) -> Result<f64> {
    let risk = RiskSets::new(dataset)?;
    let fitted = zspec.fit(dataset)?;
    q.check(dataset)?;
    let problem = CoxProblem::new(&risk, dataset, &fitted, q);
    Ok(linalg::max_abs(&problem.score(gamma)) / dataset.n_patients() as f64)
}
