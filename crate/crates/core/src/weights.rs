//! Visit weights: the selection function, inverse-intensity (MLE) weights
//! and covariate balancing weights.

use std::io::Write;

use rand::Rng;

use crate::cox::{BreslowTable, CoxFit, QValues};
use crate::data::{Dataset, FittedSpec, ModelMatrixSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::risk::RiskSets;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutcomeTransform {
    #[default]
    Identity,
    Log1p,
}

impl OutcomeTransform {
    pub fn apply(self, y: f64) -> Result<f64> {
        match self {
            OutcomeTransform::Identity => Ok(y),
            OutcomeTransform::Log1p if y >= 0.0 => Ok(y.ln_1p()),
            OutcomeTransform::Log1p => Err(Error::InvalidInput(format!(
                "log1p transform needs non-negative outcomes, found {y}"
            ))),
        }
    }
}

/// Selection function `q = phi * S(Y)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SelectionSpec {
    pub transform: OutcomeTransform,
    pub phi: f64,
}

impl SelectionSpec {
    pub fn new(transform: OutcomeTransform, phi: f64) -> Self {
        Self { transform, phi }
    }
}

/// `Q = exp(-phi * S(Y))` at every visit row.
pub fn q_values(dataset: &Dataset, sel: &SelectionSpec) -> Result<QValues> {
    if !sel.phi.is_finite() {
        return Err(Error::InvalidInput(format!("phi must be finite, got {}", sel.phi)));
    }
    dataset
        .visit_rows()
        .iter()
        .map(|&r| {
            let y = dataset.interval(r).outcome.ok_or_else(|| Error::Validation {
                row: r + 1,
                message: "outcome required at visit".into(),
            })?;
            let s = sel.transform.apply(y)?;
            Ok(if sel.phi == 0.0 { 1.0 } else { (-sel.phi * s).exp() })
        })
        .collect::<Result<Vec<_>>>()
        .map(QValues)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Unit,
    Mle,
    Balancing,
}

impl WeightKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightKind::Unit => "unit",
            WeightKind::Mle => "mle",
            WeightKind::Balancing => "balancing",
        }
    }
}

/// One weight per visit row, aligned with [`Dataset::visit_rows`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub kind: WeightKind,
    pub weights: Vec<f64>,
    /// Names of the coefficients in `gamma`.
    pub terms: Vec<String>,
    pub gamma: Vec<f64>,
    /// n-normalized balancing residuals per term of `terms` (balancing only).
    pub balance_residuals: Vec<f64>,
    pub max_abs_residual: f64,
    /// Balance terms removed before solving because they carry no
    /// information beyond the intercept.
    pub dropped_terms: Vec<String>,
    pub n_iter: usize,
}

impl WeightSet {
    pub fn unit(dataset: &Dataset) -> Self {
        Self {
            kind: WeightKind::Unit,
            weights: vec![1.0; dataset.n_visits()],
            terms: vec![],
            gamma: vec![],
            balance_residuals: vec![],
            max_abs_residual: 0.0,
            dropped_terms: vec![],
            n_iter: 0,
        }
    }

    /// (min, median, max) of the weights.
    pub fn summary(&self) -> (f64, f64, f64) {
        if self.weights.is_empty() {
            return (f64::NAN, f64::NAN, f64::NAN);
        }
        let mut w = self.weights.clone();
        w.sort_by(f64::total_cmp);
        let m = w.len();
        let median = if m % 2 == 1 {
            w[m / 2]
        } else {
            0.5 * (w[m / 2 - 1] + w[m / 2])
        };
        (w[0], median, w[m - 1])
    }
}

/// `exp(-gamma_s'Z) * Q` at each visit.
pub fn mle_weights(cox: &CoxFit, dataset: &Dataset, zspec: &ModelMatrixSpec, q: &QValues) -> Result<WeightSet> {
    let fitted = zspec.fit(dataset)?;
    mle_weights_with(cox, dataset, &fitted, q)
}

pub fn mle_weights_with(cox: &CoxFit, dataset: &Dataset, zspec: &FittedSpec, q: &QValues) -> Result<WeightSet> {
    let p = zspec.dim();
    if cox.gamma_s.len() != p {
        return Err(Error::InvalidInput(format!(
            "intensity fit has {} coefficients, covariate spec has {p} terms",
            cox.gamma_s.len()
        )));
    }
    if q.len() != dataset.n_visits() {
        return Err(Error::InvalidInput(format!(
            "{} Q values for {} visits",
            q.len(),
            dataset.n_visits()
        )));
    }
    let mut z = vec![0.0; p];
    let weights = dataset
        .visit_rows()
        .iter()
        .zip(q.values())
        .map(|(&r, &qv)| {
            zspec.eval_row(dataset, r, &mut z);
            let eta: f64 = z.iter().zip(&cox.gamma_s).map(|(a, b)| a * b).sum();
            (-eta).exp() * qv
        })
        .collect();
    Ok(WeightSet {
        kind: WeightKind::Mle,
        weights,
        terms: cox.term_names.clone(),
        gamma: cox.gamma_s.clone(),
        balance_residuals: vec![],
        max_abs_residual: 0.0,
        dropped_terms: vec![],
        n_iter: cox.n_iter,
    })
}

/// Functionals of time and history to balance; must contain the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceSpec {
    pub terms: ModelMatrixSpec,
}

impl BalanceSpec {
    pub fn new(terms: ModelMatrixSpec) -> Result<Self> {
        if !terms.has_intercept() {
            return Err(Error::InvalidInput("balance terms must include the intercept `1`".into()));
        }
        Ok(Self { terms })
    }

    pub fn parse<S: AsRef<str>>(terms: &[S]) -> Result<Self> {
        Self::new(ModelMatrixSpec::parse(terms)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceOptions {
    /// Bound on the max-norm of the n-normalized residuals.
    pub tolerance: f64,
    pub max_iter: usize,
    /// Random restarts tried when the solve from zero fails.
    pub restarts: usize,
    pub restart_seed: u64,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iter: 100,
            restarts: 20,
            restart_seed: 0x5eed,
        }
    }
}

/// Balance terms evaluated on the risk sets.
pub(crate) struct BalanceProblem {
    p: usize,
    n: f64,
    /// h at each visit, row-major.
    visit_h: Vec<f64>,
    q: Vec<f64>,
    /// `(1/n) sum_k dLambda_k sum_{l in R_k} h_l`.
    target: Vec<f64>,
}

impl BalanceProblem {
    pub(crate) fn new(
        risk: &RiskSets,
        dataset: &Dataset,
        hspec: &FittedSpec,
        q: &[f64],
        breslow: &BreslowTable,
    ) -> Result<Self> {
        if breslow.times.as_slice() != risk.event_times() {
            return Err(Error::InvalidInput(
                "Breslow table does not match the dataset's visit times".into(),
            ));
        }
        if q.len() != dataset.n_visits() {
            return Err(Error::InvalidInput(format!(
                "{} Q values for {} visits",
                q.len(),
                dataset.n_visits()
            )));
        }
        let p = hspec.dim();
        let n = risk.n_patients() as f64;
        let slot_h = risk.evaluate(dataset, hspec);
        let mut target = vec![0.0; p];
        let mut sum = vec![0.0; p];
        for k in 0..risk.n_events() {
            sum.iter_mut().for_each(|x| *x = 0.0);
            for s in risk.slots(k) {
                for (acc, h) in sum.iter_mut().zip(&slot_h[s * p..(s + 1) * p]) {
                    *acc += h;
                }
            }
            for (t, s) in target.iter_mut().zip(&sum) {
                *t += breslow.increments[k] * s;
            }
        }
        target.iter_mut().for_each(|t| *t /= n);
        let mut visit_h = Vec::with_capacity(q.len() * p);
        for &slot in risk.visit_slot() {
            visit_h.extend_from_slice(&slot_h[slot * p..(slot + 1) * p]);
        }
        Ok(Self {
            p,
            n,
            visit_h,
            q: q.to_vec(),
            target,
        })
    }

    fn h(&self, v: usize) -> &[f64] {
        &self.visit_h[v * self.p..(v + 1) * self.p]
    }

    fn n_visits(&self) -> usize {
        self.q.len()
    }

    /// `(1/n) sum_v h_v w_v - target` for arbitrary visit weights.
    pub(crate) fn residuals_for(&self, weights: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.p];
        for (v, &w) in weights.iter().enumerate() {
            for (acc, h) in r.iter_mut().zip(self.h(v)) {
                *acc += h * w;
            }
        }
        r.iter()
            .zip(&self.target)
            .map(|(a, t)| a / self.n - t)
            .collect()
    }

    fn weights_at(&self, gamma: &[f64]) -> Vec<f64> {
        (0..self.n_visits())
            .map(|v| {
                let eta: f64 = self.h(v).iter().zip(gamma).map(|(a, b)| a * b).sum();
                eta.exp() * self.q[v]
            })
            .collect()
    }

    /// Convex potential whose gradient is the residual map.
    fn objective(&self, weights: &[f64], gamma: &[f64]) -> f64 {
        let total: f64 = weights.iter().sum::<f64>() / self.n;
        total - gamma.iter().zip(&self.target).map(|(g, t)| g * t).sum::<f64>()
    }

    fn jacobian(&self, weights: &[f64]) -> Vec<f64> {
        let p = self.p;
        let mut j = vec![0.0; p * p];
        for (v, &w) in weights.iter().enumerate() {
            let h = self.h(v);
            for a in 0..p {
                let wa = w * h[a];
                for b in 0..=a {
                    j[a * p + b] += wa * h[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..=a {
                j[a * p + b] /= self.n;
                j[b * p + a] = j[a * p + b];
            }
        }
        j
    }

    fn newton(&self, start: Vec<f64>, opts: &BalanceOptions) -> Result<(Vec<f64>, usize)> {
        let p = self.p;
        let mut gamma = start;
        let mut w = self.weights_at(&gamma);
        let mut f = self.objective(&w, &gamma);
        let mut r = self.residuals_for(&w);
        for iter in 0..opts.max_iter {
            let norm = linalg::max_abs(&r);
            if norm <= opts.tolerance {
                return Ok((gamma, iter));
            }
            let jac = self.jacobian(&w);
            let Some(l) = linalg::cholesky(&jac, p) else {
                return Err(Error::SingularJacobian {
                    residual: norm,
                    condition: f64::INFINITY,
                });
            };
            let step = linalg::cholesky_solve(&l, p, &r);
            let slope: f64 = -step.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = gamma.iter().zip(&step).map(|(g, d)| g - alpha * d).collect();
                let tw = self.weights_at(&trial);
                let tf = self.objective(&tw, &trial);
                if tf.is_finite() && tf <= f + 1e-4 * alpha * slope + 1e-15 * f.abs() {
                    gamma = trial;
                    w = tw;
                    f = tf;
                    r = self.residuals_for(&w);
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(Error::NonConvergence {
                    what: "balancing weights",
                    iterations: iter + 1,
                    norm,
                });
            }
        }
        let norm = linalg::max_abs(&r);
        if norm <= opts.tolerance {
            return Ok((gamma, opts.max_iter));
        }
        let condition = linalg::cholesky(&self.jacobian(&w), p)
            .map(|l| linalg::condition_estimate(&l, p))
            .unwrap_or(f64::INFINITY);
        log::debug!("balancing solve stopped with residual {norm:.3e}, condition {condition:.3e}");
        Err(Error::NonConvergence {
            what: "balancing weights",
            iterations: opts.max_iter,
            norm,
        })
    }

    fn solve(&self, opts: &BalanceOptions) -> Result<(Vec<f64>, usize)> {
        let first = match self.newton(vec![0.0; self.p], opts) {
            Ok(found) => return Ok(found),
            Err(e) => e,
        };
        for i in 0..opts.restarts {
            let mut rng = rng::substream(opts.restart_seed, i as u64);
            let start = (0..self.p).map(|_| rng.random_range(-0.5..0.5)).collect();
            if let Ok(found) = self.newton(start, opts) {
                log::debug!("balancing solve converged after restart {}", i + 1);
                return Ok(found);
            }
        }
        Err(first)
    }
}

/// Indices of terms that are constant over the visits (other than the
/// intercept). With an intercept present they make the Jacobian singular.
fn degenerate_terms(visit_h: &[f64], p: usize, intercept: &[bool]) -> Vec<usize> {
    let m = visit_h.len().checked_div(p).unwrap_or(0);
    (0..p)
        .filter(|&j| !intercept[j])
        .filter(|&j| {
            let first = if m > 0 { visit_h[j] } else { 0.0 };
            (0..m).all(|v| visit_h[v * p + j] == first)
        })
        .collect()
}

/// Solves the balancing conditions for `W = exp(gamma_b'h) * Q`.
pub fn balancing_weights(
    dataset: &Dataset,
    hspec: &BalanceSpec,
    q: &QValues,
    breslow: &BreslowTable,
    opts: &BalanceOptions,
) -> Result<WeightSet> {
    let risk = RiskSets::new(dataset)?;
    balancing_weights_with(&risk, dataset, hspec, q, breslow, opts)
}

pub fn balancing_weights_with(
    risk: &RiskSets,
    dataset: &Dataset,
    hspec: &BalanceSpec,
    q: &QValues,
    breslow: &BreslowTable,
    opts: &BalanceOptions,
) -> Result<WeightSet> {
    let full = hspec.terms.fit(dataset)?;
    let intercept: Vec<bool> = hspec.terms.terms.iter().map(|t| t.is_intercept()).collect();
    let probe = BalanceProblem::new(risk, dataset, &full, q.values(), breslow)?;
    let dropped = degenerate_terms(&probe.visit_h, probe.p, &intercept);
    let (problem, spec) = if dropped.is_empty() {
        (probe, full)
    } else {
        let names = hspec.terms.term_names();
        for &j in &dropped {
            log::warn!("balance term `{}` is constant over visits and is dropped", names[j]);
        }
        let kept = ModelMatrixSpec::new(
            hspec
                .terms
                .terms
                .iter()
                .enumerate()
                .filter(|(j, _)| !dropped.contains(j))
                .map(|(_, t)| t.clone())
                .collect(),
        );
        let spec = kept.fit(dataset)?;
        (BalanceProblem::new(risk, dataset, &spec, q.values(), breslow)?, spec)
    };
    let (gamma, n_iter) = problem.solve(opts)?;
    let weights = problem.weights_at(&gamma);
    let balance_residuals = problem.residuals_for(&weights);
    let max_abs_residual = linalg::max_abs(&balance_residuals);
    let names = hspec.terms.term_names();
    Ok(WeightSet {
        kind: WeightKind::Balancing,
        weights,
        terms: spec.names().to_vec(),
        gamma,
        balance_residuals,
        max_abs_residual,
        dropped_terms: dropped.iter().map(|&j| names[j].clone()).collect(),
        n_iter,
    })
}

/// n-normalized balancing residuals of arbitrary visit weights:
/// `(1/n) sum_i [ sum_v h w dN - sum_k xi h dLambda_k ]` per term.
pub fn balance_residuals(
    dataset: &Dataset,
    hspec: &ModelMatrixSpec,
    visit_weights: &[f64],
    breslow: &BreslowTable,
) -> Result<Vec<f64>> {
    let risk = RiskSets::new(dataset)?;
    let fitted = hspec.fit(dataset)?;
    if visit_weights.len() != dataset.n_visits() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} visits",
            visit_weights.len(),
            dataset.n_visits()
        )));
    }
    let problem = BalanceProblem::new(&risk, dataset, &fitted, visit_weights, breslow)?;
    Ok(problem.residuals_for(visit_weights))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRow {
    pub term: String,
    pub residual: f64,
    /// Residual divided by the term's standard deviation over the at-risk
    /// population; equal to `residual` when `zero_sd` is set.
    pub standardized_residual: f64,
    pub zero_sd: bool,
}

/// Standardized imbalance of each balance term under `weights`.
pub fn balance_report(
    dataset: &Dataset,
    hspec: &BalanceSpec,
    weights: &WeightSet,
    q: &QValues,
    breslow: &BreslowTable,
) -> Result<Vec<BalanceRow>> {
    let risk = RiskSets::new(dataset)?;
    balance_report_with(&risk, dataset, hspec, weights, q, breslow)
}

pub fn balance_report_with(
    risk: &RiskSets,
    dataset: &Dataset,
    hspec: &BalanceSpec,
    weights: &WeightSet,
    q: &QValues,
    breslow: &BreslowTable,
) -> Result<Vec<BalanceRow>> {
    if weights.weights.len() != dataset.n_visits() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} visits",
            weights.weights.len(),
            dataset.n_visits()
        )));
    }
    let fitted = hspec.terms.fit(dataset)?;
    let problem = BalanceProblem::new(risk, dataset, &fitted, q.values(), breslow)?;
    let residuals = problem.residuals_for(&weights.weights);
    let p = fitted.dim();
    let slot_h = risk.evaluate(dataset, &fitted);
    let m = risk.n_slots();
    let mut rows = Vec::with_capacity(p);
    for (j, name) in fitted.names().iter().enumerate() {
        let mean = (0..m).map(|s| slot_h[s * p + j]).sum::<f64>() / m as f64;
        let ss: f64 = (0..m).map(|s| (slot_h[s * p + j] - mean).powi(2)).sum();
        let sd = if m > 1 { (ss / (m - 1) as f64).sqrt() } else { 0.0 };
        let zero_sd = !(sd > 0.0);
        rows.push(BalanceRow {
            term: name.clone(),
            residual: residuals[j],
            standardized_residual: if zero_sd { residuals[j] } else { residuals[j] / sd },
            zero_sd,
        });
    }
    Ok(rows)
}

/// Writes `patient_id,visit_time,weight,kind`.
pub fn write_weights_csv<W: Write>(dataset: &Dataset, weights: &WeightSet, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["patient_id", "visit_time", "weight", "kind"])?;
    for (&r, w) in dataset.visit_rows().iter().zip(&weights.weights) {
        let iv = dataset.interval(r);
        wtr.write_record([
            iv.patient_id.to_string(),
            iv.end.to_string(),
            w.to_string(),
            weights.kind.as_str().to_string(),
        ])?;
    }
    wtr.flush().map_err(|source| Error::Io {
        path: "<weights csv>".into(),
        source,
    })?;
    Ok(())
}

/// Writes `term,residual,standardized_residual`.
pub fn write_balance_csv<W: Write>(rows: &[BalanceRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["term", "residual", "standardized_residual"])?;
    for row in rows {
        wtr.write_record([
            row.term.clone(),
            row.residual.to_string(),
            row.standardized_residual.to_string(),
        ])?;
    }
    wtr.flush().map_err(|source| Error::Io {
        path: "<balance csv>".into(),
        source,
    })?;
    Ok(())
}
