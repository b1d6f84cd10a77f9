//! Simulation study: data generation on a fine time grid, the four weight
//! model scenarios and Monte Carlo scoring of the estimators.
//!
//! Each patient is followed at `t = 0.01, 0.02, ..., 5.00`. At every grid
//! time fresh covariates are drawn, the outcome is generated from them and a
//! visit happens with probability
//!
//! ```text
//! pi(t) = min(1, exp(-3.05 - 2t + g_z Z1 + g_z Z2 + g_i Z1 Z2 + g_x X + phi S(Y)))
//! ```
//!
//! Per-patient draws come from stream `p` of `substream(seed, rep)` in the
//! fixed order `Z1, Z2, e, outcome noise, visit uniform`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

use crate::cox::{breslow_with, fit_cox_with, CoxOptions, QValues};
use crate::data::{Dataset, DatasetBuilder, ModelMatrixSpec};
use crate::error::{Error, Result};
use crate::gee::{fit_gee_design, fit_weighted_gee, GeeOptions, Link, MarginalModelSpec, Variance};
use crate::linalg;
use crate::par::{self, Execution};
use crate::risk::RiskSets;
use crate::rng;
use crate::weights::{
    balancing_weights_with, mle_weights_with, q_values, BalanceOptions, BalanceSpec,
    OutcomeTransform, SelectionSpec, WeightSet,
};

pub const GRID_POINTS: usize = 500;
pub const GRID_STEP: f64 = 0.01;

/// Grid time of step `k` (1-based).
#[inline]
pub fn grid_time(k: usize) -> f64 {
    k as f64 / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutcomeKind {
    #[default]
    Continuous,
    Count,
}

impl OutcomeKind {
    pub fn transform(self) -> OutcomeTransform {
        match self {
            OutcomeKind::Continuous => OutcomeTransform::Identity,
            OutcomeKind::Count => OutcomeTransform::Log1p,
        }
    }

    /// Marginal coefficients of `X` and `t`.
    pub fn truth(self) -> [f64; 2] {
        match self {
            OutcomeKind::Continuous => [-4.5, -0.5],
            OutcomeKind::Count => [-1.0, -0.5],
        }
    }

    pub fn link(self) -> Link {
        match self {
            OutcomeKind::Continuous => Link::Identity,
            OutcomeKind::Count => Link::Log,
        }
    }

    pub fn variance(self) -> Variance {
        match self {
            OutcomeKind::Continuous => Variance::Constant,
            OutcomeKind::Count => Variance::Poisson,
        }
    }
}

/// Weight model used for estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scenario {
    /// Selection function omitted, correct covariates.
    #[default]
    S1,
    /// Selection function omitted, transformed covariates.
    S2,
    /// Selection function at the true `phi`, correct covariates.
    S3,
    /// Selection function at the limiting `phi`, transformed covariates.
    S4,
}

impl Scenario {
    pub fn transformed(self) -> bool {
        matches!(self, Scenario::S2 | Scenario::S4)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::S1 => "s1_noSF_correctZ",
            Scenario::S2 => "s2_noSF_transformedZ",
            Scenario::S3 => "s3_SF_correctZ",
            Scenario::S4 => "s4_SF_transformedZ",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Scenario::S1, Scenario::S2, Scenario::S3, Scenario::S4]
            .into_iter()
            .find(|sc| s == sc.name() || s == &sc.name()[..2])
            .ok_or_else(|| Error::InvalidInput(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Estimator {
    Complete,
    Naive,
    Mle,
    Balancing,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Complete, Estimator::Naive, Estimator::Mle, Estimator::Balancing];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Complete => "complete",
            Estimator::Naive => "naive",
            Estimator::Mle => "mle",
            Estimator::Balancing => "balancing",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub outcome: OutcomeKind,
    pub gamma_z: f64,
    pub phi_true: f64,
    pub n: usize,
    pub scenario: Scenario,
    pub n_reps: usize,
    pub seed: u64,
    /// Coefficient of `Z1 Z2` in the visit model.
    pub gamma_interaction: f64,
    /// Coefficient of `X` in the visit model.
    pub gamma_x: f64,
    /// Patients in the large sample behind the limiting `phi`.
    pub limiting_n: usize,
    pub limiting_seed: u64,
    pub estimators: Vec<Estimator>,
    pub execution: Execution,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            outcome: OutcomeKind::Continuous,
            gamma_z: 1.25,
            phi_true: 0.0,
            n: 200,
            scenario: Scenario::S1,
            n_reps: 200,
            seed: 1,
            gamma_interaction: 0.5,
            gamma_x: 1.0,
            limiting_n: 100_000,
            limiting_seed: 20_240_601,
            estimators: Estimator::ALL.to_vec(),
            execution: Execution::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidInput("n must be at least 2".into()));
        }
        if self.n_reps < 1 {
            return Err(Error::InvalidInput("n_reps must be at least 1".into()));
        }
        if self.limiting_n < 2 {
            return Err(Error::InvalidInput("limiting_n must be at least 2".into()));
        }
        for v in [self.gamma_z, self.phi_true, self.gamma_interaction, self.gamma_x] {
            if !v.is_finite() {
                return Err(Error::InvalidInput("scenario coefficients must be finite".into()));
            }
        }
        Ok(())
    }

    /// True coefficients of the correct history terms `z1, z2, z1:z2, x`.
    pub fn true_gamma(&self) -> [f64; 4] {
        [self.gamma_z, self.gamma_z, self.gamma_interaction, self.gamma_x]
    }
}

/// One grid time of one patient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub z1: f64,
    pub z2: f64,
    pub e: f64,
    pub y: f64,
    pub pi: f64,
    pub visit: bool,
}

impl Draw {
    pub fn z1s(&self) -> f64 {
        self.z1 - self.z2
    }

    pub fn z2s(&self) -> f64 {
        self.z2 + self.e
    }
}

/// Visit probability given covariates and the concurrent outcome.
pub fn visit_probability(cfg: &ScenarioConfig, t: f64, x: f64, z1: f64, z2: f64, y: f64) -> f64 {
    let s = match cfg.outcome {
        OutcomeKind::Continuous => y,
        OutcomeKind::Count => y.ln_1p(),
    };
    let eta = -3.05 - 2.0 * t + cfg.gamma_z * (z1 + z2) + cfg.gamma_interaction * z1 * z2 + cfg.gamma_x * x + cfg.phi_true * s;
    eta.exp().min(1.0)
}

/// Draws one grid time for a patient with baseline covariate `x`.
pub fn draw_time_point(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng, x: f64, t: f64) -> Draw {
    let z1 = rng.sample::<f64, _>(StandardNormal) - x;
    let z2 = rng.sample::<f64, _>(StandardNormal) - x;
    let e = 0.1 * rng.sample::<f64, _>(StandardNormal);
    let y = match cfg.outcome {
        OutcomeKind::Continuous => {
            5.0 + z1 + z2 - 0.5 * z1 * z2 - 2.0 * x - 0.5 * t + 0.5 * rng.sample::<f64, _>(StandardNormal)
        }
        OutcomeKind::Count => {
            let mu = (1.69 + z1 + z2 - 0.5 * z1 * z2 + 0.67 * x - 0.5 * t).exp();
            negative_binomial(rng, mu, 0.5)
        }
    };
    let pi = visit_probability(cfg, t, x, z1, z2, y);
    let visit = rng.random::<f64>() < pi;
    Draw { z1, z2, e, y, pi, visit }
}

/// Gamma-Poisson mixture with mean `mu` and variance `mu + theta mu^2`.
pub fn negative_binomial(rng: &mut ChaCha8Rng, mu: f64, theta: f64) -> f64 {
    let rate = Gamma::new(1.0 / theta, theta * mu)
        .expect("gamma parameters are positive")
        .sample(rng);
    if !(rate > 0.0) {
        return 0.0;
    }
    // Poisson sampling is exact for finite rates; guard absurd tails.
    match Poisson::new(rate.min(1e12)) {
        Ok(p) => p.sample(rng),
        Err(_) => 0.0,
    }
}

/// Runs the generator for patient `p` of replicate stream `(seed, rep)`.
fn for_each_draw(cfg: &ScenarioConfig, seed: u64, rep: u64, p: u64, mut f: impl FnMut(usize, f64, &Draw)) {
    let mut rng = rng::patient_stream(seed, rep, p);
    let x = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    for k in 1..=GRID_POINTS {
        let t = grid_time(k);
        let d = draw_time_point(cfg, &mut rng, x, t);
        f(k, x, &d);
    }
}

pub const COVARIATES: [&str; 5] = ["x", "z1", "z2", "z1s", "z2s"];

/// Complete outcome data aggregated by `(X, grid time)`.
///
/// The marginal model depends on the rows only through `X` and `t`, and the
/// estimating equations are linear in the outcome, so cell means with cell
/// counts as weights reproduce the row-level fit exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CompleteData {
    /// Indexed by `x * GRID_POINTS + (k - 1)`.
    pub count: Vec<f64>,
    pub sum_y: Vec<f64>,
}

impl CompleteData {
    fn new() -> Self {
        Self {
            count: vec![0.0; 2 * GRID_POINTS],
            sum_y: vec![0.0; 2 * GRID_POINTS],
        }
    }

    fn add(&mut self, x: f64, k: usize, y: f64) {
        let i = x as usize * GRID_POINTS + k - 1;
        self.count[i] += 1.0;
        self.sum_y[i] += y;
    }

    fn merge(&mut self, other: &CompleteData) {
        for i in 0..self.count.len() {
            self.count[i] += other.count[i];
            self.sum_y[i] += other.sum_y[i];
        }
    }

    /// Marginal coefficients `(intercept, X, t)` with unit weights.
    pub fn fit(&self, outcome: OutcomeKind) -> Result<Vec<f64>> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut w = Vec::new();
        for xi in 0..2 {
            for k in 1..=GRID_POINTS {
                let i = xi * GRID_POINTS + k - 1;
                if self.count[i] > 0.0 {
                    x.extend_from_slice(&[1.0, xi as f64, grid_time(k)]);
                    y.push(self.sum_y[i] / self.count[i]);
                    w.push(self.count[i]);
                }
            }
        }
        let (beta, ..) = fit_gee_design(&x, 3, &y, &w, outcome.link(), outcome.variance(), &GeeOptions::default())?;
        Ok(beta)
    }
}

/// Observed data of one replicate with its complete-data companion.
#[derive(Debug, Clone)]
pub struct SimData {
    pub observed: Dataset,
    pub complete: CompleteData,
}

/// Generates replicate `rep` of the scenario.
pub fn generate(cfg: &ScenarioConfig, rep: usize) -> Result<SimData> {
    cfg.validate()?;
    let mut builder = DatasetBuilder::new(COVARIATES.iter().map(|s| s.to_string()).collect());
    builder.reserve(cfg.n * GRID_POINTS);
    let mut complete = CompleteData::new();
    let mut failure = None;
    for p in 0..cfg.n {
        for_each_draw(cfg, cfg.seed, rep as u64, p as u64, |k, x, d| {
            complete.add(x, k, d.y);
            if failure.is_some() {
                return;
            }
            let covs = [x, d.z1, d.z2, d.z1s(), d.z2s()];
            if let Err(e) = builder.push(
                p as i64,
                grid_time(k - 1),
                grid_time(k),
                true,
                d.visit,
                d.visit.then_some(d.y),
                &covs,
            ) {
                failure = Some(e);
            }
        });
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(SimData {
        observed: builder.build()?,
        complete,
    })
}

const BLOCK: usize = 1000;

/// Complete-data fit on `n` patients streamed without materializing rows.
pub fn complete_data_fit(cfg: &ScenarioConfig, n: usize, seed: u64) -> Result<Vec<f64>> {
    let blocks = n.div_ceil(BLOCK);
    let parts = par::map_indexed(blocks, cfg.execution, |b| {
        let mut agg = CompleteData::new();
        for p in b * BLOCK..((b + 1) * BLOCK).min(n) {
            for_each_draw(cfg, seed, 0, p as u64, |k, x, d| agg.add(x, k, d.y));
        }
        agg
    });
    let mut total = CompleteData::new();
    for part in &parts {
        total.merge(part);
    }
    total.fit(cfg.outcome)
}

fn history_terms(transformed: bool) -> Vec<&'static str> {
    if transformed {
        vec!["z1s", "z2s", "z1s:z2s", "x"]
    } else {
        vec!["z1", "z2", "z1:z2", "x"]
    }
}

/// History terms of the weight model for a scenario.
pub fn zspec_for(scenario: Scenario) -> ModelMatrixSpec {
    ModelMatrixSpec::parse(&history_terms(scenario.transformed())).expect("fixed terms parse")
}

/// Balance terms `1, t`, the history terms and their products with `t`.
pub fn hspec_for(scenario: Scenario) -> BalanceSpec {
    let z = history_terms(scenario.transformed());
    let mut terms = vec!["1".to_string(), "t".to_string()];
    terms.extend(z.iter().map(|s| s.to_string()));
    terms.extend(z.iter().map(|s| format!("t:{s}")));
    BalanceSpec::parse(&terms).expect("fixed terms parse")
}

pub fn marginal_model(outcome: OutcomeKind) -> MarginalModelSpec {
    MarginalModelSpec::new(
        ModelMatrixSpec::parse(&["1", "x", "t"]).expect("fixed terms parse"),
        outcome.link(),
        outcome.variance(),
    )
    .expect("fixed model is valid")
}

/// Streaming proportional-intensity fit on `n` patients with covariates
/// `(z1s, z2s, z1s z2s, x, S(Y))`, or the correct history terms when
/// `transformed` is false. Returns all coefficients; the last is `S(Y)`.
pub fn streaming_cox(cfg: &ScenarioConfig, n: usize, seed: u64, transformed: bool) -> Result<Vec<f64>> {
    const P: usize = 5;
    let features = |x: f64, d: &Draw| -> [f64; P] {
        let s = match cfg.outcome {
            OutcomeKind::Continuous => d.y,
            OutcomeKind::Count => d.y.ln_1p(),
        };
        if transformed {
            let (a, b) = (d.z1s(), d.z2s());
            [a, b, a * b, x, s]
        } else {
            [d.z1, d.z2, d.z1 * d.z2, x, s]
        }
    };
    struct Acc {
        s0: Vec<f64>,
        s1: Vec<f64>,
        s2: Vec<f64>,
        events: Vec<f64>,
        zsum: [f64; P],
        eta_sum: f64,
    }
    let pass = |gamma: &[f64; P], n: usize| -> (f64, Vec<f64>, Vec<f64>) {
        let blocks = n.div_ceil(BLOCK);
        let parts = par::map_indexed(blocks, cfg.execution, |b| {
            let mut acc = Acc {
                s0: vec![0.0; GRID_POINTS],
                s1: vec![0.0; GRID_POINTS * P],
                s2: vec![0.0; GRID_POINTS * P * P],
                events: vec![0.0; GRID_POINTS],
                zsum: [0.0; P],
                eta_sum: 0.0,
            };
            for p in b * BLOCK..((b + 1) * BLOCK).min(n) {
                for_each_draw(cfg, seed, 0, p as u64, |k, x, d| {
                    let c = features(x, d);
                    let eta: f64 = c.iter().zip(gamma).map(|(a, b)| a * b).sum();
                    let w = eta.exp();
                    let i = k - 1;
                    acc.s0[i] += w;
                    for a in 0..P {
                        let wa = w * c[a];
                        acc.s1[i * P + a] += wa;
                        for bb in 0..=a {
                            acc.s2[(i * P + a) * P + bb] += wa * c[bb];
                        }
                    }
                    if d.visit {
                        acc.events[i] += 1.0;
                        acc.eta_sum += eta;
                        for a in 0..P {
                            acc.zsum[a] += c[a];
                        }
                    }
                });
            }
            acc
        });
        let mut total = Acc {
            s0: vec![0.0; GRID_POINTS],
            s1: vec![0.0; GRID_POINTS * P],
            s2: vec![0.0; GRID_POINTS * P * P],
            events: vec![0.0; GRID_POINTS],
            zsum: [0.0; P],
            eta_sum: 0.0,
        };
        for part in &parts {
            for (a, b) in total.s0.iter_mut().zip(&part.s0) {
                *a += b;
            }
            for (a, b) in total.s1.iter_mut().zip(&part.s1) {
                *a += b;
            }
            for (a, b) in total.s2.iter_mut().zip(&part.s2) {
                *a += b;
            }
            for (a, b) in total.events.iter_mut().zip(&part.events) {
                *a += b;
            }
            for a in 0..P {
                total.zsum[a] += part.zsum[a];
            }
            total.eta_sum += part.eta_sum;
        }
        let mut loglik = total.eta_sum;
        let mut score = total.zsum.to_vec();
        let mut info = vec![0.0; P * P];
        for i in 0..GRID_POINTS {
            let d = total.events[i];
            if d == 0.0 {
                continue;
            }
            let s0 = total.s0[i];
            loglik -= d * s0.ln();
            for a in 0..P {
                let ma = total.s1[i * P + a] / s0;
                score[a] -= d * ma;
                for bb in 0..=a {
                    let mb = total.s1[i * P + bb] / s0;
                    info[a * P + bb] += d * (total.s2[(i * P + a) * P + bb] / s0 - ma * mb);
                }
            }
        }
        for a in 0..P {
            for bb in 0..a {
                info[bb * P + a] = info[a * P + bb];
            }
        }
        (loglik, score, info)
    };
    let newton = |n: usize, start: [f64; P], opts: &CoxOptions| -> Result<[f64; P]> {
        let mut gamma = start;
        let (mut ll, mut score, mut info) = pass(&gamma, n);
        for iter in 0..opts.max_iter {
            let norm = linalg::max_abs(&score) / n as f64;
            if norm <= opts.tolerance {
                return Ok(gamma);
            }
            let step = linalg::solve_spd(&info, P, &score).ok_or(Error::RankDeficient {
                what: "large-sample intensity model",
            })?;
            let mut alpha = 1.0;
            loop {
                let mut trial = gamma;
                for a in 0..P {
                    trial[a] += alpha * step[a];
                }
                let (tl, ts, ti) = pass(&trial, n);
                if tl.is_finite() && tl >= ll - 1e-12 * ll.abs() {
                    gamma = trial;
                    ll = tl;
                    score = ts;
                    info = ti;
                    break;
                }
                alpha *= 0.5;
                if alpha < 1e-6 {
                    return Err(Error::NonConvergence {
                        what: "large-sample intensity model",
                        iterations: iter + 1,
                        norm,
                    });
                }
            }
            // Relative step small enough that another pass cannot matter.
            if linalg::max_abs(&step) * alpha < 1e-10 {
                return Ok(gamma);
            }
        }
        Err(Error::NonConvergence {
            what: "large-sample intensity model",
            iterations: opts.max_iter,
            norm: linalg::max_abs(&score) / n as f64,
        })
    };
    // A fit on the first tenth of the patients gives a close starting point.
    let opts = CoxOptions::default();
    let warm = if n >= 20 * BLOCK {
        newton(n / 10, [0.0; P], &CoxOptions { tolerance: 1e-6, ..opts.clone() })?
    } else {
        [0.0; P]
    };
    Ok(newton(n, warm, &opts)?.to_vec())
}

/// Coefficient of `S(Y)` in a large-sample intensity fit with transformed
/// covariates.
pub fn limiting_phi(cfg: &ScenarioConfig) -> Result<f64> {
    cfg.validate()?;
    let gamma = streaming_cox(cfg, cfg.limiting_n, cfg.limiting_seed, true)?;
    Ok(gamma[4])
}

/// `phi` used in the weight models of a scenario.
pub fn weight_phi(cfg: &ScenarioConfig) -> Result<f64> {
    Ok(match cfg.scenario {
        Scenario::S1 | Scenario::S2 => 0.0,
        Scenario::S3 => cfg.phi_true,
        Scenario::S4 => limiting_phi(cfg)?,
    })
}

/// Estimates of `(beta_X, beta_t)` by each estimator on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub rep: usize,
    pub estimates: Vec<(Estimator, Option<[f64; 2]>)>,
    /// Balancing residual max-norm when the balancing solve converged.
    pub balance_residual: Option<f64>,
}

fn pick(beta: &[f64]) -> [f64; 2] {
    [beta[1], beta[2]]
}

/// Fits every requested estimator on replicate `rep`.
pub fn run_replicate(cfg: &ScenarioConfig, rep: usize, phi_w: f64) -> Result<ReplicateResult> {
    let data = generate(cfg, rep)?;
    let ds = &data.observed;
    let model = marginal_model(cfg.outcome);
    let gee_opts = GeeOptions::default();
    let needs_weights = cfg.estimators.iter().any(|e| matches!(e, Estimator::Mle | Estimator::Balancing));

    let mut intensity = None;
    if needs_weights {
        let fit = || -> Result<_> {
            let q = q_values(ds, &SelectionSpec::new(cfg.outcome.transform(), phi_w))?;
            let risk = RiskSets::new(ds)?;
            let zspec = zspec_for(cfg.scenario).fit(ds)?;
            let cox = fit_cox_with(&risk, ds, &zspec, &q, &CoxOptions::default())?;
            Ok((q, risk, zspec, cox))
        };
        intensity = Some(fit());
    }
    let mut balance_residual = None;
    let mut estimates = Vec::with_capacity(cfg.estimators.len());
    for &est in &cfg.estimators {
        let result: Result<[f64; 2]> = match est {
            Estimator::Complete => data.complete.fit(cfg.outcome).map(|b| pick(&b)),
            Estimator::Naive => fit_weighted_gee(ds, &model, &WeightSet::unit(ds), &gee_opts).map(|f| pick(&f.beta)),
            Estimator::Mle | Estimator::Balancing => match intensity.as_ref().expect("fitted above") {
                Err(e) => Err(Error::InvalidInput(e.to_string())),
                Ok((q, risk, zspec, cox)) => {
                    let weights = if est == Estimator::Mle {
                        mle_weights_with(cox, ds, zspec, q)
                    } else {
                        balancing_weights_with(risk, ds, &hspec_for(cfg.scenario), q, &cox.breslow, &BalanceOptions::default())
                            .inspect(|w| balance_residual = Some(w.max_abs_residual))
                    };
                    weights.and_then(|w| fit_weighted_gee(ds, &model, &w, &gee_opts)).map(|f| pick(&f.beta))
                }
            },
        };
        if let Err(e) = &result {
            log::debug!("replicate {rep}, {}: {e}", est.name());
        }
        estimates.push((est, result.ok()));
    }
    Ok(ReplicateResult {
        rep,
        estimates,
        balance_residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub estimator: Estimator,
    /// 0 for the `X` coefficient, 1 for time.
    pub parameter: usize,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub mc_se_bias: f64,
    pub n_failed: usize,
}

impl MetricRow {
    pub fn parameter_name(&self) -> &'static str {
        ["beta1", "beta2"][self.parameter]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
    pub replicates: Vec<ReplicateResult>,
    pub phi_weights: f64,
    /// Largest balancing residual over converged solves.
    pub max_balance_residual: f64,
    pub balance_solves: usize,
}

impl MetricsTable {
    pub fn get(&self, estimator: Estimator, parameter: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.parameter == parameter)
    }

    /// Writes `estimator,parameter,bias,sd,rmse,mc_se_bias,n_failed`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["estimator", "parameter", "bias", "sd", "rmse", "mc_se_bias", "n_failed"])?;
        for r in &self.rows {
            wtr.write_record([
                r.estimator.name().to_string(),
                r.parameter_name().to_string(),
                r.bias.to_string(),
                r.sd.to_string(),
                r.rmse.to_string(),
                r.mc_se_bias.to_string(),
                r.n_failed.to_string(),
            ])?;
        }
        wtr.flush().map_err(|source| Error::Io {
            path: "<metrics csv>".into(),
            source,
        })?;
        Ok(())
    }

    /// Writes `rep,estimator,beta1,beta2,converged`.
    pub fn write_replicates_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["rep", "estimator", "beta1", "beta2", "converged"])?;
        for rep in &self.replicates {
            for (est, b) in &rep.estimates {
                let (b1, b2, ok) = match b {
                    Some([b1, b2]) => (b1.to_string(), b2.to_string(), "1"),
                    None => (String::new(), String::new(), "0"),
                };
                wtr.write_record([rep.rep.to_string(), est.name().to_string(), b1, b2, ok.to_string()])?;
            }
        }
        wtr.flush().map_err(|source| Error::Io {
            path: "<replicates csv>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Bias, SD (n - 1 denominator), RMSE and Monte Carlo SE of the bias.
pub fn score(values: &[f64], truth: f64) -> (f64, f64, f64, f64) {
    let m = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    let rmse = (values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / m).sqrt();
    (mean - truth, sd, rmse, sd / m.sqrt())
}

/// Simulates `n_reps` replicates and scores every estimator.
pub fn run_study(cfg: &ScenarioConfig) -> Result<MetricsTable> {
    cfg.validate()?;
    let phi_w = weight_phi(cfg)?;
    let results = par::map_indexed(cfg.n_reps, cfg.execution, |r| run_replicate(cfg, r + 1, phi_w));
    let replicates: Vec<ReplicateResult> = results.into_iter().collect::<Result<_>>()?;
    let truth = cfg.outcome.truth();
    let mut rows = Vec::new();
    for (j, &est) in cfg.estimators.iter().enumerate() {
        for (param, &truth) in truth.iter().enumerate() {
            let values: Vec<f64> = replicates
                .iter()
                .filter_map(|r| r.estimates[j].1.map(|b| b[param]))
                .collect();
            let (bias, sd, rmse, mc_se_bias) = score(&values, truth);
            rows.push(MetricRow {
                estimator: est,
                parameter: param,
                bias,
                sd,
                rmse,
                mc_se_bias,
                n_failed: replicates.len() - values.len(),
            });
        }
    }
    let residuals: Vec<f64> = replicates.iter().filter_map(|r| r.balance_residual).collect();
    Ok(MetricsTable {
        rows,
        phi_weights: phi_w,
        max_balance_residual: residuals.iter().copied().fold(0.0, f64::max),
        balance_solves: residuals.len(),
        replicates,
    })
}

/// Balancing residuals at the true inverse-intensity weights
/// `exp(-gamma_0'Z) Q`, with the Breslow increments also evaluated at the
/// true coefficients and correct balance terms.
pub fn true_weight_residuals(cfg: &ScenarioConfig, rep: usize) -> Result<Vec<f64>> {
    let data = generate(cfg, rep)?;
    let ds = &data.observed;
    let q = q_values(ds, &SelectionSpec::new(cfg.outcome.transform(), cfg.phi_true))?;
    let risk = RiskSets::new(ds)?;
    let zspec = zspec_for(Scenario::S1).fit(ds)?;
    let gamma = cfg.true_gamma();
    let breslow = breslow_with(&risk, ds, &zspec, &gamma, &q)?;
    let mut z = vec![0.0; 4];
    let weights: Vec<f64> = ds
        .visit_rows()
        .iter()
        .zip(q.values())
        .map(|(&r, &qv)| {
            zspec.eval_row(ds, r, &mut z);
            let eta: f64 = z.iter().zip(&gamma).map(|(a, b)| a * b).sum();
            (-eta).exp() * qv
        })
        .collect();
    crate::weights::balance_residuals(ds, &hspec_for(Scenario::S1).terms, &weights, &breslow)
}

/// `Q` values for a replicate at an arbitrary `phi`, exposed for diagnostics.
pub fn replicate_q(cfg: &ScenarioConfig, ds: &Dataset, phi: f64) -> Result<QValues> {
    q_values(ds, &SelectionSpec::new(cfg.outcome.transform(), phi))
}
