//! The full estimation pipeline, resampling standard errors and the
//! sensitivity sweep over a grid of `phi` values.

use std::io::Write;

use rand::Rng;

use crate::cox::{fit_cox_with, CoxFit, CoxOptions, QValues};
use crate::data::{Dataset, ModelMatrixSpec};
use crate::error::{Error, Result};
use crate::gee::{fit_weighted_gee, GeeFit, GeeOptions, MarginalModelSpec};
use crate::par::{self, Execution};
use crate::risk::RiskSets;
use crate::rng;
use crate::weights::{
    balancing_weights_with, mle_weights_with, q_values, BalanceOptions, BalanceSpec,
    OutcomeTransform, SelectionSpec, WeightSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightChoice {
    /// Unweighted analysis of the visit rows.
    #[default]
    None,
    Mle,
    Balancing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resampling {
    #[default]
    None,
    Jackknife,
    Bootstrap { replicates: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub weight_kind: WeightChoice,
    /// History terms of the visit intensity model.
    pub zspec: ModelMatrixSpec,
    /// Balance terms; required for balancing weights.
    pub hspec: Option<BalanceSpec>,
    pub model: MarginalModelSpec,
    pub transform: OutcomeTransform,
    pub phi_grid: Vec<f64>,
    pub resampling: Resampling,
    pub cox: CoxOptions,
    pub balance: BalanceOptions,
    pub gee: GeeOptions,
    pub execution: Execution,
}

impl AnalysisConfig {
    pub fn new(weight_kind: WeightChoice, zspec: ModelMatrixSpec, model: MarginalModelSpec) -> Self {
        Self {
            weight_kind,
            zspec,
            hspec: None,
            model,
            transform: OutcomeTransform::Identity,
            phi_grid: vec![0.0],
            resampling: Resampling::None,
            cox: CoxOptions::default(),
            balance: BalanceOptions::default(),
            gee: GeeOptions::default(),
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi_grid.is_empty() {
            return Err(Error::InvalidInput("phi grid is empty".into()));
        }
        if let Some(phi) = self.phi_grid.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidInput(format!("phi grid contains {phi}")));
        }
        if self.weight_kind == WeightChoice::Balancing {
            match &self.hspec {
                Some(h) if h.terms.has_intercept() => {}
                Some(_) => return Err(Error::InvalidInput("balance terms must include the intercept `1`".into())),
                None => return Err(Error::InvalidInput("balancing weights need balance terms".into())),
            }
        }
        if let Resampling::Bootstrap { replicates, .. } = self.resampling {
            if replicates < 2 {
                return Err(Error::InvalidInput("bootstrap needs at least 2 replicates".into()));
            }
        }
        Ok(())
    }
}

/// Everything produced by one pass of the pipeline at one `phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub phi: f64,
    pub q: QValues,
    /// Intensity fit; absent for unweighted analyses.
    pub cox: Option<CoxFit>,
    pub weights: WeightSet,
    pub gee: GeeFit,
}

/// Selection function, intensity fit, weights and marginal model at `phi`.
pub fn analyze_once(dataset: &Dataset, config: &AnalysisConfig, phi: f64) -> Result<Analysis> {
    config.validate()?;
    let q = q_values(dataset, &SelectionSpec::new(config.transform, phi)).map_err(Error::stage("selection", phi))?;
    let (cox, weights) = match config.weight_kind {
        WeightChoice::None => (None, WeightSet::unit(dataset)),
        kind => {
            let risk = RiskSets::new(dataset).map_err(Error::stage("intensity", phi))?;
            let zfit = config.zspec.fit(dataset).map_err(Error::stage("intensity", phi))?;
            let cox = fit_cox_with(&risk, dataset, &zfit, &q, &config.cox).map_err(Error::stage("intensity", phi))?;
            let weights = if kind == WeightChoice::Mle {
                mle_weights_with(&cox, dataset, &zfit, &q)
            } else {
                let hspec = config.hspec.as_ref().expect("validated");
                balancing_weights_with(&risk, dataset, hspec, &q, &cox.breslow, &config.balance)
            }
            .map_err(Error::stage("weights", phi))?;
            (Some(cox), weights)
        }
    };
    let gee = fit_weighted_gee(dataset, &config.model, &weights, &config.gee).map_err(Error::stage("marginal model", phi))?;
    Ok(Analysis {
        phi,
        q,
        cox,
        weights,
        gee,
    })
}

/// Resampling summary for one `phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResamplingResult {
    pub se: Vec<f64>,
    /// Percentile 95% intervals (bootstrap only).
    pub percentile_ci: Option<Vec<(f64, f64)>>,
    pub n_ok: usize,
    pub n_failed: usize,
    /// Coefficients of each replicate in replicate order; `None` for failures.
    pub replicates: Vec<Option<Vec<f64>>>,
    pub warnings: Vec<String>,
}

fn refit(dataset: &Dataset, config: &AnalysisConfig, phi: f64) -> Option<Vec<f64>> {
    match analyze_once(dataset, config, phi) {
        Ok(a) => Some(a.gee.beta),
        Err(e) => {
            log::debug!("resampling replicate failed: {e}");
            None
        }
    }
}

fn successes(replicates: &[Option<Vec<f64>>]) -> Vec<&[f64]> {
    replicates.iter().flatten().map(Vec::as_slice).collect()
}

fn column_means(rows: &[&[f64]], p: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Leave-one-patient-out standard errors,
/// `sqrt((n-1)/n * sum_k (b_(-k) - mean)^2)` over successful refits.
pub fn jackknife(dataset: &Dataset, config: &AnalysisConfig, phi: f64) -> Result<ResamplingResult> {
    config.validate()?;
    let n = dataset.n_patients();
    if n < 2 {
        return Err(Error::InvalidInput("jackknife needs at least two patients".into()));
    }
    let replicates = par::map_indexed(n, config.execution, |k| {
        dataset
            .without_patient(k)
            .ok()
            .and_then(|d| refit(&d, config, phi))
    });
    let ok = successes(&replicates);
    if ok.is_empty() {
        return Err(Error::AllReplicatesFailed(n));
    }
    let p = ok[0].len();
    let mean = column_means(&ok, p);
    let m = ok.len() as f64;
    let se = (0..p)
        .map(|j| {
            let ss: f64 = ok.iter().map(|r| (r[j] - mean[j]).powi(2)).sum();
            ((m - 1.0) / m * ss).sqrt()
        })
        .collect();
    let n_failed = n - ok.len();
    let mut warnings = Vec::new();
    if n_failed > 0 {
        warnings.push(format!("{n_failed} of {n} leave-one-out refits failed and were excluded"));
    }
    Ok(ResamplingResult {
        se,
        percentile_ci: None,
        n_ok: ok.len(),
        n_failed,
        replicates,
        warnings,
    })
}

/// Patient-level nonparametric bootstrap. Replicate `r` draws from
/// `substream(seed, r)`.
pub fn bootstrap(dataset: &Dataset, config: &AnalysisConfig, phi: f64, replicates: usize, seed: u64) -> Result<ResamplingResult> {
    bootstrap_keyed(dataset, config, phi, replicates, seed, &|r| r as u64)
}

/// Bootstrap where replicate `r` draws from `substream(seed, key(r))`.
pub fn bootstrap_keyed(
    dataset: &Dataset,
    config: &AnalysisConfig,
    phi: f64,
    replicates: usize,
    seed: u64,
    key: &(dyn Fn(usize) -> u64 + Sync),
) -> Result<ResamplingResult> {
    config.validate()?;
    if replicates < 2 {
        return Err(Error::InvalidInput("bootstrap needs at least 2 replicates".into()));
    }
    let n = dataset.n_patients();
    let draws = par::map_indexed(replicates, config.execution, |r| {
        let mut rng = rng::substream(seed, key(r));
        let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        dataset
            .select_patients(&picks, true)
            .ok()
            .and_then(|d| refit(&d, config, phi))
    });
    let ok = successes(&draws);
    if ok.is_empty() {
        return Err(Error::AllReplicatesFailed(replicates));
    }
    let p = ok[0].len();
    let mean = column_means(&ok, p);
    let m = ok.len();
    let se = (0..p)
        .map(|j| {
            if m < 2 {
                return 0.0;
            }
            let ss: f64 = ok.iter().map(|r| (r[j] - mean[j]).powi(2)).sum();
            (ss / (m - 1) as f64).sqrt()
        })
        .collect();
    let ci = (0..p)
        .map(|j| {
            let mut col: Vec<f64> = ok.iter().map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            (percentile(&col, 0.025), percentile(&col, 0.975))
        })
        .collect();
    let n_failed = replicates - m;
    let mut warnings = Vec::new();
    if n_failed * 10 > replicates {
        warnings.push(format!(
            "{n_failed} of {replicates} bootstrap replicates failed (more than 10%)"
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ResamplingResult {
        se,
        percentile_ci: Some(ci),
        n_ok: m,
        n_failed,
        replicates: draws,
        warnings,
    })
}

fn percentile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let i = h.floor() as usize;
    let frac = h - i as f64;
    match sorted.get(i + 1) {
        Some(next) => sorted[i] + frac * (next - sorted[i]),
        None => sorted[i],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub phi: f64,
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub weight_min: f64,
    pub weight_median: f64,
    pub weight_max: f64,
    pub converged: bool,
}

/// Outcome of the pipeline at one `phi`.
#[derive(Debug, Clone)]
pub struct PhiResult {
    pub phi: f64,
    pub analysis: Option<Analysis>,
    pub resampling: Option<ResamplingResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub per_phi: Vec<PhiResult>,
}

impl SweepResult {
    /// Writes the sweep table with the fixed header
    /// `phi,term,estimate,se,ci_lo,ci_hi,weight_min,weight_median,weight_max,converged`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "phi",
            "term",
            "estimate",
            "se",
            "ci_lo",
            "ci_hi",
            "weight_min",
            "weight_median",
            "weight_max",
            "converged",
        ])?;
        for r in &self.rows {
            wtr.write_record([
                r.phi.to_string(),
                r.term.clone(),
                r.estimate.to_string(),
                r.se.to_string(),
                r.ci_lo.to_string(),
                r.ci_hi.to_string(),
                r.weight_min.to_string(),
                r.weight_median.to_string(),
                r.weight_max.to_string(),
                u8::from(r.converged).to_string(),
            ])?;
        }
        wtr.flush().map_err(|source| Error::Io {
            path: "<sweep csv>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Runs the pipeline and the configured resampler at every grid value.
/// A failure at one `phi` is recorded and the sweep moves on.
pub fn sweep(dataset: &Dataset, config: &AnalysisConfig) -> Result<SweepResult> {
    config.validate()?;
    let mut grid = config.phi_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let terms = config.model.xspec.term_names();
    let mut rows = Vec::new();
    let mut per_phi = Vec::with_capacity(grid.len());
    for &phi in &grid {
        let outcome = analyze_once(dataset, config, phi).and_then(|analysis| {
            let resampling = match config.resampling {
                Resampling::None => None,
                Resampling::Jackknife => Some(jackknife(dataset, config, phi)?),
                Resampling::Bootstrap { replicates, seed } => Some(bootstrap(dataset, config, phi, replicates, seed)?),
            };
            Ok((analysis, resampling))
        });
        match outcome {
            Ok((analysis, resampling)) => {
                let (wmin, wmed, wmax) = analysis.weights.summary();
                for (j, term) in analysis.gee.terms.iter().enumerate() {
                    let estimate = analysis.gee.beta[j];
                    let se = resampling.as_ref().map_or(f64::NAN, |r| r.se[j]);
                    rows.push(SweepRow {
                        phi,
                        term: term.clone(),
                        estimate,
                        se,
                        ci_lo: estimate - 1.96 * se,
                        ci_hi: estimate + 1.96 * se,
                        weight_min: wmin,
                        weight_median: wmed,
                        weight_max: wmax,
                        converged: true,
                    });
                }
                per_phi.push(PhiResult {
                    phi,
                    analysis: Some(analysis),
                    resampling,
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("phi = {phi}: {e}");
                for term in &terms {
                    rows.push(SweepRow {
                        phi,
                        term: term.clone(),
                        estimate: f64::NAN,
                        se: f64::NAN,
                        ci_lo: f64::NAN,
                        ci_hi: f64::NAN,
                        weight_min: f64::NAN,
                        weight_median: f64::NAN,
                        weight_max: f64::NAN,
                        converged: false,
                    });
                }
                per_phi.push(PhiResult {
                    phi,
                    analysis: None,
                    resampling: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(SweepResult { rows, per_phi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CountingProcessRow;
    use crate::gee::{Link, Variance};

    /// Patient `i` has one visit with outcome `y[i]` at time 1.
    fn one_visit_each(y: &[f64]) -> Dataset {
        let rows = y
            .iter()
            .enumerate()
            .map(|(i, &v)| CountingProcessRow {
                patient_id: i as i64,
                start: 0.0,
                end: 1.0,
                at_risk: true,
                visit: true,
                outcome: Some(v),
                covariates: vec![],
            })
            .collect();
        Dataset::from_rows(vec![], rows).unwrap()
    }

    fn mean_config() -> AnalysisConfig {
        let model = MarginalModelSpec::new(ModelMatrixSpec::parse(&["1"]).unwrap(), Link::Identity, Variance::Constant).unwrap();
        AnalysisConfig::new(WeightChoice::None, ModelMatrixSpec::empty(), model)
    }

    #[test]
    fn jackknife_of_a_mean_is_the_classical_se() {
        let y = [1.0, 4.0, 2.0, 8.0, 5.0];
        let ds = one_visit_each(&y);
        let jk = jackknife(&ds, &mean_config(), 0.0).unwrap();
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let s2 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((jk.se[0] - (s2 / n).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn identical_patients_have_zero_se() {
        let ds = one_visit_each(&[3.0; 4]);
        let jk = jackknife(&ds, &mean_config(), 0.0).unwrap();
        assert!(jk.se[0].abs() < 1e-12);
    }

    #[test]
    fn equal_substreams_give_zero_bootstrap_se() {
        let ds = one_visit_each(&[1.0, 4.0, 2.0, 8.0]);
        let bs = bootstrap_keyed(&ds, &mean_config(), 0.0, 2, 11, &|_| 0).unwrap();
        assert_eq!(bs.se[0], 0.0);
    }

    #[test]
    fn bootstrap_is_schedule_invariant() {
        let ds = one_visit_each(&[1.0, 4.0, 2.0, 8.0, 3.0, 3.5]);
        let mut cfg = mean_config();
        cfg.execution = Execution::Sequential;
        let a = bootstrap(&ds, &cfg, 0.0, 50, 3).unwrap();
        cfg.execution = Execution::Parallel;
        let b = bootstrap(&ds, &cfg, 0.0, 50, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_orders_phi() {
        let ds = one_visit_each(&[1.0, 4.0, 2.0]);
        let mut cfg = mean_config();
        cfg.phi_grid = vec![0.5, 0.0, 0.25];
        let s = sweep(&ds, &cfg).unwrap();
        let phis: Vec<f64> = s.rows.iter().map(|r| r.phi).collect();
        assert_eq!(phis, vec![0.0, 0.25, 0.5]);
        assert!(s.rows.iter().all(|r| r.estimate == s.rows[0].estimate));
    }

    #[test]
    fn balancing_needs_terms() {
        let mut cfg = mean_config();
        cfg.weight_kind = WeightChoice::Balancing;
        assert!(cfg.validate().is_err());
    }
}
