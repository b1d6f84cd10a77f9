//! Calibration of the sensitivity parameter by implicit R².
//!
//! The visit intensity model is read as a pooled logistic model on a fine
//! partition of follow-up. The share of latent variance explained by the
//! observed history beyond time alone is taken as the largest share that the
//! concurrent outcome could plausibly explain, and converted into a bound on
//! `|phi|` through the residual spread of the transformed outcome.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write;

use crate::cox::{fit_cox_with, CoxOptions, QValues};
use crate::data::{Dataset, ModelMatrixSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::risk::RiskSets;
use crate::weights::OutcomeTransform;

/// Variance of the standard logistic distribution.
pub const LOGISTIC_VARIANCE: f64 = PI * PI / 3.0;

/// `v / (v + pi^2/3)`.
pub fn implicit_r2(var_m: f64) -> Result<f64> {
    if !(var_m >= 0.0) || !var_m.is_finite() {
        return Err(Error::InvalidInput(format!("variance must be non-negative, got {var_m}")));
    }
    Ok(var_m / (var_m + LOGISTIC_VARIANCE))
}

/// Inverse of [`implicit_r2`].
pub fn variance_from_r2(r2: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&r2) {
        return Err(Error::InvalidInput(format!("R² must lie in [0, 1), got {r2}")));
    }
    Ok(r2 * LOGISTIC_VARIANCE / (1.0 - r2))
}

/// `(full - reduced) / (1 - reduced)`.
pub fn partial_r2(rho2_full: f64, rho2_reduced: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho2_reduced) || !(0.0..1.0).contains(&rho2_full) {
        return Err(Error::InvalidInput(format!(
            "R² values out of range: full {rho2_full}, reduced {rho2_reduced}"
        )));
    }
    if rho2_reduced == 1.0 {
        return Err(Error::InvalidInput("reduced R² equals 1".into()));
    }
    Ok((rho2_full - rho2_reduced) / (1.0 - rho2_reduced))
}

/// `|phi| = sqrt(rho2 / (1 - rho2) * (var_m + pi^2/3)) / sigma_r`.
pub fn phi_from_target(rho2_target: f64, var_m: f64, sigma_r: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho2_target) {
        return Err(Error::InvalidInput(format!(
            "target R² must lie in [0, 1), got {rho2_target}"
        )));
    }
    if !(sigma_r > 0.0) || !sigma_r.is_finite() {
        return Err(Error::InvalidInput(format!("sigma_r must be positive, got {sigma_r}")));
    }
    if !(var_m >= 0.0) {
        return Err(Error::InvalidInput(format!("variance must be non-negative, got {var_m}")));
    }
    Ok((rho2_target / (1.0 - rho2_target) * (var_m + LOGISTIC_VARIANCE)).sqrt() / sigma_r)
}

/// Equally spaced grid `0, |phi|/6, ..., |phi|`.
pub fn suggested_grid(phi_abs: f64) -> [f64; 7] {
    std::array::from_fn(|i| phi_abs * i as f64 / 6.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub transform: OutcomeTransform,
    /// Degrees of freedom of the natural cubic spline in time.
    pub time_spline_df: usize,
    /// Target partial R² of the outcome; defaults to the covariates' share.
    pub target: Option<f64>,
    pub cox: CoxOptions,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            transform: OutcomeTransform::Identity,
            time_spline_df: 5,
            target: None,
            cox: CoxOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub var_log_lambda_dt_full: f64,
    pub var_log_lambda_dt_null: f64,
    pub rho2_full: f64,
    pub rho2_null: f64,
    pub rho2_z_given_t: f64,
    pub rho2_target: f64,
    pub sigma_r: f64,
    pub phi_abs: f64,
    pub n_pieces: usize,
    pub max_lambda_dt: f64,
    pub spline_knots: Vec<f64>,
    pub warnings: Vec<String>,
}

impl CalibrationResult {
    pub fn grid(&self) -> [f64; 7] {
        suggested_grid(self.phi_abs)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("var_log_lambda_dt_full", self.var_log_lambda_dt_full.to_string()),
            ("var_log_lambda_dt_null", self.var_log_lambda_dt_null.to_string()),
            ("rho2_full", self.rho2_full.to_string()),
            ("rho2_null", self.rho2_null.to_string()),
            ("rho2_z_given_t", self.rho2_z_given_t.to_string()),
            ("rho2_target", self.rho2_target.to_string()),
            ("sigma_r", self.sigma_r.to_string()),
            ("phi_abs", self.phi_abs.to_string()),
            ("n_pieces", self.n_pieces.to_string()),
            ("max_lambda_dt", self.max_lambda_dt.to_string()),
        ]
    }

    /// Flat `key=value` report with the suggested grid.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        let grid: Vec<String> = self.grid().iter().map(|g| g.to_string()).collect();
        let _ = writeln!(out, "phi_grid={}", grid.join(","));
        for w in &self.warnings {
            let _ = writeln!(out, "warning={w}");
        }
        out
    }

    /// Writes `quantity,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["quantity", "value"])?;
        for (k, v) in self.entries() {
            wtr.write_record([k.to_string(), v])?;
        }
        wtr.flush().map_err(|source| Error::Io {
            path: "<calibration csv>".into(),
            source,
        })?;
        Ok(())
    }
}

/// One cell of the refined partition: the part of an at-risk row that falls
/// in one gap between consecutive visit times.
struct Piece {
    row: usize,
    event: usize,
    /// Fraction of the gap covered by the piece.
    share: f64,
}

fn partition(dataset: &Dataset, event_times: &[f64]) -> Vec<Piece> {
    let mut pieces = Vec::new();
    for (row, iv) in dataset.intervals().iter().enumerate() {
        if !iv.at_risk {
            continue;
        }
        // first event time strictly after start
        let mut k = event_times.partition_point(|&e| e <= iv.start);
        while k < event_times.len() {
            let gap_start = if k == 0 { 0.0 } else { event_times[k - 1] };
            let a = iv.start.max(gap_start);
            let b = iv.end.min(event_times[k]);
            if b > a {
                pieces.push(Piece {
                    row,
                    event: k,
                    share: (b - a) / (event_times[k] - gap_start),
                });
            }
            if event_times[k] >= iv.end {
                break;
            }
            k += 1;
        }
    }
    pieces
}

fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Natural cubic spline basis (truncated power form) without the constant.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalSpline {
    knots: Vec<f64>,
}

impl NaturalSpline {
    /// Boundary knots at the extremes of `x`, interior knots at its
    /// `j / df` quantiles. Duplicate knots are merged, which lowers the
    /// effective degrees of freedom.
    pub fn new(x: &[f64], df: usize) -> Result<Self> {
        if df == 0 {
            return Err(Error::InvalidInput("spline degrees of freedom must be at least 1".into()));
        }
        let mut sorted = x.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (lo, hi) = match (sorted.first(), sorted.last()) {
            (Some(&lo), Some(&hi)) if hi > lo => (lo, hi),
            _ => return Err(Error::InvalidInput("spline needs at least two distinct times".into())),
        };
        let mut knots = vec![lo];
        for j in 1..df {
            knots.push(quantile(&sorted, j as f64 / df as f64));
        }
        knots.push(hi);
        knots.dedup();
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        let k = self.knots.len();
        let lo = self.knots[0];
        let span = self.knots[k - 1] - lo;
        let u = |v: f64| (v - lo) / span;
        let xs = u(x);
        let last = u(self.knots[k - 1]);
        let d = |j: usize| {
            let kj = u(self.knots[j]);
            ((xs - kj).max(0.0).powi(3) - (xs - last).max(0.0).powi(3)) / (last - kj)
        };
        out[0] = xs;
        if k > 2 {
            let dk = d(k - 2);
            for j in 0..k - 2 {
                out[j + 1] = d(j) - dk;
            }
        }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let i = h.floor() as usize;
    let frac = h - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Runs the calibration steps on `dataset` with history terms `zspec`.
pub fn calibrate(dataset: &Dataset, zspec: &ModelMatrixSpec, opts: &CalibrationOptions) -> Result<CalibrationResult> {
    let step = |s| Error::calibration(s);
    if dataset.n_visits() < 2 {
        return Err(Error::InvalidInput("calibration needs at least two visits".into()));
    }
    let mut warnings = Vec::new();

    // (a) partition refined at every distinct visit time
    let risk = RiskSets::new(dataset).map_err(step("a: partition"))?;
    let pieces = partition(dataset, risk.event_times());

    // (b) full intensity model under visiting at random
    let fitted = zspec.fit(dataset).map_err(step("b: intensity model"))?;
    let q = QValues::ones(dataset);
    let full = fit_cox_with(&risk, dataset, &fitted, &q, &opts.cox).map_err(step("b: intensity model"))?;
    let p = fitted.dim();
    let mut z = vec![0.0; p];
    let mut log_full = Vec::with_capacity(pieces.len());
    let mut max_lambda_dt = 0.0f64;
    for piece in &pieces {
        let t = risk.event_times()[piece.event];
        fitted.eval_into(dataset.covariates_of(piece.row), t, &mut z);
        let eta: f64 = z.iter().zip(&full.gamma_s).map(|(a, b)| a * b).sum();
        let log_ldt = eta + (full.breslow.increments[piece.event] * piece.share).ln();
        max_lambda_dt = max_lambda_dt.max(log_ldt.exp());
        log_full.push(log_ldt);
    }
    if pieces.len() < 2 {
        return Err(Error::calibration("c: variance")(Error::InvalidInput(
            "fewer than two at-risk intervals".into(),
        )));
    }
    if max_lambda_dt > 0.2 {
        warnings.push(format!(
            "largest per-interval visit probability {max_lambda_dt:.3} exceeds 0.2; the pooled logistic approximation may be poor"
        ));
    }

    // (c) implicit R² of the full model
    let var_full = sample_variance(&log_full);
    if !(var_full > 0.0) {
        return Err(Error::calibration("c: variance")(Error::ZeroVariance(
            "log intensity of the full model".into(),
        )));
    }
    let rho2_full = implicit_r2(var_full).map_err(step("c: variance"))?;

    // (d), (e) covariate-free intensity
    let null = fit_cox_with(&risk, dataset, &ModelMatrixSpec::empty().fit(dataset)?, &q, &opts.cox)
        .map_err(step("d: null model"))?;
    let log_null: Vec<f64> = pieces
        .iter()
        .map(|piece| (null.breslow.increments[piece.event] * piece.share).ln())
        .collect();
    let var_null = sample_variance(&log_null);
    let rho2_null = implicit_r2(var_null).map_err(step("e: null variance"))?;

    // (f), (g)
    let mut rho2_z_given_t = partial_r2(rho2_full, rho2_null).map_err(step("f: partial R²"))?;
    if rho2_z_given_t < 0.0 {
        warnings.push(format!("partial R² {rho2_z_given_t:.4} is negative and was set to 0"));
        rho2_z_given_t = 0.0;
    }
    let rho2_target = opts.target.unwrap_or(rho2_z_given_t);

    // (h) residual spread of S(Y) given history and a spline in time
    let visit_times: Vec<f64> = dataset
        .visit_rows()
        .iter()
        .map(|&r| dataset.interval(r).end)
        .collect();
    let spline = NaturalSpline::new(&visit_times, opts.time_spline_df).map_err(step("h: outcome regression"))?;
    if spline.dim() < opts.time_spline_df {
        warnings.push(format!(
            "time spline reduced to {} degrees of freedom by tied knots",
            spline.dim()
        ));
    }
    let keep: Vec<usize> = (0..p).filter(|&j| !zspec.terms[j].is_intercept()).collect();
    let cols = 1 + keep.len() + spline.dim();
    let m = dataset.n_visits();
    if m <= cols {
        return Err(Error::calibration("h: outcome regression")(Error::InvalidInput(format!(
            "{m} visits for {cols} regression columns"
        ))));
    }
    let mut x = Vec::with_capacity(m * cols);
    let mut s = Vec::with_capacity(m);
    let mut basis = vec![0.0; spline.dim()];
    for (&r, &t) in dataset.visit_rows().iter().zip(&visit_times) {
        fitted.eval_row(dataset, r, &mut z);
        x.push(1.0);
        x.extend(keep.iter().map(|&j| z[j]));
        spline.eval_into(t, &mut basis);
        x.extend_from_slice(&basis);
        let y = dataset.interval(r).outcome.expect("visit rows carry outcomes");
        s.push(opts.transform.apply(y).map_err(step("h: outcome regression"))?);
    }
    let (_, rss) = linalg::lstsq(&x, m, cols, &s).ok_or_else(|| {
        Error::calibration("h: outcome regression")(Error::RankDeficient {
            what: "outcome regression",
        })
    })?;
    let sigma_r = (rss / (m - cols) as f64).sqrt();

    // (i)
    let phi_abs = phi_from_target(rho2_target, var_full, sigma_r).map_err(step("i: phi"))?;
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(CalibrationResult {
        var_log_lambda_dt_full: var_full,
        var_log_lambda_dt_null: var_null,
        rho2_full,
        rho2_null,
        rho2_z_given_t,
        rho2_target,
        sigma_r,
        phi_abs,
        n_pieces: pieces.len(),
        max_lambda_dt,
        spline_knots: spline.knots().to_vec(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CountingProcessRow;

    #[test]
    fn implicit_r2_examples() {
        assert_eq!(implicit_r2(0.0).unwrap(), 0.0);
        assert_eq!(implicit_r2(LOGISTIC_VARIANCE).unwrap(), 0.5);
        assert!((implicit_r2(1.51).unwrap() - 1.51 / (1.51 + 3.289868133696453)).abs() < 1e-15);
        assert!(implicit_r2(-1.0).is_err());
        let r2 = 0.37;
        assert!((implicit_r2(variance_from_r2(r2).unwrap()).unwrap() - r2).abs() < 1e-15);
    }

    #[test]
    fn partial_r2_examples() {
        assert_eq!(partial_r2(0.5, 0.5).unwrap(), 0.0);
        assert_eq!(partial_r2(0.5, 0.0).unwrap(), 0.5);
        assert!((partial_r2(0.4, 0.25).unwrap() - 0.2).abs() < 1e-15);
        assert!(partial_r2(0.5, 1.0).is_err());
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi_from_target(0.0, 1.51, 0.349).unwrap(), 0.0);
        let phi = phi_from_target(0.0315, 1.51, 0.349).unwrap();
        assert!((phi - 1.132).abs() < 0.005, "{phi}");
        let half = phi_from_target(0.0315, 1.51, 0.698).unwrap();
        assert!((half - phi / 2.0).abs() < 1e-14);
        assert!(phi_from_target(1.0, 1.51, 0.349).is_err());
        assert!(phi_from_target(0.1, 1.51, 0.0).is_err());
    }

    #[test]
    fn grid_has_seven_points() {
        let g = suggested_grid(1.2);
        assert_eq!(g[0], 0.0);
        assert!((g[6] - 1.2).abs() < 1e-15);
        assert!((g[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn spline_is_linear_beyond_the_boundary_knots() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let s = NaturalSpline::new(&x, 4).unwrap();
        assert_eq!(s.dim(), 4);
        let mut a = vec![0.0; 4];
        let mut b = vec![0.0; 4];
        let mut c = vec![0.0; 4];
        s.eval_into(5.0, &mut a);
        s.eval_into(6.0, &mut b);
        s.eval_into(7.0, &mut c);
        for j in 0..4 {
            assert!((c[j] - 2.0 * b[j] + a[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn partition_splits_rows_at_visit_times() {
        let row = |id, start: f64, end: f64, visit: bool| CountingProcessRow {
            patient_id: id,
            start,
            end,
            at_risk: true,
            visit,
            outcome: visit.then_some(0.0),
            covariates: vec![],
        };
        let ds = Dataset::from_rows(vec![], vec![row(1, 0.0, 1.0, true), row(2, 0.0, 3.0, true), row(2, 3.0, 5.0, false)]).unwrap();
        let risk = RiskSets::new(&ds).unwrap();
        let pieces = partition(&ds, risk.event_times());
        // patient 1: (0,1]; patient 2: (0,1], (1,3]; nothing after the last visit
        assert_eq!(pieces.len(), 3);
        assert!(pieces.iter().all(|p| (p.share - 1.0).abs() < 1e-15));
    }
}
