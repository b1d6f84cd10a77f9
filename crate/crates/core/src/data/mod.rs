//! Longitudinal data in counting-process format.
//!
//! Every patient contributes a sequence of contiguous intervals `(start, end]`
//! starting at time zero. Covariates are constant on an interval, a visit (if
//! any) happens at `end`, and the outcome is only recorded at visits.

mod csv_io;
mod design;

use std::ops::Range;

pub use csv_io::{export_csv, load_csv, read_csv, write_csv, Schema};
pub use design::{
    build_design, CovariateTransform, Design, Factor, FittedSpec, ModelMatrixSpec, RowSubset,
    Term,
};

use crate::error::{Error, Result};

/// One at-risk interval of one patient, as read from or written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CountingProcessRow {
    pub patient_id: i64,
    pub start: f64,
    pub end: f64,
    pub at_risk: bool,
    pub visit: bool,
    pub outcome: Option<f64>,
    /// Values aligned with [`Dataset::covariate_names`].
    pub covariates: Vec<f64>,
}

/// Interval bookkeeping without the covariate payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub patient_id: i64,
    pub start: f64,
    pub end: f64,
    pub at_risk: bool,
    pub visit: bool,
    pub outcome: Option<f64>,
}

impl Interval {
    /// Left-continuous at-risk indicator: true iff `s` lies in `(start, end]`
    /// and the interval is under follow-up.
    #[inline]
    pub fn covers(&self, s: f64) -> bool {
        self.at_risk && self.start < s && s <= self.end
    }
}

/// Validated, canonically ordered longitudinal dataset.
///
/// Rows are sorted by `(patient_id, start)`. Covariates are stored row-major
/// in one flat buffer so that large simulated datasets stay compact.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariate_names: Vec<String>,
    intervals: Vec<Interval>,
    covariates: Vec<f64>,
    patients: Vec<i64>,
    patient_rows: Vec<Range<usize>>,
    visit_rows: Vec<usize>,
    tau: f64,
}

impl Dataset {
    pub fn builder(covariate_names: Vec<String>) -> DatasetBuilder {
        DatasetBuilder::new(covariate_names)
    }

    pub fn from_rows(covariate_names: Vec<String>, rows: Vec<CountingProcessRow>) -> Result<Self> {
        let mut builder = DatasetBuilder::new(covariate_names);
        for row in rows {
            builder.push_row(row)?;
        }
        builder.build()
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn patients(&self) -> &[i64] {
        &self.patients
    }

    /// Row range of the `p`-th patient (in ascending id order).
    pub fn patient_rows(&self, p: usize) -> Range<usize> {
        self.patient_rows[p].clone()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    /// Administrative end of follow-up: the largest interval end.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn interval(&self, row: usize) -> &Interval {
        &self.intervals[row]
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn covariates_of(&self, row: usize) -> &[f64] {
        let k = self.covariate_names.len();
        &self.covariates[row * k..(row + 1) * k]
    }

    /// Indices of rows carrying a visit, in row order.
    pub fn visit_rows(&self) -> &[usize] {
        &self.visit_rows
    }

    pub fn n_visits(&self) -> usize {
        self.visit_rows.len()
    }

    /// Outcomes at visit rows, aligned with [`Dataset::visit_rows`].
    pub fn visit_outcomes(&self) -> Vec<f64> {
        self.visit_rows
            .iter()
            .map(|&r| self.intervals[r].outcome.expect("validated: outcome at visit"))
            .collect()
    }

    pub fn row(&self, row: usize) -> CountingProcessRow {
        let iv = self.intervals[row];
        CountingProcessRow {
            patient_id: iv.patient_id,
            start: iv.start,
            end: iv.end,
            at_risk: iv.at_risk,
            visit: iv.visit,
            outcome: iv.outcome,
            covariates: self.covariates_of(row).to_vec(),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = CountingProcessRow> + '_ {
        (0..self.len()).map(move |r| self.row(r))
    }

    /// Dataset made of the listed patients (by position, repeats allowed).
    ///
    /// With `relabel` the `j`-th listed patient receives id `j`, which keeps
    /// repeated draws distinct; otherwise original ids are kept and must not
    /// repeat.
    pub fn select_patients(&self, positions: &[usize], relabel: bool) -> Result<Dataset> {
        let mut builder = DatasetBuilder::new(self.covariate_names.clone());
        builder.reserve(
            positions
                .iter()
                .map(|&p| self.patient_rows[p].len())
                .sum(),
        );
        for (j, &p) in positions.iter().enumerate() {
            for r in self.patient_rows[p].clone() {
                let iv = self.intervals[r];
                let id = if relabel { j as i64 } else { iv.patient_id };
                builder.push(
                    id,
                    iv.start,
                    iv.end,
                    iv.at_risk,
                    iv.visit,
                    iv.outcome,
                    self.covariates_of(r),
                )?;
            }
        }
        builder.build()
    }

    /// Dataset without the `p`-th patient.
    pub fn without_patient(&self, p: usize) -> Result<Dataset> {
        let keep: Vec<usize> = (0..self.n_patients()).filter(|&q| q != p).collect();
        self.select_patients(&keep, false)
    }
}

/// Incremental constructor that validates rows as they arrive.
#[derive(Debug, Clone)]
pub struct DatasetBuilder {
    covariate_names: Vec<String>,
    intervals: Vec<Interval>,
    covariates: Vec<f64>,
}

impl DatasetBuilder {
    pub fn new(covariate_names: Vec<String>) -> Self {
        Self {
            covariate_names,
            intervals: Vec::new(),
            covariates: Vec::new(),
        }
    }

    pub fn reserve(&mut self, rows: usize) {
        self.intervals.reserve(rows);
        self.covariates.reserve(rows * self.covariate_names.len());
    }

    pub fn push_row(&mut self, row: CountingProcessRow) -> Result<()> {
        self.push(
            row.patient_id,
            row.start,
            row.end,
            row.at_risk,
            row.visit,
            row.outcome,
            &row.covariates,
        )
    }

    /// Appends one interval. Row-level invariants are checked here; the
    /// reported row number is the 1-based insertion position.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        patient_id: i64,
        start: f64,
        end: f64,
        at_risk: bool,
        visit: bool,
        outcome: Option<f64>,
        covariates: &[f64],
    ) -> Result<()> {
        let row = self.intervals.len() + 1;
        let fail = |message: String| Err(Error::Validation { row, message });
        if covariates.len() != self.covariate_names.len() {
            return fail(format!(
                "expected {} covariates, found {}",
                self.covariate_names.len(),
                covariates.len()
            ));
        }
        if !start.is_finite() || !end.is_finite() {
            return fail("interval bounds must be finite".into());
        }
        if start >= end {
            return fail(format!("start {start} must be smaller than end {end}"));
        }
        if visit && outcome.is_none() {
            return fail("outcome required at visit".into());
        }
        if !visit && outcome.is_some() {
            return fail("outcome present without a visit".into());
        }
        if visit && !at_risk {
            return fail("visit recorded while not at risk".into());
        }
        if let Some(y) = outcome {
            if !y.is_finite() {
                return fail("outcome must be finite".into());
            }
        }
        if let Some(j) = covariates.iter().position(|v| !v.is_finite()) {
            return fail(format!(
                "covariate `{}` must be finite",
                self.covariate_names[j]
            ));
        }
        self.intervals.push(Interval {
            patient_id,
            start,
            end,
            at_risk,
            visit,
            outcome,
        });
        self.covariates.extend_from_slice(covariates);
        Ok(())
    }

    /// Sorts rows canonically and checks the per-patient partition.
    pub fn build(self) -> Result<Dataset> {
        let k = self.covariate_names.len();
        let mut order: Vec<usize> = (0..self.intervals.len()).collect();
        let already_sorted = self.intervals.windows(2).all(|w| {
            (w[0].patient_id, w[0].start) <= (w[1].patient_id, w[1].start)
        });
        let (intervals, covariates) = if already_sorted {
            (self.intervals, self.covariates)
        } else {
            order.sort_by(|&a, &b| {
                let (x, y) = (&self.intervals[a], &self.intervals[b]);
                x.patient_id
                    .cmp(&y.patient_id)
                    .then(x.start.total_cmp(&y.start))
            });
            let intervals: Vec<Interval> = order.iter().map(|&i| self.intervals[i]).collect();
            let mut covariates = Vec::with_capacity(self.covariates.len());
            for &i in &order {
                covariates.extend_from_slice(&self.covariates[i * k..(i + 1) * k]);
            }
            (intervals, covariates)
        };

        let mut patients = Vec::new();
        let mut patient_rows = Vec::new();
        let mut first = 0;
        while first < intervals.len() {
            let id = intervals[first].patient_id;
            let mut last = first + 1;
            while last < intervals.len() && intervals[last].patient_id == id {
                last += 1;
            }
            check_partition(id, &intervals[first..last])?;
            patients.push(id);
            patient_rows.push(first..last);
            first = last;
        }

        let visit_rows = intervals
            .iter()
            .enumerate()
            .filter_map(|(r, iv)| iv.visit.then_some(r))
            .collect();
        let tau = intervals.iter().map(|iv| iv.end).fold(0.0, f64::max);
        Ok(Dataset {
            covariate_names: self.covariate_names,
            intervals,
            covariates,
            patients,
            patient_rows,
            visit_rows,
            tau,
        })
    }
}

fn check_partition(patient: i64, rows: &[Interval]) -> Result<()> {
    let fail = |message: String| Err(Error::Structure { patient, message });
    if rows[0].start != 0.0 {
        return fail(format!(
            "follow-up must start at time 0, first interval starts at {}",
            rows[0].start
        ));
    }
    let mut censored = false;
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.start < a.end {
            return fail(format!(
                "overlapping intervals ({}, {}] and ({}, {}]",
                a.start, a.end, b.start, b.end
            ));
        }
        if b.start > a.end {
            return fail(format!("gap between {} and {}", a.end, b.start));
        }
        censored |= !a.at_risk;
        if censored && b.at_risk {
            return fail(format!("at risk again at {} after censoring", b.start));
        }
    }
    Ok(())
}
