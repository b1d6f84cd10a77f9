//! Model-matrix specifications.
//!
//! A term is a product of up to three factors; the empty product is the
//! intercept. Terms are written as strings, for example `1`, `t`, `x`,
//! `std(log1p(esr))`, `period(0,2)`, `z1:z2` or `t:z1:z2`. The name `t`
//! is reserved for time.

use std::fmt;
use std::str::FromStr;

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateTransform {
    Identity,
    Log1p,
    Sqrt,
}

impl CovariateTransform {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            CovariateTransform::Identity => x,
            CovariateTransform::Log1p => x.ln_1p(),
            CovariateTransform::Sqrt => x.sqrt(),
        }
    }

    fn in_domain(self, x: f64) -> bool {
        match self {
            CovariateTransform::Identity => true,
            CovariateTransform::Log1p => x > -1.0,
            CovariateTransform::Sqrt => x >= 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Covariate {
        name: String,
        transform: CovariateTransform,
        standardize: bool,
    },
    /// Time as a continuous variable.
    Time,
    /// Indicator of `from <= t < to`.
    Period { from: f64, to: f64 },
}

impl Factor {
    pub fn covariate(name: &str) -> Self {
        Factor::Covariate {
            name: name.to_string(),
            transform: CovariateTransform::Identity,
            standardize: false,
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Time => write!(f, "t"),
            Factor::Period { from, to } => write!(f, "period({from},{to})"),
            Factor::Covariate {
                name,
                transform,
                standardize,
            } => {
                let inner = match transform {
                    CovariateTransform::Identity => name.clone(),
                    CovariateTransform::Log1p => format!("log1p({name})"),
                    CovariateTransform::Sqrt => format!("sqrt({name})"),
                };
                if *standardize {
                    write!(f, "std({inner})")
                } else {
                    write!(f, "{inner}")
                }
            }
        }
    }
}

/// Product of factors; no factors means the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    factors: Vec<Factor>,
}

impl Term {
    pub const MAX_FACTORS: usize = 3;

    pub fn intercept() -> Self {
        Self { factors: vec![] }
    }

    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        if factors.len() > Self::MAX_FACTORS {
            return Err(Error::TermSyntax {
                term: factors
                    .iter()
                    .map(|f| f.to_string())
                    .collect::<Vec<_>>()
                    .join(":"),
                message: format!("at most {} factors per term", Self::MAX_FACTORS),
            });
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn is_intercept(&self) -> bool {
        self.factors.is_empty()
    }

    /// Multiplies every factor of `self` with time, e.g. `z1:z2` → `t:z1:z2`.
    pub fn times_time(&self) -> Result<Self> {
        let mut factors = vec![Factor::Time];
        factors.extend(self.factors.iter().cloned());
        Term::new(factors)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self.factors.iter().map(|x| x.to_string()).collect();
        write!(f, "{}", parts.join(":"))
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "1" {
            return Ok(Term::intercept());
        }
        let factors = s
            .split(':')
            .map(|part| parse_factor(part.trim(), s))
            .collect::<Result<Vec<_>>>()?;
        Term::new(factors)
    }
}

fn parse_factor(part: &str, term: &str) -> Result<Factor> {
    let err = |message: &str| Error::TermSyntax {
        term: term.to_string(),
        message: message.to_string(),
    };
    if part.is_empty() {
        return Err(err("empty factor"));
    }
    if part == "t" {
        return Ok(Factor::Time);
    }
    if let Some(args) = strip_call(part, "period") {
        let mut it = args.split(',').map(|a| a.trim().parse::<f64>());
        return match (it.next(), it.next(), it.next()) {
            (Some(Ok(from)), Some(Ok(to)), None) if from < to => Ok(Factor::Period { from, to }),
            _ => Err(err("period(from,to) needs two numbers with from < to")),
        };
    }
    let (inner, standardize) = match strip_call(part, "std") {
        Some(inner) => (inner.trim(), true),
        None => (part, false),
    };
    let (name, transform) = if let Some(n) = strip_call(inner, "log1p") {
        (n.trim(), CovariateTransform::Log1p)
    } else if let Some(n) = strip_call(inner, "sqrt") {
        (n.trim(), CovariateTransform::Sqrt)
    } else {
        (inner, CovariateTransform::Identity)
    };
    if name.is_empty() || name.contains(['(', ')', ',', ' ']) {
        return Err(err("malformed covariate name"));
    }
    if name == "t" {
        return Err(err("`t` is reserved for time and cannot be transformed"));
    }
    Ok(Factor::Covariate {
        name: name.to_string(),
        transform,
        standardize,
    })
}

fn strip_call<'a>(s: &'a str, func: &str) -> Option<&'a str> {
    s.strip_prefix(func)?.trim_start().strip_prefix('(')?.strip_suffix(')')
}

/// Ordered list of terms defining a model matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelMatrixSpec {
    pub terms: Vec<Term>,
}

impl ModelMatrixSpec {
    pub fn new(terms: Vec<Term>) -> Self {
        Self { terms }
    }

    pub fn empty() -> Self {
        Self { terms: vec![] }
    }

    pub fn parse<S: AsRef<str>>(terms: &[S]) -> Result<Self> {
        Ok(Self {
            terms: terms
                .iter()
                .map(|t| t.as_ref().parse())
                .collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn has_intercept(&self) -> bool {
        self.terms.iter().any(Term::is_intercept)
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.to_string()).collect()
    }

    /// Resolves covariate names against `dataset` and computes
    /// standardization statistics over its at-risk rows.
    ///
    /// Standardized factors become `(x - mean) / (2 sd)` so that they have
    /// sample standard deviation 0.5 on the at-risk rows.
    pub fn fit(&self, dataset: &Dataset) -> Result<FittedSpec> {
        let mut terms = Vec::with_capacity(self.terms.len());
        let mut time_dependent = false;
        for term in &self.terms {
            let mut factors = Vec::with_capacity(term.factors.len());
            for factor in &term.factors {
                factors.push(match factor {
                    Factor::Time => {
                        time_dependent = true;
                        FittedFactor::Time
                    }
                    Factor::Period { from, to } => {
                        time_dependent = true;
                        FittedFactor::Period {
                            from: *from,
                            to: *to,
                        }
                    }
                    Factor::Covariate {
                        name,
                        transform,
                        standardize,
                    } => {
                        let index = dataset
                            .covariate_index(name)
                            .ok_or_else(|| Error::UnknownCovariate(name.clone()))?;
                        let (center, scale) =
                            covariate_scaling(dataset, index, *transform, *standardize, factor)?;
                        FittedFactor::Covariate {
                            index,
                            transform: *transform,
                            center,
                            scale,
                        }
                    }
                });
            }
            terms.push(factors);
        }
        Ok(FittedSpec {
            terms,
            names: self.term_names(),
            time_dependent,
        })
    }
}

fn covariate_scaling(
    dataset: &Dataset,
    index: usize,
    transform: CovariateTransform,
    standardize: bool,
    factor: &Factor,
) -> Result<(f64, f64)> {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for r in 0..dataset.len() {
        let x = dataset.covariates_of(r)[index];
        if !transform.in_domain(x) {
            return Err(Error::InvalidInput(format!(
                "{factor}: value {x} outside the transform domain"
            )));
        }
        if standardize && dataset.interval(r).at_risk {
            let v = transform.apply(x);
            n += 1;
            let d = v - mean;
            mean += d / n as f64;
            m2 += d * (v - mean);
        }
    }
    if !standardize {
        return Ok((0.0, 1.0));
    }
    let sd = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
    if !(sd > 0.0) {
        return Err(Error::ZeroVariance(factor.to_string()));
    }
    Ok((mean, 0.5 / sd))
}

#[derive(Debug, Clone, PartialEq)]
enum FittedFactor {
    Covariate {
        index: usize,
        transform: CovariateTransform,
        center: f64,
        scale: f64,
    },
    Time,
    Period {
        from: f64,
        to: f64,
    },
}

/// A [`ModelMatrixSpec`] bound to one dataset's covariate layout and
/// standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedSpec {
    terms: Vec<Vec<FittedFactor>>,
    names: Vec<String>,
    time_dependent: bool,
}

impl FittedSpec {
    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Whether any term depends on the evaluation time.
    pub fn time_dependent(&self) -> bool {
        self.time_dependent
    }

    /// Evaluates the terms for covariate values `covs` at time `t`.
    pub fn eval_into(&self, covs: &[f64], t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.terms.len());
        for (slot, factors) in out.iter_mut().zip(&self.terms) {
            let mut v = 1.0;
            for f in factors {
                v *= match *f {
                    FittedFactor::Covariate {
                        index,
                        transform,
                        center,
                        scale,
                    } => (transform.apply(covs[index]) - center) * scale,
                    FittedFactor::Time => t,
                    FittedFactor::Period { from, to } => {
                        if from <= t && t < to {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
            }
            *slot = v;
        }
    }

    pub fn eval(&self, covs: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(covs, t, &mut out);
        out
    }

    /// Evaluates row `row` of `dataset` at the row's end time.
    pub fn eval_row(&self, dataset: &Dataset, row: usize, out: &mut [f64]) {
        self.eval_into(dataset.covariates_of(row), dataset.interval(row).end, out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSubset {
    AllRows,
    VisitRows,
}

/// Dense row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    /// Dataset row index of each design row.
    pub rows: Vec<usize>,
    pub values: Vec<f64>,
}

impl Design {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.names.len();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.row(i)[j]).collect()
    }
}

/// Evaluates `spec` on the selected rows; time-dependent terms use each
/// row's end time.
pub fn build_design(dataset: &Dataset, spec: &ModelMatrixSpec, subset: RowSubset) -> Result<Design> {
    let fitted = spec.fit(dataset)?;
    let rows: Vec<usize> = match subset {
        RowSubset::AllRows => (0..dataset.len()).collect(),
        RowSubset::VisitRows => dataset.visit_rows().to_vec(),
    };
    let p = fitted.dim();
    let mut values = vec![0.0; rows.len() * p];
    for (i, &r) in rows.iter().enumerate() {
        fitted.eval_row(dataset, r, &mut values[i * p..(i + 1) * p]);
    }
    Ok(Design {
        names: fitted.names().to_vec(),
        rows,
        values,
    })
}
