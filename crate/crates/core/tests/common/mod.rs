#![allow(dead_code)]

use irrvis::data::{CountingProcessRow, Dataset};
use proptest::prelude::*;

/// Raw description of one patient: row lengths, visit flags, covariates.
#[derive(Debug, Clone)]
pub struct PatientSketch {
    pub lengths: Vec<u8>,
    pub visits: Vec<bool>,
    pub covs: Vec<Vec<f64>>,
    pub outcomes: Vec<f64>,
}

pub fn patient(p: usize) -> impl Strategy<Value = PatientSketch> {
    (1usize..5).prop_flat_map(move |m| {
        (
            prop::collection::vec(1u8..4, m),
            prop::collection::vec(any::<bool>(), m),
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, p), m),
            prop::collection::vec(0.0f64..10.0, m),
        )
            .prop_map(|(lengths, visits, covs, outcomes)| PatientSketch {
                lengths,
                visits,
                covs,
                outcomes,
            })
    })
}

/// Datasets with contiguous integer-length rows starting at 0 and at least
/// one visit overall.
pub fn dataset(max_patients: usize, p: usize) -> impl Strategy<Value = Dataset> {
    prop::collection::vec(patient(p), 2..=max_patients)
        .prop_map(move |ps| build(&ps, p))
        .prop_filter("needs a visit", |d| d.n_visits() > 0)
}

pub fn build(ps: &[PatientSketch], p: usize) -> Dataset {
    let mut rows = Vec::new();
    for (id, s) in ps.iter().enumerate() {
        let mut t = 0.0;
        for k in 0..s.lengths.len() {
            let end = t + s.lengths[k] as f64;
            rows.push(CountingProcessRow {
                patient_id: id as i64 * 7 + 3,
                start: t,
                end,
                at_risk: true,
                visit: s.visits[k],
                outcome: s.visits[k].then_some(s.outcomes[k]),
                covariates: s.covs[k].clone(),
            });
            t = end;
        }
    }
    Dataset::from_rows(names(p), rows).expect("sketch is well formed")
}

pub fn names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("z{j}")).collect()
}

/// Same data with every patient's first covariate shifted by `c`.
pub fn shifted(ds: &Dataset, c: f64) -> Dataset {
    let rows = ds
        .rows()
        .map(|mut r| {
            r.covariates[0] += c;
            r
        })
        .collect();
    Dataset::from_rows(ds.covariate_names().to_vec(), rows).unwrap()
}

/// One visit row per patient carrying covariates `z1..` and outcome `y`.
pub fn cross_section(x: &[Vec<f64>], y: &[f64]) -> Dataset {
    let p = x.first().map_or(0, Vec::len);
    let rows = x
        .iter()
        .zip(y)
        .enumerate()
        .map(|(i, (xi, &yi))| CountingProcessRow {
            patient_id: i as i64,
            start: 0.0,
            end: 1.0,
            at_risk: true,
            visit: true,
            outcome: Some(yi),
            covariates: xi.clone(),
        })
        .collect();
    Dataset::from_rows(names(p), rows).unwrap()
}
