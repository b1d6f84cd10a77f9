mod common;

use irrvis::cox::{breslow_increments, fit_cox, score_norm, CoxOptions, QValues};
use irrvis::data::{CountingProcessRow, Dataset, ModelMatrixSpec};
use irrvis::simlab::{generate, zspec_for, grid_time, Scenario, ScenarioConfig, GRID_POINTS};
use proptest::prelude::*;

fn z_spec() -> ModelMatrixSpec {
    ModelMatrixSpec::parse(&["z1"]).unwrap()
}

/// Three patients, time-varying binary covariate, four visits.
fn three_patients() -> Dataset {
    let sched: [(i64, [f64; 3], [bool; 3]); 3] = [
        (1, [1.0, 0.0, 1.0], [true, true, false]),
        (2, [0.0, 1.0, 0.0], [true, false, false]),
        (3, [1.0, 1.0, 0.0], [false, false, true]),
    ];
    let mut rows = Vec::new();
    for (id, z, v) in sched {
        for k in 0..3 {
            rows.push(CountingProcessRow {
                patient_id: id,
                start: k as f64,
                end: k as f64 + 1.0,
                at_risk: true,
                visit: v[k],
                outcome: v[k].then_some(1.0),
                covariates: vec![z[k]],
            });
        }
    }
    Dataset::from_rows(common::names(1), rows).unwrap()
}

/// Breslow-ties log partial likelihood written directly from the rows.
fn loglik(ds: &Dataset, q: &[f64], g: f64) -> f64 {
    let mut ll = 0.0;
    for (v, &r) in ds.visit_rows().iter().enumerate() {
        let t = ds.interval(r).end;
        let denom: f64 = (0..ds.len())
            .filter(|&s| {
                let iv = ds.interval(s);
                iv.at_risk && iv.start < t && t <= iv.end
            })
            .map(|s| (g * ds.covariates_of(s)[0]).exp())
            .sum();
        ll += q[v] * (g * ds.covariates_of(r)[0] - denom.ln());
    }
    ll
}

/// Grid search, then bisection on the central-difference derivative.
fn oracle(ds: &Dataset, q: &[f64]) -> f64 {
    let f = |g: f64| loglik(ds, q, g);
    let best = (-400..=400)
        .map(|i| i as f64 * 0.025)
        .max_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap();
    let h = 1e-6;
    let d = |g: f64| (f(g + h) - f(g - h)) / (2.0 * h);
    let (mut lo, mut hi) = (best - 0.05, best + 0.05);
    assert!(d(lo) > 0.0 && d(hi) < 0.0);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if d(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn matches_explicit_likelihood_maximizer() {
    let ds = three_patients();
    assert_eq!(ds.n_visits(), 4);
    let q = QValues::ones(&ds);
    let fit = fit_cox(&ds, &z_spec(), &q, &CoxOptions::default()).unwrap();
    let g = oracle(&ds, q.values());
    assert!((fit.gamma_s[0] - g).abs() < 1e-6, "{} vs {g}", fit.gamma_s[0]);
}

#[test]
fn doubling_q_leaves_gamma_unchanged() {
    let ds = three_patients();
    let fit1 = fit_cox(&ds, &z_spec(), &QValues::ones(&ds), &CoxOptions::default()).unwrap();
    let q2 = QValues(vec![2.0; 4]);
    let fit2 = fit_cox(&ds, &z_spec(), &q2, &CoxOptions::default()).unwrap();
    assert!((fit1.gamma_s[0] - fit2.gamma_s[0]).abs() < 1e-9);
    assert!((fit2.gamma_s[0] - oracle(&ds, q2.values())).abs() < 1e-6);
}

#[test]
fn no_covariates_gives_nelson_aalen() {
    let ds = three_patients();
    let table = breslow_increments(&ds, &ModelMatrixSpec::empty(), &[], &QValues::ones(&ds)).unwrap();
    assert_eq!(table.times, vec![1.0, 2.0, 3.0]);
    let want = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
    for (a, b) in table.increments.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn cumulative_baseline_recovers_generator() {
    let cfg = ScenarioConfig {
        gamma_z: 0.5,
        n: 500,
        seed: 31,
        ..ScenarioConfig::default()
    };
    let ds = generate(&cfg, 1).unwrap().observed;
    let fit = fit_cox(&ds, &zspec_for(Scenario::S1), &QValues::ones(&ds), &CoxOptions::default()).unwrap();
    let truth: f64 = (1..=GRID_POINTS).map(|k| (-3.05 - 2.0 * grid_time(k)).exp()).sum();
    let got = fit.breslow.total();
    assert!((got / truth - 1.0).abs() < 0.10, "{got} vs {truth}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn converged_fits_meet_tolerance(ds in common::dataset(6, 2), qs in prop::collection::vec(0.5f64..2.0, 64)) {
        let q = QValues(qs[..ds.n_visits().min(64)].to_vec());
        prop_assume!(q.len() == ds.n_visits());
        let spec = ModelMatrixSpec::parse(&["z1", "z2"]).unwrap();
        let opts = CoxOptions::default();
        if let Ok(fit) = fit_cox(&ds, &spec, &q, &opts) {
            prop_assert!(fit.converged);
            prop_assert!(fit.max_score_norm <= opts.tolerance);
            prop_assert!(score_norm(&ds, &spec, &q, &fit.gamma_s).unwrap() <= opts.tolerance);
            prop_assert!(fit.breslow.increments.iter().all(|&d| d >= 0.0));
            prop_assert!(fit.breslow.times.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn shifting_a_covariate_changes_nothing(ds in common::dataset(6, 1), c in -5.0f64..5.0) {
        let q = QValues::ones(&ds);
        let a = fit_cox(&ds, &z_spec(), &q, &CoxOptions::default());
        let b = fit_cox(&common::shifted(&ds, c), &z_spec(), &q, &CoxOptions::default());
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert!((a.gamma_s[0] - b.gamma_s[0]).abs() <= 1e-6 * (1.0 + a.gamma_s[0].abs())),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "one fit failed: {:?} / {:?}", a.err(), b.err()),
        }
    }

    #[test]
    fn null_breslow_is_event_over_risk(ds in common::dataset(6, 1)) {
        let table = breslow_increments(&ds, &z_spec(), &[0.0], &QValues::ones(&ds)).unwrap();
        for (t, inc) in table.times.iter().zip(&table.increments) {
            let events = ds.visit_rows().iter().filter(|&&r| ds.interval(r).end == *t).count() as f64;
            let at_risk = ds.intervals().iter().filter(|iv| iv.at_risk && iv.start < *t && *t <= iv.end).count() as f64;
            prop_assert!((inc - events / at_risk).abs() < 1e-12);
        }
    }
}
