use irrvis::cox::{fit_cox, score_norm, CoxOptions, QValues};
use irrvis::data::{Dataset, ModelMatrixSpec};
use irrvis::simlab::{generate, hspec_for, zspec_for, OutcomeKind, Scenario, ScenarioConfig};
use irrvis::weights::{
    balance_report, balancing_weights, mle_weights, q_values, BalanceOptions, OutcomeTransform, SelectionSpec,
};
use proptest::prelude::*;

fn simulated(seed: u64, n: usize, phi: f64, outcome: OutcomeKind) -> Dataset {
    let cfg = ScenarioConfig {
        gamma_z: 0.5,
        phi_true: phi,
        n,
        seed,
        outcome,
        ..ScenarioConfig::default()
    };
    generate(&cfg, 1).unwrap().observed
}

fn eval(ds: &Dataset, spec: &ModelMatrixSpec, r: usize) -> Vec<f64> {
    let fitted = spec.fit(ds).unwrap();
    let mut out = vec![0.0; fitted.dim()];
    fitted.eval_row(ds, r, &mut out);
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn weights_factor_into_exp_linear_times_q(seed in 0u64..1000, phi in -0.3f64..0.3, count in any::<bool>()) {
        let outcome = if count { OutcomeKind::Count } else { OutcomeKind::Continuous };
        let ds = simulated(seed, 60, 0.0, outcome);
        let q = q_values(&ds, &SelectionSpec::new(outcome.transform(), phi)).unwrap();
        let zspec = zspec_for(Scenario::S1);
        let cox = fit_cox(&ds, &zspec, &q, &CoxOptions::default()).unwrap();
        let mle = mle_weights(&cox, &ds, &zspec, &q).unwrap();
        let hspec = hspec_for(Scenario::S1);
        let bal = balancing_weights(&ds, &hspec, &q, &cox.breslow, &BalanceOptions::default()).unwrap();
        prop_assert!(bal.max_abs_residual <= 1e-8);
        for (v, &r) in ds.visit_rows().iter().enumerate() {
            let qv = q.values()[v];
            let z = eval(&ds, &zspec, r);
            let lin: f64 = z.iter().zip(&cox.gamma_s).map(|(a, b)| a * b).sum();
            prop_assert!(mle.weights[v] > 0.0 && bal.weights[v] > 0.0);
            prop_assert!((mle.weights[v].ln() - qv.ln() + lin).abs() < 1e-10);
            let h = eval(&ds, &hspec.terms, r);
            let lin: f64 = h.iter().zip(&bal.gamma).map(|(a, b)| a * b).sum();
            prop_assert!((bal.weights[v].ln() - qv.ln() - lin).abs() < 1e-10);
        }
    }
}

#[test]
fn each_weight_solves_its_own_equations() {
    let ds = simulated(5, 150, 0.0, OutcomeKind::Continuous);
    let q = QValues::ones(&ds);
    let zspec = zspec_for(Scenario::S1);
    let opts = CoxOptions::default();
    let cox = fit_cox(&ds, &zspec, &q, &opts).unwrap();
    assert!(score_norm(&ds, &zspec, &q, &cox.gamma_s).unwrap() <= opts.tolerance);
    let bal = balancing_weights(&ds, &hspec_for(Scenario::S1), &q, &cox.breslow, &BalanceOptions::default()).unwrap();
    assert!(bal.max_abs_residual <= 1e-8);
}

#[test]
fn zero_phi_reduces_to_unit_q() {
    let ds = simulated(6, 80, 0.0, OutcomeKind::Count);
    let q0 = q_values(&ds, &SelectionSpec::new(OutcomeTransform::Log1p, 0.0)).unwrap();
    let ones = QValues::ones(&ds);
    assert_eq!(q0, ones);
    let zspec = zspec_for(Scenario::S1);
    let cox = fit_cox(&ds, &zspec, &ones, &CoxOptions::default()).unwrap();
    let h = hspec_for(Scenario::S1);
    let a = balancing_weights(&ds, &h, &q0, &cox.breslow, &BalanceOptions::default()).unwrap();
    let b = balancing_weights(&ds, &h, &ones, &cox.breslow, &BalanceOptions::default()).unwrap();
    assert_eq!(a.weights, b.weights);
}

#[test]
fn balancing_beats_mle_under_misspecification() {
    let cfg = ScenarioConfig {
        gamma_z: 1.25,
        n: 200,
        scenario: Scenario::S2,
        seed: 2222,
        ..ScenarioConfig::default()
    };
    let ds = generate(&cfg, 1).unwrap().observed;
    let q = QValues::ones(&ds);
    let zspec = zspec_for(Scenario::S2);
    let cox = fit_cox(&ds, &zspec, &q, &CoxOptions::default()).unwrap();
    let h = hspec_for(Scenario::S2);
    let mle = mle_weights(&cox, &ds, &zspec, &q).unwrap();
    let bal = balancing_weights(&ds, &h, &q, &cox.breslow, &BalanceOptions::default()).unwrap();
    let worst = |w| -> f64 {
        balance_report(&ds, &h, w, &q, &cox.breslow)
            .unwrap()
            .iter()
            .map(|r| r.standardized_residual.abs())
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max)
    };
    let (wb, wm) = (worst(&bal), worst(&mle));
    assert!(wb <= 1e-6, "balancing imbalance {wb}");
    assert!(wm > wb, "mle {wm} vs balancing {wb}");
}
