use cgenn::properties::{
    registry_gaps, run_suite, run_suite_with, Mutation, PropertyReport, Suite, SuiteOptions, EQUIVARIANCE_TOL, PROOF_TOL,
};

#[test]
fn every_invariant_has_a_property() {
    assert!(registry_gaps().is_empty(), "{:?}", registry_gaps());
}

#[test]
fn algebra_suite_passes_at_full_trials() {
    let report = run_suite(Suite::Algebra, 1, 500);
    assert!(report.passed(), "{:?}", report.failures.first());
    for name in ["algebra.associativity", "algebra.reversal", "algebra.versor_action"] {
        assert!(report.property(name).unwrap().cases >= 500);
    }
}

#[test]
fn metric_suite_passes_and_measures_violation() {
    let report = run_suite(Suite::Metric, 2, 100);
    assert!(report.passed(), "{:?}", report.failures.first());
    let exact = report.property("metric.equivariance_exact_metric").unwrap();
    assert!(exact.max_error <= EQUIVARIANCE_TOL);
    let measured = report.property("metric.equivariance_violation").unwrap();
    assert_eq!(measured.tolerance, None);
    assert!(measured.max_error.is_finite());
    for name in ["metric.anticommutation", "metric.anticommutation_converse", "metric.volume_identity"] {
        assert!(report.property(name).unwrap().max_error <= PROOF_TOL);
    }
}

#[test]
fn layers_suite_passes() {
    let report = run_suite(Suite::Layers, 3, 50);
    assert!(report.passed(), "{:?}", report.failures.first());
}

#[test]
fn reports_are_deterministic_and_serializable() {
    let a = run_suite(Suite::Algebra, 9, 20);
    let b = run_suite(Suite::Algebra, 9, 20);
    assert_eq!(a, b);
    let json = serde_json::to_string(&a).unwrap();
    let back: PropertyReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a);
}

#[test]
fn flipped_cayley_sign_is_caught() {
    let options = SuiteOptions { seed: 1, trials: 10, mutation: Some(Mutation::CayleySign) };
    let report = run_suite_with(Suite::Algebra, options);
    assert!(!report.passed());
    assert!(report.failures.iter().any(|f| f.property == "algebra.cayley_oracle"));
}

#[test]
fn unsymmetrized_metric_gradient_is_caught() {
    let options = SuiteOptions { seed: 1, trials: 5, mutation: Some(Mutation::NoMetricSymmetrization) };
    let report = run_suite_with(Suite::Model, options);
    assert!(report.failures.iter().any(|f| f.property == "model.metric_symmetry"));
}

#[test]
fn suite_names_parse() {
    for s in ["algebra", "metric", "layers", "model", "all"] {
        assert_eq!(s.parse::<Suite>().unwrap().name(), s);
    }
    assert!("everything".parse::<Suite>().is_err());
}
