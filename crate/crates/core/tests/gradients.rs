mod common;

use common::{check_model, op_checks, GRAD_TOL};

#[test]
fn ops_match_finite_differences_on_many_instances() {
    let mut worst = std::collections::BTreeMap::new();
    for seed in 0..100 {
        for (name, err) in op_checks(seed) {
            let w = worst.entry(name).or_insert(0.0f64);
            *w = w.max(err);
        }
    }
    for (name, err) in &worst {
        assert!(*err <= GRAD_TOL, "{name}: relative error {err:.3e}");
    }
    assert_eq!(worst.len(), 18);
}

#[test]
fn model_matches_finite_differences() {
    let err = check_model();
    assert!(err <= GRAD_TOL, "relative error {err:.3e}");
}
