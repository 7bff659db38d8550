//! Tape gradients against central finite differences.

use edsc::gradcheck::{end_to_end, op_suite, END_TO_END_TOL};

#[test]
fn every_op_passes_on_ten_seeds() {
    let mut failures = Vec::new();
    let mut shapes = std::collections::BTreeSet::new();
    for seed in 0..10 {
        for check in op_suite(seed).unwrap() {
            shapes.insert(check.shape.to_string());
            assert!(check.tol <= 1e-4);
            if !check.report.passed {
                failures.push(format!("seed {} {} {}: {:?}", seed, check.op, check.shape, check.report.worst));
            }
        }
    }
    assert!(shapes.len() >= 3, "{:?}", shapes);
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn whole_model_gradient_single_time() {
    for seed in 0..2 {
        let c = end_to_end(seed, false).unwrap();
        assert_eq!(c.tol, END_TO_END_TOL);
        assert!(c.report.passed, "{:?}", c.report);
    }
}

#[test]
fn whole_model_gradient_multi_time() {
    let c = end_to_end(7, true).unwrap();
    assert!(c.report.passed, "{:?}", c.report);
}
