use mtag_core::gradcheck::{op_suite, TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in op_suite() {
        for trial in 0..20u64 {
            let report = (case.run)(1000 + trial).unwrap();
            if !report.passed() {
                failures.push((case.name, trial, report.max_rel_err));
            }
        }
    }
    assert!(failures.is_empty(), "tolerance {TOLERANCE}: {failures:?}");
}
