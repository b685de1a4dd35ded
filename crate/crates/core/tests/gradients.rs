mod common;

#[test]
fn every_op_matches_finite_differences() {
    let cases = common::op_gradient_cases();
    let mut failures = Vec::new();
    for (name, err) in &cases {
        println!("{name:<26} {err:.3e}");
        if *err >= 1e-4 {
            failures.push(format!("{name}: {err:.3e}"));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}
