//! Central finite-difference checks for every differentiable primitive and
//! the composite objectives.

mod common;

#[test]
fn every_case_matches_finite_differences() {
    let mut failures = Vec::new();
    for (name, build) in &common::grad_cases() {
        match common::run_grad_case(name, build) {
            Ok(s) => println!("{:>16}: {} entries ({} at kinks), worst rel {:.2e}", s.name, s.checked, s.excluded, s.worst),
            Err(e) => failures.push(e),
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn whole_suite_within_budget() {
    let summary = common::gradient_suite().unwrap();
    println!("{summary}");
}
