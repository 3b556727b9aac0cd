mod support {
    pub mod grad_suite;
}

use support::grad_suite::{cases, run_case, SEEDS, TOLERANCE};

#[test]
fn every_differentiable_op_passes_finite_differences() {
    let mut failures = Vec::new();
    for (name, case) in cases() {
        let r = run_case(name, case, SEEDS);
        assert!(r.checked > 0, "{name} checked nothing");
        if !r.passes() {
            failures.push(format!("{}: max rel err {:.3e} over {} seeds", r.name, r.max_rel_error, r.seeds));
        }
    }
    assert!(failures.is_empty(), "tolerance {TOLERANCE:e} exceeded: {failures:?}");
}
