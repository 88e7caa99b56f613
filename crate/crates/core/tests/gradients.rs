mod common;

#[test]
fn every_parameter_matches_finite_differences() {
    for seed in 0..5 {
        let r = common::gradient_check(seed);
        assert!(r.checked > 300);
        assert!(
            r.failures.is_empty(),
            "seed {seed}: {} of {} elements off, first {:?}, worst rel {:e}",
            r.failures.len(),
            r.checked,
            &r.failures[..r.failures.len().min(5)],
            r.worst_rel
        );
    }
}
