use sparseconvmil::gradcheck::run_all;

#[test]
fn every_backward_matches_finite_differences() {
    for seed in [0, 1] {
        let results = run_all(seed).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
        assert!(failed.is_empty(), "seed {seed}: {failed:#?}");
        assert!(results.len() > 60);
    }
}
