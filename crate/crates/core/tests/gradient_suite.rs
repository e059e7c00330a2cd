//! The full randomised gradient suite: every loss and the capsule pipeline
//! against central differences, 50 instances per check.

use std::time::Instant;

use gatedistill::gradcheck::{run_suite, CHECKS, SUITE_TOL};

#[test]
fn every_check_matches_finite_differences() {
    let start = Instant::now();
    let results = run_suite(2024, 50).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(results.len(), 50 * CHECKS.len());
    for check in CHECKS {
        let worst = results.iter().filter(|r| r.check == check).map(|r| r.rel_err).fold(0.0, f64::max);
        eprintln!("{check:>13}: worst relative error {worst:.2e}");
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{} instances above {SUITE_TOL:e}: {failed:?}", failed.len());
    eprintln!("suite time {elapsed:.1}s");
    assert!(elapsed < 120.0, "suite took {elapsed:.1}s");
}
