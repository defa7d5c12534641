//! End-to-end gradient verification across random MLPs and every
//! objective the trainers differentiate.

use companion_core::gradcheck::mlp_gradient_sweep;
use std::time::Instant;

#[test]
fn twenty_random_mlps_match_finite_differences() {
    let started = Instant::now();
    let worst = mlp_gradient_sweep(20, 2024).expect("sweep runs");
    let elapsed = started.elapsed().as_secs_f64();
    assert!(worst < 1e-5, "worst relative error {worst}");
    // generous bound; the sweep itself is sub-second in release builds
    assert!(elapsed < 60.0, "sweep took {elapsed}s");
}
