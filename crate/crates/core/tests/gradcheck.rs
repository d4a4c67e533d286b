mod common;

use common::fd;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-5;

fn worst(case: fn(u64) -> f64, seeds: u64) -> f64 {
    (0..seeds).map(case).fold(0.0, f64::max)
}

#[test]
fn matmul_matches_finite_differences() {
    assert!(worst(fd::matmul_case, SEEDS) < 1e-6);
}

#[test]
fn rms_norm_matches_finite_differences() {
    assert!(worst(fd::rms_norm_case, SEEDS) < 1e-6);
}

#[test]
fn silu_matches_finite_differences() {
    assert!(worst(fd::silu_case, SEEDS) < 1e-6);
}

#[test]
fn cross_entropy_matches_finite_differences() {
    assert!(worst(fd::cross_entropy_case, SEEDS) < 1e-6);
}

#[test]
fn attention_matches_finite_differences() {
    assert!(worst(fd::attention_case, SEEDS) < TOL);
}

#[test]
fn whole_model_matches_finite_differences() {
    let e = worst(fd::model_case, 3);
    assert!(e < TOL, "worst rel err {e}");
}
