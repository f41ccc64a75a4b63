//! Property suite: the scoring and weighting formulas against independent
//! scalar brute-force oracles, at least 100 randomized cases each, agreement
//! within 1e-6.

use dfss_core::verify::{
    formula_oracles, oracle_alpha, oracle_compute_weights, oracle_distribution_distance,
    oracle_l1, oracle_miou, CheckResult, ORACLE_TOL,
};

const CASES: usize = 150;

fn assert_within(result: CheckResult) {
    assert!(
        result.max_deviation < ORACLE_TOL,
        "{}: max deviation {:.3e} over {} cases",
        result.name,
        result.max_deviation,
        result.cases
    );
}

#[test]
fn distribution_distance_matches_scalar_oracle() {
    assert_within(oracle_distribution_distance(CASES).unwrap());
}

#[test]
fn compute_weights_matches_scalar_oracle() {
    assert_within(oracle_compute_weights(CASES).unwrap());
}

#[test]
fn alpha_matches_scalar_oracle() {
    assert_within(oracle_alpha(CASES).unwrap());
}

#[test]
fn l1_loss_matches_scalar_oracle() {
    assert_within(oracle_l1(CASES).unwrap());
}

#[test]
fn miou_matches_counting_oracle() {
    let r = oracle_miou(CASES).unwrap();
    assert_eq!(r.max_deviation, 0.0, "per-pixel counting must agree exactly");
}

#[test]
fn full_suite_stays_under_a_minute() {
    let start = std::time::Instant::now();
    for r in formula_oracles(CASES).unwrap() {
        assert_within(r);
    }
    assert!(start.elapsed().as_secs() < 60, "oracle suite took {:?}", start.elapsed());
}
