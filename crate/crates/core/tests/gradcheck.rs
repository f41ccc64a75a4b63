//! Central finite-difference verification of every backward pass in f64:
//! h = 1e-5, relative error below 1e-5, 20 seeds and 4 random probes per
//! tensor per layer. The probe machinery lives in `dfss_core::verify`; the
//! numeric objective there is an independent weighted sum of the outputs.

use dfss_core::batchnorm::Mode;
use dfss_core::verify::{
    gradcheck_all, gradcheck_batchnorm, gradcheck_conv2d, gradcheck_l1, gradcheck_relu,
    gradcheck_softmax_ce, gradcheck_upsample, CheckResult, GRAD_REL_TOL,
};

const SEEDS: u64 = 20;

fn assert_within(result: CheckResult) {
    assert!(
        result.max_deviation < GRAD_REL_TOL,
        "{}: max relative error {:.3e} over {} seeds",
        result.name,
        result.max_deviation,
        result.cases
    );
}

#[test]
fn conv2d_backward_matches_finite_differences() {
    assert_within(gradcheck_conv2d(SEEDS).unwrap());
}

#[test]
fn batchnorm_train_backward_matches_finite_differences() {
    assert_within(gradcheck_batchnorm(Mode::Train, SEEDS).unwrap());
}

#[test]
fn batchnorm_eval_backward_matches_finite_differences() {
    assert_within(gradcheck_batchnorm(Mode::Eval, SEEDS).unwrap());
}

#[test]
fn relu_backward_matches_finite_differences() {
    assert_within(gradcheck_relu(SEEDS).unwrap());
}

#[test]
fn upsample_backward_matches_finite_differences() {
    assert_within(gradcheck_upsample(SEEDS).unwrap());
}

#[test]
fn softmax_cross_entropy_backward_matches_finite_differences() {
    assert_within(gradcheck_softmax_ce(SEEDS).unwrap());
}

#[test]
fn l1_loss_backward_matches_finite_differences() {
    assert_within(gradcheck_l1(SEEDS).unwrap());
}

#[test]
fn full_suite_stays_under_a_minute() {
    let start = std::time::Instant::now();
    for r in gradcheck_all(SEEDS).unwrap() {
        assert_within(r);
    }
    assert!(start.elapsed().as_secs() < 60, "gradient suite took {:?}", start.elapsed());
}
