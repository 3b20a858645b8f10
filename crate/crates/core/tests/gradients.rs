//! Finite-difference checks of the joint multi-task gradient.

mod common;

use amint::nets::Setup;
use amint::objective::LossWeights;
use common::max_rel_error;

#[test]
fn joint_gradient_matches_central_differences_for_every_setup() {
    for (i, setup) in Setup::ALL.into_iter().enumerate() {
        let err = max_rel_error(setup, 10 + i as u64, LossWeights { lambda1: 1.0, lambda2: 10.0, l2_coeff: 1e-3 }, 50);
        assert!(err <= 1e-3, "{setup:?}: max relative error {err:e}");
    }
}
