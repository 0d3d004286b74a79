//! Analytic gradients of the encoder and the contrastive loss against
//! central finite differences, in double precision.

mod common;

use common::{encoder_gradcheck, ntxent_gradcheck, two_pair_loss};

#[test]
fn encoder_gradients_match_finite_differences() {
    for seed in [1, 2] {
        let r = encoder_gradcheck(seed);
        assert!(r.passed(), "seed {seed}: {r:?}");
        assert_eq!(r.checked, common::tiny_config().param_count());
    }
}

#[test]
fn ntxent_gradients_match_finite_differences() {
    let r = ntxent_gradcheck(3);
    assert!(r.passed(), "{r:?}");
}

#[test]
fn two_pair_unit_temperature_loss() {
    let (got, want) = two_pair_loss();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}
