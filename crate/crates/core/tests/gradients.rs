mod common;

use common::gradient_instance;

#[test]
fn finite_differences_unit_scale() {
    for seed in 0..25 {
        let errs = gradient_instance(seed, 1.0, 1e-4, 1e-6);
        assert!(errs.iter().all(|&e| e < 1e-4), "seed {seed}: {errs:?}");
    }
}

#[test]
fn finite_differences_training_scale() {
    for seed in 100..125 {
        let errs = gradient_instance(seed, 20.0, 1e-6, 1e-3);
        assert!(errs.iter().all(|&e| e < 1e-4), "seed {seed}: {errs:?}");
    }
}
