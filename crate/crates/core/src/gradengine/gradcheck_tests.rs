use crate::oracles::gradients::{model_check, op_checks};

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..5 {
        for (name, check) in op_checks(seed) {
            assert!(check.checked > 0, "{name}: nothing checked");
            assert!(
                check.max_rel_error < 1e-5,
                "{name} seed {seed}: relative error {:e}",
                check.max_rel_error
            );
        }
    }
}

#[test]
fn coupled_model_matches_finite_differences() {
    let (mut checked, mut skipped) = (0, 0);
    for seed in 0..12 {
        let check = model_check(seed);
        assert!(check.max_rel_error < 1e-5, "seed {seed}: {check:?}");
        checked += check.checked;
        skipped += check.skipped_nonsmooth;
    }
    assert!(skipped * 4 < checked, "{skipped} of {} coordinates sat on kinks", checked + skipped);
}
