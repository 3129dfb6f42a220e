//! Finite-difference checks of the model's backward pass.

mod common;

#[test]
fn backward_matches_central_differences() {
    for seed in 0..4 {
        let e = common::max_rel_error(seed);
        println!("seed {seed}: max rel err {e:.3e}");
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}
