mod common;

use alure::encoder::CompressionVariant;
use common::criteria::worst_relative_error;

#[test]
fn full_model_gradients_match_finite_differences() {
    for variant in [CompressionVariant::SkipDot, CompressionVariant::Interaction] {
        for seed in 1..=10 {
            let (rel, name, i) = worst_relative_error(variant, seed);
            println!("{variant:?} seed {seed}: max rel err {rel:.3e} at {name}[{i}]");
            assert!(rel < 1e-4, "{variant:?} seed {seed}: {rel:e} at {name}[{i}]");
        }
    }
}
