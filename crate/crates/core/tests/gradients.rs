mod common;
mod fixtures;

use fixtures::{worst_gradient_error, GRADIENT_CASES};

#[test]
fn total_loss_gradients_match_central_differences() {
    for (i, (name, shape, text)) in GRADIENT_CASES.iter().enumerate() {
        let (worst, at) = worst_gradient_error(text, *shape, 10 + i as u64, 60);
        assert!(worst < 1e-4, "{name}: {at}");
    }
}
