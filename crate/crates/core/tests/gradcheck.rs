mod common;

use common::Check;

fn assert_all(checks: &[Check], max_skipped: usize) {
    for c in checks {
        assert!(c.pass(), "{}", c.describe());
    }
    let skipped: usize = checks.iter().map(|c| c.skipped).sum();
    assert!(skipped <= max_skipped, "{skipped} coordinates crossed a kink");
}

#[test]
fn lora_layer_gradients() {
    assert_all(&common::lora_layer(), 0);
}

#[test]
fn softmax_cross_entropy_gradient() {
    assert_all(&[common::softmax_cross_entropy()], 0);
}

#[test]
fn toy_adapter_gradients() {
    assert_all(&common::toy_adapter(), 9);
}

#[test]
fn toy_dense_gradients() {
    assert_all(&common::toy_dense(), 19);
}
