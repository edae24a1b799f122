mod common;

use common::{grads, TOL};

fn assert_all(results: Vec<(&'static str, f64)>) {
    for (name, err) in results {
        assert!(err < TOL, "{name}: relative error {err:.3e}");
    }
}

#[test]
fn matmul_and_transposed_matmul() {
    assert_all(grads::matmul_and_transposed_matmul());
}

#[test]
fn elementwise_ops() {
    assert_all(grads::elementwise_ops());
}

#[test]
fn norms_and_activations() {
    assert_all(grads::norms_and_activations());
}

#[test]
fn rope_and_attention() {
    assert_all(grads::rope_and_attention());
}

#[test]
fn gather_concat_slice_and_cross_entropy() {
    assert_all(grads::gather_concat_slice_and_cross_entropy());
}

#[test]
fn full_decoder_loss_gradients() {
    assert_all(grads::full_decoder_loss_gradients());
}

#[test]
fn full_pipeline_restoration_loss_gradients() {
    assert_all(grads::full_pipeline_restoration_loss_gradients());
}
