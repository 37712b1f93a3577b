//! Reverse-mode gradients against central finite differences.

mod support;

use support::gradchecks as g;

#[test]
fn matmul_gradients() {
    g::matmul_gradients();
}

#[test]
fn softmax_jacobian() {
    g::softmax_jacobian();
}

#[test]
fn layer_norm_gradients() {
    g::layer_norm_gradients();
}

#[test]
fn layer_norm_moments_match_f64() {
    g::layer_norm_moments_match_f64();
}

#[test]
fn gelu_gradient_and_value() {
    g::gelu_gradient_and_value();
}

#[test]
fn cross_entropy_value_and_gradient() {
    g::cross_entropy_value_and_gradient();
}

#[test]
fn attention_gradients() {
    g::attention_gradients();
}

#[test]
fn gather_and_broadcast_gradients() {
    g::gather_and_broadcast_gradients();
}

#[test]
fn full_model_gradients() {
    g::full_model_gradients();
}
