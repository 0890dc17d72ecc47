//! Numeric foundations: matrices, deterministic randomness, elementary
//! functions.

pub mod math;
pub mod matrix;
pub mod rng;

pub use math::{
    dot, inverse_sigmoid, layer_norm, layer_norm_affine, layer_norm_backward,
    layer_norm_with_cache, mean, sigmoid, sigmoid_prime_from_value, silu, silu_prime, std_dev,
    variance, LayerNormCache, LAYER_NORM_EPS,
};
pub use matrix::Matrix;
pub use rng::Rng;
