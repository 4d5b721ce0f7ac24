//! Layers assembled from tape primitives.
//!
//! Each layer owns only [`ParamId`](crate::ParamId) handles into a shared
//! [`ParamStore`](crate::ParamStore); forward passes borrow the store through a
//! [`Graph`](crate::Graph).

mod attention;
mod basic;
mod eca;
mod gru;

pub use attention::{MultiHeadAttention, SamConfig, SelfAttentionModule, TransformerBlock};
pub use basic::{ConvLayer, LayerNorm, Linear};
pub use eca::{eca_kernel_size, Eca, EcaConfig};
pub use gru::{gru_step, GruCellWeights, GruLayer, GruStack, GruStackConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// `U(−1/√fan_in, 1/√fan_in)`.
pub fn init_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

pub fn init_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Result<Tensor<T>> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}
