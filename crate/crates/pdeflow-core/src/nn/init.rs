//! Deterministic parameter initialization. Every tensor draws from its own
//! RNG stream derived from (seed, name), so the result is independent of
//! insertion order and stable across refactors.

use crate::tensor::{Scalar, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug)]
pub enum InitKind {
    Zeros,
    TruncNormal(f64),
}

/// FNV-1a over the name, mixed into the user seed.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Normal(0, std) redrawn outside two standard deviations.
pub fn trunc_normal<S: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let g: f64 = rng.sample(StandardNormal);
        if g.abs() <= 2.0 {
            data.push(S::from_f64(g * std));
        }
    }
    Tensor::from_vec(shape, data)
}

pub fn init_tensor<S: Scalar>(shape: &[usize], kind: InitKind, rng: &mut ChaCha8Rng) -> Tensor<S> {
    match kind {
        InitKind::Zeros => Tensor::zeros(shape),
        InitKind::TruncNormal(std) => trunc_normal(shape, std, rng),
    }
}
