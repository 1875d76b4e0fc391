//! 4D rotary positional embedding: the head dimension is split across the
//! four coordinate axes (t,h,w,d) and each sub-block rotates pairwise by
//! angles proportional to its axis coordinate. Scores then depend only on
//! coordinate differences.

use crate::tensor::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RopeError {
    #[error("axis split {split:?} must be even per axis and sum to head_dim {head_dim}")]
    BadSplit { split: [usize; 4], head_dim: usize },
    #[error("vector length {got} does not match head_dim {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub axis_split: [usize; 4],
    pub base: f64,
}

impl RopeConfig {
    /// Equal split across the four axes (rounded down to even), remainder
    /// assigned to the time axis first.
    pub fn with_equal_split(head_dim: usize) -> Result<Self, RopeError> {
        if !head_dim.is_multiple_of(2) {
            return Err(RopeError::BadSplit { split: [0; 4], head_dim });
        }
        let per = (head_dim / 4) & !1usize;
        let mut split = [per; 4];
        split[0] += head_dim - 4 * per;
        Self::new(head_dim, split, 10000.0)
    }

    pub fn new(head_dim: usize, axis_split: [usize; 4], base: f64) -> Result<Self, RopeError> {
        let sum: usize = axis_split.iter().sum();
        if sum != head_dim || axis_split.iter().any(|&d| d % 2 != 0) {
            return Err(RopeError::BadSplit { split: axis_split, head_dim });
        }
        Ok(RopeConfig { head_dim, axis_split, base })
    }

    /// Rotation angles for one 4D coordinate, one entry per channel pair in
    /// block order. Computed in f64 so large coordinates stay accurate.
    pub fn angles(&self, coord: [i64; 4]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for (axis, &d_a) in self.axis_split.iter().enumerate() {
            let pairs = d_a / 2;
            for j in 0..pairs {
                let freq = self.base.powf(-2.0 * j as f64 / d_a as f64);
                out.push(coord[axis] as f64 * freq);
            }
        }
        out
    }
}

/// Rotates each channel pair of `vec` by its axis angle. `inverse` applies
/// the transpose rotation (used by backprop).
pub fn rope_rotate_signed<S: Scalar>(
    vec: &[S],
    coord: [i64; 4],
    cfg: &RopeConfig,
    inverse: bool,
) -> Result<Vec<S>, RopeError> {
    if vec.len() != cfg.head_dim {
        return Err(RopeError::ShapeMismatch { expected: cfg.head_dim, got: vec.len() });
    }
    let mut out = vec![S::ZERO; vec.len()];
    rope_rotate_into(&mut out, vec, &cfg.angles(coord), inverse);
    Ok(out)
}

pub fn rope_rotate<S: Scalar>(vec: &[S], coord: [i64; 4], cfg: &RopeConfig) -> Result<Vec<S>, RopeError> {
    rope_rotate_signed(vec, coord, cfg, false)
}

/// In-place pairwise rotation given precomputed per-pair angles.
pub fn rope_rotate_into<S: Scalar>(out: &mut [S], vec: &[S], angles: &[f64], inverse: bool) {
    debug_assert_eq!(vec.len(), 2 * angles.len());
    for (p, &theta) in angles.iter().enumerate() {
        let theta = if inverse { -theta } else { theta };
        let (cos_t, sin_t) = (S::from_f64(theta.cos()), S::from_f64(theta.sin()));
        let (x0, x1) = (vec[2 * p], vec[2 * p + 1]);
        out[2 * p] = x0 * cos_t - x1 * sin_t;
        out[2 * p + 1] = x0 * sin_t + x1 * cos_t;
    }
}

/// Attention score between rotated query and key.
pub fn rope_attention_scores<S: Scalar>(
    q: &[S],
    k: &[S],
    cq: [i64; 4],
    ck: [i64; 4],
    cfg: &RopeConfig,
) -> Result<S, RopeError> {
    let rq = rope_rotate(q, cq, cfg)?;
    let rk = rope_rotate(k, ck, cfg)?;
    let mut acc = S::ZERO;
    for (&a, &b) in rq.iter().zip(rk.iter()) {
        acc += a * b;
    }
    Ok(acc)
}
