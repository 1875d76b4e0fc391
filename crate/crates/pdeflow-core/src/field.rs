//! Canonical 4D trajectory representation shared by every dimensionality.
//!
//! 1D/2D/3D trajectories with arbitrary variable subsets are cast onto one
//! dense (T,H,W,D,C_max) tensor: variables routed into a fixed channel
//! vocabulary with a binary mask, degenerate spatial axes zero-padded to a
//! single patch extent, and non-divisible axes zero-padded up. Patchification
//! turns a field into tokens with explicit 4D integer coordinates.

use crate::tensor::{Scalar, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("unknown variable name `{0}` (not in channel vocabulary)")]
    UnknownVariable(String),
    #[error("duplicate variable name `{0}`")]
    DuplicateVariable(String),
    #[error("expected {expected} spatial axes for dim_type {dim}, raw tensor has {got}")]
    AxisCountMismatch { dim: u8, expected: usize, got: usize },
    #[error("extent {extent} on axis {axis} is not divisible by patch extent {patch}")]
    NotDivisible { axis: &'static str, extent: usize, patch: usize },
    #[error("token coordinates do not tile the grid (missing or duplicate patch at {0:?})")]
    BadCoverage([i64; 4]),
    #[error("history window is empty")]
    EmptyHistory,
    #[error("resample target extent {0} is below 1")]
    BadResampleTarget(usize),
    #[error("patch extents must be >= 1")]
    BadPatch,
}

/// Native spatial dimensionality of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DimType {
    One = 1,
    Two = 2,
    Three = 3,
}

impl DimType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(DimType::One),
            2 => Some(DimType::Two),
            3 => Some(DimType::Three),
            _ => None,
        }
    }

    pub fn as_usize(self) -> usize {
        self as usize
    }

    /// Zero-based index for embedding tables.
    pub fn index(self) -> usize {
        self as usize - 1
    }
}

/// Ordered variable identifiers shared by all datasets.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelVocabulary {
    names: Vec<String>,
}

impl Default for ChannelVocabulary {
    fn default() -> Self {
        ChannelVocabulary {
            names: ["Vx", "Vy", "Vz", "rho", "p", "u_act", "v_inh", "water_depth", "particles"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl ChannelVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self, FieldError> {
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(FieldError::DuplicateVariable(n.clone()));
            }
        }
        Ok(ChannelVocabulary { names })
    }

    pub fn c_max(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Result<usize, FieldError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| FieldError::UnknownVariable(name.to_string()))
    }
}

/// Spatiotemporal patch extents (t,h,w,d).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchSize {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Default for PatchSize {
    fn default() -> Self {
        PatchSize { t: 2, h: 8, w: 8, d: 8 }
    }
}

impl PatchSize {
    pub fn new(t: usize, h: usize, w: usize, d: usize) -> Result<Self, FieldError> {
        if t == 0 || h == 0 || w == 0 || d == 0 {
            return Err(FieldError::BadPatch);
        }
        Ok(PatchSize { t, h, w, d })
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w * self.d
    }

    pub fn extents(&self) -> [usize; 4] {
        [self.t, self.h, self.w, self.d]
    }
}

/// Original (pre-padding) extents: time plus the native spatial axes.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NativeShape {
    pub t: usize,
    pub spatial: Vec<usize>,
}

/// Canonical (T,H,W,D,C_max) trajectory tensor with channel mask.
#[derive(Clone, Debug)]
pub struct Unified4DField<S> {
    pub data: Tensor<S>,
    pub mask: Vec<bool>,
    pub dim_type: DimType,
    pub patch: PatchSize,
    pub native_shape: NativeShape,
}

impl<S: Scalar> Unified4DField<S> {
    pub fn extents(&self) -> [usize; 5] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3], s[4]]
    }

    pub fn c_max(&self) -> usize {
        self.data.shape()[4]
    }

    /// Padded extents covered by real data: (T, H, W, D) with degenerate and
    /// padded regions excluded.
    pub fn native_extents(&self) -> [usize; 4] {
        let mut e = [self.native_shape.t, 1, 1, 1];
        for (i, &s) in self.native_shape.spatial.iter().enumerate() {
            e[i + 1] = s;
        }
        e
    }

    /// 0/1 weights over (T,H,W,D,C_max): 1 on native cells of valid channels.
    pub fn validity(&self) -> Tensor<S> {
        let [t, h, w, d, c] = self.extents();
        let [nt, nh, nw, nd] = self.native_extents();
        let mut out = Tensor::zeros(&[t, h, w, d, c]);
        let buf = out.data_mut();
        for it in 0..nt {
            for ih in 0..nh {
                for iw in 0..nw {
                    for id in 0..nd {
                        let base = (((it * h + ih) * w + iw) * d + id) * c;
                        for (ic, &m) in self.mask.iter().enumerate() {
                            if m {
                                buf[base + ic] = S::ONE;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Extracts the native region and originally present channels, in the
    /// order given by `var_names`.
    pub fn extract_native(&self, vocab: &ChannelVocabulary, var_names: &[String]) -> Result<Tensor<S>, FieldError> {
        let [_, h, w, d, c] = self.extents();
        let [nt, nh, nw, nd] = self.native_extents();
        let slots: Vec<usize> = var_names
            .iter()
            .map(|n| vocab.index_of(n))
            .collect::<Result<_, _>>()?;
        let ck = slots.len();
        let mut shape = vec![nt];
        shape.extend_from_slice(&self.native_shape.spatial);
        shape.push(ck);
        let mut out = Tensor::zeros(&shape);
        let buf = out.data_mut();
        let mut idx = 0usize;
        for it in 0..nt {
            for ih in 0..nh {
                for iw in 0..nw {
                    for id in 0..nd {
                        let base = (((it * h + ih) * w + iw) * d + id) * c;
                        for &slot in &slots {
                            buf[idx] = self.data.data()[base + slot];
                            idx += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Frames `[start, start+len)` as a new field (shares mask/patch/native
    /// spatial extents).
    pub fn time_slice(&self, start: usize, len: usize) -> Unified4DField<S> {
        let [t, h, w, d, c] = self.extents();
        assert!(start + len <= t);
        let frame = h * w * d * c;
        let data = Tensor::from_vec(
            &[len, h, w, d, c],
            self.data.data()[start * frame..(start + len) * frame].to_vec(),
        );
        Unified4DField {
            data,
            mask: self.mask.clone(),
            dim_type: self.dim_type,
            patch: self.patch,
            native_shape: NativeShape {
                t: len.min(self.native_shape.t.saturating_sub(start)),
                spatial: self.native_shape.spatial.clone(),
            },
        }
    }
}

/// Patch vectors paired with explicit 4D integer coordinates (patch origins
/// on the element lattice).
#[derive(Clone, Debug)]
pub struct TokenSet<S> {
    pub vectors: Tensor<S>,
    pub coords: Vec<[i64; 4]>,
    pub patch: PatchSize,
    pub grid: [usize; 4],
}

impl<S: Scalar> TokenSet<S> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn vec_len(&self) -> usize {
        self.vectors.shape()[1]
    }

    /// Shifts every token's time coordinate, placing a future window after
    /// its history on the shared time axis.
    pub fn offset_time(&mut self, frames: i64) {
        for c in self.coords.iter_mut() {
            c[0] += frames;
        }
    }
}

/// Per-channel normalization statistics from a history window.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<S> {
    pub mean: Vec<S>,
    pub scale: Vec<S>,
}

fn pad_up(extent: usize, patch: usize) -> usize {
    if extent == 0 {
        patch
    } else {
        extent.div_ceil(patch) * patch
    }
}

/// Casts a raw trajectory (T, spatial..., C_k) onto the unified tensor:
/// variables routed to vocabulary slots, missing channels zero with mask 0,
/// degenerate axes padded to one patch extent, present axes padded up to the
/// next patch multiple.
pub fn canonicalize<S: Scalar>(
    raw: &Tensor<S>,
    var_names: &[String],
    dim_type: DimType,
    vocab: &ChannelVocabulary,
    patch: PatchSize,
) -> Result<Unified4DField<S>, FieldError> {
    let nd = dim_type.as_usize();
    if raw.shape().len() != nd + 2 {
        return Err(FieldError::AxisCountMismatch {
            dim: nd as u8,
            expected: nd,
            got: raw.shape().len().saturating_sub(2),
        });
    }
    let t = raw.shape()[0];
    let spatial: Vec<usize> = raw.shape()[1..1 + nd].to_vec();
    let ck = raw.shape()[nd + 1];
    if ck != var_names.len() {
        return Err(FieldError::AxisCountMismatch {
            dim: nd as u8,
            expected: var_names.len(),
            got: ck,
        });
    }
    let slots: Vec<usize> = var_names
        .iter()
        .map(|n| vocab.index_of(n))
        .collect::<Result<_, _>>()?;
    for (i, s) in slots.iter().enumerate() {
        if slots[..i].contains(s) {
            return Err(FieldError::DuplicateVariable(var_names[i].clone()));
        }
    }

    let c_max = vocab.c_max();
    let nh = spatial.first().copied().unwrap_or(0);
    let nw = spatial.get(1).copied().unwrap_or(0);
    let ndep = spatial.get(2).copied().unwrap_or(0);
    let pt = pad_up(t, patch.t);
    let ph = pad_up(nh, patch.h);
    let pw = pad_up(nw, patch.w);
    let pd = pad_up(ndep, patch.d);

    let mut data = Tensor::zeros(&[pt, ph, pw, pd, c_max]);
    let buf = data.data_mut();
    let src = raw.data();
    let (sh, sw, sd) = (nh.max(1), nw.max(1), ndep.max(1));
    for it in 0..t {
        for ih in 0..sh {
            for iw in 0..sw {
                for id in 0..sd {
                    let src_base = ((((it * sh) + ih) * sw + iw) * sd + id) * ck;
                    let dst_base = (((it * ph + ih) * pw + iw) * pd + id) * c_max;
                    for (j, &slot) in slots.iter().enumerate() {
                        buf[dst_base + slot] = src[src_base + j];
                    }
                }
            }
        }
    }

    let mut mask = vec![false; c_max];
    for &slot in &slots {
        mask[slot] = true;
    }
    Ok(Unified4DField {
        data,
        mask,
        dim_type,
        patch,
        native_shape: NativeShape { t, spatial },
    })
}

/// Partitions a field into non-overlapping patches, each vectorized in
/// (t,h,w,d,c) row-major scan order. Coordinates are patch origins.
pub fn patchify<S: Scalar>(field: &Unified4DField<S>, patch: PatchSize) -> Result<TokenSet<S>, FieldError> {
    let [t, h, w, d, c] = field.extents();
    for (axis, (extent, pe)) in [("t", (t, patch.t)), ("h", (h, patch.h)), ("w", (w, patch.w)), ("d", (d, patch.d))] {
        if extent % pe != 0 {
            return Err(FieldError::NotDivisible { axis, extent, patch: pe });
        }
    }
    let grid = [t / patch.t, h / patch.h, w / patch.w, d / patch.d];
    let l: usize = grid.iter().product();
    let v_tok = patch.volume() * c;
    let mut vectors = Tensor::zeros(&[l, v_tok]);
    let out = vectors.data_mut();
    let src = field.data.data();
    let mut coords = Vec::with_capacity(l);
    let mut tok = 0usize;
    for gt in 0..grid[0] {
        for gh in 0..grid[1] {
            for gw in 0..grid[2] {
                for gd in 0..grid[3] {
                    let (ot, oh, ow, od) = (gt * patch.t, gh * patch.h, gw * patch.w, gd * patch.d);
                    coords.push([ot as i64, oh as i64, ow as i64, od as i64]);
                    let dst = &mut out[tok * v_tok..(tok + 1) * v_tok];
                    let mut idx = 0usize;
                    for it in ot..ot + patch.t {
                        for ih in oh..oh + patch.h {
                            for iw in ow..ow + patch.w {
                                let base = ((it * h + ih) * w + iw) * d + od;
                                let run = &src[base * c..(base + patch.d) * c];
                                dst[idx..idx + run.len()].copy_from_slice(run);
                                idx += run.len();
                            }
                        }
                    }
                    tok += 1;
                }
            }
        }
    }
    Ok(TokenSet { vectors, coords, patch, grid })
}

/// Field metadata needed to rebuild a tensor from tokens.
#[derive(Clone, Debug)]
pub struct FieldMeta {
    pub extents: [usize; 4],
    pub c_max: usize,
    pub mask: Vec<bool>,
    pub dim_type: DimType,
    pub patch: PatchSize,
    pub native_shape: NativeShape,
}

impl<S: Scalar> Unified4DField<S> {
    pub fn meta(&self) -> FieldMeta {
        let [t, h, w, d, _] = self.extents();
        FieldMeta {
            extents: [t, h, w, d],
            c_max: self.c_max(),
            mask: self.mask.clone(),
            dim_type: self.dim_type,
            patch: self.patch,
            native_shape: self.native_shape.clone(),
        }
    }
}

/// Inverse of `patchify`; placement is driven by coordinates, not token
/// order. Time offsets applied via `offset_time` are accepted as long as the
/// coordinates tile the grid after subtracting the common origin.
pub fn unpatchify<S: Scalar>(tokens: &TokenSet<S>, meta: &FieldMeta) -> Result<Unified4DField<S>, FieldError> {
    let [t, h, w, d] = meta.extents;
    let c = meta.c_max;
    let patch = tokens.patch;
    let grid = [t / patch.t, h / patch.h, w / patch.w, d / patch.d];
    let l: usize = grid.iter().product();
    if tokens.len() != l {
        return Err(FieldError::BadCoverage([tokens.len() as i64, l as i64, 0, 0]));
    }
    let t_origin = tokens.coords.iter().map(|c| c[0]).min().unwrap_or(0);
    let mut seen = vec![false; l];
    let mut data = Tensor::zeros(&[t, h, w, d, c]);
    let out = data.data_mut();
    let v_tok = patch.volume() * c;
    let pe = patch.extents();
    for (tok, coord) in tokens.coords.iter().enumerate() {
        let rel = [coord[0] - t_origin, coord[1], coord[2], coord[3]];
        let mut g = [0usize; 4];
        for a in 0..4 {
            if rel[a] < 0 || !(rel[a] as usize).is_multiple_of(pe[a]) || rel[a] as usize / pe[a] >= grid[a] {
                return Err(FieldError::BadCoverage(*coord));
            }
            g[a] = rel[a] as usize / pe[a];
        }
        let flat = ((g[0] * grid[1] + g[1]) * grid[2] + g[2]) * grid[3] + g[3];
        if seen[flat] {
            return Err(FieldError::BadCoverage(*coord));
        }
        seen[flat] = true;
        let src = &tokens.vectors.data()[tok * v_tok..(tok + 1) * v_tok];
        let (ot, oh, ow, od) = (g[0] * patch.t, g[1] * patch.h, g[2] * patch.w, g[3] * patch.d);
        let mut idx = 0usize;
        for it in ot..ot + patch.t {
            for ih in oh..oh + patch.h {
                for iw in ow..ow + patch.w {
                    let base = ((it * h + ih) * w + iw) * d + od;
                    let run_len = patch.d * c;
                    out[base * c..base * c + run_len].copy_from_slice(&src[idx..idx + run_len]);
                    idx += run_len;
                }
            }
        }
    }
    Ok(Unified4DField {
        data,
        mask: meta.mask.clone(),
        dim_type: meta.dim_type,
        patch: meta.patch,
        native_shape: meta.native_shape.clone(),
    })
}

const SCALE_FLOOR: f64 = 1e-6;

/// Per-channel mean and RMS-about-mean over the native cells of a history
/// window. Masked channels get (0,1); constant channels hit the scale floor.
pub fn fit_norm<S: Scalar>(history: &Unified4DField<S>) -> Result<NormStats<S>, FieldError> {
    if history.extents()[0] == 0 || history.native_shape.t == 0 {
        return Err(FieldError::EmptyHistory);
    }
    let [_, h, w, d, c] = history.extents();
    let [nt, nh, nw, nd] = history.native_extents();
    let count = (nt * nh * nw * nd) as f64;
    let mut mean = vec![S::ZERO; c];
    let mut scale = vec![S::ONE; c];
    for (ch, m) in history.mask.iter().enumerate() {
        if !m {
            continue;
        }
        let mut acc = 0.0f64;
        for it in 0..nt {
            for ih in 0..nh {
                for iw in 0..nw {
                    for id in 0..nd {
                        let base = (((it * h + ih) * w + iw) * d + id) * c;
                        acc += history.data.data()[base + ch].to_f64();
                    }
                }
            }
        }
        let mu = acc / count;
        let mut var = 0.0f64;
        for it in 0..nt {
            for ih in 0..nh {
                for iw in 0..nw {
                    for id in 0..nd {
                        let base = (((it * h + ih) * w + iw) * d + id) * c;
                        let dv = history.data.data()[base + ch].to_f64() - mu;
                        var += dv * dv;
                    }
                }
            }
        }
        mean[ch] = S::from_f64(mu);
        scale[ch] = S::from_f64((var / count).sqrt().max(SCALE_FLOOR));
    }
    Ok(NormStats { mean, scale })
}

/// (x - mean) / scale on native cells of valid channels; padding stays zero.
pub fn apply_norm<S: Scalar>(field: &Unified4DField<S>, stats: &NormStats<S>) -> Unified4DField<S> {
    norm_impl(field, stats, false)
}

/// x * scale + mean on native cells of valid channels.
pub fn invert_norm<S: Scalar>(field: &Unified4DField<S>, stats: &NormStats<S>) -> Unified4DField<S> {
    norm_impl(field, stats, true)
}

fn norm_impl<S: Scalar>(field: &Unified4DField<S>, stats: &NormStats<S>, invert: bool) -> Unified4DField<S> {
    let [_, h, w, d, c] = field.extents();
    let [nt, nh, nw, nd] = field.native_extents();
    let mut out = field.clone();
    let buf = out.data.data_mut();
    for it in 0..nt {
        for ih in 0..nh {
            for iw in 0..nw {
                for id in 0..nd {
                    let base = (((it * h + ih) * w + iw) * d + id) * c;
                    for ch in 0..c {
                        if !field.mask[ch] {
                            continue;
                        }
                        let v = buf[base + ch];
                        buf[base + ch] = if invert {
                            v * stats.scale[ch] + stats.mean[ch]
                        } else {
                            (v - stats.mean[ch]) / stats.scale[ch]
                        };
                    }
                }
            }
        }
    }
    out
}

/// Separable per-axis linear interpolation of a raw trajectory
/// (T, spatial..., C) onto new spatial extents; endpoint-aligned grids, the
/// time and channel axes untouched.
pub fn resample<S: Scalar>(traj: &Tensor<S>, target: &[usize]) -> Result<Tensor<S>, FieldError> {
    let rank = traj.shape().len();
    let n_spatial = rank - 2;
    assert_eq!(target.len(), n_spatial, "one target extent per spatial axis");
    for &e in target {
        if e < 1 {
            return Err(FieldError::BadResampleTarget(e));
        }
    }
    let mut cur = traj.clone();
    for (axis, &te) in target.iter().enumerate() {
        cur = resample_axis(&cur, axis + 1, te);
    }
    Ok(cur)
}

fn resample_axis<S: Scalar>(t: &Tensor<S>, axis: usize, target: usize) -> Tensor<S> {
    let shape = t.shape().to_vec();
    let src_n = shape[axis];
    if src_n == target {
        return t.clone();
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut new_shape = shape.clone();
    new_shape[axis] = target;
    let mut out = Tensor::zeros(&new_shape);
    let dst = out.data_mut();
    let src = t.data();
    for j in 0..target {
        // endpoint-aligned sample position on the source grid
        let x = if target == 1 {
            0.0
        } else {
            j as f64 * (src_n - 1) as f64 / (target - 1) as f64
        };
        let i0 = (x.floor() as usize).min(src_n - 1);
        let i1 = (i0 + 1).min(src_n - 1);
        let frac = S::from_f64(x - i0 as f64);
        let one_m = S::ONE - frac;
        for o in 0..outer {
            let src0 = (o * src_n + i0) * inner;
            let src1 = (o * src_n + i1) * inner;
            let db = (o * target + j) * inner;
            for k in 0..inner {
                dst[db + k] = src[src0 + k] * one_m + src[src1 + k] * frac;
            }
        }
    }
    out
}
