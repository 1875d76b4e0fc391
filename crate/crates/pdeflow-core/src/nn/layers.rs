//! Composite layers built from tape ops: multi-head attention with optional
//! 4D RoPE, feed-forward, AdaLN-modulated pre-norm blocks, time featurizer.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::tape::{Tape, ValId};
use super::{GradMap, ParamStore};
use crate::rope::RopeConfig;
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// Per-block shape configuration.
#[derive(Clone, Copy, Debug)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub has_cross_attention: bool,
}

impl BlockConfig {
    pub fn new(d_model: usize, n_heads: usize, has_cross_attention: bool) -> Self {
        assert_eq!(d_model % n_heads, 0, "d_model must divide by n_heads");
        BlockConfig { d_model, n_heads, mlp_ratio: 4.0, has_cross_attention }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn hidden(&self) -> usize {
        (self.mlp_ratio * self.d_model as f64).round() as usize
    }
}

/// Forward-graph builder: a tape plus leaf handles for named parameters.
pub struct Ctx<'a, S: Scalar> {
    pub tape: Tape<S>,
    params: &'a ParamStore<S>,
    ids: BTreeMap<String, ValId>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(params: &'a ParamStore<S>) -> Self {
        Ctx { tape: Tape::new(), params, ids: BTreeMap::new() }
    }

    /// Leaf for a named parameter (cached, so each parameter appears once).
    pub fn p(&mut self, name: &str) -> ValId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.tape.leaf(self.params.get(name).clone());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn c(&mut self, t: Tensor<S>) -> ValId {
        self.tape.constant(t)
    }

    pub fn params(&self) -> &ParamStore<S> {
        self.params
    }

    /// Runs backward from `loss` and returns gradients keyed by param name.
    pub fn grads(&self, loss: ValId) -> GradMap<S> {
        let raw = self.tape.backward(loss);
        let mut out = GradMap::new();
        for (name, &id) in &self.ids {
            if let Some(g) = &raw[id.0] {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Softmax attention with per-head scale 1/sqrt(head_dim); RoPE rotates
/// queries and keys with each side's own coordinates when given.
#[allow(clippy::too_many_arguments)]
pub fn multihead_attention<S: Scalar>(
    ctx: &mut Ctx<S>,
    prefix: &str,
    q_in: ValId,
    kv_in: ValId,
    n_heads: usize,
    rope: Option<&RopeConfig>,
    q_coords: Option<Rc<Vec<[i64; 4]>>>,
    k_coords: Option<Rc<Vec<[i64; 4]>>>,
) -> ValId {
    let d = *ctx.tape.value(q_in).shape().last().unwrap();
    let head_dim = d / n_heads;
    let (wq, bq) = (ctx.p(&format!("{prefix}.wq")), ctx.p(&format!("{prefix}.bq")));
    let (wk, bk) = (ctx.p(&format!("{prefix}.wk")), ctx.p(&format!("{prefix}.bk")));
    let (wv, bv) = (ctx.p(&format!("{prefix}.wv")), ctx.p(&format!("{prefix}.bv")));
    let (wo, bo) = (ctx.p(&format!("{prefix}.wo")), ctx.p(&format!("{prefix}.bo")));
    let q = ctx.tape.affine(q_in, wq, Some(bq));
    let k = ctx.tape.affine(kv_in, wk, Some(bk));
    let v = ctx.tape.affine(kv_in, wv, Some(bv));
    let mut qh = ctx.tape.split_heads(q, n_heads);
    let mut kh = ctx.tape.split_heads(k, n_heads);
    let vh = ctx.tape.split_heads(v, n_heads);
    if let Some(cfg) = rope {
        debug_assert_eq!(cfg.head_dim, head_dim);
        if let Some(qc) = q_coords {
            qh = ctx.tape.rope(qh, qc, *cfg);
        }
        if let Some(kc) = k_coords {
            kh = ctx.tape.rope(kh, kc, *cfg);
        }
    }
    let scores = ctx.tape.bmm(qh, kh, true);
    let scaled = ctx.tape.scale(scores, S::from_f64(1.0 / (head_dim as f64).sqrt()));
    let attn = ctx.tape.softmax(scaled);
    let ctx_heads = ctx.tape.bmm(attn, vh, false);
    let merged = ctx.tape.merge_heads(ctx_heads, n_heads);
    ctx.tape.affine(merged, wo, Some(bo))
}

/// Two affine maps with a GELU between; hidden width = mlp_ratio * d_model.
pub fn feedforward<S: Scalar>(ctx: &mut Ctx<S>, prefix: &str, x: ValId) -> ValId {
    let (w1, b1) = (ctx.p(&format!("{prefix}.w1")), ctx.p(&format!("{prefix}.b1")));
    let (w2, b2) = (ctx.p(&format!("{prefix}.w2")), ctx.p(&format!("{prefix}.b2")));
    let h = ctx.tape.affine(x, w1, Some(b1));
    let h = ctx.tape.gelu(h);
    ctx.tape.affine(h, w2, Some(b2))
}

/// gamma/beta modulation of a layer-normed input: (1 + gamma) * LN(x) + beta.
pub fn adaln_modulate<S: Scalar>(ctx: &mut Ctx<S>, x: ValId, gamma: ValId, beta: ValId) -> ValId {
    let h = ctx.tape.layer_norm(x, LN_EPS);
    let h = ctx.tape.mod_scale(h, gamma, true);
    ctx.tape.mod_shift(h, beta)
}

/// Pre-norm transformer block with AdaLN modulation and gated residuals.
/// With zero-initialized modulation heads every branch gate is zero, so the
/// block is the identity at initialization.
#[allow(clippy::too_many_arguments)]
pub fn transformer_block<S: Scalar>(
    ctx: &mut Ctx<S>,
    prefix: &str,
    mut x: ValId,
    cond: ValId,
    cfg: &BlockConfig,
    rope: &RopeConfig,
    self_coords: Rc<Vec<[i64; 4]>>,
    cross: Option<(ValId, Rc<Vec<[i64; 4]>>)>,
) -> ValId {
    let d = cfg.d_model;
    let n_chunks = if cfg.has_cross_attention { 9 } else { 6 };
    let act = ctx.tape.silu(cond);
    let (mw, mb) = (ctx.p(&format!("{prefix}.mod.w")), ctx.p(&format!("{prefix}.mod.b")));
    let mods = ctx.tape.affine(act, mw, Some(mb));
    let chunk = |ctx: &mut Ctx<S>, mods: ValId, i: usize| ctx.tape.slice_last(mods, i * d, d);
    debug_assert_eq!(ctx.tape.value(mods).shape().last(), Some(&(n_chunks * d)));

    // self-attention branch
    let g1 = chunk(ctx, mods, 0);
    let gamma1 = chunk(ctx, mods, 1);
    let beta1 = chunk(ctx, mods, 2);
    let h = adaln_modulate(ctx, x, gamma1, beta1);
    let a = multihead_attention(
        ctx,
        &format!("{prefix}.attn"),
        h,
        h,
        cfg.n_heads,
        Some(rope),
        Some(self_coords.clone()),
        Some(self_coords.clone()),
    );
    let gated = ctx.tape.mod_scale(a, g1, false);
    x = ctx.tape.add(x, gated);

    // cross-attention branch
    let mut next = 3;
    if let Some((c_tok, c_coords)) = cross {
        let gx = chunk(ctx, mods, next);
        let gammax = chunk(ctx, mods, next + 1);
        let betax = chunk(ctx, mods, next + 2);
        next += 3;
        let h = adaln_modulate(ctx, x, gammax, betax);
        let a = multihead_attention(
            ctx,
            &format!("{prefix}.xattn"),
            h,
            c_tok,
            cfg.n_heads,
            Some(rope),
            Some(self_coords.clone()),
            Some(c_coords),
        );
        let gated = ctx.tape.mod_scale(a, gx, false);
        x = ctx.tape.add(x, gated);
    }

    // feed-forward branch
    let g2 = chunk(ctx, mods, next);
    let gamma2 = chunk(ctx, mods, next + 1);
    let beta2 = chunk(ctx, mods, next + 2);
    let h = adaln_modulate(ctx, x, gamma2, beta2);
    let f = feedforward(ctx, &format!("{prefix}.ffn"), h);
    let gated = ctx.tape.mod_scale(f, g2, false);
    ctx.tape.add(x, gated)
}

/// Sinusoidal features of a noise level t in [0,1]: cos half then sin half,
/// frequencies geometric in [1, 1000).
pub fn time_features<S: Scalar>(t: &[S], dim: usize) -> Tensor<S> {
    assert!(dim >= 2 && dim.is_multiple_of(2));
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        let tf = tv.to_f64();
        for j in 0..half {
            out.push(S::from_f64((tf * freq(j, half)).cos()));
        }
        for j in 0..half {
            out.push(S::from_f64((tf * freq(j, half)).sin()));
        }
    }
    Tensor::from_vec(&[t.len(), dim], out)
}

/// Analytic d/dt of `time_features` for one t.
pub fn time_features_dt(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let w = freq(j, half);
        out.push(-w * (t * w).sin());
    }
    for j in 0..half {
        let w = freq(j, half);
        out.push(w * (t * w).cos());
    }
    out
}

fn freq(j: usize, half: usize) -> f64 {
    if half <= 1 {
        1.0
    } else {
        (1000.0f64).powf(j as f64 / half as f64)
    }
}
