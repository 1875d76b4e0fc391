//! Unified condition encoder: self-attention with 4D RoPE over history
//! tokens, Fourier-featured temporal aggregation over the patch-time axis,
//! and Perceiver-style pooling into a compact condition vector.

use std::rc::Rc;

use crate::field::{DimType, Unified4DField};
use crate::model::{pack_token_batch, ModelConfig, ModelError};
use crate::nn::{multihead_attention, transformer_block, BlockConfig, Ctx, ParamStore, ValId};
use crate::tensor::{Scalar, Tensor};

/// Dense condition tokens plus the pooled compact condition vector.
#[derive(Clone, Debug)]
pub struct ConditionBundle<S> {
    /// (B, L_c, d_model)
    pub c_tok: Tensor<S>,
    /// Shared 4D coordinates of the condition tokens.
    pub coords: Rc<Vec<[i64; 4]>>,
    /// (B, d_model)
    pub c_g: Tensor<S>,
    pub dim_type: DimType,
    /// Per-item flag: condition replaced by the learned null bundle.
    pub is_null: Vec<bool>,
}

pub struct EncoderOut {
    pub c_tok: ValId,
    pub c_g: ValId,
}

/// Builds the encoder forward graph on token inputs (B, L_c, V_tok).
pub fn build_encoder<S: Scalar>(
    ctx: &mut Ctx<S>,
    cfg: &ModelConfig,
    tokens: ValId,
    coords: Rc<Vec<[i64; 4]>>,
    dim_type: DimType,
    t_patches: usize,
) -> Result<EncoderOut, ModelError> {
    let rope = cfg.rope()?;
    let batch = ctx.tape.value(tokens).shape()[0];
    let l_c = ctx.tape.value(tokens).shape()[1];
    debug_assert_eq!(l_c % t_patches, 0);
    let spatial = l_c / t_patches;

    let (ew, eb) = (ctx.p("enc.embed.w"), ctx.p("enc.embed.b"));
    let mut x = ctx.tape.affine(tokens, ew, Some(eb));

    // blocks share one AdaLN conditioning vector: the dim_type embedding
    let table = ctx.p("enc.dimemb");
    let dim_row = ctx.tape.select_row(table, dim_type.index());
    let cond3 = ctx.tape.broadcast_vec(dim_row, batch, 1);
    let cond = ctx.tape.reshape(cond3, &[batch, cfg.d_model]);

    let block_cfg = BlockConfig {
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        mlp_ratio: cfg.mlp_ratio,
        has_cross_attention: false,
    };
    for i in 0..cfg.encoder_depth {
        x = transformer_block(ctx, &format!("enc.blk{i}"), x, cond, &block_cfg, &rope, coords.clone(), None);
    }
    let c_tok = x;

    let tilde = temporal_aggregate(ctx, cfg, c_tok, t_patches, spatial);
    let c_g = spatial_aggregate(ctx, cfg, tilde, batch);
    Ok(EncoderOut { c_tok, c_g })
}

/// Collapses the patch-time axis: sum over t of (W_t c^{t,s}) modulated by
/// Fourier phase factors of the normalized patch time. Tokens are ordered
/// time-major by patchify, so each patch-time group is a contiguous row
/// slice.
pub fn temporal_aggregate<S: Scalar>(
    ctx: &mut Ctx<S>,
    cfg: &ModelConfig,
    c_tok: ValId,
    t_patches: usize,
    spatial: usize,
) -> ValId {
    let trained = cfg.history_patch_times();
    let gamma = ctx.p("enc.tagg.gamma");
    let mut acc: Option<ValId> = None;
    for ti in 0..t_patches {
        // normalized discrete timestep (1-based over the window)
        let t_bar = (ti + 1) as f64 / t_patches as f64;
        // nearest trained map index for variable-length histories
        let widx = ((ti as f64 + 0.5) * trained as f64 / t_patches as f64).floor() as usize;
        let widx = widx.min(trained - 1);
        let w = ctx.p(&format!("enc.tagg.w{widx}"));
        let grp = ctx.tape.slice_rows(c_tok, ti * spatial, spatial);
        let mapped = ctx.tape.affine(grp, w, None);
        let phase = ctx.tape.fourier_phase(gamma, t_bar);
        let term = ctx.tape.mul_vec(mapped, phase);
        acc = Some(match acc {
            None => term,
            Some(a) => ctx.tape.add(a, term),
        });
    }
    acc.expect("at least one patch-time group")
}

/// Perceiver-style pooling: one learnable query attends over the aggregated
/// spatial patches. No positional encoding.
pub fn spatial_aggregate<S: Scalar>(ctx: &mut Ctx<S>, cfg: &ModelConfig, tilde: ValId, batch: usize) -> ValId {
    let q = ctx.p("enc.pool.query");
    let qb = ctx.tape.broadcast_vec(q, batch, 1);
    let pooled = multihead_attention(ctx, "enc.pool", qb, tilde, cfg.n_heads, None, None, None);
    ctx.tape.reshape(pooled, &[batch, cfg.d_model])
}

/// Encodes a batch of equally-shaped normalized history windows. The
/// encoder runs once per call; its outputs are reused across ODE steps.
pub fn encode_history<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &ModelConfig,
    hists: &[&Unified4DField<S>],
) -> Result<ConditionBundle<S>, ModelError> {
    let (tokens, coords, template) = pack_token_batch(hists, cfg.patch, 0)?;
    let t_patches = template.grid[0];
    let dim_type = hists[0].dim_type;
    let mut ctx = Ctx::new(params);
    let tok_id = ctx.c(tokens);
    let out = build_encoder(&mut ctx, cfg, tok_id, coords.clone(), dim_type, t_patches)?;
    Ok(ConditionBundle {
        c_tok: ctx.tape.value(out.c_tok).clone(),
        coords,
        c_g: ctx.tape.value(out.c_g).clone(),
        dim_type,
        is_null: vec![false; hists.len()],
    })
}

/// The learned null bundle used for classifier-free guidance: every dense
/// token row and the compact vector come from the null parameters.
pub fn null_bundle<S: Scalar>(params: &ParamStore<S>, like: &ConditionBundle<S>) -> ConditionBundle<S> {
    let d = like.c_g.shape()[1];
    let b = like.c_g.shape()[0];
    let l_c = like.c_tok.shape()[1];
    let tok_row = params.get("null.ctok").data();
    let cg_row = params.get("null.cg").data();
    let mut c_tok = Vec::with_capacity(b * l_c * d);
    for _ in 0..b * l_c {
        c_tok.extend_from_slice(tok_row);
    }
    let mut c_g = Vec::with_capacity(b * d);
    for _ in 0..b {
        c_g.extend_from_slice(cg_row);
    }
    ConditionBundle {
        c_tok: Tensor::from_vec(&[b, l_c, d], c_tok),
        coords: like.coords.clone(),
        c_g: Tensor::from_vec(&[b, d], c_g),
        dim_type: like.dim_type,
        is_null: vec![true; b],
    }
}
