//! Coordinate-aware transformer denoiser: x-prediction on noisy
//! future-window tokens with cross-attention to the condition tokens and
//! AdaLN conditioning on (t, c_g, dim_type), plus the analytic conversion
//! from the network head to a flow velocity.

use std::rc::Rc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoder::ConditionBundle;
use crate::field::{unpatchify, Unified4DField};
use crate::model::{pack_token_batch, ModelConfig, ModelError, PredTarget};
use crate::nn::{adaln_modulate, time_features, transformer_block, BlockConfig, Ctx, ParamStore, ValId};
use crate::tensor::{Scalar, Tensor};

/// Floor applied to t in the noise-prediction conversion; that route
/// divides by t and is reported unstable, kept for the ablation harness.
pub const EPS_PRED_T_FLOOR: f64 = 1e-4;

/// A noised state on the linear interpolation path z_t = t x + (1-t) eps.
#[derive(Clone, Debug)]
pub struct FlowSample<S> {
    pub z_t: Unified4DField<S>,
    pub t: S,
    pub eps: Unified4DField<S>,
}

/// Draws eps ~ N(0,1) on valid cells only (masked channels and padding stay
/// exactly zero) and interpolates z_t = t x + (1-t) eps.
pub fn make_flow_sample<S: Scalar>(x: &Unified4DField<S>, t: S, rng: &mut ChaCha8Rng) -> FlowSample<S> {
    let validity = x.validity();
    let mut eps = x.clone();
    {
        let buf = eps.data.data_mut();
        for (v, &m) in buf.iter_mut().zip(validity.data()) {
            *v = if m == S::ONE {
                S::from_f64(rng.sample::<f64, _>(StandardNormal))
            } else {
                S::ZERO
            };
        }
    }
    let one_m = S::ONE - t;
    let z = x.data.zip_map(&eps.data, |xv, ev| t * xv + one_m * ev);
    let mut z_t = x.clone();
    z_t.data = z;
    FlowSample { z_t, t, eps }
}

/// v = (x_hat - z_t) / ((1 - t) + eps_stab), elementwise.
pub fn x_to_velocity<S: Scalar>(x_hat: &Tensor<S>, z_t: &Tensor<S>, t: S, eps_stab: S) -> Tensor<S> {
    let denom = (S::ONE - t) + eps_stab;
    x_hat.zip_map(z_t, |x, z| (x - z) / denom)
}

/// Sinusoidal noise-level features followed by a learned affine map.
pub fn embed_time<S: Scalar>(ctx: &mut Ctx<S>, t: &[S], dim: usize) -> ValId {
    let feats = ctx.c(time_features(t, dim));
    let (w, b) = (ctx.p("den.time.w"), ctx.p("den.time.b"));
    ctx.tape.affine(feats, w, Some(b))
}

/// Builds the denoiser graph on token inputs; returns head output tokens
/// (B, L, V_tok). The head's meaning depends on `cfg.prediction_target`.
#[allow(clippy::too_many_arguments)]
pub fn build_denoiser<S: Scalar>(
    ctx: &mut Ctx<S>,
    cfg: &ModelConfig,
    z_tokens: ValId,
    fut_coords: Rc<Vec<[i64; 4]>>,
    t: &[S],
    c_tok: ValId,
    cond_coords: Rc<Vec<[i64; 4]>>,
    c_g: ValId,
    dim_type: crate::field::DimType,
) -> Result<ValId, ModelError> {
    let rope = cfg.rope()?;
    let batch = ctx.tape.value(z_tokens).shape()[0];
    debug_assert_eq!(t.len(), batch);

    let (ew, eb) = (ctx.p("den.embed.w"), ctx.p("den.embed.b"));
    let mut x = ctx.tape.affine(z_tokens, ew, Some(eb));

    // AdaLN conditioning vector: time embedding + projected c_g + dim_type
    let t_emb = embed_time(ctx, t, cfg.time_embed_dim);
    let cgw = ctx.p("den.cg.w");
    let cg_proj = ctx.tape.affine(c_g, cgw, None);
    let table = ctx.p("den.dimemb");
    let dim_row = ctx.tape.select_row(table, dim_type.index());
    let dim3 = ctx.tape.broadcast_vec(dim_row, batch, 1);
    let dim_b = ctx.tape.reshape(dim3, &[batch, cfg.d_model]);
    let cond = ctx.tape.add(t_emb, cg_proj);
    let cond = ctx.tape.add(cond, dim_b);

    let block_cfg = BlockConfig {
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        mlp_ratio: cfg.mlp_ratio,
        has_cross_attention: true,
    };
    for i in 0..cfg.denoiser_depth {
        x = transformer_block(
            ctx,
            &format!("den.blk{i}"),
            x,
            cond,
            &block_cfg,
            &rope,
            fut_coords.clone(),
            Some((c_tok, cond_coords.clone())),
        );
    }

    // final modulated norm then zero-initialized projection head
    let (fw, fb) = (ctx.p("den.final.mod.w"), ctx.p("den.final.mod.b"));
    let act = ctx.tape.silu(cond);
    let fmods = ctx.tape.affine(act, fw, Some(fb));
    let gamma = ctx.tape.slice_last(fmods, 0, cfg.d_model);
    let beta = ctx.tape.slice_last(fmods, cfg.d_model, cfg.d_model);
    let h = adaln_modulate(ctx, x, gamma, beta);
    let (hw, hb) = (ctx.p("den.head.w"), ctx.p("den.head.b"));
    Ok(ctx.tape.affine(h, hw, Some(hb)))
}

fn check_bundle<S: Scalar>(
    cfg: &ModelConfig,
    z_t: &[&Unified4DField<S>],
    cond: &ConditionBundle<S>,
) -> Result<(), ModelError> {
    if z_t.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if cond.c_g.shape()[0] != z_t.len() {
        return Err(ModelError::ConditionMismatch(format!(
            "bundle batch {} vs input batch {}",
            cond.c_g.shape()[0],
            z_t.len()
        )));
    }
    if cond.dim_type != z_t[0].dim_type {
        return Err(ModelError::ConditionMismatch("dim_type differs from history".into()));
    }
    if cond.c_g.shape()[1] != cfg.d_model {
        return Err(ModelError::ConditionMismatch("condition width differs from model".into()));
    }
    Ok(())
}

/// Raw network head output as fields, masked channels forced to zero.
/// For the default x-prediction target this is the predicted clean window.
pub fn forward_fields<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &ModelConfig,
    z_t: &[&Unified4DField<S>],
    t: &[S],
    cond: &ConditionBundle<S>,
) -> Result<Vec<Unified4DField<S>>, ModelError> {
    check_bundle(cfg, z_t, cond)?;
    let (tokens, coords, template) = pack_token_batch(z_t, cfg.patch, cfg.history_len as i64)?;
    let mut ctx = Ctx::new(params);
    let tok_id = ctx.c(tokens);
    let ctok_id = ctx.c(cond.c_tok.clone());
    let cg_id = ctx.c(cond.c_g.clone());
    let out = build_denoiser(
        &mut ctx,
        cfg,
        tok_id,
        coords,
        t,
        ctok_id,
        cond.coords.clone(),
        cg_id,
        z_t[0].dim_type,
    )?;
    let out_tokens = ctx.tape.value(out);
    let l = template.len();
    let v = template.vec_len();
    let meta = z_t[0].meta();
    let mut fields = Vec::with_capacity(z_t.len());
    for (bi, zf) in z_t.iter().enumerate() {
        let mut toks = template.clone();
        toks.vectors = Tensor::from_vec(&[l, v], out_tokens.data()[bi * l * v..(bi + 1) * l * v].to_vec());
        let mut f = unpatchify(&toks, &meta)?;
        // mask contract: output masked channels are identically zero
        let c = f.c_max();
        let buf = f.data.data_mut();
        for (i, val) in buf.iter_mut().enumerate() {
            if !zf.mask[i % c] {
                *val = S::ZERO;
            }
        }
        f.native_shape = zf.native_shape.clone();
        fields.push(f);
    }
    Ok(fields)
}

/// Predicted clean future window (x-prediction path).
pub fn predict_x<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &ModelConfig,
    z_t: &[&Unified4DField<S>],
    t: &[S],
    cond: &ConditionBundle<S>,
) -> Result<Vec<Unified4DField<S>>, ModelError> {
    debug_assert_eq!(cfg.prediction_target, PredTarget::X);
    forward_fields(params, cfg, z_t, t, cond)
}

/// Velocity fields for the ODE sampler: the head output converted per the
/// configured prediction target.
pub fn model_velocity<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &ModelConfig,
    z_t: &[&Unified4DField<S>],
    t: &[S],
    cond: &ConditionBundle<S>,
    eps_stab: S,
) -> Result<Vec<Unified4DField<S>>, ModelError> {
    let outs = forward_fields(params, cfg, z_t, t, cond)?;
    let mut vels = Vec::with_capacity(outs.len());
    for (bi, out) in outs.into_iter().enumerate() {
        let tv = t[bi];
        let mut v = out;
        v.data = match cfg.prediction_target {
            PredTarget::X => x_to_velocity(&v.data, &z_t[bi].data, tv, eps_stab),
            PredTarget::V => v.data,
            PredTarget::Eps => {
                let tf = tv.maximum(S::from_f64(EPS_PRED_T_FLOOR));
                z_t[bi].data.zip_map(&v.data, |z, e| (z - e) / tf)
            }
        };
        vels.push(v);
    }
    Ok(vels)
}
