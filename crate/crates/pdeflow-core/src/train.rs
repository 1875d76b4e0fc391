//! Flow-matching training: logit-normal noise-level sampling with an exact
//! t=0 reconstruction branch, masked velocity loss, condition dropout,
//! AdamW with warmup+cosine schedule, and dimension-homogeneous mixed
//! batching. Every random draw is derived from (seed, step, stream), so a
//! resumed run replays the identical stream.

use std::io::Write;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::datagen::DatasetContainer;
use crate::denoiser::{build_denoiser, make_flow_sample, EPS_PRED_T_FLOOR};
use crate::encoder::{build_encoder, ConditionBundle};
use crate::field::{apply_norm, canonicalize, fit_norm, NormStats, Unified4DField};
use crate::model::{pack_token_batch, ModelConfig, ModelError, PredTarget};
use crate::nn::{Ctx, GradMap, ParamStore, ValId};
use crate::tensor::{Scalar, Tensor};

pub const STREAM_BATCH: u64 = 0x01;
pub const STREAM_TIME: u64 = 0x02;
pub const STREAM_NOISE: u64 = 0x03;
pub const STREAM_DROPOUT: u64 = 0x04;
pub const STREAM_VALIDATE: u64 = 0x05;

/// Stateless per-step RNG: resuming from a checkpoint replays the exact
/// stream without serializing generator state.
pub fn stream_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut x = seed ^ stream.rotate_left(24) ^ step.wrapping_mul(0x9e3779b97f4a7c15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training windows: every trajectory is shorter than history+horizon")]
    NoWindows,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub p_mean: f64,
    pub p_std: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub p_t0: f64,
    pub cond_dropout: f64,
    /// Per-dimension batch sizes for 1D/2D/3D.
    pub batch_sizes: [usize; 3],
    /// Dataset sampling weights by dimensionality.
    pub dim_weights: [f64; 3],
    pub eps_stab: f64,
    pub validate_every_epochs: usize,
    pub checkpoint_every_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            min_lr: 1e-6,
            weight_decay: 1e-4,
            warmup_frac: 0.05,
            grad_clip_norm: 1.0,
            epochs: 200,
            p_mean: -0.8,
            p_std: 0.8,
            t_min: 1e-4,
            t_max: 1.0,
            p_t0: 0.1,
            cond_dropout: 0.1,
            batch_sizes: [16, 8, 4],
            dim_weights: [1.0, 1.0, 5.0],
            eps_stab: 1e-4,
            validate_every_epochs: 5,
            checkpoint_every_epochs: 25,
            seed: 0,
        }
    }
}

/// Noise level: exactly 0 with probability p_t0, otherwise logit-normal
/// clamped to [t_min, t_max].
pub fn sample_time(rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> f64 {
    if rng.random::<f64>() < cfg.p_t0 {
        return 0.0;
    }
    let g: f64 = rng.sample::<f64, _>(StandardNormal);
    let t = 1.0 / (1.0 + (-(cfg.p_mean + cfg.p_std * g)).exp());
    t.clamp(cfg.t_min, cfg.t_max)
}

/// Linear warmup to base_lr, then cosine decay to min_lr. Continuous at the
/// junction, exactly base_lr at warmup end and exactly min_lr at the last
/// step.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    let warmup = ((total_steps as f64) * cfg.warmup_frac).round() as u64;
    if step <= warmup {
        if warmup == 0 {
            return cfg.base_lr;
        }
        return cfg.base_lr * step as f64 / warmup as f64;
    }
    let denom = (total_steps - warmup).max(1);
    let progress = (step - warmup) as f64 / denom as f64;
    cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Masked flow-matching velocity loss on plain tensors: mean over valid
/// entries of (v_hat - v_target)^2 with both sides sharing the denominator
/// (1 - t) + eps_stab. The z_t terms of prediction and target cancel, so
/// the difference is evaluated as (x_hat - x)/denom; at t=0 with
/// eps_stab=0 this is bit-exactly the reconstruction MSE.
pub fn v_loss<S: Scalar>(
    x_hat: &Tensor<S>,
    x: &Tensor<S>,
    z_t: &Tensor<S>,
    t: S,
    mask: &Tensor<S>,
    eps_stab: S,
) -> S {
    debug_assert_eq!(x_hat.shape(), z_t.shape());
    let denom = (S::ONE - t) + eps_stab;
    let mut acc = S::ZERO;
    let mut count = S::ZERO;
    for ((&xh, &xv), &m) in x_hat.data().iter().zip(x.data()).zip(mask.data()) {
        if m == S::ONE {
            let diff = (xh - xv) / denom;
            acc += diff * diff;
            count += S::ONE;
        }
    }
    acc / count
}

/// Detached condition dropout: each item is independently replaced by the
/// learned null bundle with probability p.
pub fn apply_cond_dropout<S: Scalar>(
    mut bundle: ConditionBundle<S>,
    params: &ParamStore<S>,
    rng: &mut ChaCha8Rng,
    p: f64,
) -> ConditionBundle<S> {
    let b = bundle.c_g.shape()[0];
    let l_c = bundle.c_tok.shape()[1];
    let d = bundle.c_g.shape()[1];
    let null_tok = params.get("null.ctok").data();
    let null_cg = params.get("null.cg").data();
    for bi in 0..b {
        if rng.random::<f64>() < p {
            bundle.is_null[bi] = true;
            for li in 0..l_c {
                let off = (bi * l_c + li) * d;
                bundle.c_tok.data_mut()[off..off + d].copy_from_slice(null_tok);
            }
            bundle.c_g.data_mut()[bi * d..(bi + 1) * d].copy_from_slice(null_cg);
        }
    }
    bundle
}

/// First/second moment tensors mirroring the parameter store.
#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub m: ParamStore<S>,
    pub v: ParamStore<S>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        OptimizerState { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// Scales gradients so the global norm is at most max_norm; returns the
/// pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut GradMap<S>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        sq += g.sq_norm().to_f64();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.scale_in_place(scale);
        }
    }
    norm
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Whether an optimizer update was applied or rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    RejectedNonFinite,
}

impl StepOutcome {
    pub fn applied(self) -> bool {
        self == StepOutcome::Applied
    }
}

/// Decoupled-weight-decay Adam with bias correction; arithmetic in f64 for
/// reproducibility across element types. Non-finite gradients reject the
/// update but still advance the step counter.
pub fn adamw_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &GradMap<S>,
    state: &mut OptimizerState<S>,
    lr: f64,
    weight_decay: f64,
) -> StepOutcome {
    state.step += 1;
    for g in grads.values() {
        if !g.all_finite() {
            return StepOutcome::RejectedNonFinite;
        }
    }
    let k = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(k);
    let bc2 = 1.0 - ADAM_BETA2.powi(k);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name);
        let m = state.m.get_mut(name);
        let v = state.v.get_mut(name);
        for i in 0..g.len() {
            let gi = g.data()[i].to_f64();
            let mi = ADAM_BETA1 * m.data()[i].to_f64() + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data()[i].to_f64() + (1.0 - ADAM_BETA2) * gi * gi;
            m.data_mut()[i] = S::from_f64(mi);
            v.data_mut()[i] = S::from_f64(vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let p_old = p.data()[i].to_f64();
            let update = m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * p_old;
            p.data_mut()[i] = S::from_f64(p_old - lr * update);
        }
    }
    StepOutcome::Applied
}

/// A (trajectory, window start) pair within one dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub dataset: usize,
    pub traj: usize,
    pub start: usize,
}

/// One dimension-homogeneous batch.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub dataset: usize,
    pub windows: Vec<WindowRef>,
}

/// Sliding windows at stride 1; trajectories shorter than history+horizon
/// are skipped.
pub fn window_counts(datasets: &[DatasetContainer], model: &ModelConfig) -> Vec<usize> {
    let need = model.history_len + model.horizon;
    datasets
        .iter()
        .map(|d| {
            let frames = d.header.frames();
            if frames < need {
                0
            } else {
                d.header.n_traj() * (frames - need + 1)
            }
        })
        .collect()
}

/// Weighted dataset choice then uniform window draws; deterministic given
/// (seed, step).
pub fn batch_for_step(
    datasets: &[DatasetContainer],
    model: &ModelConfig,
    cfg: &TrainConfig,
    step: u64,
) -> Result<BatchPlan, TrainError> {
    let counts = window_counts(datasets, model);
    let weights: Vec<f64> = datasets
        .iter()
        .zip(&counts)
        .map(|(d, &c)| {
            if c == 0 {
                0.0
            } else {
                cfg.dim_weights[d.header.dim_type.index()]
            }
        })
        .collect();
    let total_w: f64 = weights.iter().sum();
    if total_w <= 0.0 {
        return Err(TrainError::NoWindows);
    }
    let mut rng = stream_rng(cfg.seed, step, STREAM_BATCH);
    let mut pick = rng.random::<f64>() * total_w;
    let mut ds = 0;
    for (i, &w) in weights.iter().enumerate() {
        if pick < w {
            ds = i;
            break;
        }
        pick -= w;
        ds = i;
    }
    let d = &datasets[ds];
    let need = model.history_len + model.horizon;
    let starts = d.header.frames() - need + 1;
    let bs = cfg.batch_sizes[d.header.dim_type.index()];
    let windows = (0..bs)
        .map(|_| WindowRef {
            dataset: ds,
            traj: rng.random_range(0..d.header.n_traj()),
            start: rng.random_range(0..starts),
        })
        .collect();
    Ok(BatchPlan { dataset: ds, windows })
}

/// Normalized (history, future) pair with its normalization statistics.
pub struct WindowPair<S> {
    pub hist: Unified4DField<S>,
    pub fut: Unified4DField<S>,
    pub stats: NormStats<S>,
}

/// Extracts one training window and normalizes both halves with statistics
/// from the history half.
pub fn load_window<S: Scalar>(
    container: &DatasetContainer,
    model: &ModelConfig,
    w: WindowRef,
) -> Result<WindowPair<S>, TrainError> {
    let raw: Tensor<S> = container.trajectory(w.traj);
    let frames_total = container.header.frames();
    let need = model.history_len + model.horizon;
    debug_assert!(w.start + need <= frames_total);
    let per_frame: usize = raw.len() / frames_total;
    let window = Tensor::from_vec(
        &{
            let mut s = raw.shape().to_vec();
            s[0] = need;
            s
        },
        raw.data()[w.start * per_frame..(w.start + need) * per_frame].to_vec(),
    );
    let field = canonicalize(
        &window,
        &container.header.var_names,
        container.header.dim_type,
        &model.vocab,
        model.patch,
    )?;
    let hist = field.time_slice(0, model.history_len);
    let mut fut_all = field.time_slice(model.history_len, model.horizon);
    // the slice starts on the patch lattice only when history is aligned
    debug_assert_eq!(model.history_len % model.patch.t, 0);
    fut_all.native_shape.t = model.horizon;
    let stats = fit_norm(&hist)?;
    Ok(WindowPair {
        hist: apply_norm(&hist, &stats),
        fut: apply_norm(&fut_all, &stats),
        stats,
    })
}

/// Builds the full training graph for one batch and returns the scalar loss
/// node. The head output is compared to the velocity target with the
/// per-item algebra folded into constant offset/weight tensors, so one
/// graph shape serves x-, v-, and eps-prediction.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss_graph<S: Scalar>(
    ctx: &mut Ctx<S>,
    model: &ModelConfig,
    pairs: &[WindowPair<S>],
    ts: &[f64],
    drops: &[bool],
    noise_rng: &mut ChaCha8Rng,
    eps_stab: f64,
) -> Result<ValId, TrainError> {
    let batch = pairs.len();
    let hists: Vec<&Unified4DField<S>> = pairs.iter().map(|p| &p.hist).collect();
    let (hist_tokens, hist_coords, _) = pack_token_batch(&hists, model.patch, 0)?;
    let t_patches = pairs[0].hist.extents()[0] / model.patch.t;
    let dim_type = pairs[0].hist.dim_type;

    // flow samples on the normalized future windows
    let mut z_fields = Vec::with_capacity(batch);
    let mut eps_fields = Vec::with_capacity(batch);
    for (p, &t) in pairs.iter().zip(ts) {
        let s = make_flow_sample(&p.fut, S::from_f64(t), noise_rng);
        z_fields.push(s.z_t);
        eps_fields.push(s.eps);
    }
    let z_refs: Vec<&Unified4DField<S>> = z_fields.iter().collect();
    let (z_tokens, fut_coords, template) = pack_token_batch(&z_refs, model.patch, model.history_len as i64)?;
    let futs: Vec<&Unified4DField<S>> = pairs.iter().map(|p| &p.fut).collect();
    let (x_tokens, _, _) = pack_token_batch(&futs, model.patch, model.history_len as i64)?;
    let validity = crate::field::patchify(&pairs[0].fut.validity_field(), model.patch)?;

    // encoder with per-item null mixing
    let hist_tok_id = ctx.c(hist_tokens);
    let enc = build_encoder(ctx, model, hist_tok_id, hist_coords.clone(), dim_type, t_patches)?;
    let l_c = ctx.tape.value(enc.c_tok).shape()[1];
    let d = model.d_model;
    let mut keep_tok = Vec::with_capacity(batch * l_c * d);
    let mut keep_cg = Vec::with_capacity(batch * d);
    for &dropped in drops {
        let keep = if dropped { S::ZERO } else { S::ONE };
        keep_tok.extend(std::iter::repeat_n(keep, l_c * d));
        keep_cg.extend(std::iter::repeat_n(keep, d));
    }
    let keep_tok_c = ctx.c(Tensor::from_vec(&[batch, l_c, d], keep_tok.clone()));
    let drop_tok_c = ctx.c(Tensor::from_vec(&[batch, l_c, d], keep_tok.iter().map(|&k| S::ONE - k).collect()));
    let keep_cg_c = ctx.c(Tensor::from_vec(&[batch, d], keep_cg.clone()));
    let drop_cg_c = ctx.c(Tensor::from_vec(&[batch, d], keep_cg.iter().map(|&k| S::ONE - k).collect()));
    let null_tok = ctx.p("null.ctok");
    let null_cg = ctx.p("null.cg");
    let null_tok_b = ctx.tape.broadcast_vec(null_tok, batch, l_c);
    let null_cg_b3 = ctx.tape.broadcast_vec(null_cg, batch, 1);
    let null_cg_b = ctx.tape.reshape(null_cg_b3, &[batch, d]);
    let kept = ctx.tape.mul(enc.c_tok, keep_tok_c);
    let nulled = ctx.tape.mul(null_tok_b, drop_tok_c);
    let c_tok = ctx.tape.add(kept, nulled);
    let kept_g = ctx.tape.mul(enc.c_g, keep_cg_c);
    let nulled_g = ctx.tape.mul(null_cg_b, drop_cg_c);
    let c_g = ctx.tape.add(kept_g, nulled_g);

    // denoiser head
    let z_tok_id = ctx.c(z_tokens.clone());
    let t_s: Vec<S> = ts.iter().map(|&t| S::from_f64(t)).collect();
    let out = build_denoiser(ctx, model, z_tok_id, fut_coords, &t_s, c_tok, hist_coords, c_g, dim_type)?;

    // per-item velocity-loss algebra folded into offset and weight
    let l = template.len();
    let v_tok = template.vec_len();
    let count_valid: f64 = validity.vectors.data().iter().map(|v| v.to_f64()).sum::<f64>();
    let norm = 1.0 / (batch as f64 * count_valid);
    let mut offset = Vec::with_capacity(batch * l * v_tok);
    let mut weight = Vec::with_capacity(batch * l * v_tok);
    for (bi, &t) in ts.iter().enumerate() {
        // at exactly t=0 the velocity loss reduces to plain reconstruction,
        // so the stabilizer is dropped there
        let denom = if t == 0.0 { 1.0 } else { (1.0 - t) + eps_stab };
        let a2_w = match model.prediction_target {
            PredTarget::X => 1.0 / (denom * denom),
            PredTarget::V => 1.0,
            PredTarget::Eps => {
                let tf = t.max(EPS_PRED_T_FLOOR);
                1.0 / (tf * tf)
            }
        };
        for i in 0..l * v_tok {
            let x = x_tokens.data()[bi * l * v_tok + i].to_f64();
            let z = z_tokens.data()[bi * l * v_tok + i].to_f64();
            let off = match model.prediction_target {
                PredTarget::X => -x,
                PredTarget::V => -(x - z) / denom,
                PredTarget::Eps => {
                    let tf = ts[bi].max(EPS_PRED_T_FLOOR);
                    -z + tf * (x - z) / denom
                }
            };
            offset.push(S::from_f64(off));
            weight.push(S::from_f64(validity.vectors.data()[i].to_f64() * a2_w * norm));
        }
    }
    let off_c = ctx.c(Tensor::from_vec(&[batch, l, v_tok], offset));
    let w_c = ctx.c(Tensor::from_vec(&[batch, l, v_tok], weight));
    let diff = ctx.tape.add(out, off_c);
    let sq = ctx.tape.mul(diff, diff);
    let weighted = ctx.tape.mul(sq, w_c);
    Ok(ctx.tape.sum_all(weighted))
}

impl<S: Scalar> Unified4DField<S> {
    /// Validity as a field-shaped tensor wrapped for patchify.
    pub(crate) fn validity_field(&self) -> Unified4DField<S> {
        let mut f = self.clone();
        f.data = self.validity();
        f
    }
}

/// Per-step record for the metric log.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_curve: Vec<(u64, f64)>,
    pub val_curve: Vec<(u64, f64, f64)>,
    pub rejected_steps: u64,
}

/// Periodic checkpoint callback: (step, parameters, optimizer state).
pub type CheckpointHook<'a> = &'a mut dyn FnMut(u64, &ParamStore<f32>, &OptimizerState<f32>);

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub metric_log: Option<&'a mut dyn Write>,
    /// Called at every checkpoint cadence and once at the end.
    pub on_checkpoint: Option<CheckpointHook<'a>>,
    /// Resume point: skip steps below this.
    pub start_step: u64,
}


/// Steps per epoch: total windows divided by the weighted mean batch size.
pub fn steps_per_epoch(datasets: &[DatasetContainer], model: &ModelConfig, cfg: &TrainConfig) -> u64 {
    let counts = window_counts(datasets, model);
    let total: usize = counts.iter().sum();
    let mut wsum = 0.0;
    let mut bsum = 0.0;
    for (d, &c) in datasets.iter().zip(&counts) {
        if c == 0 {
            continue;
        }
        let w = cfg.dim_weights[d.header.dim_type.index()];
        wsum += w;
        bsum += w * cfg.batch_sizes[d.header.dim_type.index()] as f64;
    }
    if wsum == 0.0 {
        return 0;
    }
    let mean_bs = bsum / wsum;
    ((total as f64 / mean_bs).round() as u64).max(1)
}

/// One optimizer step on one planned batch; returns the loss value and the
/// pre-clip gradient norm, or None if the update was rejected.
pub fn train_step(
    params: &mut ParamStore<f32>,
    opt: &mut OptimizerState<f32>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    datasets: &[DatasetContainer],
    step: u64,
    total_steps: u64,
) -> Result<(f64, f64, bool), TrainError> {
    let plan = batch_for_step(datasets, model, cfg, step)?;
    let container = &datasets[plan.dataset];
    let pairs: Vec<WindowPair<f32>> = plan
        .windows
        .iter()
        .map(|&w| load_window(container, model, w))
        .collect::<Result<_, _>>()?;
    let mut t_rng = stream_rng(cfg.seed, step, STREAM_TIME);
    let ts: Vec<f64> = (0..pairs.len()).map(|_| sample_time(&mut t_rng, cfg)).collect();
    let mut d_rng = stream_rng(cfg.seed, step, STREAM_DROPOUT);
    let drops: Vec<bool> = (0..pairs.len()).map(|_| d_rng.random::<f64>() < cfg.cond_dropout).collect();
    let mut n_rng = stream_rng(cfg.seed, step, STREAM_NOISE);

    let mut ctx = Ctx::new(params);
    let loss_id = flow_loss_graph(&mut ctx, model, &pairs, &ts, &drops, &mut n_rng, cfg.eps_stab)?;
    let loss = ctx.tape.value(loss_id).data()[0] as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    let mut grads = ctx.grads(loss_id);
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
    let lr = lr_at(step + 1, total_steps, cfg);
    let accepted = adamw_step(params, &grads, opt, lr, cfg.weight_decay).applied();
    Ok((loss, grad_norm, accepted))
}

/// Validation loss: v-loss at deterministically sampled noise levels over
/// up to `max_windows` held-out windows.
pub fn validation_loss(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    val_data: &[DatasetContainer],
    epoch: u64,
    max_windows: usize,
) -> Result<f64, TrainError> {
    let mut rng = stream_rng(cfg.seed, epoch, STREAM_VALIDATE);
    let mut losses = Vec::new();
    for (di, d) in val_data.iter().enumerate() {
        let need = model.history_len + model.horizon;
        if d.header.frames() < need {
            continue;
        }
        let per_ds = max_windows.div_ceil(val_data.len()).max(1);
        for _ in 0..per_ds.min(d.header.n_traj()) {
            let w = WindowRef {
                dataset: di,
                traj: rng.random_range(0..d.header.n_traj()),
                start: 0,
            };
            let pair: WindowPair<f32> = load_window(d, model, w)?;
            let t = sample_time(&mut rng, cfg);
            let mut ctx = Ctx::new(params);
            let loss_id = flow_loss_graph(&mut ctx, model, &[pair], &[t], &[false], &mut rng, cfg.eps_stab)?;
            losses.push(ctx.tape.value(loss_id).data()[0] as f64);
        }
    }
    if losses.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Full training loop with periodic validation and checkpoint callbacks.
pub fn train(
    params: &mut ParamStore<f32>,
    opt: &mut OptimizerState<f32>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_data: &[DatasetContainer],
    val_data: &[DatasetContainer],
    mut opts: TrainOptions,
) -> Result<TrainReport, TrainError> {
    let spe = steps_per_epoch(train_data, model, cfg);
    if spe == 0 {
        return Err(TrainError::NoWindows);
    }
    let total_steps = spe * cfg.epochs as u64;
    let mut report = TrainReport::default();
    let start = std::time::Instant::now();
    for step in opts.start_step..total_steps {
        let (loss, grad_norm, accepted) =
            match train_step(params, opt, model, cfg, train_data, step, total_steps) {
                Ok(r) => r,
                Err(TrainError::NonFiniteLoss { step }) => {
                    // diagnostic state dump before aborting
                    if let Some(log) = opts.metric_log.as_deref_mut() {
                        let pnorm: f64 = params.iter().map(|(_, t)| t.sq_norm() as f64).sum::<f64>().sqrt();
                        let recent: Vec<f64> =
                            report.loss_curve.iter().rev().take(5).map(|&(_, l)| l).collect();
                        writeln!(
                            log,
                            "step={} event=nonfinite_loss param_norm={:.6e} recent_losses={:?}",
                            step + 1,
                            pnorm,
                            recent
                        )?;
                    }
                    return Err(TrainError::NonFiniteLoss { step });
                }
                Err(e) => return Err(e),
            };
        if !accepted {
            report.rejected_steps += 1;
            if let Some(log) = opts.metric_log.as_deref_mut() {
                writeln!(log, "step={} event=rejected_nonfinite_grads", step + 1)?;
            }
        }
        if step == opts.start_step {
            report.initial_loss = loss;
        }
        report.final_loss = loss;
        report.loss_curve.push((step + 1, loss));
        if let Some(log) = opts.metric_log.as_deref_mut() {
            writeln!(
                log,
                "step={} lr={:.6e} loss={:.6e} grad_norm={:.4e} wall_s={:.3}",
                step + 1,
                lr_at(step + 1, total_steps, cfg),
                loss,
                grad_norm,
                start.elapsed().as_secs_f64()
            )?;
        }
        let end_of_epoch = (step + 1) % spe == 0;
        if end_of_epoch {
            let epoch = (step + 1) / spe;
            if cfg.validate_every_epochs > 0
                && epoch.is_multiple_of(cfg.validate_every_epochs as u64)
                && !val_data.is_empty()
            {
                let vl = validation_loss(params, model, cfg, val_data, epoch, 8)?;
                report.val_curve.push((step + 1, vl, f64::NAN));
                if let Some(log) = opts.metric_log.as_deref_mut() {
                    writeln!(log, "step={} val_loss={:.6e}", step + 1, vl)?;
                }
            }
            if cfg.checkpoint_every_epochs > 0 && epoch.is_multiple_of(cfg.checkpoint_every_epochs as u64) {
                if let Some(cb) = opts.on_checkpoint.as_deref_mut() {
                    cb(step + 1, params, opt);
                }
            }
        }
    }
    report.steps = total_steps;
    if let Some(cb) = opts.on_checkpoint.as_deref_mut() {
        cb(total_steps, params, opt);
    }
    Ok(report)
}
