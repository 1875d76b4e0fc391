//! Probability-flow ODE generation of the future window in one shot:
//! fixed-step Euler and Heun integrators on a uniform grid over [0,1],
//! classifier-free guidance, and history-to-forecast convenience paths.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::denoiser::model_velocity;
use crate::encoder::{encode_history, null_bundle, ConditionBundle};
use crate::field::{apply_norm, fit_norm, invert_norm, NativeShape, NormStats, Unified4DField};
use crate::model::{ModelConfig, ModelError};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("non-finite state at integration step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Heun,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub solver: Solver,
    pub cfg_scale: f64,
    pub seed: u64,
    pub eps_stab: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { steps: 40, solver: Solver::Euler, cfg_scale: 2.0, seed: 0, eps_stab: 1e-4 }
    }
}

impl SampleConfig {
    /// 10-step fast-evaluation preset.
    pub fn fast(self) -> Self {
        SampleConfig { steps: 10, ..self }
    }
}

/// v = v_uncond + scale * (v_cond - v_uncond).
pub fn cfg_velocity<S: Scalar>(v_cond: &Tensor<S>, v_uncond: &Tensor<S>, scale: S) -> Tensor<S> {
    v_uncond.zip_map(v_cond, |u, c| u + scale * (c - u))
}

/// Integrates dz/dt = v(z, t) on the uniform grid t_k = k/steps. The last
/// velocity is evaluated at 1 - dt, never at the singular endpoint. Heun
/// uses a trapezoidal corrector with a plain Euler final step, so Heun with
/// steps = 1 is exactly Euler.
pub fn integrate<S: Scalar, F>(z0: Tensor<S>, steps: usize, solver: Solver, mut vel: F) -> Result<Tensor<S>, SampleError>
where
    F: FnMut(&Tensor<S>, f64) -> Result<Tensor<S>, SampleError>,
{
    assert!(steps >= 1);
    let dt = 1.0 / steps as f64;
    let dts = S::from_f64(dt);
    let half = S::from_f64(0.5 * dt);
    let mut z = z0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let v1 = vel(&z, t)?;
        let heun_corrector = matches!(solver, Solver::Heun) && k + 1 < steps;
        if heun_corrector {
            let z_pred = z.zip_map(&v1, |zv, vv| zv + dts * vv);
            let v2 = vel(&z_pred, t + dt)?;
            z = z.zip_map(&v1.zip_map(&v2, |a, b| a + b), |zv, vv| zv + half * vv);
        } else {
            z = z.zip_map(&v1, |zv, vv| zv + dts * vv);
        }
        if !z.all_finite() {
            return Err(SampleError::NonFinite { step: k });
        }
    }
    Ok(z)
}

/// Zero future-window template matching a history field's layout.
pub fn future_template<S: Scalar>(hist: &Unified4DField<S>, horizon: usize) -> Unified4DField<S> {
    let [_, h, w, d, c] = hist.extents();
    let frames = horizon.div_ceil(hist.patch.t) * hist.patch.t;
    Unified4DField {
        data: Tensor::zeros(&[frames, h, w, d, c]),
        mask: hist.mask.clone(),
        dim_type: hist.dim_type,
        patch: hist.patch,
        native_shape: NativeShape { t: horizon, spatial: hist.native_shape.spatial.clone() },
    }
}

/// Draws z_0 ~ N(0,1) on valid cells (masked channels and padding zero).
pub fn sample_initial_state<S: Scalar>(template: &Unified4DField<S>, rng: &mut ChaCha8Rng) -> Unified4DField<S> {
    let mut z = template.clone();
    let validity = template.validity();
    let buf = z.data.data_mut();
    for (v, &m) in buf.iter_mut().zip(validity.data()) {
        *v = if m == S::ONE {
            S::from_f64(rng.sample::<f64, _>(StandardNormal))
        } else {
            S::ZERO
        };
    }
    z
}

/// Generates normalized future windows from a precomputed condition bundle.
/// The condition is encoded once and reused across every ODE step; when
/// cfg_scale != 1 each step evaluates the denoiser twice (conditional and
/// learned-null branches).
pub fn sample_normalized<S: Scalar>(
    params: &ParamStore<S>,
    model: &ModelConfig,
    cond: &ConditionBundle<S>,
    template: &Unified4DField<S>,
    cfg: &SampleConfig,
) -> Result<Vec<Unified4DField<S>>, SampleError> {
    let batch = cond.c_g.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut states: Vec<Unified4DField<S>> = (0..batch).map(|_| sample_initial_state(template, &mut rng)).collect();
    let validity = template.validity();
    let use_cfg = cfg.cfg_scale != 1.0;
    let null = if use_cfg { Some(null_bundle(params, cond)) } else { None };
    let eps_stab = S::from_f64(cfg.eps_stab);
    let scale = S::from_f64(cfg.cfg_scale);

    // pack the whole batch into one flat tensor so `integrate` drives all
    // items with shared step times
    let per = template.data.len();
    let mut flat = Vec::with_capacity(batch * per);
    for s in &states {
        flat.extend_from_slice(s.data.data());
    }
    let z0 = Tensor::from_vec(&[batch * per], flat);

    let vel = |z: &Tensor<S>, t: f64| -> Result<Tensor<S>, SampleError> {
        let mut zs = Vec::with_capacity(batch);
        for bi in 0..batch {
            let mut f = template.clone();
            f.data = Tensor::from_vec(template.data.shape(), z.data()[bi * per..(bi + 1) * per].to_vec());
            zs.push(f);
        }
        let refs: Vec<&Unified4DField<S>> = zs.iter().collect();
        let ts = vec![S::from_f64(t); batch];
        let v_cond = model_velocity(params, model, &refs, &ts, cond, eps_stab)?;
        let v_final: Vec<Unified4DField<S>> = if let Some(nb) = &null {
            let v_uncond = model_velocity(params, model, &refs, &ts, nb, eps_stab)?;
            v_cond
                .into_iter()
                .zip(v_uncond)
                .map(|(c, u)| {
                    let mut f = c;
                    f.data = cfg_velocity(&f.data, &u.data, scale);
                    f
                })
                .collect()
        } else {
            v_cond
        };
        let mut out = Vec::with_capacity(batch * per);
        for f in &v_final {
            // keep padded cells pinned at zero so the state matches the
            // training-time token distribution
            for (v, &m) in f.data.data().iter().zip(validity.data()) {
                out.push(if m == S::ONE { *v } else { S::ZERO });
            }
        }
        Ok(Tensor::from_vec(&[batch * per], out))
    };

    let z1 = integrate(z0, cfg.steps, cfg.solver, vel)?;
    for (bi, s) in states.iter_mut().enumerate() {
        s.data = Tensor::from_vec(template.data.shape(), z1.data()[bi * per..(bi + 1) * per].to_vec());
    }
    Ok(states)
}

/// End-to-end forecast from raw history windows: normalize per history,
/// encode, integrate, denormalize.
pub fn sample<S: Scalar>(
    params: &ParamStore<S>,
    model: &ModelConfig,
    hists_raw: &[&Unified4DField<S>],
    cfg: &SampleConfig,
) -> Result<Vec<Unified4DField<S>>, SampleError> {
    let stats: Vec<NormStats<S>> = hists_raw
        .iter()
        .map(|h| fit_norm(h))
        .collect::<Result<_, _>>()?;
    let normed: Vec<Unified4DField<S>> = hists_raw.iter().zip(&stats).map(|(h, s)| apply_norm(h, s)).collect();
    let refs: Vec<&Unified4DField<S>> = normed.iter().collect();
    let cond = encode_history(params, model, &refs)?;
    let template = future_template(&normed[0], model.horizon);
    let outs = sample_normalized(params, model, &cond, &template, cfg)?;
    Ok(outs
        .into_iter()
        .zip(&stats)
        .map(|(f, s)| invert_norm(&f, s))
        .collect())
}

/// Per-history sampling with derived seeds and per-sample wall-clock time.
pub fn sample_batch<S: Scalar>(
    params: &ParamStore<S>,
    model: &ModelConfig,
    hists_raw: &[&Unified4DField<S>],
    cfg: &SampleConfig,
) -> Result<(Vec<Unified4DField<S>>, Vec<f64>), SampleError> {
    let mut fields = Vec::with_capacity(hists_raw.len());
    let mut times = Vec::with_capacity(hists_raw.len());
    for (i, h) in hists_raw.iter().enumerate() {
        let cfg_i = SampleConfig { seed: cfg.seed.wrapping_add(i as u64), ..*cfg };
        let start = Instant::now();
        let out = sample(params, model, &[*h], &cfg_i)?;
        times.push(start.elapsed().as_secs_f64());
        fields.extend(out);
    }
    Ok((fields, times))
}
