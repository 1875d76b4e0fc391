//! Evaluation metrics and harnesses: relative L2 (nRMSE), the persistence
//! yardstick, multi-resolution evaluation through the coordinate-aware
//! model, and the prediction-target ablation protocol.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::datagen::DatasetContainer;
use crate::field::{canonicalize, resample, Unified4DField};
use crate::model::{init_model_params, ModelConfig, PredTarget};
use crate::nn::ParamStore;
use crate::sampler::{sample, SampleConfig, SampleError};
use crate::tensor::{Scalar, Tensor};
use crate::train::{train, OptimizerState, TrainConfig, TrainError, TrainOptions, TrainReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset has no usable evaluation windows")]
    NoWindows,
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One evaluation result row.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
    pub samples: usize,
    pub resolution: String,
    pub solver_steps: usize,
    pub cfg_scale: f64,
    pub wall_time_s: f64,
}

/// Relative L2 over entries where mask = 1. Returns None (with a warning)
/// when the target has zero norm there.
pub fn nrmse_masked<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, mask: &Tensor<S>) -> Option<f64> {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for ((&p, &t), &m) in pred.data().iter().zip(target.data()).zip(mask.data()) {
        if m == S::ONE {
            let d = (p - t).to_f64();
            num += d * d;
            let tv = t.to_f64();
            den += tv * tv;
        }
    }
    if den == 0.0 {
        eprintln!("warning: zero-norm target excluded from nRMSE");
        return None;
    }
    Some((num / den).sqrt())
}

/// Relative L2 between two fields over the target's valid cells.
pub fn nrmse<S: Scalar>(pred: &Unified4DField<S>, target: &Unified4DField<S>) -> Option<f64> {
    nrmse_masked(&pred.data, &target.data, &target.validity())
}

/// Model-free forecast: the last observed history frame repeated over the
/// horizon.
pub fn persistence_baseline<S: Scalar>(history: &Unified4DField<S>, horizon: usize) -> Unified4DField<S> {
    let [_, h, w, d, c] = history.extents();
    let nt = history.native_shape.t;
    assert!(nt >= 1, "persistence needs at least one history frame");
    let frame_len = h * w * d * c;
    let last = &history.data.data()[(nt - 1) * frame_len..nt * frame_len];
    let frames = horizon.div_ceil(history.patch.t) * history.patch.t;
    let mut data = vec![S::ZERO; frames * frame_len];
    for f in 0..horizon {
        data[f * frame_len..(f + 1) * frame_len].copy_from_slice(last);
    }
    Unified4DField {
        data: Tensor::from_vec(&[frames, h, w, d, c], data),
        mask: history.mask.clone(),
        dim_type: history.dim_type,
        patch: history.patch,
        native_shape: crate::field::NativeShape { t: horizon, spatial: history.native_shape.spatial.clone() },
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub sample: SampleConfig,
    /// Cap on evaluated trajectories.
    pub max_windows: usize,
    /// Independent noise seeds per window (ensemble mean/std when > 1).
    pub n_seeds: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { sample: SampleConfig::default(), max_windows: 16, n_seeds: 1 }
    }
}

/// Raw (history, future-truth) pair at window start 0 of one trajectory.
fn eval_window<S: Scalar>(
    container: &DatasetContainer,
    model: &ModelConfig,
    traj: usize,
) -> Result<(Unified4DField<S>, Unified4DField<S>), EvalError> {
    let raw: Tensor<S> = container.trajectory(traj);
    let need = model.history_len + model.horizon;
    let frames_total = container.header.frames();
    if frames_total < need {
        return Err(EvalError::NoWindows);
    }
    let per_frame = raw.len() / frames_total;
    let window = Tensor::from_vec(
        &{
            let mut s = raw.shape().to_vec();
            s[0] = need;
            s
        },
        raw.data()[..need * per_frame].to_vec(),
    );
    let field = canonicalize(
        &window,
        &container.header.var_names,
        container.header.dim_type,
        &model.vocab,
        model.patch,
    )?;
    let hist = field.time_slice(0, model.history_len);
    let mut fut = field.time_slice(model.history_len, model.horizon);
    fut.native_shape.t = model.horizon;
    Ok((hist, fut))
}

/// Forecast nRMSE of a trained model over test trajectories; per-window
/// values are returned alongside the mean.
pub fn eval_model(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    container: &DatasetContainer,
    opts: &EvalOptions,
    dataset_id: &str,
    model_id: &str,
) -> Result<(EvalReport, Vec<f64>), EvalError> {
    let start = Instant::now();
    let n = container.header.n_traj().min(opts.max_windows);
    if n == 0 {
        return Err(EvalError::NoWindows);
    }
    let mut values = Vec::new();
    for traj in 0..n {
        let (hist, fut) = eval_window::<f32>(container, model, traj)?;
        for seed_i in 0..opts.n_seeds.max(1) {
            let cfg = SampleConfig {
                seed: opts
                    .sample
                    .seed
                    .wrapping_add((traj as u64) << 16)
                    .wrapping_add(seed_i as u64),
                ..opts.sample
            };
            let pred = sample(params, model, &[&hist], &cfg)?;
            if let Some(v) = nrmse(&pred[0], &fut) {
                values.push(v);
            }
        }
    }
    if values.is_empty() {
        return Err(EvalError::NoWindows);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok((
        EvalReport {
            dataset: dataset_id.to_string(),
            model: model_id.to_string(),
            metric: "nrmse".to_string(),
            value: mean,
            samples: values.len(),
            resolution: resolution_label(container),
            solver_steps: opts.sample.steps,
            cfg_scale: opts.sample.cfg_scale,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
        values,
    ))
}

/// Persistence-baseline nRMSE over the same windows.
pub fn eval_persistence(
    model: &ModelConfig,
    container: &DatasetContainer,
    max_windows: usize,
    dataset_id: &str,
) -> Result<EvalReport, EvalError> {
    let start = Instant::now();
    let n = container.header.n_traj().min(max_windows);
    let mut values = Vec::new();
    for traj in 0..n {
        let (hist, fut) = eval_window::<f32>(container, model, traj)?;
        let pred = persistence_baseline(&hist, model.horizon);
        if let Some(v) = nrmse(&pred, &fut) {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(EvalError::NoWindows);
    }
    Ok(EvalReport {
        dataset: dataset_id.to_string(),
        model: "persistence".to_string(),
        metric: "nrmse".to_string(),
        value: values.iter().sum::<f64>() / values.len() as f64,
        samples: values.len(),
        resolution: resolution_label(container),
        solver_steps: 0,
        cfg_scale: 0.0,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn resolution_label(container: &DatasetContainer) -> String {
    container
        .header
        .spatial()
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// CRC over names and raw little-endian bytes of every parameter.
pub fn param_checksum<S: Scalar>(params: &ParamStore<S>) -> u32 {
    let mut hasher = crc32fast::Hasher::new();
    for (name, t) in params.iter() {
        hasher.update(name.as_bytes());
        for v in t.data() {
            hasher.update(&v.to_le_bytes_vec());
        }
    }
    hasher.finalize()
}

/// Resamples the test trajectories to each target resolution and evaluates
/// the unchanged model there; the coordinate-parameterized positional
/// encoding is what makes this possible. Model parameters are checksummed
/// before and after.
pub fn eval_multires(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    container: &DatasetContainer,
    resolutions: &[usize],
    opts: &EvalOptions,
    dataset_id: &str,
    model_id: &str,
) -> Result<Vec<EvalReport>, EvalError> {
    let before = param_checksum(params);
    let dim = container.header.dim_type.as_usize();
    let mut out = Vec::new();
    for &res in resolutions {
        for &p in &[model.patch.h, model.patch.w, model.patch.d][..dim] {
            if res % p != 0 {
                return Err(EvalError::Field(crate::field::FieldError::NotDivisible {
                    axis: "resample",
                    extent: res,
                    patch: p,
                }));
            }
        }
        let resampled = resample_container(container, res)?;
        let (report, _) = eval_model(params, model, &resampled, opts, dataset_id, model_id)?;
        out.push(report);
    }
    assert_eq!(before, param_checksum(params), "evaluation must not mutate parameters");
    Ok(out)
}

/// Same trajectories at a new uniform spatial resolution.
pub fn resample_container(container: &DatasetContainer, res: usize) -> Result<DatasetContainer, EvalError> {
    let h = &container.header;
    let dim = h.dim_type.as_usize();
    let target: Vec<usize> = vec![res; dim];
    let mut payload = Vec::new();
    for traj in 0..h.n_traj() {
        let raw: Tensor<f32> = container.trajectory(traj);
        let res_t = resample(&raw, &target)?;
        payload.extend(res_t.data().iter().copied());
    }
    let mut header = h.clone();
    for (i, &t) in target.iter().enumerate() {
        header.shape[2 + i] = t;
    }
    Ok(DatasetContainer::new(header, payload))
}

/// Outcome of one ablation variant. Divergence is a recorded status, not a
/// crash.
#[derive(Clone, Debug)]
pub enum AblationStatus {
    Completed { final_train_loss: f64, nrmse: f64 },
    Diverged { step: u64 },
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub target: PredTarget,
    pub status: AblationStatus,
}

/// Trains one fresh model per prediction target under identical data,
/// seeds, and schedules; only the head interpretation differs. All
/// variants share the velocity-space loss.
pub fn run_ablation(
    model_base: &ModelConfig,
    train_cfg: &TrainConfig,
    train_data: &[DatasetContainer],
    test_data: &DatasetContainer,
    eval_opts: &EvalOptions,
    targets: &[PredTarget],
) -> Result<Vec<AblationRow>, EvalError> {
    let mut rows = Vec::new();
    for &target in targets {
        let mut model = model_base.clone();
        model.prediction_target = target;
        let mut params: ParamStore<f32> = init_model_params(&model, train_cfg.seed);
        let mut opt = OptimizerState::new(&params);
        let result: Result<TrainReport, TrainError> = train(
            &mut params,
            &mut opt,
            &model,
            train_cfg,
            train_data,
            &[],
            TrainOptions::default(),
        );
        let status = match result {
            Ok(report) => {
                let (eval, _) = eval_model(&params, &model, test_data, eval_opts, "ablation", target_name(target))?;
                AblationStatus::Completed { final_train_loss: report.final_loss, nrmse: eval.value }
            }
            Err(TrainError::NonFiniteLoss { step }) => AblationStatus::Diverged { step },
            Err(e) => return Err(e.into()),
        };
        rows.push(AblationRow { target, status });
    }
    Ok(rows)
}

pub fn target_name(t: PredTarget) -> &'static str {
    match t {
        PredTarget::X => "x-pred",
        PredTarget::V => "v-pred",
        PredTarget::Eps => "eps-pred",
    }
}

/// Tab-separated report table.
pub fn write_eval_reports(path: &Path, reports: &[EvalReport]) -> Result<(), EvalError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "dataset\tmodel\tmetric\tvalue\tsamples\tresolution\tsolver_steps\tcfg_scale\twall_time_s")?;
    for r in reports {
        writeln!(
            f,
            "{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{:.3}",
            r.dataset, r.model, r.metric, r.value, r.samples, r.resolution, r.solver_steps, r.cfg_scale, r.wall_time_s
        )?;
    }
    Ok(())
}

/// Ablation outcome table; divergence is written as a status row.
pub fn write_ablation_report(path: &Path, rows: &[AblationRow]) -> Result<(), EvalError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "target\tstatus\tfinal_train_loss\tnrmse\tdiverged_step")?;
    for r in rows {
        match &r.status {
            AblationStatus::Completed { final_train_loss, nrmse } => {
                writeln!(f, "{}\tcompleted\t{final_train_loss:.6e}\t{nrmse:.6}\t-", target_name(r.target))?;
            }
            AblationStatus::Diverged { step } => {
                writeln!(f, "{}\tdiverged\t-\t-\t{step}", target_name(r.target))?;
            }
        }
    }
    Ok(())
}
