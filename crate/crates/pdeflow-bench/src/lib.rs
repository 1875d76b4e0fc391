//! Shared fixtures for the criterion benches.

use pdeflow_core::datagen::{gen_advection, Family, GenSpec};
use pdeflow_core::field::{canonicalize, ChannelVocabulary, Unified4DField};
use pdeflow_core::model::{init_model_params, ModelConfig, ModelPreset};
use pdeflow_core::nn::ParamStore;
use pdeflow_core::Tensor;

pub fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig::preset(ModelPreset::Tiny);
    cfg.vocab = ChannelVocabulary::new(vec!["Vx".into()]).unwrap();
    cfg
}

pub fn tiny_params(cfg: &ModelConfig) -> ParamStore<f32> {
    init_model_params(cfg, 0)
}

/// A canonicalized 10-frame 1D history window at grid 128.
pub fn history_window(cfg: &ModelConfig) -> Unified4DField<f32> {
    let spec = GenSpec {
        family: Family::Advection,
        n_traj: 1,
        grid: vec![128],
        t_steps: cfg.history_len,
        dt: 0.02,
        beta: 1.0,
        beta_spread: 0.0,
        nu: 0.0,
        max_mode: 4,
        channels: 1,
        seed: 0,
    };
    let data = gen_advection(&spec).unwrap();
    let raw: Tensor<f32> = data.trajectory(0);
    canonicalize(&raw, &data.header.var_names, data.header.dim_type, &cfg.vocab, cfg.patch).unwrap()
}
