//! Conditional flow-matching surrogate for PDE trajectory forecasting.
//!
//! Heterogeneous 1D/2D/3D trajectories are cast onto a unified 4D token
//! representation; a transformer condition encoder summarizes an observed
//! history window, and a coordinate-aware transformer denoiser predicts the
//! clean future window from noisy tokens (x-prediction), trained with a
//! flow-matching velocity loss and sampled with probability-flow ODE
//! integrators. Effective-dimension diagnostics of patch-vector populations
//! motivate the x-prediction parameterization.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod denoiser;
pub mod effdim;
pub mod encoder;
pub mod field;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rope;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use field::{
    apply_norm, canonicalize, fit_norm, invert_norm, patchify, resample, unpatchify, ChannelVocabulary, DimType,
    FieldError, FieldMeta, NativeShape, NormStats, PatchSize, TokenSet, Unified4DField,
};
pub use model::{init_model_params, ModelConfig, ModelPreset, PredTarget};
pub use nn::ParamStore;
pub use tensor::{Scalar, Tensor};
