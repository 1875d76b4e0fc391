//! Model configuration, scaling presets, parameter initialization, and
//! batch packing shared by the condition encoder and the denoiser.

use std::rc::Rc;

use crate::field::{patchify, ChannelVocabulary, PatchSize, TokenSet, Unified4DField};
use crate::nn::{init_tensor, param_rng, InitKind, ParamStore};
use crate::rope::RopeConfig;
use crate::tensor::{Scalar, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("batch items disagree: {0}")]
    BatchMismatch(String),
    #[error("condition bundle does not match inputs: {0}")]
    ConditionMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error(transparent)]
    Rope(#[from] crate::rope::RopeError),
}

/// Which quantity the network head represents. The velocity loss and the
/// ODE sampler are shared; only the analytic conversion differs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredTarget {
    /// Predict the clean field, convert to velocity (default).
    X,
    /// Predict the velocity directly.
    V,
    /// Predict the noise; conversion divides by t and is the unstable
    /// ablation-only path.
    Eps,
}

/// Named scaling configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Tiny,
    S,
    M,
    L,
    Xl,
}

impl ModelPreset {
    /// (d_model, encoder depth, denoiser depth, heads)
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            ModelPreset::Tiny => (64, 2, 3, 4),
            ModelPreset::S => (256, 4, 7, 4),
            ModelPreset::M => (384, 6, 10, 6),
            ModelPreset::L => (512, 8, 14, 8),
            ModelPreset::Xl => (1024, 8, 14, 8),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_depth: usize,
    pub denoiser_depth: usize,
    pub mlp_ratio: f64,
    pub time_embed_dim: usize,
    pub patch: PatchSize,
    pub vocab: ChannelVocabulary,
    pub rope_base: f64,
    /// History window length T in frames.
    pub history_len: usize,
    /// Prediction horizon P in frames.
    pub horizon: usize,
    pub prediction_target: PredTarget,
}

impl ModelConfig {
    pub fn preset(preset: ModelPreset) -> Self {
        let (d_model, encoder_depth, denoiser_depth, n_heads) = preset.dims();
        ModelConfig {
            d_model,
            n_heads,
            encoder_depth,
            denoiser_depth,
            mlp_ratio: 4.0,
            time_embed_dim: 64,
            patch: PatchSize::default(),
            vocab: ChannelVocabulary::default(),
            rope_base: 10000.0,
            history_len: 10,
            horizon: 10,
            prediction_target: PredTarget::X,
        }
    }

    pub fn token_len(&self) -> usize {
        self.patch.volume() * self.vocab.c_max()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn rope(&self) -> Result<RopeConfig, crate::rope::RopeError> {
        let mut cfg = RopeConfig::with_equal_split(self.head_dim())?;
        cfg.base = self.rope_base;
        Ok(cfg)
    }

    /// Patch-time groups of the configured history window.
    pub fn history_patch_times(&self) -> usize {
        self.history_len.div_ceil(self.patch.t)
    }
}

fn push_attn<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, d: usize, seed: u64) {
    for w in ["wq", "wk", "wv", "wo"] {
        let name = format!("{prefix}.{w}");
        let mut rng = param_rng(seed, &name);
        store.insert(name, init_tensor(&[d, d], InitKind::TruncNormal(0.02), &mut rng));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.insert(format!("{prefix}.{b}"), Tensor::<S>::zeros(&[d]));
    }
}

fn push_ffn<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, d: usize, hidden: usize, seed: u64) {
    let n1 = format!("{prefix}.w1");
    let mut rng = param_rng(seed, &n1);
    store.insert(n1, init_tensor(&[d, hidden], InitKind::TruncNormal(0.02), &mut rng));
    store.insert(format!("{prefix}.b1"), Tensor::<S>::zeros(&[hidden]));
    let n2 = format!("{prefix}.w2");
    let mut rng = param_rng(seed, &n2);
    store.insert(n2, init_tensor(&[hidden, d], InitKind::TruncNormal(0.02), &mut rng));
    store.insert(format!("{prefix}.b2"), Tensor::<S>::zeros(&[d]));
}

fn push_tn<S: Scalar>(store: &mut ParamStore<S>, name: String, shape: &[usize], seed: u64) {
    let mut rng = param_rng(seed, &name);
    store.insert(name, init_tensor(shape, InitKind::TruncNormal(0.02), &mut rng));
}

/// Full parameter store for one model: truncated-normal projections, zeros
/// for every AdaLN modulation head and the final projection head.
pub fn init_model_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamStore<S> {
    let d = cfg.d_model;
    let v_tok = cfg.token_len();
    let hidden = (cfg.mlp_ratio * d as f64).round() as usize;
    let mut store = ParamStore::new();

    // condition encoder
    push_tn(&mut store, "enc.embed.w".into(), &[v_tok, d], seed);
    store.insert("enc.embed.b", Tensor::<S>::zeros(&[d]));
    push_tn(&mut store, "enc.dimemb".into(), &[3, d], seed);
    for i in 0..cfg.encoder_depth {
        push_attn(&mut store, &format!("enc.blk{i}.attn"), d, seed);
        push_ffn(&mut store, &format!("enc.blk{i}.ffn"), d, hidden, seed);
        store.insert(format!("enc.blk{i}.mod.w"), Tensor::<S>::zeros(&[d, 6 * d]));
        store.insert(format!("enc.blk{i}.mod.b"), Tensor::<S>::zeros(&[6 * d]));
    }
    for t in 0..cfg.history_patch_times() {
        push_tn(&mut store, format!("enc.tagg.w{t}"), &[d, d], seed);
    }
    // Fourier frequencies: pair j gets 2*pi*j on both of its channels
    let gamma: Vec<S> = (0..d)
        .map(|c| S::from_f64(2.0 * std::f64::consts::PI * (c / 2) as f64))
        .collect();
    store.insert("enc.tagg.gamma", Tensor::from_vec(&[d], gamma));
    push_attn(&mut store, "enc.pool", d, seed);
    push_tn(&mut store, "enc.pool.query".into(), &[d], seed);

    // denoiser
    push_tn(&mut store, "den.embed.w".into(), &[v_tok, d], seed);
    store.insert("den.embed.b", Tensor::<S>::zeros(&[d]));
    push_tn(&mut store, "den.time.w".into(), &[cfg.time_embed_dim, d], seed);
    store.insert("den.time.b", Tensor::<S>::zeros(&[d]));
    push_tn(&mut store, "den.cg.w".into(), &[d, d], seed);
    push_tn(&mut store, "den.dimemb".into(), &[3, d], seed);
    for i in 0..cfg.denoiser_depth {
        push_attn(&mut store, &format!("den.blk{i}.attn"), d, seed);
        push_attn(&mut store, &format!("den.blk{i}.xattn"), d, seed);
        push_ffn(&mut store, &format!("den.blk{i}.ffn"), d, hidden, seed);
        store.insert(format!("den.blk{i}.mod.w"), Tensor::<S>::zeros(&[d, 9 * d]));
        store.insert(format!("den.blk{i}.mod.b"), Tensor::<S>::zeros(&[9 * d]));
    }
    store.insert("den.final.mod.w", Tensor::<S>::zeros(&[d, 2 * d]));
    store.insert("den.final.mod.b", Tensor::<S>::zeros(&[2 * d]));
    store.insert("den.head.w", Tensor::<S>::zeros(&[d, v_tok]));
    store.insert("den.head.b", Tensor::<S>::zeros(&[v_tok]));

    // learned null condition for classifier-free guidance
    push_tn(&mut store, "null.ctok".into(), &[d], seed);
    push_tn(&mut store, "null.cg".into(), &[d], seed);

    store
}

/// Stacked batch tokens (B, L, V_tok), the shared coordinates, and the
/// single-item token template.
pub type PackedBatch<S> = (Tensor<S>, Rc<Vec<[i64; 4]>>, TokenSet<S>);

/// Tokens of a batch of equally-shaped fields stacked to (B, L, V_tok),
/// plus the shared coordinate list.
pub(crate) fn pack_token_batch<S: Scalar>(
    fields: &[&Unified4DField<S>],
    patch: PatchSize,
    time_offset: i64,
) -> Result<PackedBatch<S>, ModelError> {
    if fields.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let first = patchify(fields[0], patch)?;
    let l = first.len();
    let v = first.vec_len();
    let mut data = Vec::with_capacity(fields.len() * l * v);
    data.extend_from_slice(first.vectors.data());
    for f in &fields[1..] {
        if f.extents() != fields[0].extents() || f.mask != fields[0].mask || f.dim_type != fields[0].dim_type {
            return Err(ModelError::BatchMismatch("field extents/mask/dim_type differ".into()));
        }
        let toks = patchify(f, patch)?;
        data.extend_from_slice(toks.vectors.data());
    }
    let mut template = first;
    if time_offset != 0 {
        template.offset_time(time_offset);
    }
    let coords = Rc::new(template.coords.clone());
    Ok((Tensor::from_vec(&[fields.len(), l, v], data), coords, template))
}
