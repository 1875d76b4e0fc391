//! Checkpoint container: a length-prefixed TOML header (schema version,
//! config snapshot, step, metric summary), named f32 parameter tensors,
//! optional optimizer state, and a trailing CRC32 over the whole file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::train::OptimizerState;
use thiserror::Error;

pub const CKPT_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("schema version {got} unsupported (expected {expected})")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("parameter shapes do not match the configured model: {0}")]
    ShapeMismatch(String),
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub step: u64,
    /// Serialized run configuration snapshot.
    pub config: String,
    pub metrics: BTreeMap<String, f64>,
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "unexpected end of file at byte {} (+{n})",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>), CheckpointError> {
        let name_len = self.u64()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::Corrupt(format!("{e}")))?;
        let rank = self.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::from_vec(&shape, data)))
    }
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore<f32>,
    opt: Option<&OptimizerState<f32>>,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let header = toml::to_string(meta).map_err(|e| CheckpointError::Corrupt(format!("{e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        push_tensor(&mut buf, name, t);
    }
    match opt {
        Some(state) => {
            buf.extend_from_slice(&1u64.to_le_bytes());
            buf.extend_from_slice(&state.step.to_le_bytes());
            for (name, t) in state.m.iter() {
                push_tensor(&mut buf, name, t);
            }
            for (name, t) in state.v.iter() {
                push_tensor(&mut buf, name, t);
            }
        }
        None => buf.extend_from_slice(&0u64.to_le_bytes()),
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Parameters, optional optimizer state, and header metadata.
pub type LoadedCheckpoint = (ParamStore<f32>, Option<OptimizerState<f32>>, CheckpointMeta);

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let buf = std::fs::read(path)?;
    if buf.len() < 12 {
        return Err(CheckpointError::Corrupt("file too short".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    let hlen = r.u64()? as usize;
    let header = String::from_utf8(r.take(hlen)?.to_vec())
        .map_err(|e| CheckpointError::Corrupt(format!("{e}")))?;
    let meta: CheckpointMeta =
        toml::from_str(&header).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    if meta.schema_version != CKPT_SCHEMA {
        return Err(CheckpointError::VersionMismatch { got: meta.schema_version, expected: CKPT_SCHEMA });
    }
    let n_params = r.u64()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let (name, t) = r.tensor()?;
        params.insert(name, t);
    }
    let has_opt = r.u64()?;
    let opt = if has_opt == 1 {
        let step = r.u64()?;
        let mut m = ParamStore::new();
        for _ in 0..n_params {
            let (name, t) = r.tensor()?;
            m.insert(name, t);
        }
        let mut v = ParamStore::new();
        for _ in 0..n_params {
            let (name, t) = r.tensor()?;
            v.insert(name, t);
        }
        Some(OptimizerState { m, v, step })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok((params, opt, meta))
}

/// Checks that loaded parameters exactly match the shapes a fresh
/// initialization of this model would produce.
pub fn validate_against(
    params: &ParamStore<f32>,
    model: &crate::model::ModelConfig,
) -> Result<(), CheckpointError> {
    let reference: ParamStore<f32> = crate::model::init_model_params(model, 0);
    if reference.len() != params.len() {
        return Err(CheckpointError::ShapeMismatch(format!(
            "expected {} tensors, found {}",
            reference.len(),
            params.len()
        )));
    }
    for (name, t) in reference.iter() {
        if !params.contains(name) {
            return Err(CheckpointError::ShapeMismatch(format!("missing tensor `{name}`")));
        }
        if params.get(name).shape() != t.shape() {
            return Err(CheckpointError::ShapeMismatch(format!(
                "tensor `{name}`: expected {:?}, found {:?}",
                t.shape(),
                params.get(name).shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ChannelVocabulary;
    use crate::model::{init_model_params, ModelConfig, ModelPreset};

    fn tiny_params() -> (ModelConfig, ParamStore<f32>) {
        let mut cfg = ModelConfig::preset(ModelPreset::Tiny);
        cfg.vocab = ChannelVocabulary::new(vec!["Vx".into()]).unwrap();
        let params = init_model_params(&cfg, 7);
        (cfg, params)
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            schema_version: CKPT_SCHEMA,
            step: 42,
            config: "preset = \"tiny\"".to_string(),
            metrics: [("loss".to_string(), 0.25)].into_iter().collect(),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = std::env::temp_dir().join("pdeflow_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let (cfg, params) = tiny_params();
        let opt = OptimizerState::new(&params);
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        save_checkpoint(&p1, &params, Some(&opt), &meta()).unwrap();
        let (lp, lo, lm) = load_checkpoint(&p1).unwrap();
        assert_eq!(lp, params);
        assert_eq!(lm.step, 42);
        validate_against(&lp, &cfg).unwrap();
        save_checkpoint(&p2, &lp, lo.as_ref(), &lm).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_byte_fails_checksum() {
        let dir = std::env::temp_dir().join("pdeflow_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let (_, params) = tiny_params();
        let p = dir.join("c.ckpt");
        save_checkpoint(&p, &params, None, &meta()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(CheckpointError::Checksum { .. })));
    }

    #[test]
    fn shape_mismatch_detected() {
        let (mut cfg, params) = tiny_params();
        cfg.vocab = ChannelVocabulary::new(vec!["Vx".into(), "rho".into()]).unwrap();
        assert!(matches!(validate_against(&params, &cfg), Err(CheckpointError::ShapeMismatch(_))));
    }
}
