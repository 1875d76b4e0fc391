//! Portable dataset container: a length-prefixed structured text header
//! followed by raw little-endian f32 payload in row-major (N,T,X,Y,Z,V)
//! order. A sidecar variant of the same header ingests externally exported
//! raw arrays.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::field::DimType;
use crate::tensor::{Scalar, Tensor};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("schema version {got} unsupported (expected {expected})")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("truncated payload: expected {expected} bytes, found {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("cannot split {n} trajectories into non-empty train/test sets")]
    SplitTooSmall { n: usize },
    #[error("invalid field `{key}`: {msg}")]
    BadField { key: &'static str, msg: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub dim_type: DimType,
    pub var_names: Vec<String>,
    /// (N, T, X, Y, Z, V)
    pub shape: [usize; 6],
    pub dtype: String,
    /// Physical parameters (beta, nu, ...).
    pub phys: BTreeMap<String, f64>,
}

impl DatasetHeader {
    pub fn n_traj(&self) -> usize {
        self.shape[0]
    }

    pub fn frames(&self) -> usize {
        self.shape[1]
    }

    pub fn n_vars(&self) -> usize {
        self.shape[5]
    }

    pub fn cells_per_frame(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn payload_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Extents of the native spatial axes only.
    pub fn spatial(&self) -> Vec<usize> {
        self.shape[2..2 + self.dim_type.as_usize()].to_vec()
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("schema_version = {}\n", self.schema_version));
        s.push_str("kind = dataset\n");
        s.push_str(&format!("dim_type = {}\n", self.dim_type.as_usize()));
        s.push_str(&format!("var_names = {}\n", self.var_names.join(",")));
        s.push_str(&format!(
            "shape = {}\n",
            self.shape.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        ));
        s.push_str(&format!("dtype = {}\n", self.dtype));
        for (k, v) in &self.phys {
            s.push_str(&format!("phys.{k} = {v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ContainerError> {
        let mut kv = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ContainerError::CorruptHeader(format!("line {}: `{line}`", lineno + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &'static str| {
            kv.get(key)
                .ok_or(ContainerError::BadField { key, msg: "missing".into() })
        };
        let schema_version: u32 = get("schema_version")?
            .parse()
            .map_err(|e| ContainerError::BadField { key: "schema_version", msg: format!("{e}") })?;
        if schema_version != SCHEMA_VERSION {
            return Err(ContainerError::VersionMismatch { got: schema_version, expected: SCHEMA_VERSION });
        }
        let dim_raw: u8 = get("dim_type")?
            .parse()
            .map_err(|e| ContainerError::BadField { key: "dim_type", msg: format!("{e}") })?;
        let dim_type = DimType::from_u8(dim_raw)
            .ok_or(ContainerError::BadField { key: "dim_type", msg: format!("{dim_raw} not in 1..=3") })?;
        let var_names: Vec<String> = get("var_names")?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        let shape_vec: Vec<usize> = get("shape")?
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|e| ContainerError::BadField { key: "shape", msg: format!("{e}") })?;
        if shape_vec.len() != 6 {
            return Err(ContainerError::BadField {
                key: "shape",
                msg: format!("expected 6 extents, got {}", shape_vec.len()),
            });
        }
        let mut shape = [0usize; 6];
        shape.copy_from_slice(&shape_vec);
        if shape[5] != var_names.len() {
            return Err(ContainerError::BadField {
                key: "shape",
                msg: format!("V={} but {} var_names", shape[5], var_names.len()),
            });
        }
        let dtype = get("dtype")?.clone();
        if dtype != "f32le" {
            return Err(ContainerError::BadField { key: "dtype", msg: format!("unsupported `{dtype}`") });
        }
        let mut phys = BTreeMap::new();
        for (k, v) in &kv {
            if let Some(name) = k.strip_prefix("phys.") {
                let val: f64 = v
                    .parse()
                    .map_err(|e| ContainerError::BadField { key: "phys", msg: format!("{name}: {e}") })?;
                phys.insert(name.to_string(), val);
            }
        }
        Ok(DatasetHeader { schema_version, dim_type, var_names, shape, dtype, phys })
    }
}

/// In-memory dataset: header plus the full payload.
#[derive(Clone, Debug)]
pub struct DatasetContainer {
    pub header: DatasetHeader,
    pub payload: Vec<f32>,
}

impl DatasetContainer {
    pub fn new(header: DatasetHeader, payload: Vec<f32>) -> Self {
        assert_eq!(header.payload_len(), payload.len());
        DatasetContainer { header, payload }
    }

    /// One trajectory as a raw (T, spatial..., V) tensor in the compute
    /// dtype, degenerate Y/Z axes squeezed away.
    pub fn trajectory<S: Scalar>(&self, idx: usize) -> Tensor<S> {
        let h = &self.header;
        let per = h.frames() * h.cells_per_frame() * h.n_vars();
        let slice = &self.payload[idx * per..(idx + 1) * per];
        let mut shape = vec![h.frames()];
        shape.extend(h.spatial());
        shape.push(h.n_vars());
        Tensor::from_vec(&shape, slice.iter().map(|&v| S::from_f64(v as f64)).collect())
    }

    /// Deterministic disjoint split of trajectories.
    pub fn split(&self, train_frac: f64, seed: u64) -> Result<(DatasetContainer, DatasetContainer), ContainerError> {
        let n = self.header.n_traj();
        if n < 2 {
            return Err(ContainerError::SplitTooSmall { n });
        }
        let mut idx: Vec<usize> = (0..n).collect();
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let n_train = ((n as f64 * train_frac).round() as usize).clamp(1, n - 1);
        let take = |ids: &[usize]| {
            let per = self.payload.len() / n;
            let mut payload = Vec::with_capacity(ids.len() * per);
            for &i in ids {
                payload.extend_from_slice(&self.payload[i * per..(i + 1) * per]);
            }
            let mut header = self.header.clone();
            header.shape[0] = ids.len();
            DatasetContainer::new(header, payload)
        };
        Ok((take(&idx[..n_train]), take(&idx[n_train..])))
    }
}

pub fn write_container(path: &Path, c: &DatasetContainer) -> Result<(), ContainerError> {
    let header = c.header.to_text();
    let mut f = std::fs::File::create(path)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(header.as_bytes())?;
    let mut bytes = Vec::with_capacity(c.payload.len() * 4);
    for v in &c.payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Header-only inspection; never touches the payload bytes.
pub fn read_header(path: &Path) -> Result<DatasetHeader, ContainerError> {
    let mut f = std::fs::File::open(path)?;
    let mut len_buf = [0u8; 8];
    f.read_exact(&mut len_buf)
        .map_err(|_| ContainerError::CorruptHeader("missing length prefix".into()))?;
    let hlen = u64::from_le_bytes(len_buf) as usize;
    if hlen > 1 << 20 {
        return Err(ContainerError::CorruptHeader(format!("implausible header length {hlen}")));
    }
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)
        .map_err(|_| ContainerError::CorruptHeader("header shorter than its length prefix".into()))?;
    let text = String::from_utf8(hbuf).map_err(|e| ContainerError::CorruptHeader(format!("{e}")))?;
    DatasetHeader::parse(&text)
}

pub fn read_container(path: &Path) -> Result<DatasetContainer, ContainerError> {
    let header = read_header(path)?;
    let mut f = std::fs::File::open(path)?;
    let mut all = Vec::new();
    f.read_to_end(&mut all)?;
    let hlen = u64::from_le_bytes(all[..8].try_into().unwrap()) as usize;
    let body = &all[8 + hlen..];
    let expected = header.payload_len() * 4;
    if body.len() != expected {
        return Err(ContainerError::TruncatedPayload { expected, got: body.len() });
    }
    let payload: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(DatasetContainer::new(header, payload))
}

/// Ingests an externally exported raw (N,T,X,Y,Z,V) f32 array described by
/// a plain-text sidecar header.
pub fn ingest_raw(data_path: &Path, sidecar_path: &Path) -> Result<DatasetContainer, ContainerError> {
    let text = std::fs::read_to_string(sidecar_path)?;
    let header = DatasetHeader::parse(&text)?;
    let bytes = std::fs::read(data_path)?;
    let expected = header.payload_len() * 4;
    if bytes.len() != expected {
        return Err(ContainerError::TruncatedPayload { expected, got: bytes.len() });
    }
    let payload: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(DatasetContainer::new(header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetContainer {
        let header = DatasetHeader {
            schema_version: SCHEMA_VERSION,
            dim_type: DimType::One,
            var_names: vec!["Vx".into()],
            shape: [4, 3, 8, 1, 1, 1],
            dtype: "f32le".into(),
            phys: [("beta".to_string(), 1.5)].into_iter().collect(),
        };
        let n = header.payload_len();
        DatasetContainer::new(header, (0..n).map(|i| i as f32 * 0.5).collect())
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = std::env::temp_dir().join("pdeflow_container_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.pdt");
        let c = sample();
        write_container(&path, &c).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back.header, c.header);
        assert_eq!(back.payload, c.payload);
        // header-only read agrees without loading payload
        let h = read_header(&path).unwrap();
        assert_eq!(h, c.header);
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = std::env::temp_dir().join("pdeflow_container_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("b.pdt");
        write_container(&path, &sample()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        match read_container(&path) {
            Err(ContainerError::TruncatedPayload { .. }) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let text = "schema_version = 99\nkind = dataset\ndim_type = 1\nvar_names = Vx\nshape = 1,1,4,1,1,1\ndtype = f32le\n";
        match DatasetHeader::parse(text) {
            Err(ContainerError::VersionMismatch { got: 99, .. }) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let c = sample();
        let (tr, te) = c.split(0.75, 3).unwrap();
        assert_eq!(tr.header.n_traj(), 3);
        assert_eq!(te.header.n_traj(), 1);
        let (tr2, te2) = c.split(0.75, 3).unwrap();
        assert_eq!(tr.payload, tr2.payload);
        assert_eq!(te.payload, te2.payload);
        // every original trajectory appears exactly once across the split
        let per = c.payload.len() / 4;
        let mut starts: Vec<f32> = tr
            .payload
            .chunks_exact(per)
            .chain(te.payload.chunks_exact(per))
            .map(|t| t[0])
            .collect();
        starts.sort_by(f32::total_cmp);
        assert_eq!(starts, vec![0.0, per as f32 * 0.5, per as f32 * 1.0, per as f32 * 1.5]);
    }

    #[test]
    fn ninety_ten_split() {
        let header = DatasetHeader {
            schema_version: SCHEMA_VERSION,
            dim_type: DimType::One,
            var_names: vec!["Vx".into()],
            shape: [10, 1, 2, 1, 1, 1],
            dtype: "f32le".into(),
            phys: BTreeMap::new(),
        };
        let c = DatasetContainer::new(header.clone(), vec![0.0; header.payload_len()]);
        let (tr, te) = c.split(0.9, 0).unwrap();
        assert_eq!((tr.header.n_traj(), te.header.n_traj()), (9, 1));
    }

    #[test]
    fn sidecar_ingestion() {
        let dir = std::env::temp_dir().join("pdeflow_container_test");
        std::fs::create_dir_all(&dir).unwrap();
        let c = sample();
        let data_path = dir.join("raw.bin");
        let side_path = dir.join("raw.header");
        let mut bytes = Vec::new();
        for v in &c.payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&data_path, &bytes).unwrap();
        std::fs::write(&side_path, c.header.to_text()).unwrap();
        let got = ingest_raw(&data_path, &side_path).unwrap();
        assert_eq!(got.header, c.header);
        assert_eq!(got.payload, c.payload);
    }
}
