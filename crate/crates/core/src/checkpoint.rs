//! Versioned binary envelope shared by model checkpoints and retrieval
//! indexes: one JSON header line describing the tables, then row-major
//! little-endian `f32` payloads concatenated in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;
use crate::model::{CatalogSizes, ModelDims, ModelState};

pub const ENVELOPE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad checkpoint header: {0}")]
    BadHeader(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind { expected: String, found: String },
    #[error("payload truncated: expected {expected} floats for table {table}")]
    Truncated { table: String, expected: usize },
    #[error("{0}")]
    Layout(String),
}

#[derive(Serialize, Deserialize)]
struct TableMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dims: Option<ModelDims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sizes: Option<CatalogSizes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hyper: Option<crate::train::TrainConfig>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    epoch: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    user_ids: Vec<u32>,
    #[serde(default)]
    normalized: bool,
    tables: Vec<TableMeta>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

fn write_envelope(header: &Header, tables: &[(&str, &Mat)], path: &Path) -> Result<(), CheckpointError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    let mut line = serde_json::to_string(header).expect("header serializes");
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(io_err(path))?;
    for (_, mat) in tables {
        for &v in mat.data() {
            file.write_all(&(v as f32).to_le_bytes()).map_err(io_err(path))?;
        }
    }
    file.flush().map_err(io_err(path))
}

fn read_envelope(path: &Path) -> Result<(Header, BTreeMap<String, Mat>), CheckpointError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err(path))?);
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = file.read(&mut byte).map_err(io_err(path))?;
        if n == 0 {
            return Err(CheckpointError::BadHeader("missing newline after header".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&line)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    if header.version != ENVELOPE_VERSION {
        return Err(CheckpointError::UnsupportedVersion(header.version));
    }
    let mut tables = BTreeMap::new();
    for meta in &header.tables {
        let count = meta.rows * meta.cols;
        let mut buf = vec![0u8; count * 4];
        file.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated {
            table: meta.name.clone(),
            expected: count,
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        tables.insert(meta.name.clone(), Mat::from_vec(meta.rows, meta.cols, data));
    }
    Ok((header, tables))
}

/// Saves all model parameters plus the geometry needed to rebuild them.
pub fn save_model(model: &ModelState, path: &Path) -> Result<(), CheckpointError> {
    let mut metas = Vec::with_capacity(model.params.len());
    let mut tables = Vec::with_capacity(model.params.len());
    for id in model.params.ids() {
        let mat = model.params.value(id);
        metas.push(TableMeta {
            name: model.params.name(id).to_string(),
            rows: mat.rows(),
            cols: mat.cols(),
        });
        tables.push((model.params.name(id), mat));
    }
    let header = Header {
        version: ENVELOPE_VERSION,
        kind: "model".into(),
        dims: Some(model.dims),
        sizes: Some(model.sizes),
        hyper: model.hyper,
        seed: model.seed,
        epoch: model.epoch,
        user_ids: Vec::new(),
        normalized: false,
        tables: metas,
    };
    write_envelope(&header, &tables, path)
}

pub fn load_model(path: &Path) -> Result<ModelState, CheckpointError> {
    let (header, tables) = read_envelope(path)?;
    if header.kind != "model" {
        return Err(CheckpointError::WrongKind { expected: "model".into(), found: header.kind });
    }
    let dims = header.dims.ok_or_else(|| CheckpointError::BadHeader("missing dims".into()))?;
    let sizes = header.sizes.ok_or_else(|| CheckpointError::BadHeader("missing sizes".into()))?;
    let mut model = ModelState::from_tables(sizes, dims, header.seed, header.epoch, tables)
        .map_err(CheckpointError::Layout)?;
    model.hyper = header.hyper;
    Ok(model)
}

/// Saves a user embedding index (two matrices plus the user id order).
pub fn save_index(
    user_ids: &[u32],
    domain_a: &Mat,
    domain_b: &Mat,
    normalized: bool,
    path: &Path,
) -> Result<(), CheckpointError> {
    let header = Header {
        version: ENVELOPE_VERSION,
        kind: "index".into(),
        dims: None,
        sizes: None,
        hyper: None,
        seed: 0,
        epoch: 0,
        user_ids: user_ids.to_vec(),
        normalized,
        tables: vec![
            TableMeta { name: "domain_a".into(), rows: domain_a.rows(), cols: domain_a.cols() },
            TableMeta { name: "domain_b".into(), rows: domain_b.rows(), cols: domain_b.cols() },
        ],
    };
    write_envelope(&header, &[("domain_a", domain_a), ("domain_b", domain_b)], path)
}

pub struct IndexPayload {
    pub user_ids: Vec<u32>,
    pub domain_a: Mat,
    pub domain_b: Mat,
    pub normalized: bool,
}

pub fn load_index(path: &Path) -> Result<IndexPayload, CheckpointError> {
    let (header, mut tables) = read_envelope(path)?;
    if header.kind != "index" {
        return Err(CheckpointError::WrongKind { expected: "index".into(), found: header.kind });
    }
    let domain_a = tables
        .remove("domain_a")
        .ok_or_else(|| CheckpointError::BadHeader("missing domain_a table".into()))?;
    let domain_b = tables
        .remove("domain_b")
        .ok_or_else(|| CheckpointError::BadHeader("missing domain_b table".into()))?;
    Ok(IndexPayload { user_ids: header.user_ids, domain_a, domain_b, normalized: header.normalized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_setup;

    #[test]
    fn model_roundtrip_preserves_geometry_and_f32_values() {
        let (_, _, model) = tiny_setup();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_model(&model, f.path()).unwrap();
        let loaded = load_model(f.path()).unwrap();
        assert_eq!(loaded.dims, model.dims);
        assert_eq!(loaded.sizes, model.sizes);
        assert_eq!(loaded.seed, model.seed);
        for id in model.params.ids() {
            let orig = model.params.value(id);
            let got = loaded.params.value(id);
            assert_eq!(orig.shape(), got.shape());
            for (a, b) in orig.data().iter().zip(got.data()) {
                assert_eq!(*a as f32, *b as f32, "f32 payload must round-trip exactly");
            }
        }
        // saving the loaded model again is byte-identical
        let f2 = tempfile::NamedTempFile::new().unwrap();
        save_model(&loaded, f2.path()).unwrap();
        let f3 = tempfile::NamedTempFile::new().unwrap();
        save_model(&load_model(f2.path()).unwrap(), f3.path()).unwrap();
        assert_eq!(std::fs::read(f2.path()).unwrap(), std::fs::read(f3.path()).unwrap());
    }

    #[test]
    fn index_roundtrip() {
        let a = Mat::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]);
        let b = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_index(&[4, 9], &a, &b, true, f.path()).unwrap();
        let idx = load_index(f.path()).unwrap();
        assert_eq!(idx.user_ids, vec![4, 9]);
        assert!(idx.normalized);
        assert_eq!(idx.domain_a.shape(), (2, 2));
        assert_eq!(idx.domain_b.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let (_, _, model) = tiny_setup();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_model(&model, f.path()).unwrap();
        assert!(matches!(load_index(f.path()), Err(CheckpointError::WrongKind { .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let (_, _, model) = tiny_setup();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_model(&model, f.path()).unwrap();
        let bytes = std::fs::read(f.path()).unwrap();
        std::fs::write(f.path(), &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_model(f.path()), Err(CheckpointError::Truncated { .. })));
    }
}
