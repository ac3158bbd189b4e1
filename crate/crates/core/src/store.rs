//! Embedding matrices and their on-disk format.
//!
//! Layout of the binary file, all little-endian:
//!
//! ```text
//! magic "LMRA" | u16 version = 1 | u16 reserved = 0 | u32 dim | u64 count | count*dim f32
//! ```
//!
//! Ids live in a sidecar `<name>.ids` (UTF-8, one per line, row order) and a
//! JSON manifest `<name>.manifest.json` carries the CRC-32 of the data section.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::DocId;

pub const MAGIC: &[u8; 4] = b"LMRA";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("non-finite value in row {id} at column {column}")]
    NonFiniteValue { id: DocId, column: usize },
    #[error("duplicate id {0}")]
    DuplicateId(DocId),
    #[error("zero vector for {0}")]
    ZeroVector(DocId),
    #[error("id {0} not found")]
    NotFound(DocId),
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {ids} ids but data holds {values} values at dim {dim}")]
    Shape { ids: usize, values: usize, dim: usize },
    #[error("bad store file: {0}")]
    Format(String),
    #[error("checksum mismatch: manifest {expected:08x}, data {found:08x}")]
    Checksum { expected: u32, found: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Row-major `N x D` matrix of f32 embeddings keyed by id.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<DocId>,
    data: Vec<f32>,
    index: HashMap<DocId, usize>,
    norms: OnceLock<Vec<f64>>,
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.ids == other.ids
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, ids: Vec<DocId>, data: Vec<f32>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        if ids.len() * dim != data.len() {
            return Err(StoreError::Shape {
                ids: ids.len(),
                values: data.len(),
                dim,
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(StoreError::DuplicateId(id.clone()));
            }
        }
        for (row, chunk) in data.chunks_exact(dim).enumerate() {
            if let Some(column) = chunk.iter().position(|v| !v.is_finite()) {
                return Err(StoreError::NonFiniteValue {
                    id: ids[row].clone(),
                    column,
                });
            }
        }
        Ok(Self {
            dim,
            ids,
            data,
            index,
            norms: OnceLock::new(),
        })
    }

    pub fn from_rows(
        dim: usize,
        rows: impl IntoIterator<Item = (DocId, Vec<f32>)>,
    ) -> Result<Self, StoreError> {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (id, row) in rows {
            if row.len() != dim {
                return Err(StoreError::DimMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            ids.push(id);
            data.extend_from_slice(&row);
        }
        Self::new(dim, ids, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[DocId] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&DocId, &[f32])> {
        self.ids.iter().zip(self.data.chunks_exact(self.dim))
    }

    pub fn position(&self, id: &DocId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &DocId) -> bool {
        self.index.contains_key(id)
    }

    pub fn lookup(&self, id: &DocId) -> Result<&[f32], StoreError> {
        self.position(id)
            .map(|i| self.row(i))
            .ok_or_else(|| StoreError::NotFound(id.clone()))
    }

    /// Euclidean row norms, computed once in f64.
    pub fn norms(&self) -> &[f64] {
        self.norms.get_or_init(|| {
            self.data
                .chunks_exact(self.dim)
                .map(crate::retriever::norm)
                .collect()
        })
    }

    /// Concatenates matrices of equal dimension; ids must stay distinct.
    pub fn concat(parts: &[&EmbeddingMatrix]) -> Result<Self, StoreError> {
        let dim = parts.first().map(|m| m.dim).ok_or(StoreError::ZeroDim)?;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for m in parts {
            if m.dim != dim {
                return Err(StoreError::DimMismatch {
                    expected: dim,
                    found: m.dim,
                });
            }
            ids.extend_from_slice(&m.ids);
            data.extend_from_slice(&m.data);
        }
        Self::new(dim, ids, data)
    }

    /// Keeps the given ids, in the given order.
    pub fn select(&self, ids: &[DocId]) -> Result<Self, StoreError> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            data.extend_from_slice(self.lookup(id)?);
        }
        Self::new(self.dim, ids.to_vec(), data)
    }
}

pub fn lookup<'a>(store: &'a EmbeddingMatrix, id: &DocId) -> Result<&'a [f32], StoreError> {
    store.lookup(id)
}

/// Scales every row to unit Euclidean norm. Norms are taken in f64.
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix, StoreError> {
    let mut data = Vec::with_capacity(m.data.len());
    for ((id, row), &n) in m.rows().zip(m.norms()) {
        if n == 0.0 {
            return Err(StoreError::ZeroVector(id.clone()));
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / n) as f32));
    }
    EmbeddingMatrix::new(m.dim, m.ids.clone(), data)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub dim: usize,
    pub count: usize,
    pub checksum: u32,
    pub id_file: PathBuf,
    pub created_at: String,
}

pub fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

fn data_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Encodes the binary section (header plus rows) of a store.
pub fn encode(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    out.extend_from_slice(&data_bytes(&m.data));
    out
}

/// Decodes the binary section; ids are supplied separately.
pub fn decode(bytes: &[u8], ids: Vec<DocId>) -> Result<EmbeddingMatrix, StoreError> {
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::Format(format!(
            "file is {} bytes, shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(StoreError::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(StoreError::Format(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| StoreError::Format("header size overflow".into()))?;
    if body.len() != expected {
        return Err(StoreError::Format(format!(
            "data section is {} bytes, header implies {expected}",
            body.len()
        )));
    }
    if ids.len() != count {
        return Err(StoreError::Format(format!(
            "id file lists {} ids, header count is {count}",
            ids.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    EmbeddingMatrix::new(dim, ids, data)
}

/// Writes `<path>`, its `.ids` sidecar and `.manifest.json`.
pub fn write_store(m: &EmbeddingMatrix, path: &Path) -> Result<StoreManifest, StoreError> {
    let bytes = encode(m);
    let checksum = crc32fast::hash(&bytes[HEADER_LEN..]);
    fs::write(path, &bytes).map_err(io_err(path))?;

    let id_file = ids_path(path);
    {
        let f = fs::File::create(&id_file).map_err(io_err(&id_file))?;
        let mut w = BufWriter::new(f);
        for id in &m.ids {
            writeln!(w, "{id}").map_err(io_err(&id_file))?;
        }
        w.flush().map_err(io_err(&id_file))?;
    }

    let manifest = StoreManifest {
        dim: m.dim,
        count: m.len(),
        checksum,
        id_file,
        created_at: chrono::Utc::now().to_rfc3339(),
    };
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json).map_err(io_err(&mpath))?;
    Ok(manifest)
}

fn read_ids(path: &Path) -> Result<Vec<DocId>, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(DocId::from).collect())
}

/// Reads a store written by [`write_store`]. The checksum is verified when a
/// manifest is present.
pub fn read_store(path: &Path) -> Result<EmbeddingMatrix, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let ids = read_ids(&ids_path(path))?;
    let mpath = manifest_path(path);
    if mpath.exists() {
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: StoreManifest = serde_json::from_str(&text)
            .map_err(|e| StoreError::Format(format!("manifest: {e}")))?;
        let found = crc32fast::hash(bytes.get(HEADER_LEN..).unwrap_or_default());
        if found != manifest.checksum {
            return Err(StoreError::Checksum {
                expected: manifest.checksum,
                found,
            });
        }
    }
    decode(&bytes, ids)
}
