//! `SAEEMB` container for externally produced embeddings.
//!
//! Layout: 6-byte magic, `u32` version, `u64` rows, `u32` columns, `u8`
//! scalar width (4 or 8), the row-major little-endian payload, then a CRC-32
//! of everything before it. An optional sidecar of one byte per row labels
//! each row as text (0) or image (1).

use std::path::{Path, PathBuf};

use crate::analysis::Modality;
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub const EMB_MAGIC: &[u8; 6] = b"SAEEMB";
pub const EMB_VERSION: u32 = 1;
const HEADER_LEN: usize = 6 + 4 + 8 + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarWidth {
    F32 = 4,
    F64 = 8,
}

impl ScalarWidth {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            4 => Ok(ScalarWidth::F32),
            8 => Ok(ScalarWidth::F64),
            other => Err(Error::Format(format!("unsupported scalar width {other}"))),
        }
    }

    fn bytes(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub data: DenseMatrix,
    pub width: ScalarWidth,
    pub labels: Option<Vec<Modality>>,
}

/// Sidecar path: the data path with `.labels` appended.
pub fn labels_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

pub fn encode_embeddings(data: &DenseMatrix, width: ScalarWidth) -> Vec<u8> {
    let (n, m) = data.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + n * m * width.bytes() + 4);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&EMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.push(width as u8);
    for &v in data.as_slice() {
        match width {
            ScalarWidth::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            ScalarWidth::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Validates header, length and checksum before decoding any scalar.
pub fn decode_embeddings(bytes: &[u8]) -> Result<(DenseMatrix, ScalarWidth)> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Format(format!("embedding file truncated at {} bytes", bytes.len())));
    }
    if &bytes[..6] != EMB_MAGIC {
        return Err(Error::Format("not an embedding file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != EMB_VERSION {
        return Err(Error::Version { found: version, expected: EMB_VERSION });
    }
    let n = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let m = u32::from_le_bytes(bytes[18..22].try_into().unwrap()) as u64;
    let width = ScalarWidth::from_byte(bytes[22])?;
    let expected = n
        .checked_mul(m)
        .and_then(|c| c.checked_mul(width.bytes() as u64))
        .and_then(|c| c.checked_add((HEADER_LEN + 4) as u64))
        .ok_or_else(|| Error::Format("declared shape overflows".into()))?;
    if bytes.len() as u64 != expected {
        return Err(Error::Format(format!(
            "payload length mismatch: file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let payload = &body[HEADER_LEN..];
    let values: Vec<f64> = match width {
        ScalarWidth::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        ScalarWidth::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Ok((DenseMatrix::from_vec(n as usize, m as usize, values)?, width))
}

pub fn write_embeddings(path: &Path, file: &EmbeddingFile) -> Result<()> {
    std::fs::write(path, encode_embeddings(&file.data, file.width))?;
    if let Some(labels) = &file.labels {
        if labels.len() != file.data.rows() {
            return Err(Error::shape(format!("{} labels for {} rows", labels.len(), file.data.rows())));
        }
        let bytes: Vec<u8> = labels.iter().map(|l| u8::from(*l == Modality::Image)).collect();
        std::fs::write(labels_path(path), bytes)?;
    }
    Ok(())
}

/// Reads the file and, when present, its label sidecar.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let (data, width) = decode_embeddings(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?)?;
    let lp = labels_path(path);
    let labels = if lp.exists() {
        let raw = std::fs::read(&lp)?;
        if raw.len() != data.rows() {
            return Err(Error::Format(format!("label sidecar has {} entries for {} rows", raw.len(), data.rows())));
        }
        Some(
            raw.iter()
                .map(|&b| match b {
                    0 => Ok(Modality::Text),
                    1 => Ok(Modality::Image),
                    other => Err(Error::Format(format!("label byte {other} is neither 0 nor 1"))),
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(EmbeddingFile { data, width, labels })
}
