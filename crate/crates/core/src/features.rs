//! Bit-exact binary container for embeddings, energy curves, and other
//! named numeric records. Little-endian throughout.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"RWSFEAT1";

/// Record names used across the pipeline.
pub const REC_VIDEO_EMBEDDING: &str = "video_embedding";
pub const REC_ENERGY: &str = "energy";
pub const REC_VISUAL_ENERGY: &str = "visual_energy";

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl FeatureData {
    fn dtype_tag(&self) -> u8 {
        match self {
            FeatureData::F32(_) => 0,
            FeatureData::F64(_) => 1,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FeatureData::F32(v) => v.len(),
            FeatureData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Widens to f64 regardless of storage type.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            FeatureData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            FeatureData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: FeatureData,
}

impl FeatureRecord {
    pub fn f32(name: &str, shape: &[usize], data: Vec<f32>) -> Result<FeatureRecord> {
        Self::build(name, shape, FeatureData::F32(data))
    }

    pub fn f64(name: &str, shape: &[usize], data: Vec<f64>) -> Result<FeatureRecord> {
        Self::build(name, shape, FeatureData::F64(data))
    }

    fn build(name: &str, shape: &[usize], data: FeatureData) -> Result<FeatureRecord> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "record {name}: shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(FeatureRecord { name: name.to_string(), shape: shape.to_vec(), data })
    }
}

pub fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if records[..i].iter().any(|o| o.name == r.name) {
            return Err(Error::contract(format!("duplicate record name {}", r.name)));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        buf.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.push(r.data.dtype_tag());
        buf.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &r.data {
            FeatureData::F32(v) => {
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            FeatureData::F64(v) => {
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_features(&bytes)
}

pub fn parse_features(bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if n > bytes.len() - *pos {
            return Err(Error::Corrupt {
                offset: *pos as u64,
                detail: format!("wanted {n} bytes, {} remain", bytes.len() - *pos),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 8).map_err(|_| {
        Error::format(format!(
            "feature file shorter than the {:?} magic",
            String::from_utf8_lossy(FEATURE_MAGIC)
        ))
    })?;
    if magic != FEATURE_MAGIC {
        return Err(Error::format(format!(
            "bad feature magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(FEATURE_MAGIC)
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut records = Vec::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::format("record name is not UTF-8"))?;
        let dtype = take(&mut pos, 1)?[0];
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if rank > 8 {
            return Err(Error::Corrupt {
                offset: pos as u64,
                detail: format!("implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::Corrupt { offset: pos as u64, detail: "shape volume overflow".into() })?;
        let elem_size = match dtype {
            0 => 4usize,
            1 => 8,
            other => {
                return Err(Error::Corrupt {
                    offset: pos as u64,
                    detail: format!("unknown dtype tag {other}"),
                })
            }
        };
        let payload_len = n.checked_mul(elem_size).ok_or(Error::Corrupt {
            offset: pos as u64,
            detail: "payload size overflow".into(),
        })?;
        let payload = take(&mut pos, payload_len)?;
        let data = if dtype == 0 {
            FeatureData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            FeatureData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        };
        if records.iter().any(|r: &FeatureRecord| r.name == name) {
            return Err(Error::Corrupt {
                offset: pos as u64,
                detail: format!("duplicate record name {name}"),
            });
        }
        records.push(FeatureRecord { name, shape, data });
    }
    Ok(records)
}

/// Finds a record by name.
pub fn find_record<'a>(records: &'a [FeatureRecord], name: &str) -> Result<&'a FeatureRecord> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::format(format!("feature file has no {name} record")))
}
