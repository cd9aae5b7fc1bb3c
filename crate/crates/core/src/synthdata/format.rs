//! `FLAMFEAT` feature files.
//!
//! ```text
//! magic "FLAMFEAT" | u32 version = 1 | u32 D | u64 count
//! count × ( u64 instance_id | n × i32 label (-1 = absent) | D × f32 )
//! u64 metadata length | metadata JSON {schema, config, seed}
//! ```
//!
//! All integers and floats are little-endian. The number of attribute types
//! `n` is not in the header; the reader recovers it as the unique value for
//! which the metadata length field lines up with the end of the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttributeSchema, Dataset, FeatureRecord, GenConfig};
use crate::codec::Reader;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"FLAMFEAT";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 8 + 4 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct Metadata {
    schema: AttributeSchema,
    config: GenConfig,
    seed: u64,
}

pub fn write_features(dataset: &Dataset) -> Result<Vec<u8>> {
    let d = dataset.dim();
    let n = dataset.schema.len();
    let mut out = Vec::with_capacity(32 + dataset.len() * (8 + 4 * n + 4 * d));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    for (i, r) in dataset.records.iter().enumerate() {
        if r.feature.len() != d || r.labels.len() != n {
            return Err(Error::Data(format!("record {i} does not match the dataset shape")));
        }
        out.extend_from_slice(&r.instance_id.to_le_bytes());
        for l in &r.labels {
            let v: i32 = match l {
                Some(c) => i32::try_from(*c)
                    .map_err(|_| Error::Data(format!("record {i}: label {c} too large")))?,
                None => -1,
            };
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &r.feature {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(&Metadata {
        schema: dataset.schema.clone(),
        config: dataset.config.clone(),
        seed: dataset.seed,
    })?;
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

fn read_u64_at(buf: &[u8], at: u64) -> Option<u64> {
    let at = usize::try_from(at).ok()?;
    let bytes = buf.get(at..at.checked_add(8)?)?;
    Some(u64::from_le_bytes(bytes.try_into().ok()?))
}

pub fn read_features(buf: &[u8]) -> Result<Dataset> {
    let mut cur = Reader::new(buf);
    cur.expect_magic(FEATURE_MAGIC)?;
    cur.expect_version(VERSION)?;
    let d = cur.u32("dim")? as u64;
    let count = cur.u64("record count")?;
    let file_len = buf.len() as u64;

    // Find the attribute count n whose record block ends exactly where a
    // metadata length field pointing at the end of the file begins.
    let n = if count == 0 {
        None
    } else {
        let mut found = None;
        let mut n = 0u64;
        loop {
            let rec = 8 + 4 * n + 4 * d;
            let Some(block) = rec.checked_mul(count) else { break };
            let meta_at = HEADER_LEN + block;
            if meta_at + 8 > file_len {
                break;
            }
            if let Some(len) = read_u64_at(buf, meta_at) {
                if meta_at + 8 + len == file_len {
                    found = Some(n);
                    break;
                }
            }
            n += 1;
        }
        Some(found.ok_or_else(|| {
            Error::format(
                HEADER_LEN,
                format!("truncated or malformed record block for {count} records of dim {d}"),
            )
        })?)
    };

    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    if let Some(n) = n {
        for _ in 0..count {
            let instance_id = cur.u64("instance id")?;
            let mut labels = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let at = cur.pos() as u64;
                let v = cur.i32("label")?;
                labels.push(match v {
                    -1 => None,
                    v if v >= 0 => Some(v as usize),
                    v => return Err(Error::format(at, format!("invalid label {v}"))),
                });
            }
            let feature = cur.f32s(d as usize, "feature")?;
            records.push(FeatureRecord {
                feature,
                instance_id,
                labels,
            });
        }
    }
    let meta_at = cur.pos() as u64;
    let meta_len = cur.u64("metadata length")?;
    let meta_bytes = cur.take(meta_len as usize, "metadata")?;
    cur.finish()?;
    let meta: Metadata = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::format(meta_at + 8, format!("metadata: {e}")))?;
    if let Some(r) = records.iter().position(|r| r.labels.len() != meta.schema.len()) {
        return Err(Error::format(
            HEADER_LEN,
            format!("record {r} label count disagrees with the schema"),
        ));
    }
    Ok(Dataset {
        schema: meta.schema,
        records,
        config: meta.config,
        seed: meta.seed,
    })
}

pub fn save_features(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_features(dataset)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_features(&bytes)
}
