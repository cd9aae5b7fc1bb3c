//! `FLAMEMB` checkpoints.
//!
//! ```text
//! magic "FLAMEMB" | u32 version = 1 | u32 len + utf8 attr_type | u32 k
//! u32 layers | layers × (u32 in, u32 out) | f32 weights (W then b, per layer)
//! u32 classes | u32 k | classes × k f32 dictionary rows
//! ```
//!
//! The training log lives next to the checkpoint as `<file>.log.json`.

use std::path::{Path, PathBuf};

use super::{Dictionary, Embedder, EmbedderLog};
use crate::autodiff::Tensor;
use crate::codec::{put_f32s, put_string, put_u32, Reader};
use crate::error::{Error, Result};
use crate::nn::{read_mlp, write_mlp};

pub const EMBEDDER_MAGIC: &[u8; 7] = b"FLAMEMB";
const VERSION: u32 = 1;

pub fn write_embedder(embedder: &Embedder, dictionary: &Dictionary) -> Result<Vec<u8>> {
    if dictionary.k() != embedder.k() || dictionary.attr_type != embedder.attr_type {
        return Err(Error::contract("embedder and dictionary do not belong together"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(EMBEDDER_MAGIC);
    put_u32(&mut out, VERSION);
    put_string(&mut out, &embedder.attr_type);
    put_u32(&mut out, embedder.k() as u32);
    write_mlp(&mut out, &embedder.mlp);
    put_u32(&mut out, dictionary.class_count() as u32);
    put_u32(&mut out, dictionary.k() as u32);
    put_f32s(&mut out, dictionary.vectors.data().iter().copied());
    Ok(out)
}

pub fn read_embedder(buf: &[u8]) -> Result<(Embedder, Dictionary)> {
    let mut r = Reader::new(buf);
    r.expect_magic(EMBEDDER_MAGIC)?;
    r.expect_version(VERSION)?;
    let attr_type = r.string("attr_type")?;
    let k_at = r.pos() as u64;
    let k = r.u32("k")? as usize;
    let mlp = read_mlp(&mut r)?;
    if mlp.output_dim() != k {
        return Err(Error::format(k_at, format!("k = {k} but network outputs {}", mlp.output_dim())));
    }
    let dict_at = r.pos() as u64;
    let classes = r.u32("class count")? as usize;
    let dk = r.u32("dictionary k")? as usize;
    if dk != k {
        return Err(Error::format(dict_at, format!("dictionary k {dk} != {k}")));
    }
    let rows = r.f32s(classes * k, "dictionary")?;
    r.finish()?;
    let vectors = Tensor::matrix(classes, k, rows.into_iter().map(f64::from).collect())?;
    Ok((
        Embedder {
            attr_type: attr_type.clone(),
            mlp,
        },
        Dictionary { attr_type, vectors },
    ))
}

/// `<path>.log.json`.
pub fn log_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".log.json");
    PathBuf::from(s)
}

/// Writes the checkpoint and, when given, its JSON log sidecar.
pub fn save_embedder(
    embedder: &Embedder,
    dictionary: &Dictionary,
    log: Option<&EmbedderLog>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_embedder(embedder, dictionary)?).map_err(|e| Error::io(path, e))?;
    if let Some(log) = log {
        let side = log_path(path);
        std::fs::write(&side, serde_json::to_vec_pretty(log)?).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

pub fn load_embedder(path: impl AsRef<Path>) -> Result<(Embedder, Dictionary)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_embedder(&bytes)
}
