//! `FLAMGAN` checkpoints.
//!
//! ```text
//! magic "FLAMGAN" | u32 version = 1 | u32 D | u32 k | u32 n
//! n × (u32 len + utf8 attribute name), target first
//! generator network | discriminator trunk | realness head | matching head
//! ```
//!
//! Each network is stored as a layer count, `(in, out)` per layer and f32
//! weights (`W` row-major then `b`, layer by layer). The training log goes
//! to `<file>.log.json`.

use std::path::{Path, PathBuf};

use super::{Discriminator, Generator, ManipLog, Manipulator};
use crate::codec::{put_string, put_u32, Reader};
use crate::error::{Error, Result};
use crate::nn::{read_mlp, write_mlp, Mlp};

pub const MANIPULATOR_MAGIC: &[u8; 7] = b"FLAMGAN";
const VERSION: u32 = 1;

pub fn write_manipulator(m: &Manipulator) -> Result<Vec<u8>> {
    let g = &m.generator;
    let d = &m.discriminator;
    let n = 1 + m.remaining_attrs.len();
    if d.dim() != g.dim() || d.match_dim() != n * g.k() {
        return Err(Error::contract("generator and discriminator shapes disagree"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MANIPULATOR_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, g.dim() as u32);
    put_u32(&mut out, g.k() as u32);
    put_u32(&mut out, n as u32);
    for a in m.attr_order() {
        put_string(&mut out, a);
    }
    write_mlp(&mut out, &g.mlp);
    write_mlp(&mut out, &d.trunk);
    write_mlp(&mut out, &Mlp { layers: vec![d.head_rf.clone()] });
    write_mlp(&mut out, &Mlp { layers: vec![d.head_fm.clone()] });
    Ok(out)
}

pub fn read_manipulator(buf: &[u8]) -> Result<Manipulator> {
    let mut r = Reader::new(buf);
    r.expect_magic(MANIPULATOR_MAGIC)?;
    r.expect_version(VERSION)?;
    let dim = r.u32("D")? as usize;
    let k = r.u32("k")? as usize;
    let n_at = r.pos() as u64;
    let n = r.u32("n")? as usize;
    if !(2..=64).contains(&n) {
        return Err(Error::format(n_at, format!("implausible attribute count {n}")));
    }
    let mut attrs = Vec::with_capacity(n);
    for _ in 0..n {
        attrs.push(r.string("attribute name")?);
    }
    let nets_at = r.pos() as u64;
    let gen = read_mlp(&mut r)?;
    let trunk = read_mlp(&mut r)?;
    let mut rf = read_mlp(&mut r)?;
    let mut fm = read_mlp(&mut r)?;
    r.finish()?;
    let shapes_ok = gen.input_dim() == dim + k
        && gen.output_dim() == dim
        && gen.layers.len() == 3
        && trunk.input_dim() == dim
        && rf.layers.len() == 1
        && fm.layers.len() == 1
        && rf.input_dim() == trunk.output_dim()
        && fm.input_dim() == trunk.output_dim()
        && rf.output_dim() == 1
        && fm.output_dim() == n * k;
    if !shapes_ok {
        return Err(Error::format(
            nets_at,
            format!("network shapes do not fit D={dim}, k={k}, n={n}"),
        ));
    }
    let mut names = attrs.into_iter();
    Ok(Manipulator {
        target_attr: names.next().expect("n >= 2"),
        remaining_attrs: names.collect(),
        generator: Generator { mlp: gen },
        discriminator: Discriminator {
            trunk,
            head_rf: rf.layers.remove(0),
            head_fm: fm.layers.remove(0),
        },
    })
}

/// `<path>.log.json`.
pub fn log_path(path: &Path) -> PathBuf {
    crate::embedder::log_path(path)
}

pub fn save_manipulator(m: &Manipulator, log: Option<&ManipLog>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_manipulator(m)?).map_err(|e| Error::io(path, e))?;
    if let Some(log) = log {
        let side = log_path(path);
        std::fs::write(&side, serde_json::to_vec_pretty(log)?).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

pub fn load_manipulator(path: impl AsRef<Path>) -> Result<Manipulator> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_manipulator(&bytes)
}
