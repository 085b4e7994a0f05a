//! Checkpoint file format.
//!
//! ```text
//! LANEGEN-CKPT-v1\n
//! u64 LE        header length
//! header        JSON: config, counters, RNG state, tensor table, blob digest
//! blob          all tensors as little-endian f32, in table order
//! ```
//!
//! Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::trainer::{TrainConfig, TrainState};

const MAGIC_PREFIX: &[u8] = b"LANEGEN-CKPT-";
const MAGIC: &[u8] = b"LANEGEN-CKPT-v1\n";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    step: u64,
    rng: ChaCha8Rng,
    opt_g_steps: u64,
    opt_d_steps: u64,
    tensors: Vec<TensorEntry>,
    blob_sha256: String,
}

/// Visits every tensor of the state in a fixed order.
fn for_each_tensor(
    state: &mut TrainState,
    mut f: impl FnMut(String, &mut Vec<f32>) -> Result<()>,
) -> Result<()> {
    for (n, p) in state.generator.params_mut() {
        f(format!("g.{n}"), &mut p.value)?;
    }
    for (n, b) in state.generator.buffers_mut() {
        f(format!("g.{n}"), b)?;
    }
    for (n, p) in state.discriminator.params_mut() {
        f(format!("d.{n}"), &mut p.value)?;
    }
    for (n, b) in state.discriminator.buffers_mut() {
        f(format!("d.{n}"), b)?;
    }
    for (tag, opt) in [("opt_g", &mut state.opt_g), ("opt_d", &mut state.opt_d)] {
        for (i, m) in opt.m.iter_mut().enumerate() {
            f(format!("{tag}.m.{i}"), m)?;
        }
        for (i, v) in opt.v.iter_mut().enumerate() {
            f(format!("{tag}.v.{i}"), v)?;
        }
    }
    Ok(())
}

pub fn save(state: &mut TrainState, config: &TrainConfig, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut table = Vec::new();
    for_each_tensor(state, |name, t| {
        table.push(TensorEntry { name, len: t.len() });
        for v in t.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    })?;
    let header = Header {
        config: config.clone(),
        epoch: state.epoch,
        step: state.step,
        rng: state.rng.clone(),
        opt_g_steps: state.opt_g.steps,
        opt_d_steps: state.opt_d.steps,
        tensors: table,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + header.len() + blob.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&blob);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{} is corrupt: {what}", path.display()))
}

/// Restores the state and the configuration it was trained with.
pub fn load(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(MAGIC_PREFIX) {
        return Err(Error::Checkpoint(format!(
            "{} is not a lanegen checkpoint (bad magic)",
            path.display()
        )));
    }
    if !bytes.starts_with(MAGIC) {
        let found = bytes[MAGIC_PREFIX.len()..]
            .iter()
            .take_while(|&&b| b != b'\n')
            .take(16)
            .map(|&b| b as char)
            .collect::<String>();
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version `{found}` (expected v1)",
            path.display()
        )));
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 8 {
        return Err(corrupt(path, "truncated header length"));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(corrupt(path, "truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| corrupt(path, format!("header: {e}")))?;
    let blob = &rest[hlen..];
    if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
        return Err(corrupt(path, "tensor data digest mismatch"));
    }

    let mut state = TrainState::new(&header.config)?;
    let mut offset = 0;
    let mut entries = header.tensors.iter();
    for_each_tensor(&mut state, |name, dst| {
        let entry = entries
            .next()
            .ok_or_else(|| corrupt(path, format!("tensor table ends before `{name}`")))?;
        if name != entry.name || dst.len() != entry.len {
            return Err(corrupt(
                path,
                format!(
                    "tensor `{}`[{}] does not match model tensor `{name}`[{}]",
                    entry.name,
                    entry.len,
                    dst.len()
                ),
            ));
        }
        let end = offset + 4 * entry.len;
        let chunk = blob.get(offset..end).ok_or_else(|| corrupt(path, "truncated tensor data"))?;
        for (d, b) in dst.iter_mut().zip(chunk.chunks_exact(4)) {
            *d = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
        offset = end;
        Ok(())
    })?;
    if entries.next().is_some() {
        return Err(corrupt(path, "tensor table has extra entries"));
    }
    if offset != blob.len() {
        return Err(corrupt(path, "trailing bytes after tensor data"));
    }
    state.epoch = header.epoch;
    state.step = header.step;
    state.rng = header.rng;
    state.opt_g.steps = header.opt_g_steps;
    state.opt_d.steps = header.opt_d_steps;
    Ok((state, header.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;
    use rand::Rng;

    fn config() -> TrainConfig {
        TrainConfig {
            arch: ArchConfig::tiny(),
            seed: 4,
            ..TrainConfig::default()
        }
    }

    fn snapshot(s: &mut TrainState) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for_each_tensor(s, |n, t| {
            out.push((n, t.clone()));
            Ok(())
        })
        .unwrap();
        out
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let cfg = config();
        let mut s = TrainState::new(&cfg).unwrap();
        s.epoch = 3;
        s.step = 17;
        s.opt_g.steps = 17;
        s.opt_g.m[0][0] = 0.25;
        let _: u64 = s.rng.random();
        save(&mut s, &cfg, &path).unwrap();
        let (mut r, rcfg) = load(&path).unwrap();
        assert_eq!(rcfg, cfg);
        assert_eq!((r.epoch, r.step, r.opt_g.steps), (3, 17, 17));
        assert_eq!(r.rng, s.rng);
        assert_eq!(snapshot(&mut r), snapshot(&mut s));
    }

    #[test]
    fn wrong_magic_and_version_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        fs::write(&p, b"PK\x03\x04junk").unwrap();
        let e = load(&p).unwrap_err().to_string();
        assert!(e.contains("bad magic"), "{e}");
        fs::write(&p, b"LANEGEN-CKPT-v9\n........").unwrap();
        let e = load(&p).unwrap_err().to_string();
        assert!(e.contains("unsupported checkpoint version `v9`"), "{e}");
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let cfg = config();
        save(&mut TrainState::new(&cfg).unwrap(), &cfg, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        let e = load(&p).unwrap_err().to_string();
        assert!(e.contains("digest mismatch"), "{e}");
        fs::write(&p, &bytes[..40]).unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint(_))));
    }
}
