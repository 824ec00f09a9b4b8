//! Shard files and the corpus manifest.
//!
//! Shard layout (little-endian):
//!
//! ```text
//! magic   b"VPFD"
//! version u32
//! count   u32
//! count × { identity_id u32, variation_id u16, style u8,
//!           visible f32[3*64*64], thermal f32[32*32] }
//! ```
//!
//! The manifest is line-oriented text; `#` starts a comment line:
//!
//! ```text
//! shard <path> <client_id> <size> <style>
//! test  <path> <split_name> <size> <style>
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::{DataError, PairedSample, StyleTag, THERMAL_LEN, VISIBLE_LEN};

pub const SHARD_MAGIC: &[u8; 4] = b"VPFD";
pub const SHARD_VERSION: u32 = 1;
const RECORD_LEN: usize = 4 + 2 + 1 + 4 * (VISIBLE_LEN + THERMAL_LEN);

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode_shard(samples: &[Arc<PairedSample>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + samples.len() * RECORD_LEN);
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.identity_id.to_le_bytes());
        out.extend_from_slice(&s.variation_id.to_le_bytes());
        out.push(s.style.as_u8());
        for v in s.visible.iter().chain(&s.thermal) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_shard(bytes: &[u8], path: &str) -> Result<Vec<Arc<PairedSample>>, DataError> {
    let fmt = |detail: String| DataError::Format {
        path: path.to_string(),
        detail,
    };
    if bytes.len() < 12 || &bytes[..4] != SHARD_MAGIC {
        return Err(fmt("missing VPFD header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SHARD_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != count * RECORD_LEN {
        return Err(fmt(format!(
            "{count} records need {} bytes, found {}",
            count * RECORD_LEN,
            body.len()
        )));
    }
    body.chunks_exact(RECORD_LEN)
        .map(|rec| {
            let identity_id = u32::from_le_bytes(rec[0..4].try_into().expect("4 bytes"));
            let variation_id = u16::from_le_bytes(rec[4..6].try_into().expect("2 bytes"));
            let style = StyleTag::from_u8(rec[6]).ok_or_else(|| fmt(format!("bad style byte {}", rec[6])))?;
            let floats: Vec<f32> = rec[7..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let (visible, thermal) = floats.split_at(VISIBLE_LEN);
            Ok(Arc::new(PairedSample {
                visible: visible.to_vec(),
                thermal: thermal.to_vec(),
                identity_id,
                variation_id,
                style,
            }))
        })
        .collect()
}

pub fn write_shard(path: &Path, samples: &[Arc<PairedSample>]) -> Result<(), DataError> {
    fs::write(path, encode_shard(samples)).map_err(|e| io_err(path, e))
}

pub fn read_shard(path: &Path) -> Result<Vec<Arc<PairedSample>>, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_shard(&bytes, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ManifestEntry {
    Shard {
        path: String,
        client_id: usize,
        size: usize,
        style: StyleTag,
    },
    Test {
        path: String,
        split: String,
        size: usize,
        style: StyleTag,
    },
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let mut text = String::from("# vpfl corpus manifest v1\n");
    for e in entries {
        match e {
            ManifestEntry::Shard {
                path,
                client_id,
                size,
                style,
            } => text.push_str(&format!("shard {path} {client_id} {size} {style}\n")),
            ManifestEntry::Test {
                path,
                split,
                size,
                style,
            } => text.push_str(&format!("test {path} {split} {size} {style}\n")),
        }
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let fmt = |line: usize, detail: &str| DataError::Format {
        path: path.display().to_string(),
        detail: format!("line {line}: {detail}"),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(fmt(i + 1, "expected 5 fields"));
        }
        let size = f[3].parse().map_err(|_| fmt(i + 1, "bad size"))?;
        let style = f[4].parse().map_err(|_| fmt(i + 1, "bad style"))?;
        out.push(match f[0] {
            "shard" => ManifestEntry::Shard {
                path: f[1].to_string(),
                client_id: f[2].parse().map_err(|_| fmt(i + 1, "bad client id"))?,
                size,
                style,
            },
            "test" => ManifestEntry::Test {
                path: f[1].to_string(),
                split: f[2].to_string(),
                size,
                style,
            },
            other => return Err(fmt(i + 1, &format!("unknown record kind `{other}`"))),
        });
    }
    Ok(out)
}
