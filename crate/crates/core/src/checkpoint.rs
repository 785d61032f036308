//! Checkpoint format: an ASCII header with format version, config hash and
//! the canonical config text, an ASCII parameter manifest
//! (`name dtype dims... byte_offset`), and a contiguous little-endian
//! 32-bit float blob. Save→load→save is bit-identical.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::config::Config;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config hash mismatch: checkpoint {found}, expected {expected}")]
    HashMismatch { found: String, expected: String },
    #[error("checkpoint config invalid: {0}")]
    Config(#[from] crate::config::ConfigError),
}

const MAGIC: &str = "omniseg-checkpoint v1";

pub fn save_checkpoint(path: &Path, store: &ParamStore, config: &Config) -> Result<(), CheckpointError> {
    let canon = config.to_canonical_string();
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push(' ');
    header.push_str(&config.model_hash());
    header.push('\n');
    header.push_str(&format!("config {}\n", canon.len()));
    header.push_str(&canon);

    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut count = 0usize;
    for (name, t) in store.iter() {
        let offset = blob.len();
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        manifest.push_str(name);
        manifest.push_str(" f32");
        for d in t.shape() {
            manifest.push_str(&format!(" {}", d));
        }
        manifest.push_str(&format!(" {}\n", offset));
        count += 1;
    }

    let mut f = std::fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    f.write_all(format!("params {}\n", count).as_bytes())?;
    f.write_all(manifest.as_bytes())?;
    f.write_all(format!("blob {}\n", blob.len()).as_bytes())?;
    f.write_all(&blob)?;
    Ok(())
}

/// Loads parameters and the embedded config. When `expected` is given its
/// model hash must equal the checkpoint's recorded hash.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&Config>,
) -> Result<(ParamStore, Config), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let next_line = |bytes: &[u8], pos: &mut usize| -> Result<String, CheckpointError> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(CheckpointError::Malformed("unexpected end of header".into()));
        }
        let line = String::from_utf8(bytes[start..*pos].to_vec())
            .map_err(|_| CheckpointError::Malformed("non-UTF8 header".into()))?;
        *pos += 1;
        Ok(line)
    };

    let first = next_line(&bytes, &mut pos)?;
    let hash = match first.strip_prefix(MAGIC) {
        Some(rest) => rest.trim().to_string(),
        None => return Err(CheckpointError::Malformed("bad magic line".into())),
    };

    let cfg_line = next_line(&bytes, &mut pos)?;
    let cfg_len: usize = cfg_line
        .strip_prefix("config ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CheckpointError::Malformed("bad config length line".into()))?;
    if pos + cfg_len > bytes.len() {
        return Err(CheckpointError::Malformed("config text out of bounds".into()));
    }
    let canon = String::from_utf8(bytes[pos..pos + cfg_len].to_vec())
        .map_err(|_| CheckpointError::Malformed("non-UTF8 config".into()))?;
    pos += cfg_len;
    let config = Config::from_str(&canon)?;
    if config.model_hash() != hash {
        return Err(CheckpointError::Malformed("recorded hash does not match config".into()));
    }
    if let Some(exp) = expected {
        if exp.model_hash() != hash {
            return Err(CheckpointError::HashMismatch { found: hash, expected: exp.model_hash() });
        }
    }

    let params_line = next_line(&bytes, &mut pos)?;
    let count: usize = params_line
        .strip_prefix("params ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CheckpointError::Malformed("bad params count line".into()))?;
    let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&bytes, &mut pos)?;
        let mut it = line.split_whitespace();
        let name = it
            .next()
            .ok_or_else(|| CheckpointError::Malformed("empty manifest line".into()))?
            .to_string();
        match it.next() {
            Some("f32") => {}
            other => {
                return Err(CheckpointError::Malformed(format!(
                    "unsupported dtype {:?} for {}",
                    other, name
                )))
            }
        }
        let rest: Vec<usize> = it
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| CheckpointError::Malformed(format!("bad manifest numbers for {}", name)))?;
        if rest.is_empty() {
            return Err(CheckpointError::Malformed(format!("missing offset for {}", name)));
        }
        let (dims, offset) = rest.split_at(rest.len() - 1);
        entries.push((name, dims.to_vec(), offset[0]));
    }

    let blob_line = next_line(&bytes, &mut pos)?;
    let blob_len: usize = blob_line
        .strip_prefix("blob ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CheckpointError::Malformed("bad blob length line".into()))?;
    if pos + blob_len != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "blob length {} does not match remaining {} bytes",
            blob_len,
            bytes.len() - pos
        )));
    }
    let blob = &bytes[pos..];

    let mut store = ParamStore::new();
    let mut spans: Vec<(usize, usize, String)> = Vec::with_capacity(entries.len());
    for (name, dims, offset) in entries {
        let n: usize = dims.iter().product();
        let end = offset + 4 * n;
        if end > blob.len() {
            return Err(CheckpointError::Malformed(format!("{} extends past the blob", name)));
        }
        spans.push((offset, end, name.clone()));
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let o = offset + 4 * i;
                f32::from_le_bytes([blob[o], blob[o + 1], blob[o + 2], blob[o + 3]]) as f64
            })
            .collect();
        if store.contains(&name) {
            return Err(CheckpointError::Malformed(format!("duplicate parameter {}", name)));
        }
        store.insert(&name, Tensor::new(dims, data));
    }
    spans.sort();
    for pair in spans.windows(2) {
        if pair[0].1 > pair[1].0 {
            return Err(CheckpointError::Malformed(format!(
                "overlapping spans for {} and {}",
                pair[0].2, pair[1].2
            )));
        }
    }
    Ok((store, config))
}
