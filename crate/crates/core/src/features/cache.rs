//! Binary feature cache.
//!
//! Layout: `"EMOF"`, version byte (1), kind byte (0 = mel, 1 = hpcp), rows and
//! frames as little-endian u32, then `rows × frames` little-endian f32 values in
//! row-major order. Files are named `<track_id>.<mel|hpcp>.emof`.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMOF";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 14;

pub fn cache_path(dir: &Path, track_id: &str, kind: FeatureKind) -> PathBuf {
    dir.join(format!("{track_id}.{}.emof", kind.as_str()))
}

pub fn encode(m: &FeatureMatrix) -> Vec<u8> {
    let (rows, frames) = m.data.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * frames * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(m.kind.code());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    for v in m.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], track_id: &str, path: &Path) -> Result<FeatureMatrix> {
    let corrupt = |message: String| Error::CorruptCache {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(corrupt(format!("unsupported version {}", bytes[4])));
    }
    let kind = FeatureKind::from_code(bytes[5]).ok_or_else(|| corrupt(format!("bad kind byte {}", bytes[5])))?;
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(frames)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt("size overflow".into()))?;
    if payload.len() != expected {
        return Err(corrupt(format!(
            "payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    if rows != kind.rows() {
        return Err(corrupt(format!("{} cache with {rows} rows", kind.as_str())));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureMatrix {
        kind,
        data: Array2::from_shape_vec((rows, frames), data).expect("checked length"),
        frame_rate: kind.default_frame_rate(),
        track_id: track_id.to_string(),
    })
}

/// Publish atomically via a temp file and rename.
pub fn write_cache(m: &FeatureMatrix, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = cache_path(dir, &m.track_id, m.kind);
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        m.track_id,
        m.kind.as_str(),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&encode(m)).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_cache(track_id: &str, kind: FeatureKind, dir: &Path) -> Result<FeatureMatrix> {
    let path = cache_path(dir, track_id, kind);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::CacheMiss {
                track_id: track_id.to_string(),
                kind: kind.as_str().to_string(),
            })
        }
        Err(e) => return Err(Error::io(&path, e)),
    };
    let m = decode(&bytes, track_id, &path)?;
    if m.kind != kind {
        return Err(Error::CorruptCache {
            path,
            message: format!("expected {} payload, found {}", kind.as_str(), m.kind.as_str()),
        });
    }
    Ok(m)
}
