//! `BTDS` sequence container and JSON manifest.
//!
//! Layout (all little-endian):
//!
//! ```text
//! 0   "BTDS"
//! 4   u32 version, T, C, H, W, P
//! 28  f32 frames     [T][C][H][W]
//!     f32 poses      [T][P][H][W]
//!     f32 condition  [C][H][W]
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SequenceSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BTDS_MAGIC: &[u8; 4] = b"BTDS";
pub const BTDS_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub file: String,
    pub identity_seed: u64,
    pub motion_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub count: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "P")]
    pub parts: usize,
    pub sequences: Vec<ManifestEntry>,
}

/// Size in bytes of a container with the given dimensions.
pub fn container_len(t: usize, c: usize, h: usize, w: usize, p: usize) -> usize {
    HEADER_LEN + 4 * (t * c * h * w + t * p * h * w + c * h * w)
}

pub fn encode_sequence(s: &SequenceSample) -> Vec<u8> {
    let (c, h, w, p) = s.dims();
    let t = s.len();
    let mut out = Vec::with_capacity(container_len(t, c, h, w, p));
    out.extend_from_slice(BTDS_MAGIC);
    for v in [BTDS_VERSION, t as u32, c as u32, h as u32, w as u32, p as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for tensor in [&s.frames, &s.poses, &s.condition] {
        for x in tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_sequence(bytes: &[u8], path: &Path) -> Result<SequenceSample> {
    let fail = |offset: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != BTDS_MAGIC {
        return Err(fail(0, "bad magic, expected \"BTDS\"".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("truncated header ({} bytes)", bytes.len())));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let version = field(0) as u32;
    if version != BTDS_VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let [t, c, h, w, p] = [field(1), field(2), field(3), field(4), field(5)];
    if [t, c, h, w, p].contains(&0) {
        return Err(fail(8, format!("zero dimension in T={t} C={c} H={h} W={w} P={p}")));
    }
    let expected = container_len(t, c, h, w, p);
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut off = HEADER_LEN;
    let mut take = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        let data = bytes[off..off + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        off += 4 * n;
        Tensor::new(shape, data)
    };
    Ok(SequenceSample {
        frames: take(&[t, c, h, w])?,
        poses: take(&[t, p, h, w])?,
        condition: take(&[c, h, w])?,
        identity_seed: 0,
        motion_seed: 0,
    })
}

/// Write `bytes` to `path` through a temporary file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_sequence(s: &SequenceSample, path: &Path) -> Result<()> {
    write_atomic(path, &encode_sequence(s))
}

pub fn read_sequence(path: &Path) -> Result<SequenceSample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes, path)
}

/// Write the sequences and a manifest into `dir` (created if missing).
pub fn write_dataset(samples: &[SequenceSample], dir: &Path) -> Result<Manifest> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Dataset("cannot write an empty dataset".into()))?;
    let (c, h, w, p) = first.dims();
    let t = first.len();
    for (i, s) in samples.iter().enumerate() {
        if s.dims() != (c, h, w, p) || s.len() != t {
            return Err(Error::Dataset(format!("sequence {i} has different dimensions from sequence 0")));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (id, s) in samples.iter().enumerate() {
        let file = format!("seq_{id:04}.btds");
        write_sequence(s, &dir.join(&file))?;
        entries.push(ManifestEntry {
            id,
            file,
            identity_seed: s.identity_seed,
            motion_seed: s.motion_seed,
        });
    }
    let manifest = Manifest {
        version: BTDS_VERSION,
        count: samples.len(),
        frames: t,
        channels: c,
        height: h,
        width: w,
        parts: p,
        sequences: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    write_atomic(&path, &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    if m.count != m.sequences.len() {
        return Err(Error::Dataset(format!(
            "{}: count {} but {} sequences listed",
            path.display(),
            m.count,
            m.sequences.len()
        )));
    }
    Ok(m)
}

/// Read every sequence listed in `dir`'s manifest.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<SequenceSample>)> {
    let m = read_manifest(dir)?;
    let mut out = Vec::with_capacity(m.count);
    for e in &m.sequences {
        let path = dir.join(&e.file);
        let mut s = read_sequence(&path)?;
        if s.len() != m.frames || s.dims() != (m.channels, m.height, m.width, m.parts) {
            return Err(Error::Format {
                path,
                offset: 8,
                detail: "dimensions disagree with the manifest".into(),
            });
        }
        s.identity_seed = e.identity_seed;
        s.motion_seed = e.motion_seed;
        out.push(s);
    }
    Ok((m, out))
}
