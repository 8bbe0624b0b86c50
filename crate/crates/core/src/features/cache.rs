//! Versioned on-disk feature containers.
//!
//! A text header (`key value` lines, terminated by `end`) is followed by
//! little-endian binary payloads in header order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::AcousticFeatures;
use crate::error::{Error, Result};

pub const CACHE_VERSION: u32 = 1;
const FEATURE_MAGIC: &str = "emspeech-features";
const MEL_MAGIC: &str = "emspeech-mel";

fn header(magic: &str, fields: &[(&str, String)]) -> String {
    let mut h = format!("{magic} {CACHE_VERSION}\n");
    for (k, v) in fields {
        h.push_str(&format!("{k} {v}\n"));
    }
    h.push_str("end\n");
    h
}

fn put_f64s(buf: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Header {
    fields: Vec<(String, String)>,
}

impl Header {
    fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("cache header lacks {key:?}")))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("cache header {key:?} is not an integer")))
    }
}

fn read_header(reader: &mut impl BufRead, magic: &str, path: &Path) -> Result<Header> {
    let mut first = String::new();
    reader
        .read_line(&mut first)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some(magic) {
        return Err(Error::Checkpoint(format!("{}: not a {magic} file", path.display())));
    }
    let version: u32 = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
    if version != CACHE_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: cache version {version}, this build reads {CACHE_VERSION}",
            path.display()
        )));
    }
    let mut fields = Vec::new();
    loop {
        let mut line = String::new();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if n == 0 {
            return Err(Error::Checkpoint(format!("{}: truncated header", path.display())));
        }
        let line = line.trim_end();
        if line == "end" {
            break;
        }
        let (k, v) = line.split_once(' ').unwrap_or((line, ""));
        fields.push((k.to_string(), v.to_string()));
    }
    Ok(Header { fields })
}

struct Payload {
    bytes: Vec<u8>,
    pos: usize,
}

impl Payload {
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let end = self.pos + 8 * n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("truncated cache payload".into()));
        }
        let out = self.bytes[self.pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        self.pos = end;
        Ok(out)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let end = self.pos + 4 * n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("truncated cache payload".into()));
        }
        let out = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        self.pos = end;
        Ok(out)
    }
}

fn open(path: &Path, magic: &str) -> Result<(Header, Payload)> {
    let file = fs::File::open(path).map_err(|e| Error::open(path, e))?;
    let mut reader = BufReader::new(file);
    let header = read_header(&mut reader, magic, path)?;
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok((header, Payload { bytes, pos: 0 }))
}

fn write_all(path: &Path, header: &str, payload: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(payload))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_features(path: &Path, features: &AcousticFeatures, config_hash: &str) -> Result<()> {
    let (t, n_mels) = features.mel.dim();
    let h = header(
        FEATURE_MAGIC,
        &[
            ("config_hash", config_hash.to_string()),
            ("frames", t.to_string()),
            ("n_mels", n_mels.to_string()),
            ("phonemes", features.durations.len().to_string()),
        ],
    );
    let mut buf = Vec::with_capacity(8 * (t * (n_mels + 2)) + 4 * features.durations.len());
    put_f64s(&mut buf, features.mel.iter().copied());
    put_f64s(&mut buf, features.f0.iter().copied());
    put_f64s(&mut buf, features.energy.iter().copied());
    for &d in &features.durations {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    write_all(path, &h, &buf)
}

/// Reads a feature container; when `expected_hash` is given it must match.
pub fn read_features(path: &Path, expected_hash: Option<&str>) -> Result<AcousticFeatures> {
    let (header, mut payload) = open(path, FEATURE_MAGIC)?;
    if let Some(expected) = expected_hash {
        let stored = header.get("config_hash")?;
        if stored != expected {
            return Err(Error::Checkpoint(format!(
                "{}: features computed with config {stored}, expected {expected}",
                path.display()
            )));
        }
    }
    let (t, n_mels, l) = (
        header.usize("frames")?,
        header.usize("n_mels")?,
        header.usize("phonemes")?,
    );
    let mel =
        Array2::from_shape_vec((t, n_mels), payload.f64s(t * n_mels)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let f0 = payload.f64s(t)?;
    let energy = payload.f64s(t)?;
    let durations = payload.u32s(l)?.into_iter().map(|d| d as usize).collect();
    let features = AcousticFeatures {
        mel,
        f0,
        energy,
        durations,
    };
    features.validate(n_mels)?;
    Ok(features)
}

pub fn write_mel(path: &Path, mel: &Array2<f64>) -> Result<()> {
    let (t, n_mels) = mel.dim();
    let h = header(MEL_MAGIC, &[("frames", t.to_string()), ("n_mels", n_mels.to_string())]);
    let mut buf = Vec::with_capacity(8 * mel.len());
    put_f64s(&mut buf, mel.iter().copied());
    write_all(path, &h, &buf)
}

pub fn read_mel(path: &Path) -> Result<Array2<f64>> {
    let (header, mut payload) = open(path, MEL_MAGIC)?;
    let (t, n_mels) = (header.usize("frames")?, header.usize("n_mels")?);
    Array2::from_shape_vec((t, n_mels), payload.f64s(t * n_mels)?).map_err(|e| Error::Checkpoint(e.to_string()))
}
