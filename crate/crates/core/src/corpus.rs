//! JSON-lines persistence for frame streams.
//!
//! One record per line:
//! `{codes, features, feature_dim, times, words, latents, seed}` where
//! `features` is base64 of little-endian f32 values, row-major.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::synthgen::{FrameStream, Latents, Word};

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    codes: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<String>,
    feature_dim: usize,
    times: Vec<(f64, f64)>,
    words: Vec<Word>,
    latents: Latents,
    seed: u64,
}

fn encode_features(f: &Array2<f64>) -> String {
    let mut bytes = Vec::with_capacity(f.len() * 4);
    for v in f.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_features(s: &str, rows: usize, dim: usize) -> Result<Array2<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Format(format!("bad feature base64: {e}")))?;
    ensure!(
        bytes.len() == rows * dim * 4,
        Error::Format(format!(
            "feature blob has {} bytes, expected {}",
            bytes.len(),
            rows * dim * 4
        ))
    );
    let vals = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, dim), vals).unwrap())
}

pub fn to_json_line(stream: &FrameStream, with_features: bool) -> Result<String> {
    let rec = Record {
        codes: stream.codes.clone(),
        features: with_features.then(|| encode_features(&stream.features)),
        feature_dim: stream.features.ncols(),
        times: stream.times.clone(),
        words: stream.words.clone(),
        latents: stream.latents,
        seed: stream.seed,
    };
    Ok(serde_json::to_string(&rec)?)
}

/// Parses one record. Records stored without features get an all-zero
/// feature matrix of the declared width.
pub fn from_json_line(line: &str) -> Result<FrameStream> {
    let rec: Record = serde_json::from_str(line)?;
    let n = rec.codes.len();
    let features = match &rec.features {
        Some(s) => decode_features(s, n, rec.feature_dim)?,
        None => Array2::zeros((n, rec.feature_dim)),
    };
    Ok(FrameStream {
        codes: rec.codes,
        features,
        times: rec.times,
        words: rec.words,
        latents: rec.latents,
        seed: rec.seed,
    })
}

pub fn write(path: &Path, streams: &[FrameStream], with_features: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in streams {
        writeln!(w, "{}", to_json_line(s, with_features)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<FrameStream>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(from_json_line(&line)?);
    }
    Ok(out)
}
