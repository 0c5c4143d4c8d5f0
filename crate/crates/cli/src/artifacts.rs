//! Tensor-file layouts for the codebook and centroid artifacts, and the
//! provenance helpers every subcommand shares.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use speechlm::config::RunConfig;
use speechlm::distill::Centroids;
use speechlm::manifest::{self, FileHash};
use speechlm::synthgen::Codebook;
use speechlm::tensorfile::{NamedTensor, TensorFile};
use speechlm::{Error, Result};

fn matrix(t: &NamedTensor) -> Result<Array2<f64>> {
    let [r, c] = t.shape[..] else {
        return Err(Error::Format(format!("tensor {} is not a matrix", t.name)));
    };
    Array2::from_shape_vec((r, c), t.as_f64()?.to_vec()).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_codebook(cb: &Codebook, path: &Path) -> Result<()> {
    let v = cb.vectors();
    TensorFile {
        kind: "codebook".into(),
        meta: serde_json::Value::Null,
        tensors: vec![NamedTensor::f64(
            "codebook",
            &[v.nrows(), v.ncols()],
            v.iter().copied().collect(),
        )],
    }
    .save(path)
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    Codebook::from_vectors(matrix(TensorFile::load(path)?.require("codebook")?)?)
}

pub fn save_centroids(c: &Centroids, path: &Path) -> Result<()> {
    let counts = c
        .counts
        .iter()
        .map(|&n| u32::try_from(n).map_err(|_| Error::Format(format!("centroid count {n} exceeds u32"))))
        .collect::<Result<Vec<_>>>()?;
    TensorFile {
        kind: "centroids".into(),
        meta: serde_json::Value::Null,
        tensors: vec![
            NamedTensor::f64("mu", &[c.mu.nrows(), c.mu.ncols()], c.mu.iter().copied().collect()),
            NamedTensor::u32("counts", &[counts.len()], counts),
        ],
    }
    .save(path)
}

pub fn load_centroids(path: &Path) -> Result<Centroids> {
    let f = TensorFile::load(path)?;
    let mu = matrix(f.require("mu")?)?;
    let counts: Vec<u64> = f.require("counts")?.as_u32()?.iter().map(|&n| n as u64).collect();
    if counts.len() != mu.nrows() {
        return Err(Error::Format("centroid counts do not match rows".into()));
    }
    Ok(Centroids { mu, counts })
}

/// Tracks verified inputs and writes the output manifests of one command.
pub struct Provenance<'a> {
    command: &'static str,
    cfg: &'a RunConfig,
    inputs: Vec<FileHash>,
}

impl<'a> Provenance<'a> {
    pub fn new(command: &'static str, cfg: &'a RunConfig) -> Self {
        Provenance {
            command,
            cfg,
            inputs: Vec::new(),
        }
    }

    /// Refuses the input unless it matches the hash its manifest declares.
    pub fn input(&mut self, path: &Path) -> Result<PathBuf> {
        self.inputs.push(manifest::verify(path)?);
        Ok(path.to_path_buf())
    }

    pub fn output(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_value(self.cfg)?;
        manifest::record(path, self.command, &self.inputs, &self.cfg.hash(), config)?;
        Ok(())
    }
}

/// Config recorded in an artifact's manifest.
pub fn manifest_config(artifact: &Path) -> Result<RunConfig> {
    let m = manifest::Manifest::load(artifact)?;
    Ok(serde_json::from_value(m.config)?)
}
