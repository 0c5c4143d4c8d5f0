use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::params::{ModelConfig, Params};
use crate::distill::CoarseMap;
use crate::error::{ensure, Error, Result};
use crate::rng::{self, RngState};
use crate::tensorfile::{NamedTensor, TensorFile};

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// The checkpointable unit: parameters, optimizer moments, step counter and
/// the training random stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Params,
    pub opt: AdamState,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub coarse: Option<CoarseMap>,
    pub proj_trainable: bool,
    /// Free-form provenance echoed into checkpoints (config hash etc.).
    pub provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    step: u64,
    proj_trainable: bool,
    has_coarse: bool,
    provenance: serde_json::Value,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Params::init(&config, rng::derive_named(seed, "params"))?;
        Ok(ModelState {
            opt: AdamState::new(&params),
            params,
            config,
            step: 0,
            rng: rng::seeded(rng::derive_named(seed, "train")),
            coarse: None,
            proj_trainable: true,
            provenance: serde_json::Value::Null,
        })
    }

    /// Overwrites the speech block of the token embedding, row `k` for codec
    /// index `k`.
    pub fn set_speech_embeddings(&mut self, speech_start: usize, rows: &Array2<f64>) -> Result<()> {
        ensure!(
            rows.ncols() == self.config.d_model
                && rows.nrows() == self.config.n_codes
                && speech_start + rows.nrows() <= self.config.vocab_size,
            Error::ShapeMismatch(format!(
                "speech block {:?} does not fit embedding {:?} at {speech_start}",
                rows.dim(),
                self.params.tok_emb.dim()
            ))
        );
        self.params
            .tok_emb
            .slice_mut(ndarray::s![speech_start..speech_start + rows.nrows(), ..])
            .assign(rows);
        Ok(())
    }

    pub fn set_projection(&mut self, proj: &crate::distill::Projection) -> Result<()> {
        ensure!(
            proj.weight.dim() == self.params.proj_w.dim() && proj.bias.len() == self.params.proj_b.len(),
            Error::ShapeMismatch("projection shape differs from model".into())
        );
        self.params.proj_w.assign(&proj.weight);
        self.params.proj_b.assign(&proj.bias);
        self.proj_trainable = proj.trainable;
        Ok(())
    }

    pub fn set_coarse(&mut self, map: CoarseMap) -> Result<()> {
        ensure!(
            map.k == self.config.n_coarse && map.bucket_of.len() == self.config.n_codes,
            Error::ShapeMismatch(format!(
                "coarse map (k={}, codes={}) vs heads (k={}, codes={})",
                map.k,
                map.bucket_of.len(),
                self.config.n_coarse,
                self.config.n_codes
            ))
        );
        self.coarse = Some(map);
        Ok(())
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut tensors = Vec::new();
        for (prefix, p) in [("param", &self.params), ("adam_m", &self.opt.m), ("adam_v", &self.opt.v)] {
            for t in p.tensors() {
                tensors.push(NamedTensor::f64(format!("{prefix}.{}", t.name), &t.shape, t.data.to_vec()));
            }
        }
        tensors.push(NamedTensor::u8("rng_state", RngState::capture(&self.rng).to_bytes().to_vec()));
        if let Some(map) = &self.coarse {
            tensors.push(NamedTensor::u32("coarse.bucket_of", &[map.bucket_of.len()], map.bucket_of.clone()));
            tensors.push(NamedTensor::f64(
                "coarse.centers",
                map.bucket_centers.shape(),
                map.bucket_centers.iter().copied().collect(),
            ));
        }
        let meta = Meta {
            config: self.config.clone(),
            step: self.step,
            proj_trainable: self.proj_trainable,
            has_coarse: self.coarse.is_some(),
            provenance: self.provenance.clone(),
        };
        Ok(TensorFile {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::to_value(meta)?,
            tensors,
        })
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        ensure!(
            file.kind == CHECKPOINT_KIND,
            Error::Format(format!("expected a checkpoint, found {:?}", file.kind))
        );
        let meta: Meta = serde_json::from_value(file.meta.clone())
            .map_err(|e| Error::Format(format!("bad checkpoint meta: {e}")))?;
        meta.config.validate()?;
        let mut params = Params::init(&meta.config, 0)?;
        let mut m = params.zeros_like();
        let mut v = params.zeros_like();
        for (prefix, target) in [("param", &mut params), ("adam_m", &mut m), ("adam_v", &mut v)] {
            for t in target.tensors_mut() {
                let stored = file.require(&format!("{prefix}.{}", t.name))?;
                ensure!(
                    stored.shape == t.shape,
                    Error::Format(format!("tensor {} has shape {:?}, expected {:?}", stored.name, stored.shape, t.shape))
                );
                t.data.copy_from_slice(stored.as_f64()?);
            }
        }
        let rng = RngState::from_bytes(file.require("rng_state")?.as_u8()?)?.restore();
        let coarse = if meta.has_coarse {
            let bucket_of = file.require("coarse.bucket_of")?.as_u32()?.to_vec();
            let centers = file.require("coarse.centers")?;
            ensure!(centers.shape.len() == 2, Error::Format("coarse centers must be 2-D".into()));
            let bucket_centers = Array2::from_shape_vec(
                (centers.shape[0], centers.shape[1]),
                centers.as_f64()?.to_vec(),
            )
            .map_err(|e| Error::Format(e.to_string()))?;
            Some(CoarseMap {
                k: bucket_centers.nrows(),
                bucket_of,
                bucket_centers,
            })
        } else {
            None
        };
        Ok(ModelState {
            config: meta.config,
            params,
            opt: AdamState { m, v },
            step: meta.step,
            rng,
            coarse,
            proj_trainable: meta.proj_trainable,
            provenance: meta.provenance,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_tensor_file()?.save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }

    pub fn param_digest(&self) -> String {
        self.params.digest()
    }
}
