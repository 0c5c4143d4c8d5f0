//! The single run configuration: TOML on disk, `section.key=value`
//! overrides, and a content hash embedded in every artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::eval::ProbeConfig;
use crate::model::TrainConfig;
use crate::synthgen::{CorpusSpec, LatentSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub world: u64,
    pub codebook: u64,
    pub corpus: u64,
    /// Parameter init, embedding noise and the training stream.
    pub model: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            world: 1,
            codebook: 2,
            corpus: 3,
            model: 4,
            eval: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodebookConfig {
    pub n_codes: usize,
    /// Calibration utterances and their length for the k-means fit.
    pub calib_utterances: usize,
    pub calib_length: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            n_codes: 512,
            calib_utterances: 200,
            calib_length: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Speech rows from projected SSL centroids.
    Distilled,
    /// Speech rows left at the random parameter init.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub init: InitKind,
    /// RMS of the projected centroids.
    pub init_std: f64,
    pub ridge: f64,
    /// Embedding noise as a multiple of the projected-centroid RMS.
    pub sigma_rel: f64,
    /// Number of coarse buckets K.
    pub n_coarse: usize,
    pub proj_trainable: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            init: InitKind::Distilled,
            init_std: 0.02,
            ridge: 1e-3,
            sigma_rel: 0.01,
            n_coarse: 64,
            proj_trainable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    pub steps: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            config: TrainConfig::default(),
            steps: 1000,
            checkpoint_every: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_pairs: usize,
    pub pair_length: usize,
    pub probe_examples: usize,
    pub probe_length: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_pairs: 200,
            pair_length: 64,
            probe_examples: 400,
            probe_length: 64,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seeds: Seeds,
    pub world: LatentSpec,
    pub codebook: CodebookConfig,
    pub corpus: CorpusSpec,
    pub distill: DistillConfig,
    pub model: ModelShape,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

fn to_value(cfg: &RunConfig) -> Result<toml::Value> {
    toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// Every key path of `v` must exist in `reference`.
fn check_keys(v: &toml::Value, reference: &toml::Value, path: &str) -> Result<()> {
    if let (Some(t), Some(r)) = (v.as_table(), reference.as_table()) {
        for (k, sub) in t {
            let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            let rsub = r
                .get(k)
                .ok_or_else(|| Error::Config(format!("unknown config key `{p}`")))?;
            check_keys(sub, rsub, &p)?;
        }
    }
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Reuse TOML's own literal syntax; anything unparseable is a string.
    match format!("x = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let parts: Vec<&str> = key.trim().split('.').collect();
            ensure!(
                parts.iter().all(|p| !p.is_empty()),
                Error::Config(format!("bad override key `{key}`"))
            );
            let mut cur = &mut value;
            for p in &parts[..parts.len() - 1] {
                let t = cur
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{key}` descends into a scalar")))?;
                cur = t
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
            cur.as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` descends into a scalar")))?
                .insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
        }
        check_keys(&value, &to_value(&RunConfig::default())?, "")?;
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.config.weights.validate()?;
        self.train.config.optimizer.validate()?;
        self.train.config.thin.validate()?;
        ensure!(
            self.codebook.n_codes >= 2,
            Error::Config("codebook.n_codes must be at least 2".into())
        );
        ensure!(
            self.train.config.batch_size >= 1,
            Error::Config("train.batch_size must be positive".into())
        );
        ensure!(
            self.corpus.length.1 + 2 <= self.model.max_seq_len,
            Error::Config(format!(
                "corpus utterances up to {} frames need max_seq_len >= {}",
                self.corpus.length.1,
                self.corpus.length.1 + 2
            ))
        );
        ensure!(
            (0.0..=1.0).contains(&self.train.config.interleave_prob),
            Error::Config("train.interleave_prob must lie in [0, 1]".into())
        );
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
