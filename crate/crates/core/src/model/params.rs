use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Width of the speech block (codec indices) and of the next-code head.
    pub n_codes: usize,
    /// Number of coarse buckets predicted by the coarse head.
    pub n_coarse: usize,
    /// SSL feature width, the input side of the projection.
    pub d_ssl: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 512,
            vocab_size: 544,
            n_codes: 512,
            n_coarse: 64,
            d_ssl: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_heads >= 1 && self.d_model % self.n_heads == 0,
            Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ))
        );
        ensure!(
            self.vocab_size % 8 == 0 && self.vocab_size > 0,
            Error::Config(format!("vocab_size {} is not a multiple of 8", self.vocab_size))
        );
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("n_codes", self.n_codes),
            ("n_coarse", self.n_coarse),
            ("d_ssl", self.d_ssl),
        ] {
            ensure!(v >= 1, Error::Config(format!("{name} must be >= 1")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    /// `d × 3d`, columns ordered q | k | v.
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_1: Array2<f64>,
    pub b_1: Array1<f64>,
    pub w_2: Array2<f64>,
    pub b_2: Array1<f64>,
}

/// All trainable tensors. The same struct holds gradients and optimizer
/// moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub w_coarse: Array2<f64>,
    pub b_coarse: Array1<f64>,
    pub w_next: Array2<f64>,
    pub b_next: Array1<f64>,
    /// Alignment projection `P`, `d_model × d_ssl`.
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
}

/// Borrowed view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

macro_rules! tensor_list {
    ($self:expr, $ty:ident, $iter:ident, $as_slice:ident) => {{
        let mut out = Vec::new();
        macro_rules! push {
            ($name:expr, $field:expr) => {
                out.push($ty {
                    name: $name,
                    shape: $field.shape().to_vec(),
                    data: $field.$as_slice().expect("standard layout"),
                })
            };
        }
        push!("tok_emb".to_string(), $self.tok_emb);
        push!("pos_emb".to_string(), $self.pos_emb);
        for (i, l) in $self.layers.$iter().enumerate() {
            push!(format!("layers.{i}.ln1_g"), l.ln1_g);
            push!(format!("layers.{i}.ln1_b"), l.ln1_b);
            push!(format!("layers.{i}.w_qkv"), l.w_qkv);
            push!(format!("layers.{i}.b_qkv"), l.b_qkv);
            push!(format!("layers.{i}.w_o"), l.w_o);
            push!(format!("layers.{i}.b_o"), l.b_o);
            push!(format!("layers.{i}.ln2_g"), l.ln2_g);
            push!(format!("layers.{i}.ln2_b"), l.ln2_b);
            push!(format!("layers.{i}.w_1"), l.w_1);
            push!(format!("layers.{i}.b_1"), l.b_1);
            push!(format!("layers.{i}.w_2"), l.w_2);
            push!(format!("layers.{i}.b_2"), l.b_2);
        }
        push!("lnf_g".to_string(), $self.lnf_g);
        push!("lnf_b".to_string(), $self.lnf_b);
        push!("w_out".to_string(), $self.w_out);
        push!("b_out".to_string(), $self.b_out);
        push!("w_coarse".to_string(), $self.w_coarse);
        push!("b_coarse".to_string(), $self.b_coarse);
        push!("w_next".to_string(), $self.w_next);
        push!("b_next".to_string(), $self.b_next);
        push!("proj_w".to_string(), $self.proj_w);
        push!("proj_b".to_string(), $self.proj_b);
        out
    }};
}

fn normal_matrix(rows: usize, cols: usize, std: f64, r: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    let n = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| n.sample(r))
}

impl Params {
    /// GPT-style init: N(0, 0.02²) matrices, unit gains, zero biases, with
    /// residual output projections scaled by `1/sqrt(2 n_layers)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::seeded(seed);
        let d = cfg.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let tok_emb = normal_matrix(cfg.vocab_size, d, std, &mut r);
        let pos_emb = normal_matrix(cfg.max_seq_len, d, std, &mut r);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w_qkv: normal_matrix(d, 3 * d, std, &mut r),
                b_qkv: Array1::zeros(3 * d),
                w_o: normal_matrix(d, d, resid_std, &mut r),
                b_o: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_1: normal_matrix(d, cfg.d_ff, std, &mut r),
                b_1: Array1::zeros(cfg.d_ff),
                w_2: normal_matrix(cfg.d_ff, d, resid_std, &mut r),
                b_2: Array1::zeros(d),
            })
            .collect();
        Ok(Params {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            w_out: normal_matrix(d, cfg.vocab_size, std, &mut r),
            b_out: Array1::zeros(cfg.vocab_size),
            w_coarse: normal_matrix(d, cfg.n_coarse, std, &mut r),
            b_coarse: Array1::zeros(cfg.n_coarse),
            w_next: normal_matrix(d, cfg.n_codes, std, &mut r),
            b_next: Array1::zeros(cfg.n_codes),
            proj_w: normal_matrix(d, cfg.d_ssl, std, &mut r),
            proj_b: Array1::zeros(d),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|t| t.data.fill(0.0));
        z
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        tensor_list!(self, TensorRef, iter, as_slice)
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        tensor_list!(self, TensorMut, iter_mut, as_slice_mut)
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(TensorMut<'_>)) {
        for t in self.tensors_mut() {
            f(t);
        }
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &Params) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.data.iter_mut().zip(s.data) {
                *a += alpha * b;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.for_each_mut(|t| t.data.iter_mut().for_each(|v| *v *= alpha));
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.data.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.tensors() {
            h.update(t.name.as_bytes());
            for s in &t.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
