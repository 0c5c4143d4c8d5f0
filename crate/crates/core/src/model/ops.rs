//! Row-wise kernels shared by the forward and backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub fn layer_norm(
    x: ArrayView2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut rstd = Array1::zeros(t);
    let mut out = Array2::zeros((t, d));
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[[i, j]] = xh;
            out[[i, j]] = xh * gain[j] + bias[j];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

/// Returns `dx` and accumulates into `dgain`, `dbias`.
pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    gain: ArrayView1<f64>,
    cache: &LayerNormCache,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let (t, d) = dy.dim();
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..d {
            let g = dy[[i, j]] * gain[j];
            mean_g += g;
            mean_gx += g * cache.xhat[[i, j]];
            dgain[j] += dy[[i, j]] * cache.xhat[[i, j]];
            dbias[j] += dy[[i, j]];
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        for j in 0..d {
            let g = dy[[i, j]] * gain[j];
            dx[[i, j]] = cache.rstd[i] * (g - mean_g - cache.xhat[[i, j]] * mean_gx);
        }
    }
    dx
}

pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_K * (u + GELU_C * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_K * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * u * u)
}

pub fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(row);
    row.mapv(|v| (v - lse).exp())
}

/// Cross-entropy of `target` under `logits`; returns the loss and adds
/// `scale * (softmax - onehot)` into `grad`.
pub fn cross_entropy_into(
    logits: ArrayView1<f64>,
    target: usize,
    scale: f64,
    mut grad: ndarray::ArrayViewMut1<f64>,
) -> f64 {
    let lse = log_sum_exp(logits);
    for (g, &l) in grad.iter_mut().zip(logits.iter()) {
        *g += scale * (l - lse).exp();
    }
    grad[target] -= scale;
    lse - logits[target]
}

pub fn add_row_bias(m: &mut Array2<f64>, b: &Array1<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        row += b;
    }
}
