//! Forward pass with activation cache, and its exact backward pass.
//!
//! Pre-norm blocks: `x += attn(ln1(x)); x += mlp(ln2(x))`. The final
//! residual stream is the hidden state `h` used by the alignment loss and
//! the auxiliary heads; the main head reads `ln_f(h)`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::ops::{self, LayerNormCache};
use super::params::{ModelConfig, Params};

pub(crate) struct LayerCache {
    ln1: LayerNormCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    /// One `T × T` probability matrix per head (upper triangle zero).
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LayerNormCache,
    c: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

pub(crate) struct ForwardCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    pub hidden: Array2<f64>,
    lnf: LayerNormCache,
    z: Array2<f64>,
}

/// Outputs of one forward pass.
pub struct Forward {
    pub logits: Array2<f64>,
    pub hidden: Array2<f64>,
    pub coarse_logits: Array2<f64>,
    pub next_logits: Array2<f64>,
}

fn affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    ops::add_row_bias(&mut y, b);
    y
}

pub(crate) fn forward_cached(
    cfg: &ModelConfig,
    p: &Params,
    ids: &[u32],
    with_aux: bool,
) -> (Forward, ForwardCache) {
    let t_len = ids.len();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = Array2::zeros((t_len, d));
    for (t, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(t);
        row.assign(&p.tok_emb.row(id as usize));
        row += &p.pos_emb.row(t);
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in &p.layers {
        let (a, ln1) = ops::layer_norm(x.view(), l.ln1_g.view(), l.ln1_b.view());
        let qkv = affine(a.view(), &l.w_qkv, &l.b_qkv);
        let mut o = Array2::zeros((t_len, d));
        let mut probs = Vec::with_capacity(nh);
        for h in 0..nh {
            let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
            let k = qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
            let v = qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
            let mut pm = Array2::zeros((t_len, t_len));
            for i in 0..t_len {
                let qi = q.row(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let sc = qi.dot(&k.row(j)) * scale;
                    pm[[i, j]] = sc;
                    max = max.max(sc);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    let e = (pm[[i, j]] - max).exp();
                    pm[[i, j]] = e;
                    sum += e;
                }
                for j in 0..=i {
                    pm[[i, j]] /= sum;
                }
                let mut orow = o.slice_mut(s![i, h * hd..(h + 1) * hd]);
                for j in 0..=i {
                    orow.scaled_add(pm[[i, j]], &v.row(j));
                }
            }
            probs.push(pm);
        }
        let attn = affine(o.view(), &l.w_o, &l.b_o);
        x += &attn;
        let (c, ln2) = ops::layer_norm(x.view(), l.ln2_g.view(), l.ln2_b.view());
        let u = affine(c.view(), &l.w_1, &l.b_1);
        let g = u.mapv(ops::gelu);
        let f = affine(g.view(), &l.w_2, &l.b_2);
        x += &f;
        layers.push(LayerCache {
            ln1,
            a,
            qkv,
            probs,
            o,
            ln2,
            c,
            u,
            g,
        });
    }

    let hidden = x;
    let (z, lnf) = ops::layer_norm(hidden.view(), p.lnf_g.view(), p.lnf_b.view());
    let logits = affine(z.view(), &p.w_out, &p.b_out);
    let (coarse_logits, next_logits) = if with_aux {
        (
            affine(hidden.view(), &p.w_coarse, &p.b_coarse),
            affine(hidden.view(), &p.w_next, &p.b_next),
        )
    } else {
        (Array2::zeros((t_len, 0)), Array2::zeros((t_len, 0)))
    };
    let out = Forward {
        logits,
        hidden: hidden.clone(),
        coarse_logits,
        next_logits,
    };
    (
        out,
        ForwardCache {
            ids: ids.to_vec(),
            layers,
            hidden,
            lnf,
            z,
        },
    )
}

/// Upstream gradients into the pass outputs.
pub(crate) struct OutputGrads {
    pub logits: Array2<f64>,
    pub coarse: Option<Array2<f64>>,
    pub next: Option<Array2<f64>>,
    pub hidden: Option<Array2<f64>>,
}

fn accumulate_affine(
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    w: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dw += &x.t().dot(&dy);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

/// Accumulates parameter gradients into `grads`.
pub(crate) fn backward(
    cfg: &ModelConfig,
    p: &Params,
    cache: &ForwardCache,
    up: &OutputGrads,
    grads: &mut Params,
) {
    let t_len = cache.ids.len();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let dz = accumulate_affine(
        cache.z.view(),
        up.logits.view(),
        &p.w_out,
        &mut grads.w_out,
        &mut grads.b_out,
    );
    let mut dx = ops::layer_norm_backward(
        dz.view(),
        p.lnf_g.view(),
        &cache.lnf,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
    );
    if let Some(dc) = &up.coarse {
        dx += &accumulate_affine(
            cache.hidden.view(),
            dc.view(),
            &p.w_coarse,
            &mut grads.w_coarse,
            &mut grads.b_coarse,
        );
    }
    if let Some(dn) = &up.next {
        dx += &accumulate_affine(
            cache.hidden.view(),
            dn.view(),
            &p.w_next,
            &mut grads.w_next,
            &mut grads.b_next,
        );
    }
    if let Some(dh) = &up.hidden {
        dx += dh;
    }

    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let l = &p.layers[li];
        let gl = &mut grads.layers[li];

        // MLP branch.
        let dg = accumulate_affine(lc.g.view(), dx.view(), &l.w_2, &mut gl.w_2, &mut gl.b_2);
        let mut du = dg;
        du.zip_mut_with(&lc.u, |g, &u| *g *= ops::gelu_grad(u));
        let dc = accumulate_affine(lc.c.view(), du.view(), &l.w_1, &mut gl.w_1, &mut gl.b_1);
        dx += &ops::layer_norm_backward(dc.view(), l.ln2_g.view(), &lc.ln2, &mut gl.ln2_g, &mut gl.ln2_b);

        // Attention branch.
        let d_o = accumulate_affine(lc.o.view(), dx.view(), &l.w_o, &mut gl.w_o, &mut gl.b_o);
        let mut dqkv = Array2::<f64>::zeros((t_len, 3 * d));
        for h in 0..nh {
            let q = lc.qkv.slice(s![.., h * hd..(h + 1) * hd]);
            let k = lc.qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
            let v = lc.qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
            let pm = &lc.probs[h];
            let doh = d_o.slice(s![.., h * hd..(h + 1) * hd]);
            let mut dq = Array2::<f64>::zeros((t_len, hd));
            let mut dk = Array2::<f64>::zeros((t_len, hd));
            let mut dv = Array2::<f64>::zeros((t_len, hd));
            let mut dp = vec![0.0; t_len];
            for i in 0..t_len {
                let doi = doh.row(i);
                let mut dot_pd = 0.0;
                for j in 0..=i {
                    dp[j] = doi.dot(&v.row(j));
                    dot_pd += dp[j] * pm[[i, j]];
                    dv.row_mut(j).scaled_add(pm[[i, j]], &doi);
                }
                for j in 0..=i {
                    let ds = pm[[i, j]] * (dp[j] - dot_pd) * scale;
                    if ds != 0.0 {
                        dq.row_mut(i).scaled_add(ds, &k.row(j));
                        dk.row_mut(j).scaled_add(ds, &q.row(i));
                    }
                }
            }
            dqkv.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * hd..d + (h + 1) * hd]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]).assign(&dv);
        }
        let da = accumulate_affine(lc.a.view(), dqkv.view(), &l.w_qkv, &mut gl.w_qkv, &mut gl.b_qkv);
        dx += &ops::layer_norm_backward(da.view(), l.ln1_g.view(), &lc.ln1, &mut gl.ln1_g, &mut gl.ln1_b);
    }

    for (t, &id) in cache.ids.iter().enumerate() {
        let mut row = grads.tok_emb.row_mut(id as usize);
        row += &dx.row(t);
        let mut prow = grads.pos_emb.row_mut(t);
        prow += &dx.row(t);
    }
}
