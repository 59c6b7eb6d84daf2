//! Hand-derived gradients for the clean forward pass.

use crate::error::{Error, Result};
use crate::tensor::{self, gelu_grad_scalar, matmul_acc, matmul_at_b_acc, TokenTensor};

use super::{head_slice, Linear, ModelConfig, ModelParameters};

pub(crate) struct BlockCache {
    pub ln1_xhat: Vec<f64>,
    pub ln1_inv: Vec<f64>,
    pub a: Vec<f64>,
    pub qkv: Vec<f64>,
    pub probs: Vec<f64>,
    pub attn: Vec<f64>,
    pub ln2_xhat: Vec<f64>,
    pub ln2_inv: Vec<f64>,
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub g: Vec<f64>,
}

/// Activations recorded by [`forward_train`](super::forward_train).
#[derive(Default)]
pub struct ForwardCache {
    pub(crate) batch: usize,
    pub(crate) patches: Vec<f64>,
    pub(crate) temb: Vec<f64>,
    pub(crate) t_pre: Vec<f64>,
    pub(crate) t_act: Vec<f64>,
    pub(crate) class_rows: Vec<usize>,
    pub(crate) blocks: Vec<BlockCache>,
    pub(crate) lnf_xhat: Vec<f64>,
    pub(crate) lnf_inv: Vec<f64>,
    pub(crate) z: Vec<f64>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }
}

/// Accumulates weight/bias gradients into `g` and returns `dy · Wᵀ` when
/// `want_dx` is set.
fn linear_backward(
    x: &[f64],
    rows: usize,
    l: &Linear,
    dy: &[f64],
    g: &mut Linear,
    want_dx: bool,
) -> Vec<f64> {
    matmul_at_b_acc(x, dy, &mut g.weight, rows, l.fan_in, l.fan_out);
    for row in dy.chunks_exact(l.fan_out) {
        for (gb, v) in g.bias.iter_mut().zip(row) {
            *gb += v;
        }
    }
    if !want_dx {
        return Vec::new();
    }
    let wt = tensor::transpose(&l.weight, l.fan_in, l.fan_out);
    let mut dx = vec![0.0; rows * l.fan_in];
    matmul_acc(dy, &wt, &mut dx, rows, l.fan_out, l.fan_in);
    dx
}

fn ln_backward(
    xhat: &[f64],
    inv: &[f64],
    gain: &[f64],
    dy: &[f64],
    g_gain: &mut [f64],
    g_bias: &mut [f64],
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let inv_d = 1.0 / d as f64;
    let mut dxhat = vec![0.0; d];
    for (r, (dy_row, xh)) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            g_gain[c] += dy_row[c] * xh[c];
            g_bias[c] += dy_row[c];
            dxhat[c] = dy_row[c] * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let out = &mut dx[r * d..(r + 1) * d];
        for c in 0..d {
            out[c] = inv[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

fn attention_backward(cache: &BlockCache, dattn: &[f64], cfg: &ModelConfig, batch: usize) -> Vec<f64> {
    let (t, d, nh, dh) = (cfg.tokens(), cfg.channels, cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; batch * t * 3 * d];
    for b in 0..batch {
        let inst = &cache.qkv[b * t * 3 * d..(b + 1) * t * 3 * d];
        let dinst = &dattn[b * t * d..(b + 1) * t * d];
        for h in 0..nh {
            let p = &cache.probs[(b * nh + h) * t * t..][..t * t];
            let q = head_slice(inst, t, d, dh, 0, h);
            let k = head_slice(inst, t, d, dh, 1, h);
            let v = head_slice(inst, t, d, dh, 2, h);
            let mut d_o = Vec::with_capacity(t * dh);
            for row in dinst.chunks_exact(d) {
                d_o.extend_from_slice(&row[h * dh..(h + 1) * dh]);
            }
            let mut dp = vec![0.0; t * t];
            tensor::matmul_a_bt(&d_o, &v, &mut dp, t, dh, t);
            let mut dv = vec![0.0; t * dh];
            matmul_at_b_acc(p, &d_o, &mut dv, t, t, dh);
            // softmax backward, then the 1/sqrt(dh) score scale
            let mut ds = vec![0.0; t * t];
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dpr = &dp[i * t..(i + 1) * t];
                let inner = tensor::dot(pr, dpr);
                for j in 0..t {
                    ds[i * t + j] = pr[j] * (dpr[j] - inner) * scale;
                }
            }
            let mut dq = vec![0.0; t * dh];
            matmul_acc(&ds, &k, &mut dq, t, t, dh);
            let mut dk = vec![0.0; t * dh];
            matmul_at_b_acc(&ds, &q, &mut dk, t, t, dh);
            let dout = &mut dqkv[b * t * 3 * d..(b + 1) * t * 3 * d];
            for (r, row) in dout.chunks_exact_mut(3 * d).enumerate() {
                for (part, src) in [(0, &dq), (1, &dk), (2, &dv)] {
                    let start = part * d + h * dh;
                    row[start..start + dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
                }
            }
        }
    }
    dqkv
}

/// Parameter gradients of `Σ grad_out ⊙ output` for the pass recorded in
/// `cache`.
pub fn backward(
    params: &ModelParameters,
    cfg: &ModelConfig,
    cache: &ForwardCache,
    grad_out: &TokenTensor,
) -> Result<ModelParameters> {
    if cache.is_empty() || cache.blocks.len() != params.blocks.len() {
        return Err(Error::invalid("missing forward cache for backward pass"));
    }
    let batch = cache.batch;
    if grad_out.shape() != (batch, cfg.tokens(), cfg.patch_dim()) {
        return Err(Error::shape(
            "backward",
            format!("{batch}x{}x{}", cfg.tokens(), cfg.patch_dim()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (t, d) = (cfg.tokens(), cfg.channels);
    let rows = batch * t;
    let mut g = ModelParameters::zeros(cfg);

    let dz = linear_backward(&cache.z, rows, &params.head, grad_out.data(), &mut g.head, true);
    let mut dh = ln_backward(
        &cache.lnf_xhat,
        &cache.lnf_inv,
        &params.final_ln_gain,
        &dz,
        &mut g.final_ln_gain,
        &mut g.final_ln_bias,
        d,
    );

    for (bi, (blk, bc)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut g.blocks[bi];
        // MLP branch
        let dg = linear_backward(&bc.g, rows, &blk.fc2, &dh, &mut gb.fc2, true);
        let du: Vec<f64> = dg
            .iter()
            .zip(&bc.u)
            .map(|(gv, &uv)| gv * gelu_grad_scalar(uv))
            .collect();
        let dm = linear_backward(&bc.m, rows, &blk.fc1, &du, &mut gb.fc1, true);
        let dx = ln_backward(
            &bc.ln2_xhat,
            &bc.ln2_inv,
            &blk.ln2_gain,
            &dm,
            &mut gb.ln2_gain,
            &mut gb.ln2_bias,
            d,
        );
        for (a, b) in dh.iter_mut().zip(&dx) {
            *a += b;
        }
        // attention branch
        let dattn = linear_backward(&bc.attn, rows, &blk.proj, &dh, &mut gb.proj, true);
        let dqkv = attention_backward(bc, &dattn, cfg, batch);
        let da = linear_backward(&bc.a, rows, &blk.qkv, &dqkv, &mut gb.qkv, true);
        let dx = ln_backward(
            &bc.ln1_xhat,
            &bc.ln1_inv,
            &blk.ln1_gain,
            &da,
            &mut gb.ln1_gain,
            &mut gb.ln1_bias,
            d,
        );
        for (a, b) in dh.iter_mut().zip(&dx) {
            *a += b;
        }
    }

    // embeddings
    let mut dc = vec![0.0; batch * d];
    for (b, inst) in dh.chunks_exact(t * d).enumerate() {
        for (pg, v) in g.pos_embed.iter_mut().zip(inst) {
            *pg += v;
        }
        let dcb = &mut dc[b * d..(b + 1) * d];
        for tok in inst.chunks_exact(d) {
            for (a, v) in dcb.iter_mut().zip(tok) {
                *a += v;
            }
        }
    }
    linear_backward(&cache.patches, rows, &params.patch_embed, &dh, &mut g.patch_embed, false);
    for (b, &row) in cache.class_rows.iter().enumerate() {
        for (a, v) in g.class_embed[row * d..(row + 1) * d]
            .iter_mut()
            .zip(&dc[b * d..(b + 1) * d])
        {
            *a += v;
        }
    }
    let dact = linear_backward(&cache.t_act, batch, &params.time_fc2, &dc, &mut g.time_fc2, true);
    let dpre: Vec<f64> = dact
        .iter()
        .zip(&cache.t_pre)
        .map(|(a, &p)| a * gelu_grad_scalar(p))
        .collect();
    linear_backward(&cache.temb, batch, &params.time_fc1, &dpre, &mut g.time_fc1, false);
    Ok(g)
}
