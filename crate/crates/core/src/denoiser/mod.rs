//! Toy DiT-style ε-predictor over image patch tokens.
//!
//! Pre-norm transformer blocks (LN → multi-head attention → residual,
//! LN → GELU MLP → residual). Conditioning is the sum of a timestep MLP
//! embedding and a class embedding, added to every token together with a
//! learned positional embedding. Swap hooks can fire at each block input
//! and on each branch output just before its residual addition.
//!
//! Row-wise operations run over the whole `(batch·tokens) × channels`
//! activation matrix; attention and swap hooks run per instance. All kernels
//! are row-independent, so an instance's output never depends on what else
//! shares its batch.

mod backward;
mod params;

pub use backward::{backward, ForwardCache};
pub use params::{BlockParams, Linear, ModelParameters};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::swap::{plan_for_instance, SwapAxis, SwapPolicy};
use crate::tensor::{self, gelu_scalar, matmul_acc, Matrix, TokenTensor};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub cond_dropout_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            patch_side: 4,
            channels: 64,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4.0,
            num_classes: 3,
            cond_dropout_prob: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("model.{field}"), msg));
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return bad(
                "patch_side",
                format!(
                    "{} does not divide image_side {}",
                    self.patch_side, self.image_side
                ),
            );
        }
        if self.tokens() < 2 {
            return bad("image_side", "need at least 2 tokens".into());
        }
        if self.channels < 2 {
            return bad("channels", "need at least 2 channels".into());
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(
                "heads",
                format!("{} does not divide channels {}", self.heads, self.channels),
            );
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return bad("mlp_ratio", format!("must be positive, got {}", self.mlp_ratio));
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return bad(
                "cond_dropout_prob",
                format!("must be in [0,1], got {}", self.cond_dropout_prob),
            );
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn hidden(&self) -> usize {
        (self.channels as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Class label or the null condition ∅.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    fn embed_row(self, cfg: &ModelConfig) -> Result<usize> {
        match self {
            Condition::Class(c) if c < cfg.num_classes => Ok(c),
            Condition::Class(c) => Err(Error::invalid(format!(
                "class id {c} out of range (num_classes = {})",
                cfg.num_classes
            ))),
            Condition::Null => Ok(cfg.num_classes),
        }
    }
}

/// Swap-perturbation switches for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSpec {
    pub active: bool,
    pub spatial_r: f64,
    pub channel_r: f64,
    pub policy: SwapPolicy,
    pub at_block_input: bool,
    pub at_pre_residual: bool,
}

impl PerturbSpec {
    pub fn inactive() -> Self {
        Self {
            active: false,
            spatial_r: 0.0,
            channel_r: 0.0,
            policy: SwapPolicy::Dissimilar,
            at_block_input: true,
            at_pre_residual: true,
        }
    }

    /// Active swap perturbation at both injection sites.
    pub fn swap(spatial_r: f64, channel_r: f64, policy: SwapPolicy) -> Self {
        Self {
            active: true,
            spatial_r,
            channel_r,
            policy,
            at_block_input: true,
            at_pre_residual: true,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, r) in [("spatial_r", self.spatial_r), ("channel_r", self.channel_r)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("{name} must be in [0,1], got {r}")));
            }
        }
        Ok(())
    }
}

/// How one batch instance is processed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BranchMode {
    Clean,
    Swap(PerturbSpec),
    /// Every attention-weight matrix replaced by the identity.
    AttnIdentity,
}

impl BranchMode {
    fn from_perturb(p: &PerturbSpec) -> Self {
        if p.active {
            BranchMode::Swap(*p)
        } else {
            BranchMode::Clean
        }
    }
}

/// Sinusoidal embedding: first half `sin(t·f_k)`, second half `cos(t·f_k)`
/// with `f_k = 10000^(-k/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    let ln = (10000.0f64).ln();
    for k in 0..half {
        let freq = (-ln * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Splits a square image into raster-ordered patches, each flattened in
/// raster order: a `1 × tokens × patch_side²` tensor.
pub fn patchify(image: &[f64], cfg: &ModelConfig) -> Result<TokenTensor> {
    patchify_batch(&[image], cfg)
}

pub fn patchify_batch<I: AsRef<[f64]>>(images: &[I], cfg: &ModelConfig) -> Result<TokenTensor> {
    let (side, ps, g) = (cfg.image_side, cfg.patch_side, cfg.grid_side());
    let mut data = Vec::with_capacity(images.len() * cfg.pixels());
    for img in images {
        let img = img.as_ref();
        if img.len() != cfg.pixels() {
            return Err(Error::shape("patchify", cfg.pixels(), img.len()));
        }
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..ps {
                    let row = (gy * ps + py) * side + gx * ps;
                    data.extend_from_slice(&img[row..row + ps]);
                }
            }
        }
    }
    TokenTensor::new(images.len(), cfg.tokens(), cfg.patch_dim(), data)
}

/// Inverse of [`patchify_batch`]: one flattened image per instance.
pub fn unpatchify(x: &TokenTensor, cfg: &ModelConfig) -> Result<Vec<Vec<f64>>> {
    if (x.tokens(), x.channels()) != (cfg.tokens(), cfg.patch_dim()) {
        return Err(Error::shape(
            "unpatchify",
            format!("_x{}x{}", cfg.tokens(), cfg.patch_dim()),
            format!("_x{}x{}", x.tokens(), x.channels()),
        ));
    }
    let (side, ps, g) = (cfg.image_side, cfg.patch_side, cfg.grid_side());
    Ok((0..x.batch())
        .map(|b| {
            let inst = x.instance(b);
            let mut img = vec![0.0; cfg.pixels()];
            for gy in 0..g {
                for gx in 0..g {
                    let patch = &inst[(gy * g + gx) * ps * ps..][..ps * ps];
                    for py in 0..ps {
                        let row = (gy * ps + py) * side + gx * ps;
                        img[row..row + ps].copy_from_slice(&patch[py * ps..(py + 1) * ps]);
                    }
                }
            }
            img
        })
        .collect())
}

pub(crate) fn linear_forward(x: &[f64], rows: usize, l: &Linear) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * l.fan_out);
    for _ in 0..rows {
        out.extend_from_slice(&l.bias);
    }
    matmul_acc(x, &l.weight, &mut out, rows, l.fan_in, l.fan_out);
    out
}

fn add_in_place(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

struct LnOut {
    y: Vec<f64>,
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

fn ln_forward(x: &[f64], gain: &[f64], bias: &[f64], d: usize) -> LnOut {
    let rows = x.len() / d;
    let mut out = LnOut {
        y: vec![0.0; x.len()],
        xhat: vec![0.0; x.len()],
        inv: vec![0.0; rows],
    };
    tensor::layer_norm_rows(x, gain, bias, LN_EPS, d, &mut out.y, &mut out.xhat, &mut out.inv);
    out
}

/// Which hook site inside a block a swap is applied at.
#[derive(Clone, Copy)]
enum Site {
    BlockInput = 0,
    Attention = 1,
    Mlp = 2,
}

fn swap_hook(
    buf: &mut [f64],
    tokens: usize,
    channels: usize,
    spec: &PerturbSpec,
    rng: &RngStream,
    block: usize,
    site: Site,
) -> Result<()> {
    let index = (block * 3 + site as usize) as u64;
    if spec.spatial_r > 0.0 {
        let m = Matrix::new(tokens, channels, buf.to_vec())?;
        let plan = plan_for_instance(
            &m,
            SwapAxis::Spatial,
            spec.spatial_r,
            spec.policy,
            &mut rng.derive("swap-spatial", index),
        )?;
        plan.apply_in_place(buf, tokens, channels);
    }
    if spec.channel_r > 0.0 {
        let m = Matrix::new(tokens, channels, buf.to_vec())?;
        let plan = plan_for_instance(
            &m,
            SwapAxis::Channel,
            spec.channel_r,
            spec.policy,
            &mut rng.derive("swap-channel", index),
        )?;
        plan.apply_in_place(buf, tokens, channels);
    }
    Ok(())
}

fn run_hooks(
    buf: &mut [f64],
    cfg: &ModelConfig,
    modes: &[BranchMode],
    rngs: &[RngStream],
    block: usize,
    site: Site,
) -> Result<()> {
    let (t, d) = (cfg.tokens(), cfg.channels);
    for (b, mode) in modes.iter().enumerate() {
        if let BranchMode::Swap(spec) = mode {
            let enabled = match site {
                Site::BlockInput => spec.at_block_input,
                Site::Attention | Site::Mlp => spec.at_pre_residual,
            };
            if enabled {
                swap_hook(&mut buf[b * t * d..(b + 1) * t * d], t, d, spec, &rngs[b], block, site)?;
            }
        }
    }
    Ok(())
}

/// Copies head `h`'s columns of the q/k/v section `part` for one instance.
fn head_slice(qkv: &[f64], t: usize, d: usize, dh: usize, part: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * dh);
    for row in qkv.chunks_exact(3 * d).take(t) {
        let start = part * d + h * dh;
        out.extend_from_slice(&row[start..start + dh]);
    }
    out
}

/// Multi-head attention for all instances. Returns the concatenated head
/// outputs and, when `keep_probs` is set, the attention weights laid out as
/// `batch × heads × tokens × tokens`.
fn attention(
    qkv: &[f64],
    cfg: &ModelConfig,
    modes: &[BranchMode],
    keep_probs: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (t, d, nh, dh) = (cfg.tokens(), cfg.channels, cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let batch = modes.len();
    let mut out = vec![0.0; batch * t * d];
    let mut probs_all = if keep_probs {
        Vec::with_capacity(batch * nh * t * t)
    } else {
        Vec::new()
    };
    for (b, mode) in modes.iter().enumerate() {
        let inst = &qkv[b * t * 3 * d..(b + 1) * t * 3 * d];
        let o = &mut out[b * t * d..(b + 1) * t * d];
        for h in 0..nh {
            let v = head_slice(inst, t, d, dh, 2, h);
            let oh = if *mode == BranchMode::AttnIdentity {
                v
            } else {
                let q = head_slice(inst, t, d, dh, 0, h);
                let k = head_slice(inst, t, d, dh, 1, h);
                let mut s = vec![0.0; t * t];
                tensor::matmul_a_bt(&q, &k, &mut s, t, dh, t);
                for row in s.chunks_exact_mut(t) {
                    row.iter_mut().for_each(|x| *x *= scale);
                    tensor::softmax_in_place(row);
                }
                let mut oh = vec![0.0; t * dh];
                matmul_acc(&s, &v, &mut oh, t, t, dh);
                if keep_probs {
                    probs_all.extend_from_slice(&s);
                }
                oh
            };
            for (row, src) in o.chunks_exact_mut(d).zip(oh.chunks_exact(dh)) {
                row[h * dh..(h + 1) * dh].copy_from_slice(src);
            }
        }
    }
    (out, probs_all)
}

fn check_block(h: &[f64], block: usize) -> Result<()> {
    if h.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("denoiser block {block}")))
    }
}

fn validate_inputs(
    cfg: &ModelConfig,
    x: &TokenTensor,
    ts: &[usize],
    conds: &[Condition],
    modes: &[BranchMode],
    rngs: &[RngStream],
) -> Result<()> {
    if (x.tokens(), x.channels()) != (cfg.tokens(), cfg.patch_dim()) {
        return Err(Error::shape(
            "denoiser forward",
            format!("_x{}x{}", cfg.tokens(), cfg.patch_dim()),
            format!("_x{}x{}", x.tokens(), x.channels()),
        ));
    }
    let b = x.batch();
    for (what, len) in [
        ("timesteps", ts.len()),
        ("conditions", conds.len()),
        ("modes", modes.len()),
        ("rng streams", rngs.len()),
    ] {
        if len != b {
            return Err(Error::shape("denoiser forward", format!("{b} {what}"), len));
        }
    }
    for m in modes {
        if let BranchMode::Swap(p) = m {
            p.validate()?;
        }
    }
    Ok(())
}

/// Batched forward with an explicit mode, timestep, condition and random
/// stream per instance. `cache` is filled for the backward pass and is only
/// accepted when every instance runs clean.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch(
    params: &ModelParameters,
    cfg: &ModelConfig,
    x: &TokenTensor,
    ts: &[usize],
    conds: &[Condition],
    modes: &[BranchMode],
    rngs: &[RngStream],
    mut cache: Option<&mut ForwardCache>,
) -> Result<TokenTensor> {
    validate_inputs(cfg, x, ts, conds, modes, rngs)?;
    if cache.is_some() && modes.iter().any(|m| *m != BranchMode::Clean) {
        return Err(Error::invalid("forward cache requires an unperturbed pass"));
    }
    let (batch, t, d) = (x.batch(), cfg.tokens(), cfg.channels);
    let rows = batch * t;
    let hidden = cfg.hidden();

    // conditioning vector per instance
    let mut temb = Vec::with_capacity(batch * d);
    for &step in ts {
        temb.extend(timestep_embedding(step, d));
    }
    let t_pre = linear_forward(&temb, batch, &params.time_fc1);
    let t_act: Vec<f64> = t_pre.iter().map(|&v| gelu_scalar(v)).collect();
    let mut cvec = linear_forward(&t_act, batch, &params.time_fc2);
    let mut class_rows = Vec::with_capacity(batch);
    for (b, cond) in conds.iter().enumerate() {
        let row = cond.embed_row(cfg)?;
        class_rows.push(row);
        add_in_place(&mut cvec[b * d..(b + 1) * d], &params.class_embed[row * d..(row + 1) * d]);
    }

    let mut h = linear_forward(x.data(), rows, &params.patch_embed);
    for (b, inst) in h.chunks_exact_mut(t * d).enumerate() {
        add_in_place(inst, &params.pos_embed);
        for tok in inst.chunks_exact_mut(d) {
            add_in_place(tok, &cvec[b * d..(b + 1) * d]);
        }
    }

    let keep = cache.is_some();
    let mut block_caches = Vec::new();
    for (bi, blk) in params.blocks.iter().enumerate() {
        run_hooks(&mut h, cfg, modes, rngs, bi, Site::BlockInput)?;

        let ln1 = ln_forward(&h, &blk.ln1_gain, &blk.ln1_bias, d);
        let qkv = linear_forward(&ln1.y, rows, &blk.qkv);
        let (attn, probs) = attention(&qkv, cfg, modes, keep);
        let mut y = linear_forward(&attn, rows, &blk.proj);
        run_hooks(&mut y, cfg, modes, rngs, bi, Site::Attention)?;
        add_in_place(&mut h, &y);

        let ln2 = ln_forward(&h, &blk.ln2_gain, &blk.ln2_bias, d);
        let u = linear_forward(&ln2.y, rows, &blk.fc1);
        let g: Vec<f64> = u.iter().map(|&v| gelu_scalar(v)).collect();
        let mut f = linear_forward(&g, rows, &blk.fc2);
        run_hooks(&mut f, cfg, modes, rngs, bi, Site::Mlp)?;
        add_in_place(&mut h, &f);
        check_block(&h, bi)?;
        debug_assert_eq!(u.len(), rows * hidden);

        if keep {
            block_caches.push(backward::BlockCache {
                ln1_xhat: ln1.xhat,
                ln1_inv: ln1.inv,
                a: ln1.y,
                qkv,
                probs,
                attn,
                ln2_xhat: ln2.xhat,
                ln2_inv: ln2.inv,
                m: ln2.y,
                u,
                g,
            });
        }
    }

    let lnf = ln_forward(&h, &params.final_ln_gain, &params.final_ln_bias, d);
    let out = linear_forward(&lnf.y, rows, &params.head);
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("denoiser output head".into()));
    }
    if let Some(c) = cache.as_deref_mut() {
        *c = ForwardCache {
            batch,
            patches: x.data().to_vec(),
            temb,
            t_pre,
            t_act,
            class_rows,
            blocks: block_caches,
            lnf_xhat: lnf.xhat,
            lnf_inv: lnf.inv,
            z: lnf.y,
        };
    }
    Ok(TokenTensor::from_parts_unchecked(batch, t, cfg.patch_dim(), out))
}

/// Per-instance random streams: instance `b` gets `rng.derive("instance", b)`.
pub fn instance_streams(rng: &RngStream, batch: usize) -> Vec<RngStream> {
    (0..batch as u64).map(|b| rng.derive("instance", b)).collect()
}

/// ε prediction for a batch sharing one timestep.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    params: &ModelParameters,
    cfg: &ModelConfig,
    x_t: &TokenTensor,
    t: usize,
    conds: &[Condition],
    perturb: &PerturbSpec,
    rng: &RngStream,
) -> Result<TokenTensor> {
    let b = x_t.batch();
    forward_batch(
        params,
        cfg,
        x_t,
        &vec![t; b],
        conds,
        &vec![BranchMode::from_perturb(perturb); b],
        &instance_streams(rng, b),
        None,
    )
}

/// Clean and perturbed predictions from one batch-concatenated pass.
///
/// Instance `b` of each half uses the stream `rng.derive("instance", b)`, so
/// the halves equal two separate [`forward`] calls bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn forward_two_branch(
    params: &ModelParameters,
    cfg: &ModelConfig,
    x_t: &TokenTensor,
    t: usize,
    conds: &[Condition],
    perturb: &PerturbSpec,
    rng: &RngStream,
) -> Result<(TokenTensor, TokenTensor)> {
    let b = x_t.batch();
    let joint = TokenTensor::concat_batch(&[x_t, x_t])?;
    let mut modes = vec![BranchMode::Clean; b];
    modes.extend(vec![BranchMode::from_perturb(perturb); b]);
    let streams = instance_streams(rng, b);
    let rngs: Vec<RngStream> = streams.iter().chain(&streams).cloned().collect();
    let conds2: Vec<Condition> = conds.iter().chain(conds).copied().collect();
    let out = forward_batch(params, cfg, &joint, &vec![t; 2 * b], &conds2, &modes, &rngs, None)?;
    let mut halves = out.split_batch(b)?.into_iter();
    Ok((halves.next().unwrap(), halves.next().unwrap()))
}

/// Clean forward that records everything [`backward`] needs.
pub fn forward_train(
    params: &ModelParameters,
    cfg: &ModelConfig,
    x_t: &TokenTensor,
    ts: &[usize],
    conds: &[Condition],
) -> Result<(TokenTensor, ForwardCache)> {
    let b = x_t.batch();
    let mut cache = ForwardCache::default();
    let rng = RngStream::new(0, 0);
    let out = forward_batch(
        params,
        cfg,
        x_t,
        ts,
        conds,
        &vec![BranchMode::Clean; b],
        &vec![rng; b],
        Some(&mut cache),
    )?;
    Ok((out, cache))
}
