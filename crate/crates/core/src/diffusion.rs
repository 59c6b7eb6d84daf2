//! Variance-preserving discrete diffusion.
//!
//! The forward process uses the discrete marginal
//! `x_t = sqrt(ᾱ_t)·x_0 + sqrt(1-ᾱ_t)·ε`. The network predicts ε; the score
//! is recovered as `-ε/σ_t`, so the ε-MSE objective is denoising score
//! matching with weight `λ(t)·σ_t²`.
//!
//! Two samplers walk an evenly spaced, largest-first subsequence of the
//! training steps and finish at the clean endpoint (`ᾱ = 1`):
//! DDIM in VP space, and Euler-discrete in the rescaled sigma space
//! `σ = sqrt((1-ᾱ)/ᾱ)`, where `x_σ = x_t / sqrt(ᾱ_t)`.

use std::fmt;

use crate::denoiser::{self, Condition, ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::guidance::{self, GuidanceSpec, GuidanceTrace};
use crate::rng::RngStream;
use crate::tensor::TokenTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
    pub lambda_weight: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `train_steps` steps.
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps < 2 {
            return Err(Error::config("schedule.train_steps", "must be >= 2"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(
                "schedule.beta_end",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
            ));
        }
        let n = train_steps;
        let beta: Vec<f64> = (0..n)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = alpha_bar.iter().map(|ab| (1.0 - ab).sqrt()).collect();
        Ok(Self {
            train_steps,
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
            sigma,
            lambda_weight: vec![1.0; n],
        })
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < self.train_steps {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "timestep {t} out of range (train_steps = {})",
                self.train_steps
            )))
        }
    }

    /// ᾱ at `t`; `None` is the clean endpoint with ᾱ = 1.
    pub fn alpha_bar_at(&self, t: Option<usize>) -> Result<f64> {
        match t {
            None => Ok(1.0),
            Some(t) => {
                self.check_t(t)?;
                Ok(self.alpha_bar[t])
            }
        }
    }

    /// Rescaled noise level `sqrt((1-ᾱ)/ᾱ)`; zero at the clean endpoint.
    pub fn karras_sigma(&self, t: Option<usize>) -> Result<f64> {
        let ab = self.alpha_bar_at(t)?;
        Ok(((1.0 - ab) / ab).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddim,
    EulerDiscrete,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddim => "ddim",
            SamplerKind::EulerDiscrete => "euler",
        })
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerKind::Ddim),
            "euler" | "euler_discrete" => Ok(SamplerKind::EulerDiscrete),
            other => Err(Error::invalid(format!("unknown sampler `{other}` (ddim|euler)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub num_inference_steps: usize,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            num_inference_steps: 50,
            eta: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_inference_steps == 0 || self.num_inference_steps > schedule.train_steps {
            return Err(Error::config(
                "sampler.steps",
                format!(
                    "must be in 1..={}, got {}",
                    schedule.train_steps, self.num_inference_steps
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config("sampler.eta", format!("must be in [0,1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// Evenly spaced training steps, largest first: `floor(i·N/n)` for
/// `i = n-1 … 0`.
pub fn inference_timesteps(train_steps: usize, n: usize) -> Vec<usize> {
    (0..n).rev().map(|i| i * train_steps / n).collect()
}

fn map2(a: &TokenTensor, b: &TokenTensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<TokenTensor> {
    if !a.same_shape(b) {
        return Err(Error::shape(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(op.to_string()));
    }
    let (bb, t, d) = a.shape();
    Ok(TokenTensor::from_parts_unchecked(bb, t, d, data))
}

/// Forward marginal `sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·ε`.
pub fn add_noise(x0: &TokenTensor, t: usize, eps: &TokenTensor, schedule: &NoiseSchedule) -> Result<TokenTensor> {
    schedule.check_t(t)?;
    let (a, s) = (schedule.alpha_bar[t].sqrt(), schedule.sigma[t]);
    map2(x0, eps, "add_noise", |x, e| a * x + s * e)
}

/// One DDIM transition between explicit ᾱ levels.
///
/// `x0_hat = (x - sqrt(1-ᾱ_from)·ε̂) / sqrt(ᾱ_from)` and
/// `x_to = sqrt(ᾱ_to)·x0_hat + sqrt(1-ᾱ_to-σ̃²)·ε̂ + σ̃·z` with
/// `σ̃ = η·sqrt((1-ᾱ_to)/(1-ᾱ_from))·sqrt(1-ᾱ_from/ᾱ_to)`. No noise is drawn
/// when `σ̃ = 0`.
pub fn ddim_transition(
    x_t: &TokenTensor,
    eps_hat: &TokenTensor,
    ab_from: f64,
    ab_to: f64,
    eta: f64,
    rng: &mut RngStream,
) -> Result<TokenTensor> {
    if !(ab_from > 0.0 && ab_from <= 1.0 && ab_to > 0.0 && ab_to <= 1.0) {
        return Err(Error::invalid(format!("alpha_bar out of (0,1]: {ab_from}, {ab_to}")));
    }
    let sqrt_from = ab_from.sqrt();
    let sigma_from = (1.0 - ab_from).sqrt();
    let var_tilde = if eta > 0.0 && ab_from < 1.0 {
        eta * eta * ((1.0 - ab_to) / (1.0 - ab_from)) * (1.0 - ab_from / ab_to)
    } else {
        0.0
    };
    let sqrt_to = ab_to.sqrt();
    let dir = (1.0 - ab_to - var_tilde).max(0.0).sqrt();
    let mut out = map2(x_t, eps_hat, "ddim_step", |x, e| {
        let x0_hat = (x - sigma_from * e) / sqrt_from;
        sqrt_to * x0_hat + dir * e
    })?;
    if var_tilde > 0.0 {
        let s = var_tilde.sqrt();
        for v in out.data_mut() {
            *v += s * rng.normal();
        }
    }
    Ok(out)
}

/// DDIM step from training step `t_from` to `t_to` (`None` = clean endpoint).
pub fn ddim_step(
    x_t: &TokenTensor,
    eps_hat: &TokenTensor,
    t_from: usize,
    t_to: Option<usize>,
    schedule: &NoiseSchedule,
    eta: f64,
    rng: &mut RngStream,
) -> Result<TokenTensor> {
    if let Some(to) = t_to {
        if to >= t_from {
            return Err(Error::invalid(format!("ddim step must go backwards: {t_from} -> {to}")));
        }
    }
    let ab_from = schedule.alpha_bar_at(Some(t_from))?;
    let ab_to = schedule.alpha_bar_at(t_to)?;
    ddim_transition(x_t, eps_hat, ab_from, ab_to, eta, rng)
}

/// First-order Euler step in sigma space.
///
/// With `denoised = x - σ_from·ε̂`, the derivative `(x - denoised)/σ_from`
/// reduces to `ε̂`, which is what is used, so a step to `σ_to = 0` lands on
/// `denoised` exactly.
pub fn euler_step(x: &TokenTensor, eps_hat: &TokenTensor, sigma_from: f64, sigma_to: f64) -> Result<TokenTensor> {
    if sigma_from == 0.0 {
        return Err(Error::invalid("euler step from sigma = 0"));
    }
    let dt = sigma_to - sigma_from;
    map2(x, eps_hat, "euler_step", |xv, d| xv + dt * d)
}

/// `x - σ·ε̂`.
pub fn euler_denoised(x: &TokenTensor, eps_hat: &TokenTensor, sigma: f64) -> Result<TokenTensor> {
    map2(x, eps_hat, "euler_denoised", |xv, e| xv - sigma * e)
}

/// Standard-normal starting noise, one stream per batch element.
pub fn initial_noise(batch: usize, tokens: usize, channels: usize, rng: &RngStream) -> TokenTensor {
    let mut data = Vec::with_capacity(batch * tokens * channels);
    for b in 0..batch {
        data.extend(rng.derive("init-noise", b as u64).normals(tokens * channels));
    }
    TokenTensor::from_parts_unchecked(batch, tokens, channels, data)
}

/// Runs a sampler from VP-space noise `x_init` with an arbitrary ε
/// predictor `predict(x_t, t, step_index)`.
pub fn run_sampler<F>(
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    x_init: TokenTensor,
    rng: &RngStream,
    mut predict: F,
) -> Result<TokenTensor>
where
    F: FnMut(&TokenTensor, usize, usize) -> Result<TokenTensor>,
{
    sampler.validate(schedule)?;
    let ts = inference_timesteps(schedule.train_steps, sampler.num_inference_steps);
    match sampler.kind {
        SamplerKind::Ddim => {
            let mut x = x_init;
            for (i, &t) in ts.iter().enumerate() {
                let eps = predict(&x, t, i)?;
                let to = ts.get(i + 1).copied();
                let mut step_rng = rng.derive("ddim-eta", i as u64);
                x = ddim_step(&x, &eps, t, to, schedule, sampler.eta, &mut step_rng)?;
            }
            Ok(x)
        }
        SamplerKind::EulerDiscrete => {
            let sigmas: Vec<f64> = ts
                .iter()
                .map(|&t| schedule.karras_sigma(Some(t)))
                .chain(std::iter::once(Ok(0.0)))
                .collect::<Result<_>>()?;
            let scale0 = (sigmas[0] * sigmas[0] + 1.0).sqrt();
            let mut x = x_init;
            x.data_mut().iter_mut().for_each(|v| *v *= scale0);
            for (i, &t) in ts.iter().enumerate() {
                let s = 1.0 / (sigmas[i] * sigmas[i] + 1.0).sqrt();
                let mut x_in = x.clone();
                x_in.data_mut().iter_mut().for_each(|v| *v *= s);
                let eps = predict(&x_in, t, i)?;
                x = euler_step(&x, &eps, sigmas[i], sigmas[i + 1])?;
            }
            Ok(x)
        }
    }
}

/// Generates one sample per entry of `conds`, returned as patch tokens.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    params: &ModelParameters,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    guidance: &GuidanceSpec,
    conds: &[Condition],
    rng: &RngStream,
    mut trace: Option<&mut GuidanceTrace>,
) -> Result<TokenTensor> {
    guidance.validate()?;
    if conds.is_empty() {
        return Err(Error::invalid("sample needs at least one condition entry"));
    }
    let x_init = initial_noise(conds.len(), cfg.tokens(), cfg.patch_dim(), rng);
    run_sampler(schedule, sampler, x_init, rng, |x, t, i| {
        let step_rng = rng.derive("guidance-step", i as u64);
        let (eps, map) = guidance::predict_guided(
            params,
            cfg,
            guidance,
            x,
            t,
            conds,
            &step_rng,
            trace.is_some(),
        )?;
        if let (Some(tr), Some(map)) = (trace.as_deref_mut(), map) {
            tr.push(i, t, map);
        }
        Ok(eps)
    })
}

/// One training batch for the ε-objective.
#[derive(Debug, Clone)]
pub struct DsmBatch {
    pub x_t: TokenTensor,
    pub eps: TokenTensor,
    pub timesteps: Vec<usize>,
    pub conds: Vec<Condition>,
}

/// Draws timesteps, noise and condition dropout for `x0`.
pub fn draw_dsm_batch(
    schedule: &NoiseSchedule,
    x0: &TokenTensor,
    labels: &[Condition],
    cond_dropout_prob: f64,
    rng: &mut RngStream,
) -> Result<DsmBatch> {
    let (b, t, d) = x0.shape();
    if labels.len() != b {
        return Err(Error::shape("draw_dsm_batch", b, labels.len()));
    }
    let mut ts = Vec::with_capacity(b);
    let mut conds = Vec::with_capacity(b);
    let mut eps = Vec::with_capacity(b * t * d);
    let mut x_t = Vec::with_capacity(b * t * d);
    for (i, &label) in labels.iter().enumerate() {
        let step = rng.below(schedule.train_steps);
        let drop = rng.uniform() < cond_dropout_prob;
        let noise = rng.normals(t * d);
        let (a, s) = (schedule.alpha_bar[step].sqrt(), schedule.sigma[step]);
        x_t.extend(x0.instance(i).iter().zip(&noise).map(|(x, e)| a * x + s * e));
        eps.extend(noise);
        ts.push(step);
        conds.push(if drop { Condition::Null } else { label });
    }
    Ok(DsmBatch {
        x_t: TokenTensor::new(b, t, d, x_t)?,
        eps: TokenTensor::from_parts_unchecked(b, t, d, eps),
        timesteps: ts,
        conds,
    })
}

/// `mean_b λ(t_b)·‖pred_b - ε_b‖²` and its gradient with respect to `pred`.
pub fn dsm_objective(pred: &TokenTensor, batch: &DsmBatch, schedule: &NoiseSchedule) -> Result<(f64, TokenTensor)> {
    if !pred.same_shape(&batch.eps) {
        return Err(Error::shape("dsm_objective", format!("{:?}", batch.eps.shape()), format!("{:?}", pred.shape())));
    }
    let (b, t, d) = pred.shape();
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * t * d);
    for i in 0..b {
        let w = schedule.lambda_weight[batch.timesteps[i]];
        let mut sq = 0.0;
        for (p, e) in pred.instance(i).iter().zip(batch.eps.instance(i)) {
            let r = p - e;
            sq += r * r;
            grad.push(2.0 * w * inv_b * r);
        }
        loss += w * sq;
    }
    Ok((loss * inv_b, TokenTensor::from_parts_unchecked(b, t, d, grad)))
}

/// Denoising score matching loss in ε-parametrisation with gradients.
pub fn dsm_loss(
    params: &ModelParameters,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    x0: &TokenTensor,
    labels: &[Condition],
    rng: &mut RngStream,
) -> Result<(f64, ModelParameters)> {
    let batch = draw_dsm_batch(schedule, x0, labels, cfg.cond_dropout_prob, rng)?;
    let (pred, cache) = denoiser::forward_train(params, cfg, &batch.x_t, &batch.timesteps, &batch.conds)?;
    let (loss, grad_out) = dsm_objective(&pred, &batch, schedule)?;
    let grads = denoiser::backward(params, cfg, &cache, &grad_out)?;
    Ok((loss, grads))
}
