//! Guidance combinators and self-swap orchestration.
//!
//! * classifier-free: `ε_c + ω·(ε_c − ε_∅)`
//! * condition-free:  `ε_ori + ω·(ε_ori − ε_pert)`, where the perturbed
//!   prediction comes from token swaps (SSG), Gaussian noise on the input
//!   (a simplified SAG-like baseline) or identity attention (a simplified
//!   PAG-like baseline)
//! * SSG with CFG: `ε_c + ω·(ε_c − ε_pert) + ω_cfg·(ε_c − ε_∅)`

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::denoiser::{self, BranchMode, Condition, ModelConfig, ModelParameters, PerturbSpec};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::swap::SwapPolicy;
use crate::tensor::{Matrix, TokenTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMethod {
    None,
    Cfg,
    Ssg,
    InputNoise,
    AttnIdentity,
}

impl GuidanceMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMethod::None => "none",
            GuidanceMethod::Cfg => "cfg",
            GuidanceMethod::Ssg => "ssg",
            GuidanceMethod::InputNoise => "input_noise",
            GuidanceMethod::AttnIdentity => "attn_identity",
        }
    }
}

impl fmt::Display for GuidanceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GuidanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => GuidanceMethod::None,
            "cfg" => GuidanceMethod::Cfg,
            "ssg" => GuidanceMethod::Ssg,
            "input_noise" => GuidanceMethod::InputNoise,
            "attn_identity" => GuidanceMethod::AttnIdentity,
            other => {
                return Err(Error::invalid(format!(
                    "unknown guidance method `{other}` (none|cfg|ssg|input_noise|attn_identity)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSpec {
    pub method: GuidanceMethod,
    pub omega: f64,
    /// Extra CFG term on top of SSG; 0 disables it.
    pub omega_cfg: f64,
    pub spatial_r: f64,
    pub channel_r: f64,
    pub policy: SwapPolicy,
    pub at_block_input: bool,
    pub at_pre_residual: bool,
    pub input_noise_sigma: f64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            method: GuidanceMethod::None,
            omega: 0.0,
            omega_cfg: 0.0,
            spatial_r: 0.0,
            channel_r: 0.0,
            policy: SwapPolicy::Dissimilar,
            at_block_input: true,
            at_pre_residual: true,
            input_noise_sigma: 0.0,
        }
    }
}

impl GuidanceSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn ssg(omega: f64, spatial_r: f64, channel_r: f64) -> Self {
        Self {
            method: GuidanceMethod::Ssg,
            omega,
            spatial_r,
            channel_r,
            ..Self::default()
        }
    }

    pub fn cfg(omega: f64) -> Self {
        Self {
            method: GuidanceMethod::Cfg,
            omega,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("guidance.omega", self.omega),
            ("guidance.omega_cfg", self.omega_cfg),
            ("guidance.input_noise_sigma", self.input_noise_sigma),
        ];
        for (path, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(path, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (path, r) in [("guidance.spatial_r", self.spatial_r), ("guidance.channel_r", self.channel_r)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(path, format!("must be in [0,1], got {r}")));
            }
        }
        Ok(())
    }

    pub fn perturb_spec(&self) -> PerturbSpec {
        PerturbSpec {
            active: true,
            spatial_r: self.spatial_r,
            channel_r: self.channel_r,
            policy: self.policy,
            at_block_input: self.at_block_input,
            at_pre_residual: self.at_pre_residual,
        }
    }
}

fn combine(a: &TokenTensor, b: &TokenTensor, omega: f64, op: &'static str) -> Result<TokenTensor> {
    if !a.same_shape(b) {
        return Err(Error::shape(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    if omega == 0.0 {
        return Ok(a.clone());
    }
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let delta = x - y;
            // a zero delta leaves x untouched, signed zeros included
            if delta == 0.0 {
                x
            } else {
                x + omega * delta
            }
        })
        .collect();
    let (bb, t, d) = a.shape();
    TokenTensor::new(bb, t, d, data)
}

/// `ε_ori + ω·(ε_ori − ε_pert)`.
pub fn guided_epsilon(eps_ori: &TokenTensor, eps_pert: &TokenTensor, omega: f64) -> Result<TokenTensor> {
    combine(eps_ori, eps_pert, omega, "guided_epsilon")
}

/// `ε_cond + ω·(ε_cond − ε_uncond)`.
pub fn cfg_epsilon(eps_cond: &TokenTensor, eps_uncond: &TokenTensor, omega: f64) -> Result<TokenTensor> {
    combine(eps_cond, eps_uncond, omega, "cfg_epsilon")
}

/// Channel-averaged `|ω·(ε_ori − ε_pert)|`, one row per instance.
pub fn guidance_magnitude(eps_ori: &TokenTensor, eps_pert: &TokenTensor, omega: f64) -> Result<Matrix> {
    if !eps_ori.same_shape(eps_pert) {
        return Err(Error::shape(
            "guidance_magnitude",
            format!("{:?}", eps_ori.shape()),
            format!("{:?}", eps_pert.shape()),
        ));
    }
    let (b, t, d) = eps_ori.shape();
    let mut out = Vec::with_capacity(b * t);
    for (ta, tb) in eps_ori.data().chunks_exact(d).zip(eps_pert.data().chunks_exact(d)) {
        let s: f64 = ta.iter().zip(tb).map(|(x, y)| (omega * (x - y)).abs()).sum();
        out.push(s / d as f64);
    }
    Matrix::new(b, t, out)
}

fn batch_mean_map(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= m.rows() as f64);
    out
}

fn require_classes(conds: &[Condition], what: &str) -> Result<()> {
    if conds.iter().any(|c| *c == Condition::Null) {
        return Err(Error::invalid(format!(
            "{what} needs a class condition for every instance (got the null condition)"
        )));
    }
    Ok(())
}

/// Guided ε for one sampler step. With `want_map`, also returns the
/// batch-averaged per-token guidance magnitude.
#[allow(clippy::too_many_arguments)]
pub fn predict_guided(
    params: &ModelParameters,
    cfg: &ModelConfig,
    spec: &GuidanceSpec,
    x_t: &TokenTensor,
    t: usize,
    conds: &[Condition],
    rng: &RngStream,
    want_map: bool,
) -> Result<(TokenTensor, Option<Vec<f64>>)> {
    spec.validate()?;
    let b = x_t.batch();
    let streams = denoiser::instance_streams(rng, b);
    let zero_map = || vec![0.0; x_t.tokens()];

    // builds one concatenated pass out of (input, conditions, mode) branches
    let run = |branches: &[(&TokenTensor, &[Condition], BranchMode)]| -> Result<Vec<TokenTensor>> {
        let inputs: Vec<&TokenTensor> = branches.iter().map(|br| br.0).collect();
        let joint = TokenTensor::concat_batch(&inputs)?;
        let mut all_conds = Vec::new();
        let mut modes = Vec::new();
        let mut rngs = Vec::new();
        for (_, c, m) in branches {
            all_conds.extend_from_slice(c);
            modes.extend(std::iter::repeat_n(*m, b));
            rngs.extend(streams.iter().cloned());
        }
        let n = joint.batch();
        let out = denoiser::forward_batch(params, cfg, &joint, &vec![t; n], &all_conds, &modes, &rngs, None)?;
        out.split_batch(b)
    };

    let clean_only = |map: bool| -> Result<(TokenTensor, Option<Vec<f64>>)> {
        let mut out = run(&[(x_t, conds, BranchMode::Clean)])?;
        Ok((out.remove(0), map.then(zero_map)))
    };

    match spec.method {
        GuidanceMethod::None => clean_only(want_map),
        GuidanceMethod::Cfg => {
            require_classes(conds, "classifier-free guidance")?;
            let null = vec![Condition::Null; b];
            let mut out = run(&[(x_t, conds, BranchMode::Clean), (x_t, &null, BranchMode::Clean)])?;
            let (c, u) = (out.remove(0), out.remove(0));
            let map = if want_map {
                Some(batch_mean_map(&guidance_magnitude(&c, &u, spec.omega)?))
            } else {
                None
            };
            Ok((cfg_epsilon(&c, &u, spec.omega)?, map))
        }
        GuidanceMethod::Ssg | GuidanceMethod::InputNoise | GuidanceMethod::AttnIdentity => {
            let with_cfg = spec.method == GuidanceMethod::Ssg && spec.omega_cfg > 0.0;
            if with_cfg {
                require_classes(conds, "SSG combined with CFG")?;
            } else if spec.omega == 0.0 {
                return clean_only(want_map);
            }
            let noisy;
            let (pert_input, pert_mode) = match spec.method {
                GuidanceMethod::Ssg => (x_t, BranchMode::Swap(spec.perturb_spec())),
                GuidanceMethod::AttnIdentity => (x_t, BranchMode::AttnIdentity),
                _ => {
                    let mut data = Vec::with_capacity(x_t.data().len());
                    for (i, s) in streams.iter().enumerate() {
                        let mut z = s.derive("input-noise", 0);
                        data.extend(x_t.instance(i).iter().map(|v| v + spec.input_noise_sigma * z.normal()));
                    }
                    let (bb, tt, dd) = x_t.shape();
                    noisy = TokenTensor::new(bb, tt, dd, data)?;
                    (&noisy, BranchMode::Clean)
                }
            };
            let null = vec![Condition::Null; b];
            let mut branches = vec![(x_t, conds, BranchMode::Clean), (pert_input, conds, pert_mode)];
            if with_cfg {
                branches.push((x_t, &null, BranchMode::Clean));
            }
            let mut out = run(&branches)?;
            let (ori, pert) = (out.remove(0), out.remove(0));
            let mut eps = guided_epsilon(&ori, &pert, spec.omega)?;
            if with_cfg {
                let uncond = out.remove(0);
                let data: Vec<f64> = eps
                    .data()
                    .iter()
                    .zip(ori.data().iter().zip(uncond.data()))
                    .map(|(&e, (&c, &u))| e + spec.omega_cfg * (c - u))
                    .collect();
                let (bb, tt, dd) = eps.shape();
                eps = TokenTensor::new(bb, tt, dd, data)?;
            }
            let map = if want_map {
                Some(batch_mean_map(&guidance_magnitude(&ori, &pert, spec.omega)?))
            } else {
                None
            };
            Ok((eps, map))
        }
    }
}

/// One sampler step of guidance-magnitude recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub timestep: usize,
    pub mean_magnitude: f64,
    pub map: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GuidanceTrace {
    pub records: Vec<TraceRecord>,
}

impl GuidanceTrace {
    pub fn push(&mut self, step: usize, timestep: usize, map: Vec<f64>) {
        let mean_magnitude = if map.is_empty() {
            0.0
        } else {
            map.iter().sum::<f64>() / map.len() as f64
        };
        self.records.push(TraceRecord {
            step,
            timestep,
            mean_magnitude,
            map,
        });
    }

    /// One JSON object per line, in step order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<trace>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("trace line {}: {e}", n + 1)))?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}
