use crate::error::{Error, Result};
use crate::rng::RngStream;

use super::ModelConfig;

/// Affine layer stored as `fan_in × fan_out` row-major weight plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn init(fan_in: usize, fan_out: usize, std: f64, rng: &mut RngStream) -> Self {
        let mut l = Self::zeros(fan_in, fan_out);
        l.weight.iter_mut().for_each(|w| *w = std * rng.normal());
        l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// All weights of the denoiser. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub patch_embed: Linear,
    /// `tokens × channels` learned positional embedding.
    pub pos_embed: Vec<f64>,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    /// `(num_classes + 1) × channels`; the last row is the null condition.
    pub class_embed: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_ln_gain: Vec<f64>,
    pub final_ln_bias: Vec<f64>,
    pub head: Linear,
}

impl ModelParameters {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.channels;
        let p = cfg.patch_dim();
        let hidden = cfg.hidden();
        let block = BlockParams {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            qkv: Linear::zeros(d, 3 * d),
            proj: Linear::zeros(d, d),
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            fc1: Linear::zeros(d, hidden),
            fc2: Linear::zeros(hidden, d),
        };
        Self {
            patch_embed: Linear::zeros(p, d),
            pos_embed: vec![0.0; cfg.tokens() * d],
            time_fc1: Linear::zeros(d, d),
            time_fc2: Linear::zeros(d, d),
            class_embed: vec![0.0; (cfg.num_classes + 1) * d],
            blocks: vec![block; cfg.blocks],
            final_ln_gain: vec![0.0; d],
            final_ln_bias: vec![0.0; d],
            head: Linear::zeros(d, p),
        }
    }

    /// Random initialisation: unit-variance-preserving linear layers, unit
    /// layer-norm gains, residual branch outputs scaled by `1/sqrt(2·blocks)`
    /// and a small output head.
    pub fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let d = cfg.channels;
        let p = cfg.patch_dim();
        let hidden = cfg.hidden();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let resid = 1.0 / (2.0 * cfg.blocks.max(1) as f64).sqrt();
        let patch_embed = Linear::init(p, d, fan(p), rng);
        let pos_embed = (0..cfg.tokens() * d).map(|_| 0.1 * rng.normal()).collect();
        let time_fc1 = Linear::init(d, d, fan(d), rng);
        let time_fc2 = Linear::init(d, d, fan(d), rng);
        let class_embed = (0..(cfg.num_classes + 1) * d)
            .map(|_| 0.1 * rng.normal())
            .collect();
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                qkv: Linear::init(d, 3 * d, fan(d), rng),
                proj: Linear::init(d, d, fan(d) * resid, rng),
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                fc1: Linear::init(d, hidden, fan(d), rng),
                fc2: Linear::init(hidden, d, fan(hidden) * resid, rng),
            })
            .collect();
        Self {
            patch_embed,
            pos_embed,
            time_fc1,
            time_fc2,
            class_embed,
            blocks,
            final_ln_gain: vec![1.0; d],
            final_ln_bias: vec![0.0; d],
            head: Linear::init(d, p, 0.02, rng),
        }
    }

    /// Visits every tensor in declaration order with its name and shape.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        fn lin(f: &mut dyn FnMut(&str, &[usize], &[f64]), name: &str, l: &Linear) {
            f(&format!("{name}.weight"), &[l.fan_in, l.fan_out], &l.weight);
            f(&format!("{name}.bias"), &[l.fan_out], &l.bias);
        }
        let d = self.final_ln_gain.len();
        lin(f, "patch_embed", &self.patch_embed);
        f("pos_embed", &[self.pos_embed.len() / d, d], &self.pos_embed);
        lin(f, "time_fc1", &self.time_fc1);
        lin(f, "time_fc2", &self.time_fc2);
        f("class_embed", &[self.class_embed.len() / d, d], &self.class_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{i}.ln1.gain"), &[d], &b.ln1_gain);
            f(&format!("blocks.{i}.ln1.bias"), &[d], &b.ln1_bias);
            lin(f, &format!("blocks.{i}.qkv"), &b.qkv);
            lin(f, &format!("blocks.{i}.proj"), &b.proj);
            f(&format!("blocks.{i}.ln2.gain"), &[d], &b.ln2_gain);
            f(&format!("blocks.{i}.ln2.bias"), &[d], &b.ln2_bias);
            lin(f, &format!("blocks.{i}.fc1"), &b.fc1);
            lin(f, &format!("blocks.{i}.fc2"), &b.fc2);
        }
        f("final_ln.gain", &[d], &self.final_ln_gain);
        f("final_ln.bias", &[d], &self.final_ln_bias);
        lin(f, "head", &self.head);
    }

    /// Mutable counterpart of [`visit`](Self::visit); same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        fn lin(f: &mut dyn FnMut(&str, &mut [f64]), name: &str, l: &mut Linear) {
            f(&format!("{name}.weight"), &mut l.weight);
            f(&format!("{name}.bias"), &mut l.bias);
        }
        lin(f, "patch_embed", &mut self.patch_embed);
        f("pos_embed", &mut self.pos_embed);
        lin(f, "time_fc1", &mut self.time_fc1);
        lin(f, "time_fc2", &mut self.time_fc2);
        f("class_embed", &mut self.class_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{i}.ln1.gain"), &mut b.ln1_gain);
            f(&format!("blocks.{i}.ln1.bias"), &mut b.ln1_bias);
            lin(f, &format!("blocks.{i}.qkv"), &mut b.qkv);
            lin(f, &format!("blocks.{i}.proj"), &mut b.proj);
            f(&format!("blocks.{i}.ln2.gain"), &mut b.ln2_gain);
            f(&format!("blocks.{i}.ln2.bias"), &mut b.ln2_bias);
            lin(f, &format!("blocks.{i}.fc1"), &mut b.fc1);
            lin(f, &format!("blocks.{i}.fc2"), &mut b.fc2);
        }
        f("final_ln.gain", &mut self.final_ln_gain);
        f("final_ln.bias", &mut self.final_ln_bias);
        lin(f, "head", &mut self.head);
    }

    /// `(name, shape)` of every tensor in declaration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, shape, _| out.push((name.to_string(), shape.to_vec())));
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, data| out.extend_from_slice(data));
        out
    }

    pub fn num_values(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data| n += data.len());
        n
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParameters) -> Result<()> {
        let flat = other.flatten();
        if flat.len() != self.num_values() {
            return Err(Error::shape("add_scaled", self.num_values(), flat.len()));
        }
        let mut offset = 0;
        self.visit_mut(&mut |_, data| {
            for (v, g) in data.iter_mut().zip(&flat[offset..]) {
                *v += scale * g;
            }
            offset += data.len();
        });
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, data| ok &= data.iter().all(|v| v.is_finite()));
        ok
    }
}
