//! Binary model checkpoints.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! "SSGCKPT1"                        8 bytes
//! version                           u32
//! image_side patch_side channels    u64 ×3
//! blocks heads                      u64 ×2
//! mlp_ratio                         f64
//! num_classes                       u64
//! cond_dropout_prob                 f64
//! train_steps                       u64
//! beta_start beta_end               f64 ×2
//! step                              u64
//! per tensor, in declared order:
//!   rank u32, dims u64 ×rank, values f64 ×prod(dims)
//! ```

use std::path::Path;

use crate::denoiser::{ModelConfig, ModelParameters};
use crate::diffusion::NoiseSchedule;
use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 8] = b"SSGCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub step: u64,
    pub params: ModelParameters,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, schedule: &NoiseSchedule, step: u64, params: ModelParameters) -> Self {
        Self {
            model,
            train_steps: schedule.train_steps,
            beta_start: schedule.beta_start,
            beta_end: schedule.beta_end,
            step,
            params,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_steps, self.beta_start, self.beta_end)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128 + 8 * self.params.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let m = &self.model;
        for v in [m.image_side, m.patch_side, m.channels, m.blocks, m.heads] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&m.mlp_ratio.to_le_bytes());
        out.extend_from_slice(&(m.num_classes as u64).to_le_bytes());
        out.extend_from_slice(&m.cond_dropout_prob.to_le_bytes());
        out.extend_from_slice(&(self.train_steps as u64).to_le_bytes());
        out.extend_from_slice(&self.beta_start.to_le_bytes());
        out.extend_from_slice(&self.beta_end.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        self.params.visit(&mut |_, shape, data| {
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let header = |what: &str| CheckpointError::Header(format!("file ends inside the {what} field"));
        let magic = r.take(8).ok_or_else(|| header("magic"))?;
        if magic != MAGIC {
            return Err(CheckpointError::Header(format!(
                "magic is {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let version = r.u32().ok_or_else(|| header("version"))?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let mut usize_field = |name: &str| -> Result<usize, CheckpointError> {
            let v = r.u64().ok_or_else(|| header(name))?;
            usize::try_from(v).map_err(|_| CheckpointError::Header(format!("{name} = {v} does not fit")))
        };
        let image_side = usize_field("image_side")?;
        let patch_side = usize_field("patch_side")?;
        let channels = usize_field("channels")?;
        let blocks = usize_field("blocks")?;
        let heads = usize_field("heads")?;
        let mlp_ratio = r.f64().ok_or_else(|| header("mlp_ratio"))?;
        let num_classes = r.u64().ok_or_else(|| header("num_classes"))? as usize;
        let cond_dropout_prob = r.f64().ok_or_else(|| header("cond_dropout_prob"))?;
        let model = ModelConfig {
            image_side,
            patch_side,
            channels,
            blocks,
            heads,
            mlp_ratio,
            num_classes,
            cond_dropout_prob,
        };
        model
            .validate()
            .map_err(|e| CheckpointError::Header(format!("stored model config is invalid: {e}")))?;
        let train_steps = r.u64().ok_or_else(|| header("train_steps"))? as usize;
        let beta_start = r.f64().ok_or_else(|| header("beta_start"))?;
        let beta_end = r.f64().ok_or_else(|| header("beta_end"))?;
        let step = r.u64().ok_or_else(|| header("step"))?;

        let mut params = ModelParameters::zeros(&model);
        let layout = params.layout();
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let truncated = || CheckpointError::Truncated { tensor: name.clone() };
            let rank = r.u32().ok_or_else(truncated)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64().ok_or_else(truncated)? as usize);
            }
            if &dims != shape {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor `{name}` has shape {dims:?}, model expects {shape:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(8 * n).ok_or_else(truncated)?;
            tensors.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect::<Vec<f64>>(),
            );
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Header(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        let mut it = tensors.into_iter();
        params.visit_mut(&mut |_, data| {
            data.copy_from_slice(&it.next().expect("one tensor per layout entry"));
        });
        Ok(Self {
            model,
            train_steps,
            beta_start,
            beta_end,
            step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Fails unless the stored model config equals `expected`.
    pub fn check_model(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model != expected {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint model {:?} differs from configured {:?}",
                self.model, expected
            ))
            .into());
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Option<f64> {
        self.u64().map(f64::from_bits)
    }
}
