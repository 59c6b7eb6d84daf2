//! Plain SGD on the denoising objective.

use std::io::Write;

use crate::checkpoint::Checkpoint;
use crate::dataset::LabeledImages;
use crate::denoiser::{patchify_batch, Condition, ModelConfig, ModelParameters};
use crate::diffusion::{dsm_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::TokenTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 64,
            lr: 3e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr", format!("must be finite and > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

pub fn initial_parameters(model: &ModelConfig, seed: u64) -> ModelParameters {
    let mut rng = RngStream::new(seed, 0).derive("init", 0);
    ModelParameters::init(model, &mut rng)
}

/// Runs `train.steps` SGD updates; each step draws its minibatch (with
/// replacement) and its noise from `derive("train-step", step)`.
pub fn train(
    model: &ModelConfig,
    schedule: &NoiseSchedule,
    data: &LabeledImages,
    train: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    model.validate()?;
    train.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.labels.iter().any(|&l| l >= model.num_classes) {
        return Err(Error::config("model.num_classes", "dataset has more classes than the model"));
    }
    let all = patchify_batch(&data.images, model)?;
    let (t, d) = (all.tokens(), all.channels());
    let root = RngStream::new(train.seed, 0);
    let mut params = initial_parameters(model, train.seed);
    let mut losses = Vec::with_capacity(train.steps);
    let mut buf = Vec::with_capacity(train.batch * t * d);
    for step in 0..train.steps {
        let mut rng = root.derive("train-step", step as u64);
        buf.clear();
        let mut labels = Vec::with_capacity(train.batch);
        for _ in 0..train.batch {
            let i = rng.below(data.len());
            buf.extend_from_slice(all.instance(i));
            labels.push(Condition::Class(data.labels[i]));
        }
        let x0 = TokenTensor::new(train.batch, t, d, std::mem::take(&mut buf))?;
        let (loss, grads) = dsm_loss(&params, model, schedule, &x0, &labels, &mut rng).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
            other => other,
        })?;
        buf = x0.into_data();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        params.add_scaled(-train.lr, &grads)?;
        if !params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after step {step}")));
        }
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(*model, schedule, train.steps as u64, params),
        losses,
    })
}

pub fn write_loss_csv<W: Write>(mut w: W, losses: &[f64]) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    Ok(())
}
