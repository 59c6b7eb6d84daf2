//! Flat `key.path = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys, repeated keys and unparsable values are rejected with the
//! offending key path. Every key has a default, so an empty file is valid.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{DatasetKind, DatasetSpec};
use crate::denoiser::{Condition, ModelConfig};
use crate::diffusion::{NoiseSchedule, SamplerConfig, SamplerKind};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceMethod, GuidanceSpec};
use crate::swap::SwapPolicy;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalCondition {
    /// Instances cycle through the classes.
    Classes,
    Null,
}

impl EvalCondition {
    pub fn conditions(self, n: usize, num_classes: usize) -> Vec<Condition> {
        match self {
            EvalCondition::Classes => (0..n).map(|i| Condition::Class(i % num_classes)).collect(),
            EvalCondition::Null => vec![Condition::Null; n],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalCondition::Classes => "classes",
            EvalCondition::Null => "null",
        }
    }
}

impl FromStr for EvalCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classes" => Ok(EvalCondition::Classes),
            "null" => Ok(EvalCondition::Null),
            other => Err(Error::invalid(format!("unknown condition `{other}` (classes|null)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Omega,
    Ratio,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Omega => "omega",
            SweepAxis::Ratio => "ratio",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omega" => Ok(SweepAxis::Omega),
            "ratio" => Ok(SweepAxis::Ratio),
            other => Err(Error::invalid(format!("unknown sweep axis `{other}` (omega|ratio)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub samples: usize,
    pub projections: usize,
    pub condition: EvalCondition,
    /// Held-out images per class for the reference set.
    pub heldout_per_class: usize,
    /// Sampling seed for `sample`, `sweep`, `ablate` and `analyze`.
    pub seed: u64,
    /// Guidance scale for the `cfg` rows of the ablation grid.
    pub ablate_omega_cfg: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            projections: 128,
            condition: EvalCondition::Classes,
            heldout_per_class: 200,
            seed: 0,
            ablate_omega_cfg: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Omega,
            values: vec![0.0, 0.1, 0.3, 0.5, 1.0, 2.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule_train_steps: usize,
    pub schedule_beta_start: f64,
    pub schedule_beta_end: f64,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceSpec,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub output_dir: PathBuf,
    /// Empty means `<output_dir>/checkpoint.bin`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                channels: 32,
                blocks: 2,
                heads: 2,
                ..ModelConfig::default()
            },
            schedule_train_steps: 1000,
            schedule_beta_start: 1e-4,
            schedule_beta_end: 0.02,
            sampler: SamplerConfig::default(),
            guidance: GuidanceSpec {
                method: GuidanceMethod::Ssg,
                omega: 0.3,
                spatial_r: 0.25,
                channel_r: 0.0,
                at_block_input: false,
                at_pre_residual: true,
                ..GuidanceSpec::default()
            },
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            checkpoint: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}")))
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<f64>> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|v| parse_value::<f64>(key, v.trim())).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

pub const KEYS: &[&str] = &[
    "model.image_side",
    "model.patch_side",
    "model.channels",
    "model.blocks",
    "model.heads",
    "model.mlp_ratio",
    "model.num_classes",
    "model.cond_dropout_prob",
    "schedule.train_steps",
    "schedule.beta_start",
    "schedule.beta_end",
    "sampler.kind",
    "sampler.steps",
    "sampler.eta",
    "guidance.method",
    "guidance.omega",
    "guidance.omega_cfg",
    "guidance.spatial_r",
    "guidance.channel_r",
    "guidance.policy",
    "guidance.at_block_input",
    "guidance.at_pre_residual",
    "guidance.input_noise_sigma",
    "dataset.kind",
    "dataset.image_side",
    "dataset.samples_per_class",
    "dataset.jitter_position",
    "dataset.size_min",
    "dataset.size_max",
    "dataset.supersample",
    "train.steps",
    "train.batch",
    "train.lr",
    "train.seed",
    "eval.samples",
    "eval.projections",
    "eval.condition",
    "eval.heldout_per_class",
    "eval.seed",
    "eval.ablate_omega_cfg",
    "sweep.axis",
    "sweep.values",
    "output.dir",
    "output.checkpoint",
];

impl RunConfig {
    /// Assigns one key. Used for both file lines and command-line overrides.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let v = raw.trim();
        match key {
            "model.image_side" => self.model.image_side = parse_value(key, v)?,
            "model.patch_side" => self.model.patch_side = parse_value(key, v)?,
            "model.channels" => self.model.channels = parse_value(key, v)?,
            "model.blocks" => self.model.blocks = parse_value(key, v)?,
            "model.heads" => self.model.heads = parse_value(key, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse_value(key, v)?,
            "model.num_classes" => self.model.num_classes = parse_value(key, v)?,
            "model.cond_dropout_prob" => self.model.cond_dropout_prob = parse_value(key, v)?,
            "schedule.train_steps" => self.schedule_train_steps = parse_value(key, v)?,
            "schedule.beta_start" => self.schedule_beta_start = parse_value(key, v)?,
            "schedule.beta_end" => self.schedule_beta_end = parse_value(key, v)?,
            "sampler.kind" => self.sampler.kind = parse_value::<SamplerKind>(key, v)?,
            "sampler.steps" => self.sampler.num_inference_steps = parse_value(key, v)?,
            "sampler.eta" => self.sampler.eta = parse_value(key, v)?,
            "guidance.method" => self.guidance.method = parse_value::<GuidanceMethod>(key, v)?,
            "guidance.omega" => self.guidance.omega = parse_value(key, v)?,
            "guidance.omega_cfg" => self.guidance.omega_cfg = parse_value(key, v)?,
            "guidance.spatial_r" => self.guidance.spatial_r = parse_value(key, v)?,
            "guidance.channel_r" => self.guidance.channel_r = parse_value(key, v)?,
            "guidance.policy" => self.guidance.policy = parse_value::<SwapPolicy>(key, v)?,
            "guidance.at_block_input" => self.guidance.at_block_input = parse_value(key, v)?,
            "guidance.at_pre_residual" => self.guidance.at_pre_residual = parse_value(key, v)?,
            "guidance.input_noise_sigma" => self.guidance.input_noise_sigma = parse_value(key, v)?,
            "dataset.kind" => self.dataset.kind = parse_value::<DatasetKind>(key, v)?,
            "dataset.image_side" => self.dataset.image_side = parse_value(key, v)?,
            "dataset.samples_per_class" => self.dataset.samples_per_class = parse_value(key, v)?,
            "dataset.jitter_position" => self.dataset.jitter_position = parse_value(key, v)?,
            "dataset.size_min" => self.dataset.size_min = parse_value(key, v)?,
            "dataset.size_max" => self.dataset.size_max = parse_value(key, v)?,
            "dataset.supersample" => self.dataset.supersample = parse_value(key, v)?,
            "train.steps" => self.train.steps = parse_value(key, v)?,
            "train.batch" => self.train.batch = parse_value(key, v)?,
            "train.lr" => self.train.lr = parse_value(key, v)?,
            "train.seed" => self.train.seed = parse_value(key, v)?,
            "eval.samples" => self.eval.samples = parse_value(key, v)?,
            "eval.projections" => self.eval.projections = parse_value(key, v)?,
            "eval.condition" => self.eval.condition = parse_value::<EvalCondition>(key, v)?,
            "eval.heldout_per_class" => self.eval.heldout_per_class = parse_value(key, v)?,
            "eval.seed" => self.eval.seed = parse_value(key, v)?,
            "eval.ablate_omega_cfg" => self.eval.ablate_omega_cfg = parse_value(key, v)?,
            "sweep.axis" => self.sweep.axis = parse_value::<SweepAxis>(key, v)?,
            "sweep.values" => self.sweep.values = parse_list(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "output.checkpoint" => {
                self.checkpoint = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Parses and validates a config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, format!("assigned twice (line {})", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule_train_steps, self.schedule_beta_start, self.schedule_beta_end)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoint.bin"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let schedule = self.schedule()?;
        self.sampler.validate(&schedule)?;
        self.guidance.validate()?;
        self.dataset.validate()?;
        self.train.validate()?;
        if self.dataset.image_side != self.model.image_side {
            return Err(Error::config(
                "dataset.image_side",
                format!("{} differs from model.image_side {}", self.dataset.image_side, self.model.image_side),
            ));
        }
        if self.model.num_classes < 3 {
            return Err(Error::config("model.num_classes", "the shapes dataset has 3 classes"));
        }
        if !(0.0..=1.0).contains(&self.model.cond_dropout_prob) {
            return Err(Error::config("model.cond_dropout_prob", "must be in [0,1]"));
        }
        if self.eval.samples < 2 {
            return Err(Error::config("eval.samples", "need at least 2 samples"));
        }
        if self.eval.projections == 0 {
            return Err(Error::config("eval.projections", "must be positive"));
        }
        if self.eval.heldout_per_class == 0 {
            return Err(Error::config("eval.heldout_per_class", "must be positive"));
        }
        if !(self.eval.ablate_omega_cfg >= 0.0) || !self.eval.ablate_omega_cfg.is_finite() {
            return Err(Error::config("eval.ablate_omega_cfg", "must be finite and >= 0"));
        }
        if self.guidance.method == GuidanceMethod::Cfg && self.eval.condition == EvalCondition::Null {
            return Err(Error::config("guidance.method", "cfg needs eval.condition = classes"));
        }
        if self.guidance.omega_cfg > 0.0 && self.eval.condition == EvalCondition::Null {
            return Err(Error::config("guidance.omega_cfg", "cfg needs eval.condition = classes"));
        }
        if self.sweep.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("sweep.values", "values must be finite"));
        }
        Ok(())
    }

    /// Renders every key, so the output parses back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let g = &self.guidance;
        let d = &self.dataset;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.image_side", m.image_side.to_string());
        kv("model.patch_side", m.patch_side.to_string());
        kv("model.channels", m.channels.to_string());
        kv("model.blocks", m.blocks.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.mlp_ratio", format!("{:?}", m.mlp_ratio));
        kv("model.num_classes", m.num_classes.to_string());
        kv("model.cond_dropout_prob", format!("{:?}", m.cond_dropout_prob));
        kv("schedule.train_steps", self.schedule_train_steps.to_string());
        kv("schedule.beta_start", format!("{:?}", self.schedule_beta_start));
        kv("schedule.beta_end", format!("{:?}", self.schedule_beta_end));
        kv("sampler.kind", self.sampler.kind.to_string());
        kv("sampler.steps", self.sampler.num_inference_steps.to_string());
        kv("sampler.eta", format!("{:?}", self.sampler.eta));
        kv("guidance.method", g.method.to_string());
        kv("guidance.omega", format!("{:?}", g.omega));
        kv("guidance.omega_cfg", format!("{:?}", g.omega_cfg));
        kv("guidance.spatial_r", format!("{:?}", g.spatial_r));
        kv("guidance.channel_r", format!("{:?}", g.channel_r));
        kv("guidance.policy", g.policy.to_string());
        kv("guidance.at_block_input", g.at_block_input.to_string());
        kv("guidance.at_pre_residual", g.at_pre_residual.to_string());
        kv("guidance.input_noise_sigma", format!("{:?}", g.input_noise_sigma));
        kv("dataset.kind", d.kind.to_string());
        kv("dataset.image_side", d.image_side.to_string());
        kv("dataset.samples_per_class", d.samples_per_class.to_string());
        kv("dataset.jitter_position", format!("{:?}", d.jitter_position));
        kv("dataset.size_min", format!("{:?}", d.size_min));
        kv("dataset.size_max", format!("{:?}", d.size_max));
        kv("dataset.supersample", d.supersample.to_string());
        kv("train.steps", self.train.steps.to_string());
        kv("train.batch", self.train.batch.to_string());
        kv("train.lr", format!("{:?}", self.train.lr));
        kv("train.seed", self.train.seed.to_string());
        kv("eval.samples", self.eval.samples.to_string());
        kv("eval.projections", self.eval.projections.to_string());
        kv("eval.condition", self.eval.condition.as_str().to_string());
        kv("eval.heldout_per_class", self.eval.heldout_per_class.to_string());
        kv("eval.seed", self.eval.seed.to_string());
        kv("eval.ablate_omega_cfg", format!("{:?}", self.eval.ablate_omega_cfg));
        kv("sweep.axis", self.sweep.axis.as_str().to_string());
        kv("sweep.values", fmt_list(&self.sweep.values));
        kv("output.dir", self.output_dir.display().to_string());
        kv(
            "output.checkpoint",
            self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_of(e: Error) -> String {
        match e {
            Error::Config { path, .. } => path,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.guidance.omega = 2.5;
        cfg.sweep.values = vec![0.0, 0.25];
        cfg.checkpoint = Some(PathBuf::from("x/y.bin"));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(KEYS.len(), cfg.to_text().lines().count());
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(path_of(RunConfig::parse("model.blocks = many").unwrap_err()), "model.blocks");
        assert_eq!(path_of(RunConfig::parse("model.colour = 3").unwrap_err()), "model.colour");
        assert_eq!(path_of(RunConfig::parse("guidance.spatial_r = 1.5").unwrap_err()), "guidance.spatial_r");
        assert_eq!(path_of(RunConfig::parse("model.heads = 3").unwrap_err()), "model.heads");
        assert_eq!(path_of(RunConfig::parse("sampler.steps = 0").unwrap_err()), "sampler.steps");
        assert_eq!(
            path_of(RunConfig::parse("train.lr = 1\ntrain.lr = 2").unwrap_err()),
            "train.lr"
        );
        assert_eq!(path_of(RunConfig::parse("just words").unwrap_err()), "line 1");
        assert_eq!(path_of(RunConfig::parse("dataset.image_side = 32").unwrap_err()), "dataset.image_side");
    }

    #[test]
    fn comments_and_lists() {
        let cfg = RunConfig::parse("sweep.values = 0, 1.5 ,3 # trailing\nsweep.axis = ratio").unwrap();
        assert_eq!(cfg.sweep.values, vec![0.0, 1.5, 3.0]);
        assert_eq!(cfg.sweep.axis, SweepAxis::Ratio);
    }
}
