//! The `ssg-lab` subcommands as library functions.
//!
//! Every command reads a validated [`RunConfig`], writes its files under the
//! configured output directory and returns what it wrote. Sampling and
//! metric randomness both derive from `eval.seed`, so rows produced by one
//! command share their noise and differ only in the guidance settings.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SweepAxis};
use crate::dataset::{generate_dataset, DatasetSpec, Split};
use crate::denoiser::{unpatchify, ModelParameters};
use crate::diffusion::{sample, NoiseSchedule};
use crate::error::{CheckpointError, Error, Result};
use crate::guidance::{GuidanceMethod, GuidanceSpec, GuidanceTrace};
use crate::image::{magnitude_to_unit, tile_grid, write_ppm_gray};
use crate::metrics::{fit_gaussian, frechet_distance, pairwise_diversity, sliced_wasserstein2, GaussianSummary, SampleSet};
use crate::rng::RngStream;
use crate::swap::SwapPolicy;
use crate::train::{train, write_loss_csv};

pub const CSV_HEADER: &str = "run_id,method,omega,spatial_r,channel_r,policy,seed,frechet,sliced_w2,diversity";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: String,
    pub omega: f64,
    pub spatial_r: f64,
    pub channel_r: f64,
    pub policy: SwapPolicy,
    pub seed: u64,
    pub frechet: f64,
    pub sliced_w2: f64,
    pub diversity: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{},{},{:?},{:?},{:?}",
            self.run_id,
            self.method,
            self.omega,
            self.spatial_r,
            self.channel_r,
            self.policy,
            self.seed,
            self.frechet,
            self.sliced_w2,
            self.diversity
        )
    }
}

/// `ssg+cfg` for the combined mode, otherwise the method name.
pub fn method_label(spec: &GuidanceSpec) -> String {
    if spec.method == GuidanceMethod::Ssg && spec.omega_cfg > 0.0 {
        "ssg+cfg".to_string()
    } else {
        spec.method.to_string()
    }
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(path: &Path, mut w: BufWriter<File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = create_file(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{CSV_HEADER}").map_err(io)?;
    for r in rows {
        writeln!(w, "{}", r.csv_line()).map_err(io)?;
    }
    finish(path, w)
}

pub fn write_ppm_file(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    let mut w = create_file(path)?;
    write_ppm_gray(&mut w, width, height, pixels).map_err(|e| Error::io(path, e))?;
    finish(path, w)
}

/// A trained model plus the held-out reference statistics.
pub struct Evaluator {
    pub cfg: RunConfig,
    pub params: ModelParameters,
    pub schedule: NoiseSchedule,
    reference: SampleSet,
    reference_gaussian: GaussianSummary,
}

impl Evaluator {
    pub fn new(cfg: &RunConfig, checkpoint: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        checkpoint.check_model(&cfg.model)?;
        let schedule = cfg.schedule()?;
        if (checkpoint.train_steps, checkpoint.beta_start, checkpoint.beta_end)
            != (schedule.train_steps, schedule.beta_start, schedule.beta_end)
        {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint schedule ({}, {}, {}) differs from configured ({}, {}, {})",
                checkpoint.train_steps,
                checkpoint.beta_start,
                checkpoint.beta_end,
                schedule.train_steps,
                schedule.beta_start,
                schedule.beta_end
            ))
            .into());
        }
        let spec = DatasetSpec {
            samples_per_class: cfg.eval.heldout_per_class,
            ..cfg.dataset.clone()
        };
        let held = generate_dataset(&spec, cfg.train.seed, Split::HeldOut)?;
        let reference = SampleSet::from_rows(&held.images)?;
        let reference_gaussian = fit_gaussian(&reference)?;
        Ok(Self {
            cfg: cfg.clone(),
            params: checkpoint.params,
            schedule,
            reference,
            reference_gaussian,
        })
    }

    /// Loads the checkpoint named by the config.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let ck = Checkpoint::load(&cfg.checkpoint_path())?;
        Self::new(cfg, ck)
    }

    /// Samples `eval.samples` images, clamped to `[-1, 1]`.
    pub fn generate(&self, spec: &GuidanceSpec, seed: u64, trace: Option<&mut GuidanceTrace>) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.cfg;
        let conds = cfg.eval.condition.conditions(cfg.eval.samples, cfg.model.num_classes);
        let rng = RngStream::new(seed, 0).derive("sample", 0);
        let x = sample(&self.params, &cfg.model, &self.schedule, &cfg.sampler, spec, &conds, &rng, trace)?;
        let mut images = unpatchify(&x, &cfg.model)?;
        for im in &mut images {
            im.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        }
        Ok(images)
    }

    pub fn score(&self, images: &[Vec<f64>], seed: u64) -> Result<(f64, f64, f64)> {
        let set = SampleSet::from_rows(images)?;
        let frechet = frechet_distance(&fit_gaussian(&set)?, &self.reference_gaussian)?;
        let mut proj_rng = RngStream::new(seed, 0).derive("metrics-projections", 0);
        let sw = sliced_wasserstein2(&set, &self.reference, self.cfg.eval.projections, &mut proj_rng)?;
        let div = pairwise_diversity(&set)?;
        Ok((frechet, sw, div))
    }

    pub fn evaluate(&self, run_id: &str, spec: &GuidanceSpec, seed: u64) -> Result<(MetricsRow, Vec<Vec<f64>>)> {
        let images = self.generate(spec, seed, None)?;
        let (frechet, sliced_w2, diversity) = self.score(&images, seed)?;
        let row = MetricsRow {
            run_id: run_id.to_string(),
            method: method_label(spec),
            omega: spec.omega,
            spatial_r: spec.spatial_r,
            channel_r: spec.channel_r,
            policy: spec.policy,
            seed,
            frechet,
            sliced_w2,
            diversity,
        };
        Ok((row, images))
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint_path: PathBuf,
    pub loss_path: PathBuf,
    pub losses: Vec<f64>,
}

/// Generates the training split, trains, and writes the checkpoint, the
/// loss log and the resolved config.
pub fn cmd_train(cfg: &RunConfig, mut progress: impl FnMut(usize, f64)) -> Result<TrainReport> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let data = generate_dataset(&cfg.dataset, cfg.train.seed, Split::Train)?;
    let out = train(&cfg.model, &schedule, &data, &cfg.train, &mut progress)?;
    let checkpoint_path = cfg.checkpoint_path();
    if let Some(parent) = checkpoint_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    out.checkpoint.save(&checkpoint_path)?;
    let loss_path = cfg.output_dir.join("loss.csv");
    let mut w = create_file(&loss_path)?;
    write_loss_csv(&mut w, &out.losses).map_err(|e| Error::io(&loss_path, e))?;
    finish(&loss_path, w)?;
    write_resolved_config(cfg)?;
    Ok(TrainReport {
        checkpoint_path,
        loss_path,
        losses: out.losses,
    })
}

fn write_resolved_config(cfg: &RunConfig) -> Result<()> {
    let path = cfg.output_dir.join("config.resolved");
    let mut w = create_file(&path)?;
    w.write_all(cfg.to_text().as_bytes()).map_err(|e| Error::io(&path, e))?;
    finish(&path, w)
}

fn grid_columns(n: usize) -> usize {
    (n as f64).sqrt().ceil().max(1.0) as usize
}

#[derive(Debug, Clone)]
pub struct SampleReport {
    pub row: MetricsRow,
    pub grid_path: PathBuf,
    pub csv_path: PathBuf,
}

/// Samples with the configured guidance; writes `samples.ppm` and
/// `sample_metrics.csv`.
pub fn cmd_sample(cfg: &RunConfig) -> Result<SampleReport> {
    let ev = Evaluator::load(cfg)?;
    sample_with(&ev)
}

pub fn sample_with(ev: &Evaluator) -> Result<SampleReport> {
    let cfg = &ev.cfg;
    let (row, images) = ev.evaluate("sample", &cfg.guidance, cfg.eval.seed)?;
    let side = cfg.model.image_side;
    let (w, h, px) = tile_grid(&images, side, grid_columns(images.len()))?;
    let grid_path = cfg.output_dir.join("samples.ppm");
    write_ppm_file(&grid_path, w, h, &px)?;
    let csv_path = cfg.output_dir.join("sample_metrics.csv");
    write_metrics_csv(&csv_path, std::slice::from_ref(&row))?;
    write_resolved_config(cfg)?;
    Ok(SampleReport {
        row,
        grid_path,
        csv_path,
    })
}

/// The guidance spec for one sweep value. A ratio value sets both ratios.
pub fn sweep_spec(base: &GuidanceSpec, axis: SweepAxis, value: f64) -> GuidanceSpec {
    let mut spec = *base;
    match axis {
        SweepAxis::Omega => spec.omega = value,
        SweepAxis::Ratio => {
            spec.spatial_r = value;
            spec.channel_r = value;
        }
    }
    spec
}

/// One row per `sweep.values` entry, written to `sweep_<axis>.csv`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    if cfg.sweep.values.is_empty() {
        return Err(Error::config("sweep.values", "empty value list"));
    }
    let ev = Evaluator::load(cfg)?;
    sweep_with(&ev)
}

pub fn sweep_with(ev: &Evaluator) -> Result<Vec<MetricsRow>> {
    let cfg = &ev.cfg;
    if cfg.sweep.values.is_empty() {
        return Err(Error::config("sweep.values", "empty value list"));
    }
    let axis = cfg.sweep.axis;
    let mut rows = Vec::with_capacity(cfg.sweep.values.len());
    for &v in &cfg.sweep.values {
        let spec = sweep_spec(&cfg.guidance, axis, v);
        spec.validate().map_err(|e| Error::config("sweep.values", e.to_string()))?;
        let (row, _) = ev.evaluate(&format!("sweep-{}-{v:?}", axis.as_str()), &spec, cfg.eval.seed)?;
        rows.push(row);
    }
    write_metrics_csv(&cfg.output_dir.join(format!("sweep_{}.csv", axis.as_str())), &rows)?;
    Ok(rows)
}

/// The nine ablation settings, in output order, derived from the
/// configured SSG settings.
pub fn ablation_grid(cfg: &RunConfig) -> Vec<(String, GuidanceSpec)> {
    let base = GuidanceSpec {
        method: GuidanceMethod::Ssg,
        omega_cfg: 0.0,
        ..cfg.guidance
    };
    let mut grid = Vec::with_capacity(9);
    for policy in [SwapPolicy::Dissimilar, SwapPolicy::Similar, SwapPolicy::Random] {
        grid.push((format!("policy-{policy}"), GuidanceSpec { policy, ..base }));
    }
    grid.push(("axis-spatial".into(), GuidanceSpec { channel_r: 0.0, ..base }));
    grid.push(("axis-channel".into(), GuidanceSpec { spatial_r: 0.0, ..base }));
    grid.push(("axis-both".into(), base));
    grid.push(("cfg-none".into(), GuidanceSpec::none()));
    grid.push(("cfg-ssg".into(), base));
    grid.push((
        "cfg-ssg+cfg".into(),
        GuidanceSpec {
            omega_cfg: cfg.eval.ablate_omega_cfg,
            ..base
        },
    ));
    grid
}

/// Policy, axis and CFG-compatibility grid; one shared seed, written to
/// `ablate.csv`. Identical settings are sampled once.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    let ev = Evaluator::load(cfg)?;
    ablate_with(&ev)
}

pub fn ablate_with(ev: &Evaluator) -> Result<Vec<MetricsRow>> {
    let cfg = &ev.cfg;
    if cfg.eval.condition != crate::config::EvalCondition::Classes {
        return Err(Error::config("eval.condition", "the ablation grid includes CFG rows and needs classes"));
    }
    let seed = cfg.eval.seed;
    let mut done: Vec<(GuidanceSpec, MetricsRow)> = Vec::new();
    let mut rows = Vec::with_capacity(9);
    for (run_id, spec) in ablation_grid(cfg) {
        let row = match done.iter().find(|(s, _)| *s == spec) {
            Some((_, r)) => MetricsRow {
                run_id: run_id.clone(),
                ..r.clone()
            },
            None => {
                let (r, _) = ev.evaluate(&run_id, &spec, seed)?;
                done.push((spec, r.clone()));
                r
            }
        };
        rows.push(row);
    }
    write_metrics_csv(&cfg.output_dir.join("ablate.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct AnalyzeReport {
    pub trace: GuidanceTrace,
    pub trace_path: PathBuf,
    pub map_paths: Vec<PathBuf>,
}

/// Samples with trace recording; writes `trace.jsonl` and one grayscale
/// token-grid map per sampler step under `maps/`, all on a common scale.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<AnalyzeReport> {
    let ev = Evaluator::load(cfg)?;
    analyze_with(&ev)
}

pub fn analyze_with(ev: &Evaluator) -> Result<AnalyzeReport> {
    let cfg = &ev.cfg;
    let mut trace = GuidanceTrace::default();
    ev.generate(&cfg.guidance, cfg.eval.seed, Some(&mut trace))?;
    let trace_path = cfg.output_dir.join("trace.jsonl");
    let mut w = create_file(&trace_path)?;
    trace.write_jsonl(&mut w).map_err(|e| Error::io(&trace_path, e))?;
    finish(&trace_path, w)?;
    let g = cfg.model.grid_side();
    let scale = trace
        .records
        .iter()
        .flat_map(|r| r.map.iter().copied())
        .fold(0.0_f64, f64::max);
    let mut map_paths = Vec::with_capacity(trace.records.len());
    for r in &trace.records {
        let path = cfg
            .output_dir
            .join("maps")
            .join(format!("step_{:03}_t{:04}.ppm", r.step, r.timestep));
        write_ppm_file(&path, g, g, &magnitude_to_unit(&r.map, scale))?;
        map_paths.push(path);
    }
    Ok(AnalyzeReport {
        trace,
        trace_path,
        map_paths,
    })
}
