//! Python bindings: `import ssg_lab`.
//!
//! Tensors cross the boundary as flat lists of floats plus an explicit
//! shape, so the module has no dependency on numpy.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ssg_core::checkpoint::Checkpoint;
use ssg_core::config::RunConfig;
use ssg_core::denoiser::{self, Condition, ModelParameters};
use ssg_core::diffusion::{self, NoiseSchedule};
use ssg_core::experiments::{self, Evaluator, MetricsRow};
use ssg_core::guidance::{self, GuidanceMethod, GuidanceSpec};
use ssg_core::metrics::{self, SampleSet};
use ssg_core::swap::{self, SwapPolicy};
use ssg_core::{Error, Matrix, RngStream, TokenTensor};

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tokens(batch: usize, t: usize, d: usize, data: Vec<f64>) -> PyResult<TokenTensor> {
    TokenTensor::new(batch, t, d, data).map_err(to_py)
}

fn parse_policy(s: &str) -> PyResult<SwapPolicy> {
    s.parse().map_err(to_py)
}

fn parse_condition(c: Option<usize>) -> Condition {
    c.map_or(Condition::Null, Condition::Class)
}

/// Flat-key run configuration (`model.channels = 32` style).
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::parse(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_path(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_path(&path).map_err(to_py)?,
        })
    }

    /// Assigns one key, then re-validates the whole config.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(to_py)?;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }
}

/// A model (config plus parameters) with the configured noise schedule.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    cfg: RunConfig,
    params: ModelParameters,
    schedule: NoiseSchedule,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized parameters.
    #[staticmethod]
    fn init(config: &PyRunConfig, seed: u64) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let schedule = cfg.schedule().map_err(to_py)?;
        let params = ssg_core::train::initial_parameters(&cfg.model, seed);
        Ok(Self { cfg, params, schedule })
    }

    #[staticmethod]
    fn load(config: &PyRunConfig, path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        ck.check_model(&config.inner.model).map_err(to_py)?;
        let schedule = ck.schedule().map_err(to_py)?;
        Ok(Self {
            cfg: config.inner.clone(),
            params: ck.params,
            schedule,
        })
    }

    fn save(&self, path: PathBuf, step: u64) -> PyResult<()> {
        Checkpoint::new(self.cfg.model, &self.schedule, step, self.params.clone())
            .save(&path)
            .map_err(to_py)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// `(tokens, patch_dim)` of one instance.
    #[getter]
    fn token_shape(&self) -> (usize, usize) {
        (self.cfg.model.tokens(), self.cfg.model.patch_dim())
    }

    /// Guided ε for a batch of token tensors at one timestep. `classes`
    /// holds one entry per instance; `None` is the null condition.
    #[pyo3(signature = (x, batch, t, classes, method = None, omega = None, spatial_r = None, channel_r = None, policy = None, omega_cfg = None, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn predict(
        &self,
        x: Vec<f64>,
        batch: usize,
        t: usize,
        classes: Vec<Option<usize>>,
        method: Option<&str>,
        omega: Option<f64>,
        spatial_r: Option<f64>,
        channel_r: Option<f64>,
        policy: Option<&str>,
        omega_cfg: Option<f64>,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let (tk, d) = self.token_shape();
        let x = tokens(batch, tk, d, x)?;
        let conds: Vec<Condition> = classes.into_iter().map(parse_condition).collect();
        let spec = self.spec(method, omega, spatial_r, channel_r, policy, omega_cfg)?;
        let rng = RngStream::new(seed, 0);
        let (eps, _) = guidance::predict_guided(&self.params, &self.cfg.model, &spec, &x, t, &conds, &rng, false)
            .map_err(to_py)?;
        Ok(eps.into_data())
    }

    /// Runs the configured sampler; returns flattened, unclamped images.
    #[pyo3(signature = (classes, seed = 0, method = None, omega = None, spatial_r = None, channel_r = None, policy = None))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        classes: Vec<Option<usize>>,
        seed: u64,
        method: Option<&str>,
        omega: Option<f64>,
        spatial_r: Option<f64>,
        channel_r: Option<f64>,
        policy: Option<&str>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let conds: Vec<Condition> = classes.into_iter().map(parse_condition).collect();
        let spec = self.spec(method, omega, spatial_r, channel_r, policy, None)?;
        let rng = RngStream::new(seed, 0).derive("sample", 0);
        let x = diffusion::sample(
            &self.params,
            &self.cfg.model,
            &self.schedule,
            &self.cfg.sampler,
            &spec,
            &conds,
            &rng,
            None,
        )
        .map_err(to_py)?;
        denoiser::unpatchify(&x, &self.cfg.model).map_err(to_py)
    }
}

impl PyModel {
    /// The config's guidance with any given fields replaced.
    fn spec(
        &self,
        method: Option<&str>,
        omega: Option<f64>,
        spatial_r: Option<f64>,
        channel_r: Option<f64>,
        policy: Option<&str>,
        omega_cfg: Option<f64>,
    ) -> PyResult<GuidanceSpec> {
        let mut spec = self.cfg.guidance;
        if let Some(m) = method {
            spec.method = m.parse::<GuidanceMethod>().map_err(to_py)?;
        }
        if let Some(p) = policy {
            spec.policy = parse_policy(p)?;
        }
        spec.omega = omega.unwrap_or(spec.omega);
        spec.spatial_r = spatial_r.unwrap_or(spec.spatial_r);
        spec.channel_r = channel_r.unwrap_or(spec.channel_r);
        spec.omega_cfg = omega_cfg.unwrap_or(spec.omega_cfg);
        spec.validate().map_err(to_py)?;
        Ok(spec)
    }
}

/// Disjoint swap pairs from a square similarity matrix.
#[pyfunction]
#[pyo3(signature = (sim, n_pairs, policy = "dissimilar", seed = 0))]
fn select_swap_pairs(sim: Vec<Vec<f64>>, n_pairs: usize, policy: &str, seed: u64) -> PyResult<Vec<(usize, usize)>> {
    let m = Matrix::from_rows(&sim).map_err(to_py)?;
    let mut rng = RngStream::new(seed, 0);
    let plan = swap::select_swap_pairs(&m, n_pairs, parse_policy(policy)?, &mut rng).map_err(to_py)?;
    Ok(plan.pairs().to_vec())
}

/// Swaps token rows of one `tokens × channels` instance (row-major).
#[pyfunction]
fn apply_swap_spatial(x: Vec<f64>, tokens: usize, channels: usize, pairs: Vec<(usize, usize)>) -> PyResult<Vec<f64>> {
    let t = TokenTensor::new(1, tokens, channels, x).map_err(to_py)?;
    let plan = swap::SwapPlan::new(swap::SwapAxis::Spatial, tokens, pairs).map_err(to_py)?;
    Ok(swap::apply_swap_spatial(&t, &plan).map_err(to_py)?.into_data())
}

/// Swaps channel columns of one `tokens × channels` instance (row-major).
#[pyfunction]
fn apply_swap_channel(x: Vec<f64>, tokens: usize, channels: usize, pairs: Vec<(usize, usize)>) -> PyResult<Vec<f64>> {
    let t = TokenTensor::new(1, tokens, channels, x).map_err(to_py)?;
    let plan = swap::SwapPlan::new(swap::SwapAxis::Channel, channels, pairs).map_err(to_py)?;
    Ok(swap::apply_swap_channel(&t, &plan).map_err(to_py)?.into_data())
}

/// `a + ω·(a − b)` elementwise.
#[pyfunction]
fn guided_epsilon(a: Vec<f64>, b: Vec<f64>, omega: f64) -> PyResult<Vec<f64>> {
    let (n, m) = (a.len(), b.len());
    let ta = tokens(1, 1, n, a)?;
    let tb = TokenTensor::new(1, 1, m, b).map_err(to_py)?;
    Ok(guidance::guided_epsilon(&ta, &tb, omega).map_err(to_py)?.into_data())
}

#[pyfunction]
fn frechet_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let ga = metrics::fit_gaussian(&SampleSet::from_rows(&a).map_err(to_py)?).map_err(to_py)?;
    let gb = metrics::fit_gaussian(&SampleSet::from_rows(&b).map_err(to_py)?).map_err(to_py)?;
    metrics::frechet_distance(&ga, &gb).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, n_projections = 128, seed = 0))]
fn sliced_wasserstein2(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, n_projections: usize, seed: u64) -> PyResult<f64> {
    let sa = SampleSet::from_rows(&a).map_err(to_py)?;
    let sb = SampleSet::from_rows(&b).map_err(to_py)?;
    metrics::sliced_wasserstein2(&sa, &sb, n_projections, &mut RngStream::new(seed, 0)).map_err(to_py)
}

#[pyfunction]
fn alpha_bar(train_steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Vec<f64>> {
    Ok(NoiseSchedule::linear(train_steps, beta_start, beta_end)
        .map_err(to_py)?
        .alpha_bar)
}

fn row_dict<'py>(py: Python<'py>, r: &MetricsRow) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let d = pyo3::types::PyDict::new(py);
    d.set_item("run_id", &r.run_id)?;
    d.set_item("method", &r.method)?;
    d.set_item("omega", r.omega)?;
    d.set_item("spatial_r", r.spatial_r)?;
    d.set_item("channel_r", r.channel_r)?;
    d.set_item("policy", r.policy.as_str())?;
    d.set_item("seed", r.seed)?;
    d.set_item("frechet", r.frechet)?;
    d.set_item("sliced_w2", r.sliced_w2)?;
    d.set_item("diversity", r.diversity)?;
    Ok(d)
}

/// Runs one `ssg-lab` command; returns its metrics rows (empty for
/// `train` and `analyze`).
#[pyfunction]
fn run_command<'py>(py: Python<'py>, command: &str, config: &PyRunConfig) -> PyResult<Vec<Bound<'py, pyo3::types::PyDict>>> {
    let cfg = &config.inner;
    let rows: Vec<MetricsRow> = match command {
        "train" => {
            experiments::cmd_train(cfg, |_, _| {}).map_err(to_py)?;
            Vec::new()
        }
        "sample" => vec![experiments::cmd_sample(cfg).map_err(to_py)?.row],
        "sweep" => experiments::cmd_sweep(cfg).map_err(to_py)?,
        "ablate" => experiments::cmd_ablate(cfg).map_err(to_py)?,
        "analyze" => {
            experiments::cmd_analyze(cfg).map_err(to_py)?;
            Vec::new()
        }
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown command `{other}` (train|sample|sweep|ablate|analyze)"
            )))
        }
    };
    rows.iter().map(|r| row_dict(py, r)).collect()
}

/// Held-out-scored sample row for an in-memory model.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &PyModel, run_id: &str) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let ck = Checkpoint::new(model.cfg.model, &model.schedule, 0, model.params.clone());
    let ev = Evaluator::new(&model.cfg, ck).map_err(to_py)?;
    let (row, _) = ev
        .evaluate(run_id, &model.cfg.guidance, model.cfg.eval.seed)
        .map_err(to_py)?;
    row_dict(py, &row)
}

#[pymodule]
fn ssg_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CSV_HEADER", experiments::CSV_HEADER)?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(select_swap_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(apply_swap_spatial, m)?)?;
    m.add_function(wrap_pyfunction!(apply_swap_channel, m)?)?;
    m.add_function(wrap_pyfunction!(guided_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(sliced_wasserstein2, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_bar, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
