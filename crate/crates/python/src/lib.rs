//! Python bindings: flows, the model, data generation, training, metrics
//! and the equivariance checks. Images cross the boundary as nested lists
//! `[row][col]` of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowm::config::parse_config;
use flowm::env::{self, generate_episodes, write_dataset};
use flowm::equiv::{self, CheckSetup};
use flowm::eval;
use flowm::flow::{flow_at, Action, FlowElement, Velocity, VelocitySet};
use flowm::grid::Field;
use flowm::model::{self, Ablation, FloWMConfig, Params};
use flowm::train;

type Image = Vec<Vec<f64>>;

fn err(e: flowm::Error) -> PyErr {
    match e {
        flowm::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_field(img: &Image) -> PyResult<Field> {
    let h = img.len();
    let w = img.first().map_or(0, |r| r.len());
    if h == 0 || w == 0 || img.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty rectangular list of rows"));
    }
    Field::from_vec(1, h, w, img.iter().flatten().copied().collect()).map_err(err)
}

fn from_field(f: &Field) -> Image {
    let w = f.width();
    f.plane(0).chunks(w).map(|r| r.to_vec()).collect()
}

/// A displacement on the torus.
#[pyclass(name = "Flow")]
struct PyFlow(FlowElement);

#[pymethods]
impl PyFlow {
    #[new]
    fn new(dx: i64, dy: i64, world: usize) -> Self {
        PyFlow(FlowElement::new(dx, dy, world))
    }

    /// The flow `t·(vx, vy)`.
    #[staticmethod]
    fn at(vx: i32, vy: i32, t: u64, world: usize) -> Self {
        PyFlow(flow_at(Velocity::new(vx, vy), t, world))
    }

    #[getter]
    fn dx(&self) -> i64 {
        self.0.dx()
    }

    #[getter]
    fn dy(&self) -> i64 {
        self.0.dy()
    }

    fn compose(&self, other: &PyFlow) -> PyResult<Self> {
        self.0.compose(&other.0).map(PyFlow).map_err(err)
    }

    fn inverse(&self) -> Self {
        PyFlow(self.0.inverse())
    }

    /// Rolls an image by the displacement.
    fn apply(&self, image: Image) -> PyResult<Image> {
        Ok(from_field(&self.0.act_on_field(&to_field(&image)?).map_err(err)?))
    }

    fn __repr__(&self) -> String {
        format!("Flow(dx={}, dy={}, world={})", self.0.dx(), self.0.dy(), self.0.world())
    }
}

/// One generated episode.
#[pyclass(name = "Episode")]
struct PyEpisode(env::Episode);

#[pymethods]
impl PyEpisode {
    #[getter]
    fn frames(&self) -> Vec<Image> {
        self.0.frames.iter().map(from_field).collect()
    }

    /// `(ax, ay)` view translations; `actions[t]` follows `frames[t]`.
    #[getter]
    fn actions(&self) -> Vec<(i32, i32)> {
        self.0.actions.iter().map(|a| (a.ax, a.ay)).collect()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    fn __len__(&self) -> usize {
        self.0.frames.len()
    }
}

/// Model configuration and parameters.
#[pyclass(name = "Model")]
struct PyModel {
    cfg: FloWMConfig,
    params: Params,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (world=24, window=16, hidden=32, radius=1, ablation="full", seed=0))]
    fn new(world: usize, window: usize, hidden: usize, radius: i32, ablation: &str, seed: u64) -> PyResult<Self> {
        let ablation: Ablation = ablation.parse().map_err(err)?;
        let cfg = FloWMConfig {
            world_size: world,
            window_size: window,
            hidden_channels: hidden,
            velocity_set: VelocitySet::square(radius),
            ..FloWMConfig::desk()
        }
        .with_ablation(ablation, radius);
        cfg.validate().map_err(err)?;
        let params = Params::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { cfg, params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (cfg, params) = model::read_checkpoint(&path).map_err(err)?;
        Ok(Self { cfg, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::write_checkpoint(&path, &self.cfg, &self.params).map_err(err)
    }

    #[getter]
    fn ablation(&self) -> String {
        self.cfg.ablation().map_or("custom", |a| a.name()).to_string()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    #[getter]
    fn velocities(&self) -> Vec<(i32, i32)> {
        self.cfg.velocity_set.iter().map(|v| (v.vx, v.vy)).collect()
    }

    /// Observes `frames`, then predicts `horizon` frames.
    fn rollout(&self, frames: Vec<Image>, actions: Vec<(i32, i32)>, horizon: usize) -> PyResult<Vec<Image>> {
        let frames = frames.iter().map(to_field).collect::<PyResult<Vec<_>>>()?;
        let actions: Vec<Action> = actions.into_iter().map(|(x, y)| Action::new(x, y)).collect();
        let preds = model::rollout(&self.params, &self.cfg, &frames, &actions, horizon).map_err(err)?;
        Ok(preds.iter().map(from_field).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(ablation={}, world={}, window={}, hidden={}, |V|={})",
            self.ablation(),
            self.cfg.world_size,
            self.cfg.window_size,
            self.cfg.hidden_channels,
            self.cfg.velocities()
        )
    }
}

/// Generates `count` episodes from a key=value configuration.
#[pyfunction]
#[pyo3(signature = (count, seed=0, config=""))]
fn generate(count: usize, seed: u64, config: &str) -> PyResult<Vec<PyEpisode>> {
    let cfg = parse_config(config, &[]).map_err(err)?;
    let eps = generate_episodes(&cfg.env, count, seed).map_err(err)?;
    Ok(eps.into_iter().map(PyEpisode).collect())
}

/// Generates episodes and writes them as a dataset file.
#[pyfunction]
#[pyo3(signature = (path, count, seed=0, config=""))]
fn write_data(path: PathBuf, count: usize, seed: u64, config: &str) -> PyResult<()> {
    let cfg = parse_config(config, &[]).map_err(err)?;
    let eps = generate_episodes(&cfg.env, count, seed).map_err(err)?;
    write_dataset(&path, &eps).map_err(err)
}

#[pyfunction]
fn read_data(path: PathBuf) -> PyResult<Vec<PyEpisode>> {
    Ok(env::read_dataset(&path).map_err(err)?.into_iter().map(PyEpisode).collect())
}

/// Trains on a dataset file and writes metrics and checkpoints to `out`.
/// Returns `(steps, best validation MSE)`.
#[pyfunction]
#[pyo3(signature = (data, out, config="", val=None))]
fn fit(py: Python<'_>, data: PathBuf, out: PathBuf, config: &str, val: Option<PathBuf>) -> PyResult<(usize, Option<f64>)> {
    let cfg = parse_config(config, &[]).map_err(err)?;
    let outcome = py
        .detach(|| train::train(&cfg.model, &cfg.train, &data, val.as_deref(), &out))
        .map_err(err)?;
    Ok((outcome.steps, outcome.best_val))
}

#[pyfunction]
fn mse(pred: Image, target: Image) -> PyResult<f64> {
    eval::mse(&to_field(&pred)?, &to_field(&target)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, target, peak=1.0))]
fn psnr(pred: Image, target: Image, peak: f64) -> PyResult<f64> {
    eval::psnr(&to_field(&pred)?, &to_field(&target)?, peak).map_err(err)
}

#[pyfunction]
fn ssim(pred: Image, target: Image) -> PyResult<f64> {
    eval::ssim(&to_field(&pred)?, &to_field(&target)?).map_err(err)
}

/// Runs the equivariance checks; returns `(all passed, table)`.
#[pyfunction]
#[pyo3(signature = (suite="all", seed=0, trials=20))]
fn verify(py: Python<'_>, suite: &str, seed: u64, trials: usize) -> PyResult<(bool, String)> {
    let setup = CheckSetup::default();
    let report = py
        .detach(|| match suite {
            "flow" => equiv::check_flow_laws(&[5, 8, 16], &VelocitySet::square(2), 10, seed),
            "theorem" => equiv::check_recurrence_equivariance(&setup, seed, trials),
            "closure" => equiv::check_self_motion_closure(&setup, seed, trials),
            "relative" => equiv::check_relative_motion(&setup, seed, trials),
            "all" => equiv::check_all(seed, trials),
            other => Err(flowm::Error::Config(format!(
                "unknown suite `{other}` (flow|theorem|closure|relative|all)"
            ))),
        })
        .map_err(err)?;
    Ok((report.all_passed(), report.table()))
}

#[pymodule]
fn flowm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFlow>()?;
    m.add_class::<PyEpisode>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(write_data, m)?)?;
    m.add_function(wrap_pyfunction!(read_data, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
