//! Python access to training, evaluation, density queries and sampling.

use std::path::{Path, PathBuf};

use fractalflow::cli::{build_model, cmd_eval, cmd_train, load_datasets, load_trained, CHECKPOINT_FILE};
use fractalflow::config::RunConfig;
use fractalflow::data::make_moons;
use fractalflow::prior::WeightMode;
use fractalflow::trainer::FlowModel;
use fractalflow::{Error, Tensor};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } => PyValueError::new_err(e.to_string()),
        Error::Io(_) | Error::Format(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn load_config(path: &str) -> PyResult<RunConfig> {
    RunConfig::load(Path::new(path)).map_err(to_py)
}

/// Trains from a config file and returns `(epoch, train_bpd, val_bpd)` rows.
#[pyfunction]
#[pyo3(signature = (config, resume=None))]
fn train(py: Python<'_>, config: &str, resume: Option<PathBuf>) -> PyResult<Vec<(usize, f64, Option<f64>)>> {
    let cfg = load_config(config)?;
    let history = py.detach(|| cmd_train(&cfg, resume.as_deref())).map_err(to_py)?;
    Ok(history.iter().map(|r| (r.epoch, r.train_bpd, r.val_bpd)).collect())
}

/// Validation bits per dimension of a trained checkpoint.
#[pyfunction]
#[pyo3(signature = (config, checkpoint=None))]
fn evaluate(py: Python<'_>, config: &str, checkpoint: Option<PathBuf>) -> PyResult<f64> {
    let cfg = load_config(config)?;
    py.detach(|| cmd_eval(&cfg, checkpoint.as_deref())).map_err(to_py)
}

/// Two-moons points as `[x, y]` rows.
#[pyfunction]
#[pyo3(signature = (n, noise=0.05, seed=0))]
fn moons(n: usize, noise: f64, seed: u64) -> PyResult<Vec<[f64; 2]>> {
    let d = make_moons(n, noise, seed).map_err(to_py)?;
    Ok(d.points.data().chunks(2).map(|p| [p[0], p[1]]).collect())
}

/// A flow model in model space: points for 2-D data, preprocessed
/// values for images.
#[pyclass(module = "fractalflow_py")]
struct Model {
    inner: FlowModel<f32>,
    shape: [usize; 3],
}

#[pymethods]
impl Model {
    /// Loads the checkpoint named by the config (or `checkpoint`). With
    /// `untrained=True` the freshly initialized model is returned instead.
    #[new]
    #[pyo3(signature = (config, checkpoint=None, untrained=false))]
    fn new(config: &str, checkpoint: Option<PathBuf>, untrained: bool) -> PyResult<Self> {
        let cfg = load_config(config)?;
        let (train, _) = load_datasets(&cfg).map_err(to_py)?;
        let shape = train.shape();
        cfg.model.validate(shape).map_err(to_py)?;
        let inner = if untrained {
            build_model(&cfg, shape).map_err(to_py)?
        } else {
            let path = checkpoint.unwrap_or_else(|| cfg.output.dir.join(CHECKPOINT_FILE));
            load_trained(&cfg, shape, &path).map_err(to_py)?.0
        };
        Ok(Model { inner, shape })
    }

    /// Input shape `(C, H, W)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2])
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Log density (nats) of each row; rows hold `C*H*W` values.
    fn log_prob(&self, py: Python<'_>, rows: Vec<Vec<f32>>) -> PyResult<Vec<f64>> {
        let u = self.batch(&rows)?;
        let lp = py.detach(|| self.inner.log_prob_values(&u, None)).map_err(to_py)?;
        Ok(lp.to_f64_vec())
    }

    /// Flow forward pass: flat latents, one row per input.
    fn encode(&self, rows: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let u = self.batch(&rows)?;
        let out = self.inner.intermediates(&u, false).map_err(to_py)?;
        Ok(flat_rows(out.last().expect("input is always recorded")))
    }

    /// Maps flat latents back to model space.
    fn decode(&self, z: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let d = self.inner.dim();
        let zt = rows_tensor(&z, d)?;
        Ok(flat_rows(&self.inner.decode(&zt).map_err(to_py)?))
    }

    /// Draws `n` samples; `weight_mode` is `"expected"` or `"resampled"`.
    #[pyo3(signature = (n, temperature=1.0, seed=0, weight_mode="expected"))]
    fn sample(&self, n: usize, temperature: f64, seed: u64, weight_mode: &str) -> PyResult<Vec<Vec<f32>>> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(PyValueError::new_err("temperature must be positive"));
        }
        let mode: WeightMode = weight_mode.parse().map_err(to_py)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = self.inner.sample(n, temperature, mode, &mut rng).map_err(to_py)?;
        Ok(flat_rows(&x))
    }
}

impl Model {
    fn batch(&self, rows: &[Vec<f32>]) -> PyResult<Tensor<f32>> {
        let [c, h, w] = self.shape;
        rows_tensor(rows, c * h * w)?
            .reshaped(&[rows.len(), c, h, w])
            .map_err(to_py)
    }
}

fn rows_tensor(rows: &[Vec<f32>], d: usize) -> PyResult<Tensor<f32>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("expected at least one row"));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!(
            "rows must have {d} values, got {}",
            bad.len()
        )));
    }
    Tensor::new(&[rows.len(), d], rows.concat()).map_err(to_py)
}

fn flat_rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let d: usize = t.shape()[1..].iter().product();
    t.data().chunks(d).map(<[f32]>::to_vec).collect()
}

#[pymodule]
fn fractalflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(moons, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
