//! Python bindings: configs, synthetic samples, the classical matcher,
//! loss building blocks, and train/evaluate/infer for the toy network.
//! Arrays cross the boundary as flat row-major lists plus a shape.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use stereo_consistency as sc;
use sc::config::{Ablation, ExperimentConfig};
use sc::data::StereoSample;
use sc::tensor::Tensor;

fn err(e: sc::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::from_vec(&shape, data).map_err(err)
}

/// Experiment configuration (TOML-backed).
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: ExperimentConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::parse(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Applies a `section.field=value` override; validation is deferred
    /// so that dependent fields can be changed one at a time.
    fn set(&mut self, assignment: &str) -> PyResult<()> {
        self.inner.apply_override(assignment).map_err(err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn set_ablation(&mut self, contrastive: bool, momentum: bool, whitening: bool) -> PyResult<()> {
        self.inner.set_ablation(Ablation {
            contrastive,
            momentum,
            whitening,
        });
        self.inner.validate().map_err(err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn variant_label(&self) -> String {
        sc::experiment::variant_label(&self.inner)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
}

/// A rectified stereo pair with ground truth.
#[pyclass(name = "StereoSample", from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: StereoSample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn sample_id(&self) -> String {
        self.inner.sample_id.clone()
    }

    #[getter]
    fn style_tag(&self) -> String {
        self.inner.style_tag.clone()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    /// Planar `[3, H, W]` values in [0, 1].
    fn left(&self) -> Vec<f64> {
        self.inner.left.as_slice().to_vec()
    }

    fn right(&self) -> Vec<f64> {
        self.inner.right.as_slice().to_vec()
    }

    /// Left-view disparity, `[H, W]`.
    fn disparity(&self) -> Vec<f64> {
        self.inner.disparity_left.as_slice().to_vec()
    }

    /// `True` where the left pixel is visible in both views.
    fn visible(&self) -> Vec<bool> {
        self.inner.occlusion_left.as_slice().to_vec()
    }

    /// Copy under the evaluation style `name` of `config`.
    fn styled(&self, config: &PyConfig, name: &str, seed: u64) -> PyResult<PySample> {
        let style = config
            .inner
            .eval
            .styles
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| PyValueError::new_err(format!("no evaluation style named '{name}'")))?;
        let mut out = sc::data::apply_style(&self.inner, &style.style, seed).map_err(err)?;
        out.style_tag = style.name.clone();
        Ok(PySample { inner: out })
    }
}

/// Sample `index` of the corpus stream `seed`.
#[pyfunction]
#[pyo3(signature = (seed, index, height=64, width=64, max_disp=48))]
fn generate_sample(seed: u64, index: u64, height: usize, width: usize, max_disp: usize) -> PyResult<PySample> {
    let s = sc::data::generate_corpus_sample(seed, index, height, width, max_disp, &Default::default()).map_err(err)?;
    Ok(PySample { inner: s })
}

/// `"train"` or `"test"` split of a configuration.
#[pyfunction]
fn generate_split(config: &PyConfig, split: &str) -> PyResult<Vec<PySample>> {
    let split = match split {
        "train" => sc::experiment::Split::Train,
        "test" => sc::experiment::Split::Test,
        other => return Err(PyValueError::new_err(format!("unknown split '{other}'"))),
    };
    let samples = sc::experiment::generate_split(&config.inner, split).map_err(err)?;
    Ok(samples.into_iter().map(|inner| PySample { inner }).collect())
}

/// Winner-take-all SAD disparities, `[H, W]`.
#[pyfunction]
#[pyo3(signature = (sample, window=5, max_disp=48))]
fn wta_sad_match(sample: &PySample, window: usize, max_disp: usize) -> PyResult<Vec<f64>> {
    let g = sc::baseline::wta_sad_match(&sample.inner.left, &sample.inner.right, window, max_disp).map_err(err)?;
    Ok(g.into_vec())
}

/// Percentage of valid pixels with `|pred - gt| > threshold`.
#[pyfunction]
fn threshold_error_rate(pred: Vec<f64>, gt: Vec<f64>, width: usize, height: usize, threshold: f64) -> PyResult<f64> {
    let bad = || PyValueError::new_err("length does not match width * height");
    let pred = sc::grid::Grid::from_vec(width, height, pred).ok_or_else(bad)?;
    let gt = sc::grid::Grid::from_vec(width, height, gt).ok_or_else(bad)?;
    sc::metrics::threshold_error_rate(&pred, &gt, &sc::metrics::gt_valid(&gt), threshold).map_err(err)
}

/// Row-wise instance normalization of a `[C, N]` or `[C, H, W]` array.
#[pyfunction]
#[pyo3(signature = (data, shape, epsilon=1e-5))]
fn instance_normalize(data: Vec<f64>, shape: Vec<usize>, epsilon: f64) -> PyResult<Vec<f64>> {
    let x = tensor(shape, data)?;
    Ok(sc::ssw::instance_normalize(&x, epsilon).map_err(err)?.x_hat.data().to_vec())
}

/// `C × C` covariance `X̂ X̂ᵀ / N` of a normalized `[C, N]` array.
#[pyfunction]
fn covariance(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
    let x = tensor(shape, data)?;
    Ok(sc::ssw::covariance(&x).map_err(err)?.data().to_vec())
}

/// Selective mask of a `C × C` variance matrix (flat booleans).
#[pyfunction]
#[pyo3(signature = (v, channels, clusters=3))]
fn select_mask(v: Vec<f64>, channels: usize, clusters: usize) -> PyResult<Vec<bool>> {
    let v = tensor(vec![channels, channels], v)?;
    Ok(sc::ssw::select_mask(&v, clusters).map_err(err)?.bits)
}

/// `key ← m·key + (1−m)·query`.
#[pyfunction]
fn momentum_update(mut key: Vec<f64>, query: Vec<f64>, momentum: f64) -> PyResult<Vec<f64>> {
    sc::scf::momentum_update(&mut key, &query, momentum).map_err(err)?;
    Ok(key)
}

/// Aggregate metrics of one evaluation style.
#[pyclass(name = "StyleMetrics", get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyStyleMetrics {
    style: String,
    mean_cosine: Option<f64>,
    mean_cosine_unmasked: Option<f64>,
    err_gt_1px: f64,
    err_gt_3px: f64,
    d1_all: f64,
    per_channel_abs_diff: Vec<f64>,
}

/// Trained (or freshly initialized) query-encoder network.
#[pyclass(name = "Model", skip_from_py_object)]
struct PyModel {
    cfg: ExperimentConfig,
    params: sc::params::ParamSet,
    /// Per-step disparity loss of the training run.
    #[pyo3(get)]
    loss_history: Vec<f64>,
}

#[pymethods]
impl PyModel {
    /// Randomly initialized parameters for `config`.
    #[staticmethod]
    fn init(config: &PyConfig) -> PyResult<Self> {
        config.validate()?;
        Ok(Self {
            params: sc::net::init_params(&config.inner.net, config.inner.seed).map_err(err)?,
            cfg: config.inner.clone(),
            loss_history: Vec::new(),
        })
    }

    /// Full in-memory training run on the generated training split.
    #[staticmethod]
    fn train(py: Python<'_>, config: &PyConfig) -> PyResult<Self> {
        config.validate()?;
        let cfg = config.inner.clone();
        let outcome = py.detach(|| sc::experiment::train_in_memory(&cfg)).map_err(err)?;
        Ok(Self {
            loss_history: outcome.log.iter().map(|r| r.l_disp).collect(),
            params: outcome.trainer.params,
            cfg,
        })
    }

    /// Disparity map `[H, W]` using the query encoder for both views.
    fn infer(&self, sample: &PySample) -> PyResult<Vec<f64>> {
        let g = sc::net::infer(&sample.inner.left, &sample.inner.right, &self.params, &self.cfg.net).map_err(err)?;
        Ok(g.into_vec())
    }

    /// Metrics on the held-out split under every evaluation style.
    fn evaluate(&self, py: Python<'_>) -> PyResult<Vec<PyStyleMetrics>> {
        let evals = py
            .detach(|| {
                let test = sc::experiment::generate_split(&self.cfg, sc::experiment::Split::Test)?;
                sc::experiment::evaluate(&self.cfg, &self.params, &test)
            })
            .map_err(err)?;
        Ok(evals
            .into_iter()
            .map(|e| PyStyleMetrics {
                style: e.style,
                mean_cosine: e.aggregate.mean_cosine,
                mean_cosine_unmasked: e.aggregate.mean_cosine_unmasked,
                err_gt_1px: e.aggregate.err_gt_1px,
                err_gt_3px: e.aggregate.err_gt_3px,
                d1_all: e.aggregate.d1_all,
                per_channel_abs_diff: e.aggregate.per_channel_abs_diff,
            })
            .collect())
    }

    fn parameter_count(&self) -> usize {
        self.params.len()
    }
}

#[pymodule]
fn stereo_consistency_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyStyleMetrics>()?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(generate_split, m)?)?;
    m.add_function(wrap_pyfunction!(wta_sad_match, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(instance_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(covariance, m)?)?;
    m.add_function(wrap_pyfunction!(select_mask, m)?)?;
    m.add_function(wrap_pyfunction!(momentum_update, m)?)?;
    Ok(())
}
