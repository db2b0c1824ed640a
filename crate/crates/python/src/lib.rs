//! Python bindings: schedules, masks, synthetic data, training, ensemble sampling,
//! metrics and the verification suite.

use std::path::PathBuf;

use maskdiff::conditioning::{extract_bundle, PyramidEncoder};
use maskdiff::config::RunConfig;
use maskdiff::data::{self as mdata, DataConfig};
use maskdiff::denoiser::Denoiser;
use maskdiff::diffusion::{self, MaskState};
use maskdiff::image::Image;
use maskdiff::inference::{self, BernoulliSampler, EnsembleResult, GaussianSampler, MaskSampler};
use maskdiff::numerics::{DType, Real};
use maskdiff::rng::RngStream;
use maskdiff::schedule::{make_cosine_schedule, make_linear_schedule, NoiseSchedule};
use maskdiff::training::{
    load_checkpoint, save_checkpoint, NoiseKind, StepRecord, Trainer as CoreTrainer,
};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: maskdiff::Error) -> PyErr {
    use maskdiff::Error as E;
    match e {
        E::Io { .. } | E::Format { .. } => PyIOError::new_err(e.to_string()),
        E::InvalidArgument(_) | E::ShapeMismatch { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for maskdiff::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn parse_config(json: Option<&str>) -> PyResult<RunConfig> {
    let cfg = match json {
        Some(text) => {
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("config: {e}")))?
        }
        None => RunConfig::default(),
    };
    cfg.resolve().py()
}

/// Forward-process schedule.
#[pyclass(name = "Schedule", frozen)]
struct Schedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl Schedule {
    #[staticmethod]
    #[pyo3(signature = (steps, beta_start=0.01, beta_end=0.2))]
    fn linear(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(Schedule {
            inner: make_linear_schedule(steps, beta_start, beta_end).py()?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (steps, s=0.008))]
    fn cosine(steps: usize, s: f64) -> PyResult<Self> {
        Ok(Schedule {
            inner: make_cosine_schedule(steps, s).py()?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    /// `q(X_t | X_0 = x0)` as `[untampered, tampered]`.
    fn marginal(&self, x0: u8, t: usize) -> PyResult<[f64; 2]> {
        self.inner.check_step(t, 0).py()?;
        Ok(diffusion::keep_or_uniform(
            class(x0)?,
            self.inner.alpha_bar(t),
        ))
    }

    /// `q(X_{t-1} | X_t = xt, X_0 = x0)` as `[untampered, tampered]`.
    fn posterior(&self, xt: u8, x0: u8, t: usize) -> PyResult<[f64; 2]> {
        self.inner.check_step(t, 2).py()?;
        Ok(diffusion::posterior_pixel(
            class(xt)?,
            class(x0)?,
            self.inner.alpha(t),
            self.inner.alpha_bar(t - 1),
        ))
    }

    fn __repr__(&self) -> String {
        format!(
            "Schedule({:?}, T={})",
            self.inner.kind(),
            self.inner.steps()
        )
    }
}

fn class(c: u8) -> PyResult<u8> {
    if c > 1 {
        return Err(PyValueError::new_err(format!(
            "class must be 0 or 1, got {c}"
        )));
    }
    Ok(c)
}

/// Binary mask, row-major labels with 1 marking tampered pixels.
#[pyclass(name = "Mask", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct Mask {
    inner: MaskState,
}

#[pymethods]
impl Mask {
    #[new]
    fn new(height: usize, width: usize, labels: Vec<u8>) -> PyResult<Self> {
        Ok(Mask {
            inner: MaskState::new(height, width, labels, 0).py()?,
        })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.inner.labels().to_vec()
    }

    fn tampered_fraction(&self) -> f64 {
        self.inner.tampered_fraction()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mask({}x{}, tampered={:.3})",
            self.inner.height(),
            self.inner.width(),
            self.inner.tampered_fraction()
        )
    }
}

/// One synthetic image with its ground-truth mask.
#[pyclass(name = "Sample", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Sample {
    inner: mdata::Sample,
}

#[pymethods]
impl Sample {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn kind(&self) -> String {
        format!("{:?}", self.inner.kind).to_lowercase()
    }

    #[getter]
    fn difficulty(&self) -> String {
        format!("{:?}", self.inner.difficulty).to_lowercase()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// `(height, width, rgb)` with `rgb` row-major, interleaved, in `[0, 1]`.
    #[getter]
    fn image(&self) -> (usize, usize, Vec<f64>) {
        let im = &self.inner.image;
        (im.height(), im.width(), im.data().to_vec())
    }

    #[getter]
    fn mask(&self) -> Mask {
        Mask {
            inner: self.inner.mask.clone(),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample({}, {}, {})",
            self.inner.id,
            self.kind(),
            self.difficulty()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (count, size=None, seed=None, ambiguous_frac=None))]
fn generate_dataset(
    count: usize,
    size: Option<usize>,
    seed: Option<u64>,
    ambiguous_frac: Option<f64>,
) -> PyResult<Vec<Sample>> {
    let d = DataConfig::default();
    let cfg = DataConfig {
        count,
        size: size.unwrap_or(d.size),
        seed: seed.unwrap_or(d.seed),
        ambiguous_frac: ambiguous_frac.unwrap_or(d.ambiguous_frac),
    };
    let samples = mdata::generate_dataset(&cfg).py()?;
    Ok(samples.into_iter().map(|inner| Sample { inner }).collect())
}

#[pyfunction]
fn read_dataset(dir: PathBuf) -> PyResult<Vec<Sample>> {
    let (_, samples) = mdata::read_dataset(&dir).py()?;
    Ok(samples.into_iter().map(|inner| Sample { inner }).collect())
}

#[pyfunction]
#[pyo3(signature = (samples, dir, seed=0))]
fn write_dataset(samples: Vec<PyRef<'_, Sample>>, dir: PathBuf, seed: u64) -> PyResult<()> {
    let owned: Vec<mdata::Sample> = samples.iter().map(|s| s.inner.clone()).collect();
    mdata::write_dataset(
        &owned,
        &dir,
        seed,
        serde_json::json!({ "build": maskdiff::BUILD_ID }),
    )
    .py()
    .map(|_| ())
}

/// Draws `X_t ~ q(X_t | X_0)`.
#[pyfunction]
fn q_sample(mask: &Mask, t: usize, schedule: &Schedule, seed: u64) -> PyResult<Mask> {
    let mut rng = RngStream::new(seed);
    Ok(Mask {
        inner: diffusion::q_sample(&mask.inner, t, &schedule.inner, &mut rng).py()?,
    })
}

#[pyfunction]
fn f1(pred: &Mask, gt: &Mask) -> PyResult<f64> {
    maskdiff::metrics::f1(&pred.inner, &gt.inner).py()
}

#[pyfunction]
fn auc(probs: Vec<f64>, gt: &Mask) -> PyResult<f64> {
    maskdiff::metrics::auc(&probs, &gt.inner).py()
}

/// Runs the oracle suite; returns `(name, passed, detail)` per check.
#[pyfunction]
fn verify() -> Vec<(String, bool, String)> {
    maskdiff::verify::run_suite()
        .into_iter()
        .map(|c| (c.name, c.passed, c.detail))
        .collect()
}

enum AnyTrainer {
    F32(CoreTrainer<f32>),
    F64(CoreTrainer<f64>),
}

macro_rules! each {
    ($v:expr, $t:ident => $body:expr) => {
        match $v {
            AnyTrainer::F32($t) => $body,
            AnyTrainer::F64($t) => $body,
        }
    };
}

/// Trains a denoiser from a JSON run configuration (defaults when omitted).
#[pyclass(name = "Trainer", unsendable)]
struct Trainer {
    inner: AnyTrainer,
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config_json)?;
        let inner = match cfg.dtype {
            DType::F32 => AnyTrainer::F32(CoreTrainer::new(cfg).py()?),
            DType::F64 => AnyTrainer::F64(CoreTrainer::new(cfg).py()?),
        };
        Ok(Trainer { inner })
    }

    #[getter]
    fn step(&self) -> usize {
        each!(&self.inner, t => t.step())
    }

    #[getter]
    fn config_json(&self) -> String {
        each!(&self.inner, t => t.config().to_json().to_string())
    }

    /// Trains until `until` updates have been made in total (the configured budget when
    /// omitted). Returns `(step, epoch, loss, lr)` per update.
    #[pyo3(signature = (samples, until=None))]
    fn train(
        &mut self,
        samples: Vec<PyRef<'_, Sample>>,
        until: Option<usize>,
    ) -> PyResult<Vec<(usize, usize, f64, f64)>> {
        let owned: Vec<mdata::Sample> = samples.iter().map(|s| s.inner.clone()).collect();
        let limit = until.unwrap_or(usize::MAX);
        let recs: Vec<StepRecord> =
            each!(&mut self.inner, t => t.run_until(&owned, limit, |_| Ok(()))).py()?;
        Ok(recs
            .iter()
            .map(|r| (r.step, r.epoch, r.loss, r.lr))
            .collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        each!(&self.inner, t => save_checkpoint(&path, &t.checkpoint())).py()
    }
}

/// Result of one ensemble: member masks, vote map, final mask and uncertainty.
#[pyclass(name = "Ensemble", frozen)]
struct Ensemble {
    inner: EnsembleResult,
}

#[pymethods]
impl Ensemble {
    #[getter]
    fn members(&self) -> Vec<Mask> {
        self.inner
            .members
            .iter()
            .map(|m| Mask { inner: m.clone() })
            .collect()
    }

    #[getter]
    fn vote_probs(&self) -> Vec<f64> {
        self.inner.vote_probs.clone()
    }

    #[getter]
    fn final_mask(&self) -> Mask {
        Mask {
            inner: self.inner.final_mask.clone(),
        }
    }

    #[getter]
    fn uncertainty(&self) -> Vec<f64> {
        self.inner.uncertainty.clone()
    }

    #[getter]
    fn prob_map(&self) -> Vec<f64> {
        self.inner.prob_map.clone()
    }

    fn mean_uncertainty(&self) -> f64 {
        self.inner.mean_uncertainty()
    }
}

enum AnyNet {
    F32(Denoiser<f32>),
    F64(Denoiser<f64>),
}

/// A trained denoiser loaded from a checkpoint.
#[pyclass(name = "Model", unsendable)]
struct Model {
    net: AnyNet,
    cfg: RunConfig,
    sched: NoiseSchedule,
    encoder: PyramidEncoder,
}

fn ensemble<T: Real>(
    net: &Denoiser<T>,
    m: &Model,
    image: &Image,
    n: usize,
    seed: u64,
    one_step: bool,
) -> maskdiff::Result<EnsembleResult> {
    let bundle = extract_bundle(image, &m.encoder)?;
    let batch = m.cfg.inference.batch;
    let rng = RngStream::new(seed);
    match m.cfg.noise {
        NoiseKind::Bernoulli => {
            let s = BernoulliSampler {
                predictor: net,
                sched: &m.sched,
                batch,
                one_step,
            };
            inference::sample_ensemble(&s as &dyn MaskSampler, &bundle, n, &rng)
        }
        NoiseKind::Gaussian => {
            let s = GaussianSampler {
                predictor: net,
                sched: &m.sched,
                batch,
                one_step,
            };
            inference::sample_ensemble(&s as &dyn MaskSampler, &bundle, n, &rng)
        }
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint::<f64>(&path).py()?;
        let cfg = ckpt.header.config.clone();
        let net64 = ckpt.denoiser().py()?;
        let net = match cfg.dtype {
            DType::F32 => AnyNet::F32(net64.cast()),
            DType::F64 => AnyNet::F64(net64),
        };
        Ok(Model {
            sched: cfg.build_schedule().py()?,
            encoder: PyramidEncoder::new(cfg.extractor_seed, cfg.denoiser.pyramid_channels).py()?,
            net,
            cfg,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.sched.steps()
    }

    #[getter]
    fn config_json(&self) -> String {
        self.cfg.to_json().to_string()
    }

    /// Draws an `n`-member ensemble for an RGB image given row-major and interleaved.
    #[pyo3(signature = (height, width, rgb, n=8, seed=0, one_step=false))]
    fn sample(
        &self,
        height: usize,
        width: usize,
        rgb: Vec<f64>,
        n: usize,
        seed: u64,
        one_step: bool,
    ) -> PyResult<Ensemble> {
        let image = Image::new(height, width, rgb).py()?;
        let inner = match &self.net {
            AnyNet::F32(net) => ensemble(net, self, &image, n, seed, one_step),
            AnyNet::F64(net) => ensemble(net, self, &image, n, seed, one_step),
        }
        .py()?;
        Ok(Ensemble { inner })
    }
}

#[pymodule]
pub fn maskdiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", maskdiff::BUILD_ID)?;
    m.add_class::<Schedule>()?;
    m.add_class::<Mask>()?;
    m.add_class::<Sample>()?;
    m.add_class::<Trainer>()?;
    m.add_class::<Model>()?;
    m.add_class::<Ensemble>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(q_sample, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
