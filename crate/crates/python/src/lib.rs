//! Python bindings: configuration, models, videos and the core loss and
//! metric functions.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use clipvos::config::{DeltaVariant, Rounding, CONFIG_KEYS};
use clipvos::davis::DavisTree;
use clipvos::engine::{self, GradcheckOptions, InferenceOverrides, TrainOptions};
use clipvos::loss::{self, DeltaOptions};
use clipvos::metrics::{self, BinaryMask, EvalOptions};
use clipvos::synth::{self, DifficultyProfile};
use clipvos::{Error, MaskSequence, ModelConfig, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Input(_) | Error::Script(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Model configuration as flat `key = value` settings.
#[pyclass(name = "Config", skip_from_py_object)]
struct PyConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (preset = "default"))]
    fn new(preset: &str) -> PyResult<Self> {
        let inner = match preset {
            "default" => ModelConfig::default(),
            "tiny" => ModelConfig::tiny(),
            "desk" => ModelConfig::desk(),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ModelConfig::parse(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        CONFIG_KEYS.to_vec()
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .get(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key {key:?}")))
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    /// Problems with the current settings; empty when valid.
    fn validate(&self) -> Vec<String> {
        self.inner.validate()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(hidden_dim={}, clip_length={}, bank_size={}, resolution={})",
            self.inner.hidden_dim, self.inner.clip_length, self.inner.bank_size, self.inner.input_resolution
        )
    }
}

/// A video with per-object ground-truth masks.
#[pyclass(name = "Video", skip_from_py_object)]
struct PyVideo {
    inner: clipvos::VideoRecord,
}

#[pymethods]
impl PyVideo {
    /// Read one video from a DAVIS-style tree.
    #[staticmethod]
    fn read(root: PathBuf, name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: DavisTree::new(root).read_video(name).map_err(to_py)?,
        })
    }

    /// One moving shape with scripted events, drawn from the benchmark generator.
    #[staticmethod]
    #[pyo3(signature = (seed, resolution = 64))]
    fn synthetic(seed: u64, resolution: usize) -> PyResult<Self> {
        let profile = DifficultyProfile {
            resolution,
            lng_quota: 0,
            sm_quota: 0,
            multi_object_prob: 0.0,
            ..DifficultyProfile::default()
        };
        let split = synth::make_benchmark(seed, 2, &profile).map_err(to_py)?;
        Ok(Self {
            inner: synth::generate(&split.train[0]).map_err(to_py)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn num_frames(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.frames.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.frames.width()
    }

    #[getter]
    fn num_objects(&self) -> usize {
        self.inner.gt_masks.len()
    }

    /// Ground-truth label map per frame, row-major.
    fn labels(&self) -> Vec<Vec<u8>> {
        clipvos::davis::merge_objects(&self.inner.gt_masks, 0.5)
    }

    fn area_fractions(&self) -> Vec<f64> {
        self.inner.object_area_fractions()
    }

    /// The first `length` frames.
    fn head(&self, length: usize) -> PyResult<Self> {
        if length == 0 || length > self.inner.len() {
            return Err(PyValueError::new_err(format!("length must be in 1..={}", self.inner.len())));
        }
        Ok(Self {
            inner: self.inner.window(0, length),
        })
    }
}

/// Model parameters plus their configuration.
#[pyclass(name = "Model", skip_from_py_object)]
struct PyModel {
    inner: clipvos::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: clipvos::Model::init(config.inner.clone(), seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: clipvos::Model::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.cfg.clone(),
        }
    }

    /// Segment every object given its frame-0 mask. Returns the label map per
    /// frame and a list of per-clip `(start, len, memory_size)` tuples.
    #[pyo3(signature = (video, clip_length = None, bank_size = None))]
    fn infer(
        &self,
        py: Python<'_>,
        video: &PyVideo,
        clip_length: Option<usize>,
        bank_size: Option<usize>,
    ) -> PyResult<(Vec<Vec<u8>>, Vec<(usize, usize, usize)>)> {
        let overrides = InferenceOverrides { clip_length, bank_size };
        let out = py
            .detach(|| engine::infer_video(&video.inner, &self.inner, overrides))
            .map_err(to_py)?;
        let clips = out.trace.clips.iter().map(|c| (c.start, c.len, c.memory_size)).collect();
        Ok((out.labels, clips))
    }

    /// Train in place on the `train` split of a DAVIS-style tree; returns the
    /// total loss of each step.
    #[pyo3(signature = (root, steps, seed = 0))]
    fn train(&mut self, py: Python<'_>, root: PathBuf, steps: usize, seed: u64) -> PyResult<Vec<f64>> {
        let model = &mut self.inner;
        py.detach(|| {
            let tree = DavisTree::new(root);
            let data = tree.read_videos(&tree.read_split("train")?)?;
            let report = engine::train(model, &data, TrainOptions { steps, seed }, |_, _| {})?;
            Ok(report.losses.iter().map(|b| b.total).collect())
        })
        .map_err(to_py)
    }

    /// Mean J, F and J_tr of the model on one split.
    #[pyo3(signature = (root, split = "val"))]
    fn evaluate(&self, py: Python<'_>, root: PathBuf, split: &str) -> PyResult<BTreeMap<String, f64>> {
        let report = py
            .detach(|| {
                let tree = DavisTree::new(root);
                let videos = tree.read_videos(&tree.read_split(split)?)?;
                engine::evaluate_model(&self.inner, &videos, InferenceOverrides::default(), &EvalOptions::from_config(&self.inner.cfg))
            })
            .map_err(to_py)?;
        Ok(BTreeMap::from([
            ("J".to_string(), report.j_mean),
            ("F".to_string(), report.f_mean),
            ("J_tr".to_string(), report.j_tr),
        ]))
    }
}

fn delta_variant(name: &str) -> PyResult<DeltaVariant> {
    name.parse().map_err(to_py)
}

/// Per-frame weights `L · softmax(delta / tau)`.
#[pyfunction]
fn compute_weights(delta: Vec<f64>, tau: f64, length: usize) -> PyResult<Vec<f64>> {
    loss::compute_weights(&delta, tau, length).map_err(to_py)
}

/// Normalized per-frame change of a mask sequence (row-major frames).
#[pyfunction]
#[pyo3(signature = (masks, height, width, variant = "masked_area"))]
fn compute_delta(masks: Vec<Vec<f64>>, height: usize, width: usize, variant: &str) -> PyResult<Vec<f64>> {
    let seq = MaskSequence::from_frames(&masks, height, width, 1).map_err(to_py)?;
    loss::compute_delta(&seq, DeltaOptions::new(delta_variant(variant)?)).map_err(to_py)
}

/// Mean dice loss between two probability sequences.
#[pyfunction]
fn dice_loss(pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>, height: usize, width: usize) -> PyResult<f64> {
    let p = MaskSequence::from_frames(&pred, height, width, 1).map_err(to_py)?;
    let g = MaskSequence::from_frames(&gt, height, width, 1).map_err(to_py)?;
    loss::dice_loss(&p, &g).map_err(to_py)
}

/// Focal loss of one frame; `alpha < 0` disables class balancing.
#[pyfunction]
#[pyo3(signature = (pred, gt, gamma = 2.0, alpha = 0.25))]
fn focal_loss(pred: Vec<f64>, gt: Vec<f64>, gamma: f64, alpha: f64) -> PyResult<f64> {
    loss::focal_loss_frame(&pred, &gt, gamma, (alpha >= 0.0).then_some(alpha)).map_err(to_py)
}

fn binary(bits: &[u8], height: usize, width: usize) -> PyResult<BinaryMask> {
    BinaryMask::new(height, width, bits.iter().map(|&b| b != 0).collect()).map_err(to_py)
}

/// Region similarity (IoU) of two binary masks; empty ∪ empty scores 1.
#[pyfunction]
fn region_similarity(pred: Vec<u8>, gt: Vec<u8>, height: usize, width: usize) -> PyResult<f64> {
    metrics::region_similarity(&binary(&pred, height, width)?, &binary(&gt, height, width)?).map_err(to_py)
}

/// Boundary F-measure with a tolerance given as a fraction of the diagonal.
#[pyfunction]
#[pyo3(signature = (pred, gt, height, width, tolerance = 0.008))]
fn contour_accuracy(pred: Vec<u8>, gt: Vec<u8>, height: usize, width: usize, tolerance: f64) -> PyResult<f64> {
    metrics::contour_accuracy(&binary(&pred, height, width)?, &binary(&gt, height, width)?, tolerance).map_err(to_py)
}

/// Mean J over the last `fraction` of evaluated frames.
#[pyfunction]
#[pyo3(signature = (per_frame_j, fraction = 0.25, rounding = "ceil"))]
fn j_tr(per_frame_j: Vec<f64>, fraction: f64, rounding: &str) -> PyResult<f64> {
    let r: Rounding = rounding.parse().map_err(to_py)?;
    metrics::j_tr(&per_frame_j, fraction, r).map_err(to_py)
}

/// Clips `(start, len)` covering frames `1..total_frames`.
#[pyfunction]
fn clip_windows(total_frames: usize, clip_length: usize) -> Vec<(usize, usize)> {
    clipvos::model::clip_windows(total_frames, clip_length)
}

/// Write a synthetic benchmark tree; returns `(train, val)` video names.
#[pyfunction]
#[pyo3(signature = (root, seed = 0, videos = 25, resolution = 64))]
fn generate_benchmark(py: Python<'_>, root: PathBuf, seed: u64, videos: usize, resolution: usize) -> PyResult<(Vec<String>, Vec<String>)> {
    py.detach(|| {
        let profile = DifficultyProfile {
            resolution,
            ..DifficultyProfile::default()
        };
        let split = synth::make_benchmark(seed, videos, &profile)?;
        let tree = DavisTree::new(root);
        let mut names = Vec::new();
        for (which, scripts) in [("train", &split.train), ("val", &split.val)] {
            let rendered = synth::generate_all(scripts)?;
            for v in &rendered {
                tree.write_video(v)?;
            }
            let n: Vec<String> = rendered.iter().map(|v| v.name.clone()).collect();
            tree.write_split(which, &n)?;
            names.push(n);
        }
        let val = names.pop().unwrap_or_default();
        let train = names.pop().unwrap_or_default();
        Ok((train, val))
    })
    .map_err(to_py)
}

/// Finite-difference gradient check; returns summary numbers.
#[pyfunction]
#[pyo3(signature = (config, seed = 0, samples = 200, step = 1e-4))]
fn gradcheck(py: Python<'_>, config: &PyConfig, seed: u64, samples: usize, step: f64) -> PyResult<BTreeMap<String, f64>> {
    let opts = GradcheckOptions {
        samples,
        step,
        ..GradcheckOptions::default()
    };
    let r = py.detach(|| engine::gradcheck(&config.inner, seed, opts)).map_err(to_py)?;
    let mut out = BTreeMap::from([
        ("max_rel_error".to_string(), r.max_rel_error),
        ("samples".to_string(), r.samples.len() as f64),
        ("rte_grad_norm".to_string(), r.rte_grad_norm),
        ("loss".to_string(), r.loss),
    ]);
    for (g, n) in r.per_group {
        out.insert(format!("group.{g}"), n as f64);
    }
    Ok(out)
}

/// Probability map of a constant prediction; handy for loss experiments.
#[pyfunction]
fn constant_masks(frames: usize, height: usize, width: usize, value: f64) -> PyResult<Vec<Vec<f64>>> {
    let t = MaskSequence::new(Tensor::full(&[frames, height, width], value), 1).map_err(to_py)?;
    Ok((0..frames).map(|i| t.frame(i).to_vec()).collect())
}

#[pymodule]
fn pyclipvos(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyVideo>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(compute_weights, m)?)?;
    m.add_function(wrap_pyfunction!(compute_delta, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(region_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(contour_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(j_tr, m)?)?;
    m.add_function(wrap_pyfunction!(clip_windows, m)?)?;
    m.add_function(wrap_pyfunction!(generate_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(constant_masks, m)?)?;
    Ok(())
}
