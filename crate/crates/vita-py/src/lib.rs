//! Python bindings over the core library: datasets, the classifier and
//! translator, corruption and attack primitives, and the experiment
//! pipeline. Images cross the boundary as flat row-major f32 lists plus
//! explicit dimensions.

use std::path::PathBuf;

use pyo3::exceptions::{PyFloatingPointError, PyIOError, PyValueError};
use pyo3::prelude::*;

use vita_core::attacks::{run_attack, AttackMethod, AttackSpec};
use vita_core::augment::{augment_batch, BudgetConfig};
use vita_core::config::parse_config;
use vita_core::corruptions::severity::SeverityTable;
use vita_core::corruptions::{apply_corruption, CorruptionKind};
use vita_core::data::{generate_synthetic, SyntheticSpec};
use vita_core::error::VitaError;
use vita_core::experiment;
use vita_core::metrics;
use vita_core::networks::{Classifier as CoreClassifier, UNet};
use vita_core::rng::rng_from_seed;
use vita_core::tensor::Tensor;
use vita_core::training::{self, TrainConfig};

fn to_py(e: VitaError) -> PyErr {
    match e {
        VitaError::Config(_) | VitaError::Shape(_) | VitaError::Data(_) => {
            PyValueError::new_err(e.to_string())
        }
        VitaError::Io(_) => PyIOError::new_err(e.to_string()),
        VitaError::Numeric(_) => PyFloatingPointError::new_err(e.to_string()),
    }
}

/// A labeled image set in CHW layout, values in [0, 1].
#[pyclass(unsendable)]
struct Dataset {
    inner: vita_core::data::Dataset,
}

#[pymethods]
impl Dataset {
    /// Procedurally generated separable classes.
    #[staticmethod]
    fn synthetic(classes: usize, per_class: usize, extent: usize, noise: f32, seed: u64) -> PyResult<Self> {
        let spec = SyntheticSpec { num_classes: classes, per_class, extent, noise };
        Ok(Dataset { inner: generate_synthetic(&spec, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset { inner: vita_core::data::Dataset::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    /// (channels, height, width) of each image.
    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.inner.images.shape();
        (s[1], s[2], s[3])
    }

    fn label(&self, i: usize) -> PyResult<usize> {
        self.inner
            .labels
            .get(i)
            .copied()
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    /// Flat CHW pixels of image `i`.
    fn image(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        let stride: usize = self.inner.images.shape()[1..].iter().product();
        Ok(self.inner.images.data()[i * stride..(i + 1) * stride].to_vec())
    }

    /// Weakly augmented copy of the whole set under the default L2 budget.
    fn augmented(&self, seed: u64) -> PyResult<Dataset> {
        let images =
            augment_batch(&self.inner.images, &BudgetConfig::default(), seed).map_err(to_py)?;
        Ok(Dataset {
            inner: vita_core::data::Dataset {
                images,
                labels: self.inner.labels.clone(),
                num_classes: self.inner.num_classes,
            },
        })
    }
}

/// The desk-scale convolutional classifier.
#[pyclass(unsendable)]
struct Classifier {
    inner: CoreClassifier,
}

#[pymethods]
impl Classifier {
    #[new]
    fn new(width: usize, classes: usize, seed: u64) -> Self {
        Classifier { inner: CoreClassifier::new(width, classes, &mut rng_from_seed(seed)) }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Classifier { inner: CoreClassifier::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, "").map_err(to_py)
    }

    /// Plain SGD training on clean data; returns per-epoch mean losses.
    fn train_erm(
        &mut self,
        data: &Dataset,
        epochs: usize,
        batch_size: usize,
        lr: f32,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let cfg = TrainConfig {
            epochs,
            batch_size,
            lr,
            seed,
            identity_augment: true,
            beta: 0.0,
            ..TrainConfig::default()
        };
        training::erm_train(&mut self.inner, &data.inner, &cfg).map_err(to_py)
    }

    fn predict(&self, data: &Dataset) -> PyResult<Vec<usize>> {
        self.inner.predict(&data.inner.images).map_err(to_py)
    }

    fn error_rate(&self, data: &Dataset) -> PyResult<f64> {
        metrics::error_rate(&self.inner, &data.inner).map_err(to_py)
    }

    /// Error rate under one attack from the menu (`attack_names()`).
    fn attacked_error(&self, data: &Dataset, method: &str, seed: u64) -> PyResult<f64> {
        let method = AttackMethod::from_name(method)
            .ok_or_else(|| PyValueError::new_err(format!("unknown attack '{method}'")))?;
        let spec = AttackSpec::defaults(method);
        let adv =
            run_attack(&self.inner, &data.inner.images, &data.inner.labels, &spec, seed)
                .map_err(to_py)?;
        let preds = self.inner.predict(&adv).map_err(to_py)?;
        metrics::error_from_predictions(&preds, &data.inner.labels).map_err(to_py)
    }
}

/// The U-Net translator.
#[pyclass(unsendable)]
struct Translator {
    inner: UNet,
}

#[pymethods]
impl Translator {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Translator { inner: UNet::load(&path).map_err(to_py)? })
    }

    /// Translate a batch given as flat NCHW pixels.
    fn forward(
        &self,
        pixels: Vec<f32>,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> PyResult<Vec<f32>> {
        if pixels.len() != n * c * h * w {
            return Err(PyValueError::new_err(format!(
                "expected {} values for a {n}x{c}x{h}x{w} batch, got {}",
                n * c * h * w,
                pixels.len()
            )));
        }
        let x = Tensor::from_vec(vec![n, c, h, w], pixels);
        let out = self.inner.forward(&x, None).map_err(to_py)?;
        Ok(out.data().to_vec())
    }

    /// Translate every image of a dataset, keeping labels.
    fn translate(&self, data: &Dataset) -> PyResult<Dataset> {
        let out = self.inner.forward(&data.inner.images, None).map_err(to_py)?;
        Ok(Dataset {
            inner: vita_core::data::Dataset {
                images: out,
                labels: data.inner.labels.clone(),
                num_classes: data.inner.num_classes,
            },
        })
    }
}

/// Names accepted by `Classifier.attacked_error`.
#[pyfunction]
fn attack_names() -> Vec<&'static str> {
    AttackMethod::ALL.iter().map(|m| m.name()).collect()
}

/// Names accepted by `corrupt_image`.
#[pyfunction]
fn corruption_names() -> Vec<&'static str> {
    CorruptionKind::ALL.iter().map(|k| k.name()).collect()
}

/// Corrupt one flat CHW image at a severity in 1..=5 using the default
/// severity table.
#[pyfunction]
fn corrupt_image(
    pixels: Vec<f32>,
    h: usize,
    w: usize,
    kind: &str,
    severity: usize,
    seed: u64,
) -> PyResult<Vec<f32>> {
    let kind = CorruptionKind::from_name(kind)
        .ok_or_else(|| PyValueError::new_err(format!("unknown corruption '{kind}'")))?;
    if pixels.len() != 3 * h * w {
        return Err(PyValueError::new_err(format!(
            "expected {} values for a 3x{h}x{w} image, got {}",
            3 * h * w,
            pixels.len()
        )));
    }
    let table = SeverityTable::default();
    let params = table.params(kind, severity).map_err(to_py)?;
    Ok(apply_corruption(&pixels, h, w, kind, params, seed))
}

/// Run the experiment pipeline from a JSON config file. Returns
/// (stage name, "ran" | "skipped") pairs in execution order.
#[pyfunction]
fn run_experiment(config_path: PathBuf) -> PyResult<Vec<(String, String)>> {
    let cfg = parse_config(&config_path).map_err(to_py)?;
    let summary = experiment::run_experiment(&cfg).map_err(to_py)?;
    Ok(summary
        .outcomes
        .into_iter()
        .map(|(stage, outcome)| {
            let word = match outcome {
                experiment::StageOutcome::Ran => "ran",
                experiment::StageOutcome::Skipped => "skipped",
            };
            (stage.name().to_string(), word.to_string())
        })
        .collect())
}

/// Evaluate the robust checkpoint of a finished experiment against the
/// attack menu; returns the report as a JSON string.
#[pyfunction]
fn attack_eval(config_path: PathBuf) -> PyResult<String> {
    let cfg = parse_config(&config_path).map_err(to_py)?;
    let report = experiment::run_attack_eval(&cfg).map_err(to_py)?;
    serde_json::to_string_pretty(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn vita_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Classifier>()?;
    m.add_class::<Translator>()?;
    m.add_function(wrap_pyfunction!(attack_names, m)?)?;
    m.add_function(wrap_pyfunction!(corruption_names, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt_image, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(attack_eval, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
