//! Python bindings: simulator, dataset handling, tracker training and
//! evaluation, and pivot calibration.
//!
//! Positions cross the boundary as `(x, y, z)` tuples in cm; frames are
//! `Frame` objects holding `[1, S, S]` counts.

use std::path::PathBuf;

use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use needle_core::calibrate::{self, Pose};
use needle_core::harness::{self, ErrorStat, Metrics, TipPredictor, TipTracker, TrainConfig};
use needle_core::preprocess::{self, AxisRange, TipPosition};
use needle_core::simulate;
use needle_core::{io, seeding, Error, Network, NetworkConfig, NormalizationConfig, OpticsConfig, Tensor};

type Xyz = (f64, f64, f64);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tip((x, y, z): Xyz) -> TipPosition {
    TipPosition::new(x, y, z)
}

fn xyz(p: TipPosition) -> Xyz {
    (p.x, p.y, p.z)
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Camera and scattering parameters. Defaults describe the 64 px desk-scale
/// scene.
#[pyclass(module = "needletrack", skip_from_py_object)]
#[derive(Clone)]
struct Optics {
    #[pyo3(get, set)]
    camera_height: f64,
    #[pyo3(get, set)]
    image_side: usize,
    #[pyo3(get, set)]
    field_of_view: f64,
    #[pyo3(get, set)]
    source_power: f64,
    #[pyo3(get, set)]
    background_level: f64,
    #[pyo3(get, set)]
    gaussian_noise_sigma: f64,
    #[pyo3(get, set)]
    poisson_noise: bool,
    #[pyo3(get, set)]
    max_count: f64,
}

impl Optics {
    fn core(&self) -> OpticsConfig {
        OpticsConfig {
            camera_height: self.camera_height,
            image_side: self.image_side,
            field_of_view: self.field_of_view,
            source_power: self.source_power,
            background_level: self.background_level,
            gaussian_noise_sigma: self.gaussian_noise_sigma,
            poisson_noise: self.poisson_noise,
            max_count: self.max_count,
        }
    }

    fn from_core(c: &OpticsConfig) -> Self {
        Self {
            camera_height: c.camera_height,
            image_side: c.image_side,
            field_of_view: c.field_of_view,
            source_power: c.source_power,
            background_level: c.background_level,
            gaussian_noise_sigma: c.gaussian_noise_sigma,
            poisson_noise: c.poisson_noise,
            max_count: c.max_count,
        }
    }
}

#[pymethods]
impl Optics {
    #[new]
    #[pyo3(signature = (
        image_side=None, camera_height=None, field_of_view=None, source_power=None,
        background_level=None, gaussian_noise_sigma=None, poisson_noise=None, max_count=None,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        image_side: Option<usize>,
        camera_height: Option<f64>,
        field_of_view: Option<f64>,
        source_power: Option<f64>,
        background_level: Option<f64>,
        gaussian_noise_sigma: Option<f64>,
        poisson_noise: Option<bool>,
        max_count: Option<f64>,
    ) -> PyResult<Self> {
        let d = OpticsConfig::desk_scale();
        let cfg = OpticsConfig {
            camera_height: camera_height.unwrap_or(d.camera_height),
            image_side: image_side.unwrap_or(d.image_side),
            field_of_view: field_of_view.unwrap_or(d.field_of_view),
            source_power: source_power.unwrap_or(d.source_power),
            background_level: background_level.unwrap_or(d.background_level),
            gaussian_noise_sigma: gaussian_noise_sigma.unwrap_or(d.gaussian_noise_sigma),
            poisson_noise: poisson_noise.unwrap_or(d.poisson_noise),
            max_count: max_count.unwrap_or(d.max_count),
        };
        cfg.validate().map_err(to_py)?;
        Ok(Self::from_core(&cfg))
    }

    /// Same geometry with background and all noise switched off.
    fn noiseless(&self) -> Self {
        Self::from_core(&self.core().noiseless())
    }

    fn pixel_size(&self) -> f64 {
        self.core().pixel_size()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.core()).replacen("OpticsConfig", "Optics", 1)
    }
}

/// Per-axis position ranges (cm) mapped onto [-1, 1].
#[pyclass(module = "needletrack", skip_from_py_object)]
#[derive(Clone)]
struct Normalization {
    #[pyo3(get, set)]
    x: (f64, f64),
    #[pyo3(get, set)]
    y: (f64, f64),
    #[pyo3(get, set)]
    z: (f64, f64),
}

impl Normalization {
    fn core(&self) -> PyResult<NormalizationConfig> {
        let r = |(min, max): (f64, f64)| AxisRange::new(min, max);
        let cfg = NormalizationConfig {
            x: r(self.x),
            y: r(self.y),
            z: r(self.z),
        };
        cfg.validate().map_err(to_py)?;
        Ok(cfg)
    }

    fn from_core(c: &NormalizationConfig) -> Self {
        Self {
            x: (c.x.min, c.x.max),
            y: (c.y.min, c.y.max),
            z: (c.z.min, c.z.max),
        }
    }
}

#[pymethods]
impl Normalization {
    #[new]
    #[pyo3(signature = (x=None, y=None, z=None))]
    fn new(x: Option<(f64, f64)>, y: Option<(f64, f64)>, z: Option<(f64, f64)>) -> PyResult<Self> {
        let d = Self::from_core(&NormalizationConfig::default());
        let n = Self {
            x: x.unwrap_or(d.x),
            y: y.unwrap_or(d.y),
            z: z.unwrap_or(d.z),
        };
        n.core()?;
        Ok(n)
    }

    fn normalize(&self, position: Xyz) -> PyResult<Xyz> {
        let v = preprocess::normalize_position(&tip(position), &self.core()?).value;
        Ok((v[0], v[1], v[2]))
    }

    fn denormalize(&self, value: Xyz) -> PyResult<Xyz> {
        let p = preprocess::denormalize_position([value.0, value.1, value.2], &self.core()?);
        Ok(xyz(p))
    }

    fn midpoint(&self) -> PyResult<Xyz> {
        Ok(xyz(self.core()?.midpoint()))
    }

    fn __repr__(&self) -> String {
        format!("Normalization(x={:?}, y={:?}, z={:?})", self.x, self.y, self.z)
    }
}

fn norm_or_default(n: Option<PyRef<'_, Normalization>>) -> PyResult<NormalizationConfig> {
    n.map_or_else(|| Ok(NormalizationConfig::default()), |n| n.core())
}

// ---------------------------------------------------------------------------
// Frames and datasets
// ---------------------------------------------------------------------------

/// One camera frame of integer counts, shape `[channels, side, side]`.
#[pyclass(module = "needletrack", skip_from_py_object)]
#[derive(Clone)]
struct Frame {
    inner: Tensor<f32>,
}

#[pymethods]
impl Frame {
    /// Builds a single-channel frame from a list of rows.
    #[staticmethod]
    fn from_rows(rows: Vec<Vec<f32>>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("rows must all have the same length"));
        }
        let inner = Tensor::new(vec![1, h, w], rows.concat()).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Reads a PNG or a raw `.ntwt` frame.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let inner = if path.extension().is_some_and(|e| e == "ntwt") {
            io::read_raw_image(&path)
        } else {
            io::read_png(&path)
        }
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[pyo3(signature = (path, max_count=255.0))]
    fn save_png(&self, path: PathBuf, max_count: f64) -> PyResult<()> {
        io::write_png(&path, &self.inner, max_count).map_err(to_py)
    }

    fn save_raw(&self, path: PathBuf) -> PyResult<()> {
        io::write_raw_image(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major pixel values.
    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    /// Nested `[channel][row][col]` lists.
    fn tolist(&self) -> Vec<Vec<Vec<f32>>> {
        let s = self.inner.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        self.inner
            .data()
            .chunks(h * w)
            .map(|plane| plane.chunks(w).map(<[f32]>::to_vec).collect())
            .collect()
    }

    fn max(&self) -> f32 {
        self.inner.data().iter().copied().fold(f32::MIN, f32::max)
    }

    fn __repr__(&self) -> String {
        format!("Frame(shape={:?})", self.inner.shape())
    }
}

/// Renders one noisy frame of a tip at `position` (cm).
#[pyfunction]
#[pyo3(signature = (position, optics, seed=0))]
fn render(position: Xyz, optics: PyRef<'_, Optics>, seed: u64) -> PyResult<Frame> {
    let mut rng = seeding::stream(seed, "render", 0);
    let inner = simulate::render_scatter_image(&tip(position), &optics.core(), &mut rng)
        .map_err(to_py)?;
    Ok(Frame { inner })
}

/// Labelled frames plus the optics and ranges they were generated under.
#[pyclass(module = "needletrack", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: needle_core::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_dataset(&dir).map_err(to_py)?,
        })
    }

    #[pyo3(signature = (dir, raw_sidecar=false))]
    fn write(&self, dir: PathBuf, raw_sidecar: bool) -> PyResult<()> {
        io::write_dataset(&dir, &self.inner, raw_sidecar).map_err(to_py)?;
        Ok(())
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    fn frame(&self, index: usize) -> PyResult<Frame> {
        let rec = self.record(index)?;
        Ok(Frame {
            inner: rec.image.clone(),
        })
    }

    fn position(&self, index: usize) -> PyResult<Xyz> {
        Ok(xyz(self.record(index)?.ground_truth))
    }

    fn positions(&self) -> Vec<Xyz> {
        self.inner.records.iter().map(|r| xyz(r.ground_truth)).collect()
    }

    #[getter]
    fn optics(&self) -> Optics {
        Optics::from_core(&self.inner.optics)
    }

    #[getter]
    fn normalization(&self) -> Normalization {
        Normalization::from_core(&self.inner.normalization)
    }

    /// Seeded shuffle split into `(train, test)`.
    #[pyo3(signature = (ratio=0.8, seed=0))]
    fn split(&self, ratio: f64, seed: u64) -> PyResult<(Dataset, Dataset)> {
        let (a, b) = harness::split_dataset(&self.inner.records, ratio, seed).map_err(to_py)?;
        let part = |records| Dataset {
            inner: needle_core::Dataset {
                records,
                ..self.inner.clone()
            },
        };
        Ok((part(a), part(b)))
    }

    fn __repr__(&self) -> String {
        let side = self.inner.optics.image_side;
        format!("Dataset(n={}, side={side})", self.inner.records.len())
    }
}

impl Dataset {
    fn record(&self, index: usize) -> PyResult<&simulate::SampleRecord> {
        self.inner
            .records
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("record {index} out of range")))
    }
}

/// `n` frames with tips drawn uniformly from `normalization`'s ranges.
#[pyfunction]
#[pyo3(signature = (n, optics, seed=0, normalization=None))]
fn generate_dataset(
    py: Python<'_>,
    n: usize,
    optics: PyRef<'_, Optics>,
    seed: u64,
    normalization: Option<PyRef<'_, Normalization>>,
) -> PyResult<Dataset> {
    let optics = optics.core();
    let norm = norm_or_default(normalization)?;
    let records = py
        .detach(|| simulate::generate_dataset(n, &optics, &norm, seed))
        .map_err(to_py)?;
    Ok(Dataset {
        inner: needle_core::Dataset {
            optics,
            normalization: norm,
            records,
        },
    })
}

// ---------------------------------------------------------------------------
// Tracker
// ---------------------------------------------------------------------------

fn stat_tuple(s: ErrorStat) -> (f64, f64) {
    (s.mean_mm, s.std_mm)
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("x", stat_tuple(m.per_axis.x))?;
    d.set_item("y", stat_tuple(m.per_axis.y))?;
    d.set_item("z", stat_tuple(m.per_axis.z))?;
    d.set_item("l2", stat_tuple(m.l2))?;
    d.set_item("n_test", m.n_test)?;
    d.set_item("table", m.table())?;
    Ok(d)
}

/// A trained CNN together with the preprocessing it expects.
#[pyclass(module = "needletrack")]
struct Tracker {
    inner: TipTracker,
}

#[pymethods]
impl Tracker {
    /// Trains a fresh network on every record of `dataset`.
    ///
    /// Returns `(tracker, history)` where `history` holds the mean training
    /// MSE of each epoch.
    #[staticmethod]
    #[pyo3(signature = (
        dataset, epochs=200, batch_size=16, lr=1e-3, weight_decay=1e-2,
        dropout_rate=0.5, hidden=512, seed=0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        dataset: PyRef<'_, Dataset>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        weight_decay: f64,
        dropout_rate: f64,
        hidden: usize,
        seed: u64,
    ) -> PyResult<(Tracker, Vec<f64>)> {
        let ds = dataset.inner.clone();
        let mut cfg = TrainConfig {
            epochs,
            batch_size,
            seed,
            ..TrainConfig::default()
        };
        cfg.optimizer.lr = lr;
        cfg.optimizer.weight_decay = weight_decay;
        let net = NetworkConfig {
            input_side: ds.optics.image_side,
            dropout_rate,
            hidden,
            ..NetworkConfig::default()
        };
        let out = py
            .detach(|| harness::train(&ds.records, &ds.normalization, ds.optics.max_count, &cfg, &net))
            .map_err(to_py)?;
        Ok((Tracker { inner: out.tracker }, out.history))
    }

    #[staticmethod]
    fn load(weights: PathBuf, model: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TipTracker::load(&weights, &model).map_err(to_py)?,
        })
    }

    #[pyo3(signature = (weights, model, config_digest=""))]
    fn save(&self, weights: PathBuf, model: PathBuf, config_digest: &str) -> PyResult<()> {
        self.inner.save(&weights, &model, config_digest).map_err(to_py)
    }

    /// Predicted tip position (cm).
    fn predict(&self, frame: PyRef<'_, Frame>) -> PyResult<Xyz> {
        Ok(xyz(self.inner.predict(&frame.inner).map_err(to_py)?))
    }

    /// Per-axis and Euclidean errors (mm) over `dataset`.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: PyRef<'_, Dataset>) -> PyResult<Bound<'py, PyDict>> {
        let ds = &dataset.inner;
        let m = py
            .detach(|| harness::evaluate(&self.inner, &ds.records, &ds.normalization))
            .map_err(to_py)?;
        metrics_dict(py, &m)
    }

    /// Eval-mode MSE in normalized units over `dataset`.
    fn normalized_mse(&self, py: Python<'_>, dataset: PyRef<'_, Dataset>) -> PyResult<f64> {
        let records = &dataset.inner.records;
        py.detach(|| harness::normalized_mse(&self.inner, records))
            .map_err(to_py)
    }

    /// Times preprocessing plus inference on a rendered frame.
    #[pyo3(signature = (n_runs=100, warmup=5))]
    fn benchmark<'py>(&self, py: Python<'py>, n_runs: usize, warmup: usize) -> PyResult<Bound<'py, PyDict>> {
        let optics = OpticsConfig {
            image_side: self.inner.network.config().input_side,
            max_count: self.inner.max_count,
            ..OpticsConfig::desk_scale()
        };
        let r = py
            .detach(|| harness::benchmark_inference(&self.inner, &optics, n_runs, warmup))
            .map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("image_side", r.image_side)?;
        d.set_item("mean_ms", r.total.mean_ms)?;
        d.set_item("p50_ms", r.total.p50_ms)?;
        d.set_item("p95_ms", r.total.p95_ms)?;
        d.set_item("inference_mean_ms", r.inference.mean_ms)?;
        d.set_item("reference_ms", r.reference_ms)?;
        d.set_item("summary", r.summary())?;
        Ok(d)
    }

    #[getter]
    fn input_side(&self) -> usize {
        self.inner.network.config().input_side
    }

    #[getter]
    fn normalization(&self) -> Normalization {
        Normalization::from_core(&self.inner.normalization)
    }

    fn parameter_count(&self) -> usize {
        self.inner.network.params().param_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Tracker(input_side={}, parameters={})",
            self.input_side(),
            self.parameter_count()
        )
    }
}

// ---------------------------------------------------------------------------
// Free functions
// ---------------------------------------------------------------------------

/// Parameters per layer (plus `"total"`) of the network at `input_side`.
#[pyfunction]
#[pyo3(signature = (input_side=400))]
fn parameter_counts(py: Python<'_>, input_side: usize) -> PyResult<Bound<'_, PyDict>> {
    let cfg = NetworkConfig {
        input_side,
        ..NetworkConfig::default()
    };
    cfg.validate().map_err(to_py)?;
    let d = PyDict::new(py);
    let mut total = 0usize;
    for layer in ["conv1", "conv2", "fc1", "fc2"] {
        let n: usize = cfg
            .parameter_shapes()
            .iter()
            .filter(|(name, _)| name.split('.').next() == Some(layer))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        d.set_item(layer, n)?;
        total += n;
    }
    d.set_item("total", total)?;
    Ok(d)
}

/// Random-initialised tracker, e.g. for latency measurements.
#[pyfunction]
#[pyo3(signature = (input_side=64, seed=0))]
fn untrained_tracker(input_side: usize, seed: u64) -> PyResult<Tracker> {
    let cfg = NetworkConfig {
        input_side,
        ..NetworkConfig::default()
    };
    Ok(Tracker {
        inner: TipTracker {
            network: Network::build(cfg, seed).map_err(to_py)?,
            normalization: NormalizationConfig::default(),
            max_count: OpticsConfig::default().max_count,
        },
    })
}

#[pyfunction]
#[pyo3(signature = (position, normalization=None))]
fn normalize_position(position: Xyz, normalization: Option<PyRef<'_, Normalization>>) -> PyResult<Xyz> {
    let v = preprocess::normalize_position(&tip(position), &norm_or_default(normalization)?).value;
    Ok((v[0], v[1], v[2]))
}

#[pyfunction]
#[pyo3(signature = (value, normalization=None))]
fn denormalize_position(value: Xyz, normalization: Option<PyRef<'_, Normalization>>) -> PyResult<Xyz> {
    let cfg = norm_or_default(normalization)?;
    Ok(xyz(preprocess::denormalize_position([value.0, value.1, value.2], &cfg)))
}

/// Error table (mm) of predicted against true positions (cm).
#[pyfunction]
fn metrics(py: Python<'_>, predicted: Vec<Xyz>, truth: Vec<Xyz>) -> PyResult<Bound<'_, PyDict>> {
    let p: Vec<TipPosition> = predicted.into_iter().map(tip).collect();
    let t: Vec<TipPosition> = truth.into_iter().map(tip).collect();
    let m = Metrics::from_positions(&p, &t).map_err(to_py)?;
    metrics_dict(py, &m)
}

/// Pivot calibration from row-major 3x3 rotations and translations (cm).
#[pyfunction]
#[pyo3(signature = (rotations, translations, min_poses=3))]
fn pivot_calibrate(
    py: Python<'_>,
    rotations: Vec<[f64; 9]>,
    translations: Vec<[f64; 3]>,
    min_poses: usize,
) -> PyResult<Bound<'_, PyDict>> {
    if rotations.len() != translations.len() {
        return Err(PyValueError::new_err(format!(
            "{} rotations but {} translations",
            rotations.len(),
            translations.len()
        )));
    }
    let poses = rotations
        .iter()
        .zip(&translations)
        .enumerate()
        .map(|(index, (r, t))| {
            Pose::new(Matrix3::from_row_slice(r), Vector3::from(*t)).map_err(|e| match e {
                Error::InvalidPose { message, .. } => Error::InvalidPose { index, message },
                other => other,
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    let cal = calibrate::pivot_calibrate(&poses, min_poses).map_err(to_py)?;
    let d = PyDict::new(py);
    let v = |v: Vector3<f64>| (v.x, v.y, v.z);
    d.set_item("tip_offset", v(cal.tip_offset))?;
    d.set_item("pivot_point", v(cal.pivot_point))?;
    d.set_item("rms_residual", cal.rms_residual)?;
    d.set_item("condition_number", cal.condition_number)?;
    Ok(d)
}

#[pymodule]
fn needletrack(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("REFERENCE_LATENCY_MS", harness::REFERENCE_LATENCY_MS)?;
    m.add_class::<Optics>()?;
    m.add_class::<Normalization>()?;
    m.add_class::<Frame>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Tracker>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(parameter_counts, m)?)?;
    m.add_function(wrap_pyfunction!(untrained_tracker, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_position, m)?)?;
    m.add_function(wrap_pyfunction!(denormalize_position, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(pivot_calibrate, m)?)?;
    Ok(())
}
