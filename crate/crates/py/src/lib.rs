//! Python bindings for `htnet`.
//!
//! Segments are `(start, end)` tuples, detections are
//! `(start, end, class_id, score)` and ground truth is
//! `(start, end, class_id)`. Feature matrices are lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use htnet::bfs;
use htnet::data::{self, load_checkpoint};
use htnet::evaluation;
use htnet::heads::Annotation;
use htnet::inference;
use htnet::numerics::Tensor;
use htnet::config::apply_overrides;
use htnet::{training, transformer, Config, Detection, Htnet, Segment};

type Det = (f64, f64, usize, f64);
type Gt = (f64, f64, usize);

fn py_err(e: htnet::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_det(d: Det) -> Detection {
    Detection {
        segment: Segment::new(d.0, d.1),
        class_id: d.2,
        score: d.3,
    }
}

fn from_det(d: &Detection) -> Det {
    (d.segment.start, d.segment.end, d.class_id, d.score)
}

fn to_gt(g: Gt) -> Annotation {
    Annotation {
        segment: Segment::new(g.0, g.1),
        class_id: g.2,
    }
}

fn to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Temporal intersection over union of two `(start, end)` segments.
#[pyfunction]
fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    htnet::segment::tiou(&Segment::new(a.0, a.1), &Segment::new(b.0, b.1))
}

/// Gaussian Soft-NMS, per class.
#[pyfunction]
#[pyo3(signature = (detections, sigma=0.5, final_threshold=1e-4))]
fn soft_nms(detections: Vec<Det>, sigma: f64, final_threshold: f64) -> PyResult<Vec<Det>> {
    let dets: Vec<_> = detections.into_iter().map(to_det).collect();
    let out = inference::soft_nms(&dets, sigma, final_threshold).map_err(py_err)?;
    Ok(out.iter().map(from_det).collect())
}

/// AP of one class at one tIoU threshold; `None` without ground truth.
#[pyfunction]
fn average_precision(detections: Vec<Vec<Det>>, ground_truth: Vec<Vec<Gt>>, class_id: usize, threshold: f64) -> Option<f64> {
    let dets: Vec<Vec<_>> = detections.into_iter().map(|v| v.into_iter().map(to_det).collect()).collect();
    let gts: Vec<Vec<_>> = ground_truth.into_iter().map(|v| v.into_iter().map(to_gt).collect()).collect();
    evaluation::average_precision(&dets, &gts, class_id, threshold)
}

/// Returns `(map_per_threshold, average_map)`.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, num_classes, thresholds=None))]
fn map_grid(
    detections: Vec<Vec<Det>>,
    ground_truth: Vec<Vec<Gt>>,
    num_classes: usize,
    thresholds: Option<Vec<f64>>,
) -> PyResult<(Vec<f64>, f64)> {
    let dets: Vec<Vec<_>> = detections.into_iter().map(|v| v.into_iter().map(to_det).collect()).collect();
    let gts: Vec<Vec<_>> = ground_truth.into_iter().map(|v| v.into_iter().map(to_gt).collect()).collect();
    let thr = thresholds.unwrap_or_else(|| evaluation::THUMOS_THRESHOLDS.to_vec());
    let report = evaluation::map_grid(&dets, &gts, num_classes, &thr).map_err(py_err)?;
    Ok((report.map, report.average_map))
}

#[pyfunction]
fn inverse_transform_sample(pdf: Vec<f64>, u: Vec<f64>) -> PyResult<Vec<usize>> {
    transformer::inverse_transform_sample(&pdf, &u).map_err(py_err)
}

/// `((left_lo, left_hi), (right_lo, right_hi))`, half-open.
#[pyfunction]
fn background_ranges(start: f64, end: f64, length: usize, delta: f64) -> PyResult<((usize, usize), (usize, usize))> {
    let r = bfs::background_ranges(start, end, length, delta).map_err(py_err)?;
    Ok((r.left, r.right))
}

#[pyfunction]
fn cosine_lr(step: usize, horizon: usize, base: f64) -> f64 {
    training::cosine_lr(step, horizon, base)
}

#[pyfunction]
fn load_features(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&data::load_features(&path).map_err(py_err)?))
}

#[pyfunction]
fn save_features(path: PathBuf, rows: Vec<Vec<f64>>) -> PyResult<()> {
    data::save_features(&path, &to_tensor(rows)?).map_err(py_err)
}

/// Writes a synthetic dataset to `out_dir`; returns the number of videos.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None, overrides=Vec::new()))]
fn synth(out_dir: PathBuf, config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<usize> {
    let cfg = htnet::load_config(config.as_deref(), &overrides).map_err(py_err)?;
    let (manifest, _) = data::synth_generate(&cfg.synth, &out_dir).map_err(py_err)?;
    Ok(manifest.videos.len())
}

/// Runs the built-in checks; returns `(name, passed, detail)` triples.
#[pyfunction]
fn selftest() -> Vec<(String, bool, String)> {
    htnet::selftest::run_all()
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect()
}

#[pyclass(name = "Model")]
struct PyModel {
    model: Htnet,
    config: Config,
}

#[pymethods]
impl PyModel {
    /// Fresh model from the default config plus `KEY=VALUE` overrides.
    #[new]
    #[pyo3(signature = (input_dim, num_classes, overrides=Vec::new(), seed=0))]
    fn new(input_dim: usize, num_classes: usize, overrides: Vec<String>, seed: u64) -> PyResult<Self> {
        let config = htnet::load_config(None, &overrides).map_err(py_err)?;
        let model = Htnet::new(&config.model, input_dim, num_classes, seed).map_err(py_err)?;
        Ok(Self { model, config })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&path).map_err(py_err)?;
        let model = Htnet::from_checkpoint(&ckpt).map_err(py_err)?;
        Ok(Self {
            model,
            config: ckpt.config,
        })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.params.num_scalars()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.model.num_classes
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.model.input_dim
    }

    /// Detections in seconds after Soft-NMS. `overrides` may change
    /// `inference.*` settings.
    #[pyo3(signature = (features, seconds_per_snippet=1.0, overrides=Vec::new()))]
    fn detect(&self, features: Vec<Vec<f64>>, seconds_per_snippet: f64, overrides: Vec<String>) -> PyResult<Vec<Det>> {
        let cfg = apply_overrides(&self.config, &overrides).map_err(py_err)?;
        if cfg.model != self.config.model {
            return Err(PyValueError::new_err("model settings cannot be changed after construction"));
        }
        let dets = self
            .model
            .detect(&to_tensor(features)?, &cfg.inference, seconds_per_snippet)
            .map_err(py_err)?;
        Ok(dets.iter().map(from_det).collect())
    }

    /// Loss terms on one clip with annotations in snippet units.
    fn loss(&self, features: Vec<Vec<f64>>, annotations: Vec<Gt>) -> PyResult<Vec<(String, f64)>> {
        let anns: Vec<_> = annotations.into_iter().map(to_gt).collect();
        let b = self.model.eval_loss(&to_tensor(features)?, &anns).map_err(py_err)?;
        Ok(vec![
            ("coarse".into(), b.coarse),
            ("refine".into(), b.refine),
            ("cls".into(), b.cls),
            ("start".into(), b.start),
            ("end".into(), b.end),
            ("total".into(), b.total),
        ])
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_dim={}, num_classes={}, parameters={})",
            self.model.input_dim,
            self.model.num_classes,
            self.model.params.num_scalars()
        )
    }
}

#[pymodule]
fn htnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tiou, m)?)?;
    m.add_function(wrap_pyfunction!(soft_nms, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(map_grid, m)?)?;
    m.add_function(wrap_pyfunction!(inverse_transform_sample, m)?)?;
    m.add_function(wrap_pyfunction!(background_ranges, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(load_features, m)?)?;
    m.add_function(wrap_pyfunction!(save_features, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
