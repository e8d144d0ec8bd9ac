//! Python bindings. Images and keypoints cross the boundary as plain lists:
//! an image is a list of rows of floats in [0, 1], a keypoint is `(x, y)` or
//! `(x, y, visible)`.

use gmscenet::checkpoint::restore;
use gmscenet::config::{Config, EvalConfig};
use gmscenet::data::gen_synthetic_sample;
use gmscenet::directionmax::Direction;
use gmscenet::eval::{part_names, predict};
use gmscenet::gradsuite::{gradient_suite, worst};
use gmscenet::heatmap::{Keypoint, KeypointSet};
use gmscenet::metrics::{oks as oks_score, pck as pck_scores, OksConfig};
use gmscenet::model::Model;
use gmscenet::{Error, Shape, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use std::path::Path;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Rows of equal length into a `(1, 1, h, w)` tensor.
pub fn image_from_rows(rows: &[Vec<f64>]) -> Result<Tensor, Error> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(Error::InvalidArgument(
            "image must be a non-empty list of equal-length rows".into(),
        ));
    }
    Tensor::from_vec(Shape::new(1, 1, h, w), rows.concat())
}

pub fn rows_from_plane(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape().w;
    t.plane(0, 0).chunks(w).map(<[f64]>::to_vec).collect()
}

pub fn parse_direction(name: &str) -> Result<Direction, Error> {
    Direction::ALL
        .into_iter()
        .find(|d| d.name() == name)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown direction `{name}`; expected top, left, bottom or right"
            ))
        })
}

pub fn keypoint_set(points: &[(f64, f64, bool)], w: usize, h: usize) -> KeypointSet {
    KeypointSet::new(
        points
            .iter()
            .map(|&(x, y, v)| Keypoint::new(x, y, v))
            .collect(),
        w,
        h,
    )
}

type Rows = Vec<Vec<f64>>;
type LabeledPoints = Vec<(f64, f64, bool)>;

/// A synthetic sample: `(image_rows, [(x, y, visible), ...])`.
#[pyfunction]
#[pyo3(signature = (seed, width = 64, height = 64))]
fn synthetic_sample(seed: u64, width: usize, height: usize) -> PyResult<(Rows, LabeledPoints)> {
    let s = gen_synthetic_sample(seed, width, height).map_err(py_err)?;
    let kps = s
        .keypoints
        .parts
        .iter()
        .map(|p| (p.x, p.y, p.visible))
        .collect();
    Ok((rows_from_plane(&s.image), kps))
}

/// Directional running max over one 2-D plane.
#[pyfunction]
fn directionmax(plane: Vec<Vec<f64>>, direction: &str) -> PyResult<Vec<Vec<f64>>> {
    let dir = parse_direction(direction).map_err(py_err)?;
    let x = image_from_rows(&plane).map_err(py_err)?;
    Ok(rows_from_plane(&gmscenet::directionmax::directionmax(
        &x, dir,
    )))
}

/// Object keypoint similarity of one prediction against one annotation.
#[pyfunction]
#[pyo3(signature = (pred, gt, width, height, k_factor = 0.05))]
fn oks(
    pred: Vec<(f64, f64)>,
    gt: Vec<(f64, f64, bool)>,
    width: usize,
    height: usize,
    k_factor: f64,
) -> PyResult<f64> {
    if pred.len() != gt.len() {
        return Err(PyValueError::new_err(
            "pred and gt must have the same number of keypoints",
        ));
    }
    let pred: Vec<_> = pred.iter().map(|&(x, y)| (x, y, true)).collect();
    let cfg = OksConfig::for_image(width, height, gt.len(), k_factor, 0.0);
    oks_score(
        &keypoint_set(&pred, width, height),
        &keypoint_set(&gt, width, height),
        &cfg,
    )
    .map_err(py_err)
}

/// Mean PCK over a list of images, normalized by each image's size.
#[pyfunction]
#[pyo3(signature = (preds, gts, width, height, threshold = 0.2))]
fn pck(
    preds: Vec<Vec<(f64, f64)>>,
    gts: Vec<Vec<(f64, f64, bool)>>,
    width: usize,
    height: usize,
    threshold: f64,
) -> PyResult<f64> {
    let preds: Vec<KeypointSet> = preds
        .iter()
        .map(|p| {
            keypoint_set(
                &p.iter().map(|&(x, y)| (x, y, true)).collect::<Vec<_>>(),
                width,
                height,
            )
        })
        .collect();
    let gts: Vec<KeypointSet> = gts.iter().map(|g| keypoint_set(g, width, height)).collect();
    Ok(pck_scores(&preds, &gts, threshold, None)
        .map_err(py_err)?
        .mean)
}

/// Worst relative error of the gradient suite for one seed.
#[pyfunction]
fn gradcheck(seed: u64) -> PyResult<f64> {
    Ok(worst(&gradient_suite(seed).map_err(py_err)?).max_rel_error)
}

#[pyclass(name = "Model")]
struct PyModel {
    model: Model,
    eval: EvalConfig,
}

#[pymethods]
impl PyModel {
    /// An untrained model with the default configuration and `seed`.
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Self> {
        let mut cfg = Config::default();
        cfg.model.seed = seed;
        Ok(PyModel {
            model: Model::new(cfg.model).map_err(py_err)?,
            eval: cfg.eval,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (cfg, model, _) = restore(Path::new(path)).map_err(py_err)?;
        Ok(PyModel {
            model,
            eval: cfg.eval,
        })
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        (self.model.config.input_w, self.model.config.input_h)
    }

    #[getter]
    fn parts(&self) -> Vec<String> {
        part_names(self.model.config.keypoints)
    }

    /// Keypoints `[(x, y), ...]` for one image, aggregated across heads
    /// unless `aggregate` is false.
    #[pyo3(signature = (image, aggregate = true))]
    fn predict(&mut self, image: Vec<Vec<f64>>, aggregate: bool) -> PyResult<Vec<(f64, f64)>> {
        let x = image_from_rows(&image).map_err(py_err)?;
        let pred = predict(&mut self.model, &x, &self.eval)
            .map_err(py_err)?
            .remove(0);
        let chosen = if aggregate {
            &pred.aggregated
        } else {
            &pred.reference
        };
        Ok(chosen.parts.iter().map(|p| (p.x, p.y)).collect())
    }
}

#[pymodule]
fn gmscenet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synthetic_sample, m)?)?;
    m.add_function(wrap_pyfunction!(directionmax, m)?)?;
    m.add_function(wrap_pyfunction!(oks, m)?)?;
    m.add_function(wrap_pyfunction!(pck, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
