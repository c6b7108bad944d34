//! Python bindings. Conversion only: every call forwards to `obbtext_core`
//! with the interpreter lock released.
//!
//! Detections cross the boundary as dicts
//! `{"image_id": str, "category": str, "box": [x1, y1, ..., x4, y4],
//! "confidence": float | None, "difficult": bool}`; only `category` and
//! `box` are required. Reports come back as plain dicts/lists with the same
//! field names as the CLI's JSON output.

use obbtext_core::codec::{self, CodecError};
use obbtext_core::dataset::DatasetError;
use obbtext_core::geometry::{self, GeometryError};
use obbtext_core::metrics::{self, Interpolation, MetricsError};
use obbtext_core::{CategorySet, Detection, EvalConfig, QuadBox, ResponseDoc};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

create_exception!(
    obbtext,
    ObbtextError,
    PyValueError,
    "Raised for invalid input; `args` is `(kind, message)`."
);

fn err(kind: &str, message: impl ToString) -> PyErr {
    ObbtextError::new_err((kind.to_string(), message.to_string()))
}

fn geometry_err(e: GeometryError) -> PyErr {
    err("invalid-geometry", e)
}

fn codec_err(e: CodecError) -> PyErr {
    match e {
        CodecError::InvalidArgument(_) => err("invalid-argument", e),
        CodecError::OutOfRange(_) => err("out-of-range", e),
        CodecError::Geometry(g) => geometry_err(g),
    }
}

fn metrics_err(e: MetricsError) -> PyErr {
    match e {
        MetricsError::InvalidConfig(_) => err("invalid-config", e),
        MetricsError::MissingConfidence(_) => err("missing-confidence", e),
    }
}

fn dataset_err(e: DatasetError) -> PyErr {
    err("invalid-categories", e)
}

fn quad_from(coords: [f64; 8]) -> PyResult<QuadBox> {
    QuadBox::from_flat(coords).map_err(geometry_err)
}

fn detection_from(obj: &Bound<'_, PyAny>) -> PyResult<Detection> {
    let dict = obj
        .cast::<PyDict>()
        .map_err(|_| err("invalid-argument", "detections must be dicts"))?;
    let field =
        |name: &str| -> PyResult<Option<Bound<'_, PyAny>>> { Ok(dict.get_item(name)?.filter(|v| !v.is_none())) };
    let required =
        |name: &str| field(name)?.ok_or_else(|| err("invalid-argument", format!("detection is missing {name:?}")));
    let mut det = Detection::new(
        field("image_id")?
            .map(|v| v.extract::<String>())
            .transpose()?
            .unwrap_or_default(),
        required("category")?.extract::<String>()?,
        quad_from(required("box")?.extract()?)?,
    );
    det.confidence = field("confidence")?.map(|v| v.extract()).transpose()?;
    det.difficult = field("difficult")?.map(|v| v.extract()).transpose()?.unwrap_or(false);
    Ok(det)
}

fn detections_from(objs: &Bound<'_, PyAny>) -> PyResult<Vec<Detection>> {
    objs.try_iter()?.map(|o| detection_from(&o?)).collect()
}

fn detection_to<'py>(py: Python<'py>, d: &Detection) -> PyResult<Bound<'py, PyDict>> {
    let dict = PyDict::new(py);
    dict.set_item("image_id", &d.image_id)?;
    dict.set_item("category", &d.category)?;
    dict.set_item("box", d.quad.to_flat().to_vec())?;
    dict.set_item("confidence", d.confidence)?;
    dict.set_item("difficult", d.difficult)?;
    Ok(dict)
}

fn json_to<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn report_to<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let json = serde_json::to_value(value).map_err(|e| err("internal", e))?;
    json_to(py, &json)
}

fn categories_from(names: Vec<String>) -> PyResult<CategorySet> {
    CategorySet::new(names).map_err(codec_err)
}

#[allow(clippy::too_many_arguments)]
fn config(
    iou_threshold: f64,
    interpolation: &str,
    n_random_runs: usize,
    base_seed: u64,
    constant_value: f64,
    sweep_grid: Option<Vec<f64>>,
    parallel: bool,
) -> PyResult<EvalConfig> {
    let config = EvalConfig {
        iou_threshold,
        interpolation: interpolation.parse::<Interpolation>().map_err(metrics_err)?,
        n_random_runs,
        base_seed,
        constant_value,
        sweep_grid: sweep_grid.unwrap_or_else(metrics::default_sweep_grid),
        parallel,
    };
    config.validate().map_err(metrics_err)?;
    Ok(config)
}

/// Pixel coordinate to a bin in 0..=1000.
#[pyfunction]
fn quantize(value: f64, extent: f64) -> PyResult<u16> {
    codec::quantize(value, extent).map_err(codec_err)
}

/// Bin back to a pixel coordinate.
#[pyfunction]
fn dequantize(bin: i64, extent: f64) -> PyResult<f64> {
    codec::dequantize(bin, extent).map_err(codec_err)
}

/// Canonical response text for the detections of one image.
#[pyfunction]
fn serialize(
    py: Python<'_>,
    detections: &Bound<'_, PyAny>,
    categories: Vec<String>,
    image_width: f64,
    image_height: f64,
) -> PyResult<String> {
    let dets = detections_from(detections)?;
    let cats = categories_from(categories)?;
    py.detach(|| codec::serialize(&dets, &cats, image_width, image_height))
        .map(|doc| doc.text)
        .map_err(codec_err)
}

/// Detections and warnings recovered from a response text.
#[pyfunction]
#[pyo3(signature = (text, categories, image_width, image_height, image_id = ""))]
fn parse<'py>(
    py: Python<'py>,
    text: String,
    categories: Vec<String>,
    image_width: f64,
    image_height: f64,
    image_id: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let cats = categories_from(categories)?;
    let doc = ResponseDoc::new(text, image_width, image_height);
    let report = py.detach(|| codec::parse(&doc, &cats));
    let out = PyDict::new(py);
    let dets = PyList::empty(py);
    for mut d in report.detections {
        d.image_id = image_id.to_string();
        dets.append(detection_to(py, &d)?)?;
    }
    out.set_item("detections", dets)?;
    let warnings = PyList::empty(py);
    for w in &report.warnings {
        let dict = PyDict::new(py);
        dict.set_item("kind", w.kind.as_str())?;
        dict.set_item("start", w.span.start)?;
        dict.set_item("end", w.span.end)?;
        dict.set_item("message", &w.message)?;
        warnings.append(dict)?;
    }
    out.set_item("warnings", warnings)?;
    Ok(out)
}

/// Overlap of two boxes given as 8 flat coordinates each.
#[pyfunction]
fn iou(a: [f64; 8], b: [f64; 8]) -> PyResult<f64> {
    Ok(geometry::iou(&quad_from(a)?, &quad_from(b)?))
}

/// mAP with substituted confidences: random runs plus one constant run.
#[pyfunction]
#[pyo3(signature = (
    predictions, ground_truths, *, iou_threshold = 0.5, interpolation = "voc11",
    n_random_runs = 10, base_seed = 0, constant_value = 1.0, parallel = true
))]
#[allow(clippy::too_many_arguments)]
fn map_nc<'py>(
    py: Python<'py>,
    predictions: &Bound<'_, PyAny>,
    ground_truths: &Bound<'_, PyAny>,
    iou_threshold: f64,
    interpolation: &str,
    n_random_runs: usize,
    base_seed: u64,
    constant_value: f64,
    parallel: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let (preds, gts) = (detections_from(predictions)?, detections_from(ground_truths)?);
    let cfg = config(
        iou_threshold,
        interpolation,
        n_random_runs,
        base_seed,
        constant_value,
        None,
        parallel,
    )?;
    let report = py.detach(|| metrics::map_nc(&preds, &gts, &cfg)).map_err(metrics_err)?;
    report_to(py, &report)
}

/// Per-class precision, recall and F1 plus their macro mean.
#[pyfunction]
#[pyo3(signature = (predictions, ground_truths, *, iou_threshold = 0.5))]
fn f1_scores<'py>(
    py: Python<'py>,
    predictions: &Bound<'_, PyAny>,
    ground_truths: &Bound<'_, PyAny>,
    iou_threshold: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let (preds, gts) = (detections_from(predictions)?, detections_from(ground_truths)?);
    config(iou_threshold, "voc11", 1, 0, 1.0, None, true)?;
    let report = py.detach(|| metrics::f1_scores(&preds, &gts, iou_threshold));
    report_to(py, &report)
}

/// mAP_nc and mF1 after dropping predictions below each threshold.
#[pyfunction]
#[pyo3(signature = (
    predictions, ground_truths, *, grid = None, iou_threshold = 0.5, interpolation = "voc11",
    n_random_runs = 10, base_seed = 0, constant_value = 1.0, parallel = true
))]
#[allow(clippy::too_many_arguments)]
fn sweep<'py>(
    py: Python<'py>,
    predictions: &Bound<'_, PyAny>,
    ground_truths: &Bound<'_, PyAny>,
    grid: Option<Vec<f64>>,
    iou_threshold: f64,
    interpolation: &str,
    n_random_runs: usize,
    base_seed: u64,
    constant_value: f64,
    parallel: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let (preds, gts) = (detections_from(predictions)?, detections_from(ground_truths)?);
    let cfg = config(
        iou_threshold,
        interpolation,
        n_random_runs,
        base_seed,
        constant_value,
        grid,
        parallel,
    )?;
    let result = py
        .detach(|| metrics::sweep_thresholds(&preds, &gts, &cfg))
        .map_err(metrics_err)?;
    report_to(py, &result)
}

/// Ground truth of a DOTA annotation text, for parity checks against files.
#[pyfunction]
fn parse_annotations<'py>(
    py: Python<'py>,
    text: &str,
    image_id: &str,
    categories: Vec<String>,
) -> PyResult<Bound<'py, PyList>> {
    let cats = categories_from(categories)?;
    let gts = obbtext_core::dataset::parse_annotation_text(text, std::path::Path::new(image_id), image_id, &cats)
        .map_err(dataset_err)?;
    let out = PyList::empty(py);
    for g in &gts {
        out.append(detection_to(py, g)?)?;
    }
    Ok(out)
}

#[pymodule]
fn obbtext(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("ObbtextError", m.py().get_type::<ObbtextError>())?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(dequantize, m)?)?;
    m.add_function(wrap_pyfunction!(serialize, m)?)?;
    m.add_function(wrap_pyfunction!(parse, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(map_nc, m)?)?;
    m.add_function(wrap_pyfunction!(f1_scores, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(parse_annotations, m)?)?;
    Ok(())
}
