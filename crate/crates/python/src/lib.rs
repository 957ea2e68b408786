//! Python access to checkpoints, analyses and the command-line pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use simoe_core::analysis::{capacity_report, overlap_report};
use simoe_core::cli::AnyModel;
use simoe_core::eval::evaluate;
use simoe_core::gates::{GateConstants, GateGroup};
use simoe_core::model::data::read_corpus;
use simoe_core::model::PackedBatch;
use simoe_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Dimension { .. } | Error::Degenerate(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Converts through JSON so nested reports arrive as plain dicts and lists.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn gates(log_phi: Vec<f64>) -> PyResult<GateGroup> {
    GateGroup::new(log_phi, GateConstants::default()).map_err(py_err)
}

/// Closed-form probability that each hard-concrete gate is nonzero.
#[pyfunction]
fn expected_active_prob(log_phi: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(gates(log_phi)?.expected_active_prob())
}

/// Deterministic median gate values, exactly 0 or 1 past the clamp points.
#[pyfunction]
fn median_gates(log_phi: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(gates(log_phi)?.median())
}

/// Runs one command-line stage in-process and returns its exit code.
#[pyfunction]
fn run(argv: Vec<String>) -> i32 {
    simoe_core::cli::run(std::iter::once("simoe".to_string()).chain(argv))
}

fn batch(seqs: &[Vec<usize>]) -> PyResult<PackedBatch> {
    let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
    PackedBatch::for_inference(seqs, &lens).map_err(py_err)
}

/// A dense, upcycled or pruned checkpoint.
#[pyclass(frozen)]
struct Model {
    inner: AnyModel,
}

#[pymethods]
impl Model {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: AnyModel::load(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner {
            AnyModel::Dense(_) => "dense",
            AnyModel::Upcycled(_) => "upcycled",
            AnyModel::Pruned(_) => "pruned",
        }
    }

    #[getter]
    fn experts(&self) -> usize {
        self.inner.experts().map_or(0, |m| m.experts())
    }

    /// Logits at the final position of each token sequence.
    fn next_token_logits(&self, seqs: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
        let b = batch(&seqs)?;
        let logits = self.inner.language_model().logits(&b).map_err(py_err)?;
        let width = logits.shape()[1];
        Ok(b.last_rows()
            .into_iter()
            .map(|r| logits.data()[r * width..(r + 1) * width].to_vec())
            .collect())
    }

    /// Expert activations per sequence, or `None` for a dense model.
    fn routes(&self, seqs: Vec<Vec<usize>>) -> PyResult<Option<Vec<Vec<f64>>>> {
        let b = batch(&seqs)?;
        let routes = self.inner.language_model().prompt_routes(&b).map_err(py_err)?;
        Ok(routes.map(|t| t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()))
    }

    #[pyo3(signature = (data_dir, split = "test"))]
    fn evaluate<'py>(&self, py: Python<'py>, data_dir: PathBuf, split: &str) -> PyResult<Bound<'py, PyAny>> {
        let splits = read_corpus(&data_dir).map_err(py_err)?;
        let examples = match split {
            "train" => &splits.train,
            "val" => &splits.val,
            "test" => &splits.test,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        to_py(py, &evaluate(self.inner.language_model(), examples).map_err(py_err)?)
    }

    fn overlap<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let m = self.inner.experts().map_err(py_err)?;
        to_py(py, &overlap_report(m).map_err(py_err)?)
    }

    fn capacity<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &capacity_report(self.inner.experts().map_err(py_err)?))
    }
}

#[pymodule]
fn simoe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(expected_active_prob, m)?)?;
    m.add_function(wrap_pyfunction!(median_gates, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
