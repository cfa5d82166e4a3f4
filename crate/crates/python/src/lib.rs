//! Python bindings: synthesis, filtering, the contrastive loss, metrics,
//! k-NN affinity and the trained encoder / decoder models.
//!
//! Waveforms cross the boundary as nested lists of floats, `[lead][sample]`.

use std::path::PathBuf;

use leadrecon::contrastive::Encoder as CoreEncoder;
use leadrecon::dsp::{self, FilterSpec};
use leadrecon::reconstruction::{self as recon, Decoder as CoreDecoder, ReconstructionModel as CoreModel};
use leadrecon::{evaluation, synth, wfdb, ErrorCategory};
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: leadrecon::Error) -> PyErr {
    match e.category() {
        ErrorCategory::Config | ErrorCategory::Data => PyValueError::new_err(e.to_string()),
        ErrorCategory::Dependency => PyFileNotFoundError::new_err(e.to_string()),
        ErrorCategory::Internal => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Flatten `[rows][t]` into one buffer; every row must have the same length.
fn flatten<T: Copy>(rows: &[Vec<T>]) -> PyResult<(Vec<T>, usize)> {
    let t = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != t) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok((rows.concat(), t))
}

fn record_dict<'py>(py: Python<'py>, rec: &wfdb::SignalRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("record_id", &rec.record_id)?;
    d.set_item("patient_id", &rec.patient_id)?;
    d.set_item("fs", rec.fs)?;
    d.set_item("leads", &rec.lead_names)?;
    d.set_item("samples", &rec.samples)?;
    d.set_item("labels", rec.labels.high_confidence())?;
    Ok(d)
}

/// Names of the built-in synthetic classes.
#[pyfunction]
fn builtin_classes() -> Vec<String> {
    synth::builtin_classes().into_iter().map(|c| c.class_name).collect()
}

/// One synthetic 8-lead record of the named class.
#[pyfunction]
#[pyo3(signature = (class_name, duration=10.0, fs=500.0, seed=0))]
fn synth_record<'py>(py: Python<'py>, class_name: &str, duration: f64, fs: f64, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let specs = synth::builtin_classes();
    let spec = specs
        .iter()
        .find(|c| c.class_name == class_name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown class {class_name:?}")))?;
    let rec = synth::generate_record(spec, duration, fs, seed).map_err(to_py)?;
    record_dict(py, &rec)
}

/// Read a WFDB record given its path without extension.
#[pyfunction]
#[pyo3(signature = (base, verify_checksums=true))]
fn read_record<'py>(py: Python<'py>, base: PathBuf, verify_checksums: bool) -> PyResult<Bound<'py, PyDict>> {
    let rec = wfdb::read_record(&base, verify_checksums).map_err(to_py)?;
    record_dict(py, &rec)
}

/// Notch, band-pass, baseline removal and resampling to 100 Hz.
#[pyfunction]
fn clean_lead(x: Vec<f64>, fs: f64) -> PyResult<Vec<f64>> {
    dsp::clean_lead(&x, fs, &FilterSpec::default()).map(|(y, _)| y).map_err(to_py)
}

#[pyfunction]
fn detect_r_peaks(x: Vec<f64>, fs: f64) -> Vec<usize> {
    dsp::detect_r_peaks(&x, fs)
}

/// Contrastive loss over unit-norm rows `z` with multi-label `labels`.
#[pyfunction]
#[pyo3(signature = (z, labels, tau=0.07))]
fn supcon_loss(z: Vec<Vec<f64>>, labels: Vec<Vec<String>>, tau: f64) -> PyResult<f64> {
    let (flat, d) = flatten(&z)?;
    leadrecon::contrastive::supcon_loss(&flat, d, &labels, tau).map_err(to_py)
}

#[pyfunction]
fn rmse(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    evaluation::rmse(&pred, &truth).map_err(to_py)
}

#[pyfunction]
fn r2(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    evaluation::r2(&pred, &truth).map_err(to_py)
}

#[pyfunction]
fn pearson(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    evaluation::pearson(&pred, &truth).map_err(to_py)
}

/// Class-affinity matrix from cosine k-NN; returns `(classes, matrix, diagonal mean)`.
#[pyfunction]
#[pyo3(signature = (vectors, labels, k=10))]
fn knn_affinity(vectors: Vec<Vec<f64>>, labels: Vec<String>, k: usize) -> PyResult<(Vec<String>, Vec<Vec<f64>>, f64)> {
    let (flat, dim) = flatten(&vectors)?;
    let a = evaluation::knn_affinity(&flat, dim, &labels, k).map_err(to_py)?;
    let diag = evaluation::diagonal_consistency(&a);
    Ok((a.classes, a.matrix, diag))
}

/// Per-lead z-score of a `[3][t]` input.
#[pyfunction]
fn normalize_x(x: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    let (flat, t) = flatten(&x)?;
    if t == 0 {
        return Err(PyValueError::new_err("empty input"));
    }
    Ok(recon::normalize_x(&flat, t).x.chunks(t).map(<[f32]>::to_vec).collect())
}

#[pyclass(name = "Encoder")]
struct PyEncoder(CoreEncoder);

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (seed=0))]
    fn new(seed: u64) -> PyResult<Self> {
        CoreEncoder::new(seed).map(PyEncoder).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreEncoder::load(&path).map(|(e, _)| PyEncoder(e)).map_err(to_py)
    }

    /// 128-dim embedding of one `[3][t]` input in mV.
    fn embed(&self, x: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
        let (flat, t) = flatten(&x)?;
        self.0.embed(&flat, t).map_err(to_py)
    }

    fn parameter_count(&self) -> usize {
        self.0.store.num_parameters()
    }
}

#[pyclass(name = "Decoder")]
struct PyDecoder(CoreDecoder);

#[pymethods]
impl PyDecoder {
    #[new]
    #[pyo3(signature = (lead, conditioned=true, seed=0))]
    fn new(lead: &str, conditioned: bool, seed: u64) -> PyResult<Self> {
        CoreDecoder::new(lead, conditioned, seed).map(PyDecoder).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreDecoder::load(&path).map(|(d, _)| PyDecoder(d)).map_err(to_py)
    }

    #[getter]
    fn lead(&self) -> String {
        self.0.lead.clone()
    }

    #[getter]
    fn conditioned(&self) -> bool {
        self.0.conditioned
    }

    /// Normalized target from normalized `[3][t]` input and embedding.
    #[pyo3(signature = (x_hat, h_hat=None))]
    fn decode(&self, x_hat: Vec<Vec<f32>>, h_hat: Option<Vec<f32>>) -> PyResult<Vec<f32>> {
        let (flat, _) = flatten(&x_hat)?;
        self.0.decode(&flat, &h_hat.unwrap_or_default()).map_err(to_py)
    }

    fn parameter_count(&self) -> usize {
        self.0.store.num_parameters()
    }
}

#[pyclass(name = "ReconstructionModel")]
struct PyModel(CoreModel);

#[pymethods]
impl PyModel {
    /// Load the encoder and five decoders written by the `train` stage.
    #[staticmethod]
    #[pyo3(signature = (run_dir, conditioned=true))]
    fn load(run_dir: PathBuf, conditioned: bool) -> PyResult<Self> {
        CoreModel::load(&run_dir, conditioned).map(PyModel).map_err(to_py)
    }

    /// Leads V1, V3–V6 (mV) for one `[3][t]` input of I, II, V2 (mV).
    fn predict(&self, x: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f64>>> {
        let (flat, t) = flatten(&x)?;
        self.0.predict(&flat, t).map_err(to_py)
    }

    /// Reassembled leads V1, V3–V6 for a whole cleaned 100 Hz record given as
    /// rows of I, II, V2.
    fn reconstruct(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        flatten(&x)?;
        let rec = wfdb::SignalRecord {
            samples: x,
            fs: dsp::TARGET_FS,
            lead_names: leadrecon::leads::INPUT_LEADS.iter().map(|s| s.to_string()).collect(),
            record_id: "python".into(),
            patient_id: String::new(),
            labels: Default::default(),
            fold: None,
        };
        self.0.reconstruct_record(&rec).map_err(to_py)
    }

    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }
}

#[pymodule]
fn pyleadrecon(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("INPUT_LEADS", leadrecon::leads::INPUT_LEADS.to_vec())?;
    m.add("TARGET_LEADS", leadrecon::leads::TARGET_LEADS.to_vec())?;
    m.add_function(wrap_pyfunction!(builtin_classes, m)?)?;
    m.add_function(wrap_pyfunction!(synth_record, m)?)?;
    m.add_function(wrap_pyfunction!(read_record, m)?)?;
    m.add_function(wrap_pyfunction!(clean_lead, m)?)?;
    m.add_function(wrap_pyfunction!(detect_r_peaks, m)?)?;
    m.add_function(wrap_pyfunction!(supcon_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(r2, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(knn_affinity, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_x, m)?)?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyDecoder>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
