//! Python bindings for the `bce3s` library.
//!
//! Vectors and matrices cross the boundary as plain lists of floats.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use bce3s_core::config::EtfSimConfig;
use bce3s_core::data::MemoryBank as CoreBank;
use bce3s_core::grads::{self, GradCheckSettings};
use bce3s_core::losses::{self, Family, LabeledFeature, NegativeMask, Normalization};
use bce3s_core::{geometry, rng, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Divergence { .. } | Error::GradCheck(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_family(s: &str) -> PyResult<Family> {
    match s {
        "bce" => Ok(Family::Bce),
        "ce" => Ok(Family::Ce),
        _ => Err(PyValueError::new_err(format!("family must be 'bce' or 'ce', got {s:?}"))),
    }
}

fn parse_norm(s: &str) -> PyResult<Normalization> {
    Normalization::parse(s).ok_or_else(|| {
        PyValueError::new_err(format!(
            "normalization must be one of none, feature_only, classifier_only, both; got {s:?}"
        ))
    })
}

/// Linear classifier with a normalization mode.
#[pyclass(name = "Classifier", module = "bce3s")]
struct PyClassifier {
    inner: losses::Classifier,
}

#[pymethods]
impl PyClassifier {
    #[new]
    #[pyo3(signature = (weights, biases=None, normalization="classifier_only"))]
    fn new(weights: Vec<Vec<f64>>, biases: Option<Vec<f64>>, normalization: &str) -> PyResult<Self> {
        let k = weights.len();
        let inner = losses::Classifier::from_rows(&weights, biases.unwrap_or_else(|| vec![0.0; k]), parse_norm(normalization)?)
            .map_err(to_py)?;
        Ok(PyClassifier { inner })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        self.inner.weights().to_rows()
    }

    #[getter]
    fn biases(&self) -> Vec<f64> {
        self.inner.biases().to_vec()
    }

    #[getter]
    fn normalization(&self) -> &'static str {
        self.inner.normalization().as_str()
    }

    fn logits(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.logits(&x).map_err(to_py)
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        self.inner.predict(&x).map_err(to_py)
    }

    /// Joint loss of one sample. `keep` optionally masks negatives (BCE only).
    #[pyo3(signature = (x, label, family="bce", keep=None))]
    fn joint_loss(&self, x: Vec<f64>, label: usize, family: &str, keep: Option<Vec<bool>>) -> PyResult<f64> {
        let k = self.inner.num_classes();
        let mask = match keep {
            Some(v) if v.len() != k => return Err(PyValueError::new_err(format!("keep must have {k} entries"))),
            Some(v) => NegativeMask::from_keep(v),
            None => NegativeMask::all(k),
        };
        losses::joint(&LabeledFeature::new(x, label), &self.inner, &mask, parse_family(family)?).map_err(to_py)
    }

    /// Uniform loss of classifier row `k`.
    #[pyo3(signature = (k, family="bce", include_positive=false))]
    fn uniform_loss(&self, k: usize, family: &str, include_positive: bool) -> PyResult<f64> {
        if k >= self.inner.num_classes() {
            return Err(PyValueError::new_err("class index out of range"));
        }
        match parse_family(family)? {
            Family::Bce => losses::bce_uniform(&self.inner, k, include_positive),
            Family::Ce => losses::ce_uniform(&self.inner, k),
        }
        .map_err(to_py)
    }

    /// Per-class classifier separability in [0, 100].
    fn separability(&self) -> PyResult<Vec<f64>> {
        geometry::classifier_separability(&self.inner).map_err(to_py)
    }

    /// K x K matrix of pairwise separabilities of the centered rows.
    fn separability_matrix(&self) -> PyResult<Vec<Vec<f64>>> {
        let s = geometry::separability_matrix(&self.inner).map_err(to_py)?;
        Ok((0..s.num_classes()).map(|j| s.row(j).to_vec()).collect())
    }

    fn etf_deviation<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = geometry::etf_deviation(&self.inner).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("target_cos", r.target_cos)?;
        d.set_item("max_pairwise_cos_deviation", r.max_pairwise_cos_deviation)?;
        d.set_item("max_norm_deviation", r.max_norm_deviation)?;
        d.set_item("realizable", r.realizable)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Classifier(num_classes={}, dim={}, normalization='{}')",
            self.inner.num_classes(),
            self.inner.dim(),
            self.inner.normalization().as_str()
        )
    }
}

/// Per-class memory bank of unit projections, last write wins.
#[pyclass(name = "MemoryBank", module = "bce3s")]
struct PyMemoryBank {
    inner: CoreBank,
}

#[pymethods]
impl PyMemoryBank {
    #[new]
    fn new(num_classes: usize, dim: usize) -> Self {
        PyMemoryBank {
            inner: CoreBank::new(num_classes, dim),
        }
    }

    /// Writes `(label, z)` pairs in order; returns how many needed renormalizing.
    fn update(&mut self, batch: Vec<(usize, Vec<f64>)>) -> PyResult<usize> {
        self.inner
            .update(batch.iter().map(|(k, z)| (*k, z.as_slice())))
            .map_err(to_py)
    }

    fn get(&self, k: usize) -> Option<Vec<f64>> {
        self.inner.get(k).map(<[f64]>::to_vec)
    }

    #[getter]
    fn initialized_count(&self) -> usize {
        self.inner.initialized_count()
    }

    /// Contrastive loss of projection `z`; `None` while the own slot is empty.
    #[pyo3(signature = (z, label, tau=0.5, family="bce"))]
    fn contrastive_loss(&self, z: Vec<f64>, label: usize, tau: f64, family: &str) -> PyResult<Option<f64>> {
        losses::contrastive(&z, label, &self.inner, tau, parse_family(family)?).map_err(to_py)
    }
}

#[pyfunction]
fn longtail_counts(classes: usize, head_count: usize, imbalance_factor: f64) -> PyResult<Vec<usize>> {
    bce3s_core::data::longtail_counts(classes, head_count, imbalance_factor).map_err(to_py)
}

#[pyfunction]
fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    bce3s_core::train::cosine_lr(t, total, lr0)
}

#[pyfunction]
fn cb_weight(n: usize, beta: f64) -> f64 {
    losses::cb_weight(n, beta)
}

/// `k` unit vectors in `R^d` with pairwise cosines `-1/(k-1)`.
#[pyfunction]
#[pyo3(signature = (k, d, seed=0))]
fn construct_etf(k: usize, d: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let mut r = rng::stream(seed, &[rng::tags::ETF]);
    Ok(geometry::construct_etf(k, d, &mut r).map_err(to_py)?.to_rows())
}

/// Compactness and separability metrics of labelled features under a classifier.
#[pyfunction]
fn metric_report<'py>(
    py: Python<'py>,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classifier: &PyClassifier,
) -> PyResult<Bound<'py, PyDict>> {
    if features.len() != labels.len() {
        return Err(PyValueError::new_err("features and labels differ in length"));
    }
    let samples: Vec<LabeledFeature> = features
        .into_iter()
        .zip(labels)
        .map(|(x, l)| LabeledFeature::new(x, l))
        .collect();
    let r = geometry::metric_report(&samples, &classifier.inner).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("compactness", r.compactness)?;
    d.set_item("feature_separability", r.feature_separability)?;
    d.set_item("classifier_separability", r.classifier_separability)?;
    d.set_item("skipped_pairs", r.skipped_pairs)?;
    Ok(d)
}

/// Projected gradient descent on the uniform loss; returns the final
/// max pairwise cosine deviation from the ETF value for each initialization.
#[pyfunction]
#[pyo3(signature = (classes=4, dim=8, steps=5000, lr=0.1, inits=10, seed=42))]
fn simulate_uniform_learning(
    classes: usize,
    dim: usize,
    steps: usize,
    lr: f64,
    inits: usize,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let cfg = EtfSimConfig {
        classes,
        dim,
        steps,
        lr,
        inits,
        seed,
        include_positive: false,
    };
    let runs = bce3s_core::cli::simulate_uniform_learning(&cfg).map_err(to_py)?;
    Ok(runs.iter().map(|r| r.final_deviation()).collect())
}

/// `(op, seed, max_rel_err, passed)`.
type WorstReport = (String, Option<u64>, f64, bool);

/// Runs the finite-difference gradient suite. Returns the worst report per
/// operation as `(op, seed, max_rel_err, passed)`.
#[pyfunction]
#[pyo3(signature = (seeds=20, tol=1e-4, step=1e-6))]
fn gradcheck(seeds: u64, tol: f64, step: f64) -> PyResult<Vec<WorstReport>> {
    let settings = GradCheckSettings {
        seeds: (0..seeds).collect(),
        tol,
        step,
    };
    let reports = grads::gradcheck_suite(&settings).map_err(to_py)?;
    Ok(grads::worst_per_op(&reports)
        .into_iter()
        .map(|r| (r.op.clone(), r.seed, r.max_rel_err, r.passed(tol)))
        .collect())
}

#[pymodule]
#[pyo3(name = "bce3s")]
fn bce3s_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyMemoryBank>()?;
    m.add_function(wrap_pyfunction!(longtail_counts, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(cb_weight, m)?)?;
    m.add_function(wrap_pyfunction!(construct_etf, m)?)?;
    m.add_function(wrap_pyfunction!(metric_report, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_uniform_learning, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
