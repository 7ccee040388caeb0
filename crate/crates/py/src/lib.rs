//! Python bindings: datasets, propagation operators, wavelet transforms,
//! training and gradient checking.
//!
//! Matrices cross the boundary as lists of rows.

use gsan_core::autodiff::GradCheckOptions;
use gsan_core::checkpoint::Checkpoint;
use gsan_core::data::{self, SbmParams};
use gsan_core::gradcheck::check_model;
use gsan_core::graph::{self, build_graph, Graph, SparseOperator};
use gsan_core::model::{attention_ratio, Architecture, ModelConfig};
use gsan_core::scattering::{self, ScatteringPath, WaveletBank};
use gsan_core::train::{self, FitResult, TrainConfig};
use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

create_exception!(gsan, GsanError, PyException);

fn err(e: gsan_core::GsanError) -> PyErr {
    GsanError::new_err(e.to_string())
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(GsanError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| GsanError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn graph_from(n: usize, edges: Vec<(usize, usize, f64)>) -> PyResult<Graph> {
    build_graph(n, &edges).map_err(err)
}

fn parse_config(toml: Option<&str>) -> PyResult<TrainConfig> {
    match toml {
        Some(text) => TrainConfig::from_toml(text).map_err(err),
        None => Ok(TrainConfig::default()),
    }
}

/// Node-classification dataset: graph, features, labels and split masks.
#[pyclass(module = "gsan", frozen)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    /// Reads `edges.tsv`, `features.csv`, `labels.txt` and `splits.json`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        data::load_dataset(&path)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    /// Samples a stochastic block model with equal class sizes and a
    /// 10/20/70 split per class.
    #[staticmethod]
    #[pyo3(signature = (nodes, classes, p_in, p_out, feature_dim=16, signal_strength=1.0, seed=0))]
    fn sbm(
        nodes: usize,
        classes: usize,
        p_in: f64,
        p_out: f64,
        feature_dim: usize,
        signal_strength: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let params = SbmParams {
            nodes,
            classes,
            p_in,
            p_out,
            feature_dim,
            signal_strength,
            seed,
        };
        data::generate_sbm(&params)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_dataset(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.graph.num_edges()
    }

    #[getter]
    fn num_features(&self) -> usize {
        self.inner.num_features()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.features)
    }

    /// Undirected edges as `(i, j, weight)` with `i < j`.
    fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.inner.graph.edges().collect()
    }

    fn homophily(&self) -> PyResult<f64> {
        data::edge_homophily(&self.inner).map_err(err)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// `{"classes", "nodes", "edges", "homophily"}`; homophily is `None`
    /// for an edgeless graph.
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = data::dataset_stats(&self.inner);
        let d = PyDict::new(py);
        d.set_item("classes", s.classes)?;
        d.set_item("nodes", s.nodes)?;
        d.set_item("edges", s.edges)?;
        d.set_item("homophily", s.homophily)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({:?}, nodes={}, edges={}, classes={})",
            self.inner.name,
            self.inner.num_nodes(),
            self.inner.graph.num_edges(),
            self.inner.num_classes()
        )
    }
}

/// Outcome of one training run, holding the best-validation parameters.
#[pyclass(module = "gsan", frozen)]
struct FitReport {
    inner: FitResult,
}

#[pymethods]
impl FitReport {
    #[getter]
    fn test_acc(&self) -> f64 {
        self.inner.test_acc
    }

    #[getter]
    fn train_acc(&self) -> f64 {
        self.inner.train_acc
    }

    #[getter]
    fn best_valid_acc(&self) -> f64 {
        self.inner.best_valid_acc
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.best_epoch
    }

    #[getter]
    fn epochs_run(&self) -> usize {
        self.inner.epochs_run
    }

    /// The effective configuration as TOML.
    #[getter]
    fn config(&self) -> String {
        self.inner.config.to_toml()
    }

    /// Per-epoch `(epoch, train_loss, train_acc, valid_loss, valid_acc)`.
    fn curves(&self) -> Vec<(usize, f64, f64, f64, f64)> {
        self.inner
            .curves
            .iter()
            .map(|r| {
                (
                    r.epoch,
                    r.train_loss,
                    r.train_acc,
                    r.valid_loss,
                    r.valid_acc,
                )
            })
            .collect()
    }

    /// Global attention ratio and its per-node values at the best epoch.
    fn attention_ratio(&self) -> PyResult<(f64, Vec<f64>)> {
        let (global, per_node) = attention_ratio(&self.inner.diagnostics).map_err(err)?;
        Ok((global, per_node.to_vec()))
    }

    /// Accuracy of the stored parameters on one split of `dataset`.
    fn evaluate(&self, dataset: &Dataset, split: &str) -> PyResult<f64> {
        let mask = match split {
            "train" => &dataset.inner.train,
            "valid" | "val" => &dataset.inner.valid,
            "test" => &dataset.inner.test,
            other => return Err(GsanError::new_err(format!("unknown split {other:?}"))),
        };
        train::evaluate(&self.inner.model, &dataset.inner, mask, &self.inner.config).map_err(err)
    }

    /// Writes a checkpoint readable by `gsan eval` and `gsan attn-ratio`.
    fn save_checkpoint(&self, dataset: &Dataset, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_fit(&self.inner, &dataset.inner)
            .save(&path)
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "FitReport(test_acc={:.4}, best_valid_acc={:.4}, best_epoch={})",
            self.inner.test_acc, self.inner.best_valid_acc, self.inner.best_epoch
        )
    }
}

/// Trains on `dataset`. `config` is TOML in the CLI's config format;
/// omitted keys take their defaults.
#[pyfunction]
#[pyo3(signature = (dataset, config=None))]
fn fit(py: Python<'_>, dataset: &Dataset, config: Option<&str>) -> PyResult<FitReport> {
    let config = parse_config(config)?;
    let result = py.detach(|| train::fit(&dataset.inner, &config));
    result.map(|inner| FitReport { inner }).map_err(err)
}

/// Default training configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    TrainConfig::default().to_toml()
}

fn dense(op: &SparseOperator) -> Vec<Vec<f64>> {
    to_rows(&op.to_dense())
}

/// Dense symmetric normalized adjacency with self-loops.
#[pyfunction]
fn normalized_adjacency(n: usize, edges: Vec<(usize, usize, f64)>) -> PyResult<Vec<Vec<f64>>> {
    Ok(dense(&graph::normalized_adjacency(&graph_from(n, edges)?)))
}

/// Dense lazy random walk; columns sum to one.
#[pyfunction]
fn lazy_random_walk(n: usize, edges: Vec<(usize, usize, f64)>) -> PyResult<Vec<Vec<f64>>> {
    Ok(dense(&graph::lazy_random_walk(&graph_from(n, edges)?)))
}

/// Dense residual operator for mixing weight `alpha`.
#[pyfunction]
fn residual_operator(
    n: usize,
    edges: Vec<(usize, usize, f64)>,
    alpha: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let op = graph::residual_operator(&graph_from(n, edges)?, alpha).map_err(err)?;
    Ok(dense(&op))
}

/// Diffusion wavelet of order `k` applied to the rows of `x`.
#[pyfunction]
fn wavelet(
    n: usize,
    edges: Vec<(usize, usize, f64)>,
    k: usize,
    x: Vec<Vec<f64>>,
) -> PyResult<Vec<Vec<f64>>> {
    let bank = WaveletBank::from_graph(&graph_from(n, edges)?, k.max(1));
    let out = scattering::wavelet_apply(&bank, k, &to_array(x)?).map_err(err)?;
    Ok(to_rows(&out))
}

/// Scattering transform along `path`, a list of wavelet orders.
#[pyfunction]
fn scatter(
    n: usize,
    edges: Vec<(usize, usize, f64)>,
    path: Vec<usize>,
    x: Vec<Vec<f64>>,
) -> PyResult<Vec<Vec<f64>>> {
    let path = ScatteringPath::new(path).map_err(err)?;
    let bank = WaveletBank::from_graph(&graph_from(n, edges)?, path.max_order().max(1));
    let out = scattering::scattering_apply(&bank, &path, &to_array(x)?).map_err(err)?;
    Ok(to_rows(&out))
}

/// `(param, max_rel_err, checked, skipped)`
type TensorCheck = (String, f64, usize, usize);

/// Compares analytic and finite-difference gradients of a freshly
/// initialized model on a built-in 12-node graph. Returns
/// `(passed, [(param, max_rel_err, checked, skipped)])`.
#[pyfunction]
#[pyo3(signature = (architecture="gsan", seed=0, tol=1e-4))]
fn gradcheck(
    architecture: &str,
    seed: u64,
    tol: f64,
) -> PyResult<(bool, Vec<TensorCheck>)> {
    let architecture = match architecture {
        "gsan" => Architecture::Gsan,
        "gcn" => Architecture::Gcn,
        other => {
            return Err(GsanError::new_err(format!(
                "unknown architecture {other:?}"
            )))
        }
    };
    let config = ModelConfig {
        architecture,
        ..ModelConfig::default()
    };
    let opts = GradCheckOptions {
        tol,
        ..GradCheckOptions::default()
    };
    let report = check_model(&config, seed, None, opts).map_err(err)?;
    let rows = report
        .params
        .iter()
        .map(|p| (p.name.clone(), p.max_rel_err, p.checked, p.skipped))
        .collect();
    Ok((report.passed(), rows))
}

#[pymodule]
fn gsan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GsanError", m.py().get_type::<GsanError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<FitReport>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_adjacency, m)?)?;
    m.add_function(wrap_pyfunction!(lazy_random_walk, m)?)?;
    m.add_function(wrap_pyfunction!(residual_operator, m)?)?;
    m.add_function(wrap_pyfunction!(wavelet, m)?)?;
    m.add_function(wrap_pyfunction!(scatter, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
