//! Python bindings for the elaine toolkit: graph construction and I/O, the
//! synthetic generator, walk/role features, model training, edge scoring,
//! and the repeat-based evaluations. Matrices cross the boundary as plain
//! lists of lists; edge attributes as `{(u, v): [floats]}` dicts.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use elaine::elaine::{train_model, EdgeAttrMode, ElaineConfig, TrainedModel};
use elaine::error::ElaineError;
use elaine::eval::{self, EvalParams};
use elaine::graph::{generate_sbm as sbm, EdgeAttributes, NodeLabels, SbmConfig};
use elaine::proximity::{self, WalkConfig};
use elaine::roles;
use ndarray::Array2;

fn to_py_err(e: ElaineError) -> PyErr {
    match e {
        ElaineError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn attrs_from_dict(
    dim_hint: Option<usize>,
    d: &BTreeMap<(usize, usize), Vec<f64>>,
) -> PyResult<EdgeAttributes> {
    let dim = match dim_hint.or_else(|| d.values().next().map(|v| v.len())) {
        Some(p) => p,
        None => return Err(PyValueError::new_err("edge attribute dict is empty")),
    };
    let mut attrs = EdgeAttributes::new(dim).map_err(to_py_err)?;
    for (&(u, v), values) in d {
        attrs.insert(u, v, values.clone()).map_err(to_py_err)?;
    }
    Ok(attrs)
}

fn attrs_to_dict(attrs: &EdgeAttributes) -> BTreeMap<(usize, usize), Vec<f64>> {
    attrs
        .iter()
        .map(|(u, v, values)| ((u, v), values.to_vec()))
        .collect()
}

fn labels_to_lists(labels: &NodeLabels) -> Vec<Vec<usize>> {
    (0..labels.num_nodes())
        .map(|u| labels.of(u).iter().copied().collect())
        .collect()
}

fn labels_from_lists(lists: Vec<Vec<usize>>) -> NodeLabels {
    NodeLabels::new(
        lists
            .into_iter()
            .map(|l| l.into_iter().collect::<BTreeSet<usize>>())
            .collect(),
    )
}

/// Undirected weighted graph over nodes `0..num_nodes`.
#[pyclass(name = "Graph")]
#[derive(Clone)]
struct PyGraph {
    inner: elaine::graph::Graph,
}

#[pymethods]
impl PyGraph {
    /// Build from `(u, v, weight)` triples; parallel edges merge by
    /// summing their weights.
    #[new]
    fn new(num_nodes: usize, edges: Vec<(usize, usize, f64)>) -> PyResult<Self> {
        Ok(PyGraph {
            inner: elaine::graph::Graph::from_edges(num_nodes, edges).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyGraph {
            inner: elaine::graph::Graph::load(path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py_err)
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.inner.edges().to_vec()
    }

    fn degree(&self, u: usize) -> PyResult<usize> {
        check_node(&self.inner, u)?;
        Ok(self.inner.degree(u))
    }

    fn weighted_degree(&self, u: usize) -> PyResult<f64> {
        check_node(&self.inner, u)?;
        Ok(self.inner.weighted_degree(u))
    }

    fn neighbors(&self, u: usize) -> PyResult<Vec<(usize, f64)>> {
        check_node(&self.inner, u)?;
        Ok(self.inner.neighbors(u).to_vec())
    }

    fn has_edge(&self, u: usize, v: usize) -> bool {
        self.inner.has_edge(u, v)
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(num_nodes={}, num_edges={})",
            self.inner.num_nodes(),
            self.inner.num_edges()
        )
    }
}

fn check_node(g: &elaine::graph::Graph, u: usize) -> PyResult<()> {
    if u < g.num_nodes() {
        Ok(())
    } else {
        Err(PyValueError::new_err(format!(
            "node {u} out of range for {} nodes",
            g.num_nodes()
        )))
    }
}

/// Training configuration; every knob is a read/write attribute.
#[pyclass(name = "Config")]
#[derive(Clone)]
struct PyConfig {
    inner: ElaineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (
        dim = 128,
        encoder_hidden = vec![500, 300],
        edge_decoder_hidden = vec![],
        alpha1 = 1.0,
        alpha_v = 1e-2,
        alpha_l = 1e-6,
        alpha_r = 1e-5,
        beta = 5.0,
        walks_per_node = 10,
        walk_length = 5,
        use_vae = true,
        use_higher_order = true,
        use_roles = true,
        edge_attr_mode = "coupled",
        epochs = 200,
        batch_size = 64,
        learning_rate = 1e-3,
        seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        dim: usize,
        encoder_hidden: Vec<usize>,
        edge_decoder_hidden: Vec<usize>,
        alpha1: f64,
        alpha_v: f64,
        alpha_l: f64,
        alpha_r: f64,
        beta: f64,
        walks_per_node: usize,
        walk_length: usize,
        use_vae: bool,
        use_higher_order: bool,
        use_roles: bool,
        edge_attr_mode: &str,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = ElaineConfig {
            dim,
            encoder_hidden,
            edge_decoder_hidden,
            alpha1,
            alpha_v,
            alpha_l,
            alpha_r,
            beta,
            walks_per_node,
            walk_length,
            use_vae,
            use_higher_order,
            use_roles,
            edge_attr_mode: parse_mode(edge_attr_mode)?,
            epochs,
            batch_size,
            learning_rate,
            seed,
        };
        inner.validate().map_err(to_py_err)?;
        Ok(PyConfig { inner })
    }

    #[getter]
    fn get_dim(&self) -> usize {
        self.inner.dim
    }

    #[setter]
    fn set_dim(&mut self, v: usize) {
        self.inner.dim = v;
    }

    #[getter]
    fn get_epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.epochs = v;
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn get_edge_attr_mode(&self) -> &'static str {
        match self.inner.edge_attr_mode {
            EdgeAttrMode::Coupled => "coupled",
            EdgeAttrMode::NodeAugmented => "node_augmented",
            EdgeAttrMode::Off => "off",
        }
    }

    #[setter]
    fn set_edge_attr_mode(&mut self, v: &str) -> PyResult<()> {
        self.inner.edge_attr_mode = parse_mode(v)?;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(dim={}, epochs={}, edge_attr_mode='{}', seed={})",
            self.inner.dim,
            self.inner.epochs,
            self.get_edge_attr_mode(),
            self.inner.seed
        )
    }
}

fn parse_mode(s: &str) -> PyResult<EdgeAttrMode> {
    match s {
        "coupled" => Ok(EdgeAttrMode::Coupled),
        "node_augmented" => Ok(EdgeAttrMode::NodeAugmented),
        "off" => Ok(EdgeAttrMode::Off),
        other => Err(PyValueError::new_err(format!(
            "edge_attr_mode must be 'coupled', 'node_augmented' or 'off', got '{other}'"
        ))),
    }
}

/// A trained model: embeddings, pair scores, and attribute prediction.
#[pyclass(name = "Model")]
struct PyModel {
    trained: TrainedModel,
    scorer: elaine::elaine::EdgeScorer,
    num_nodes: usize,
}

#[pymethods]
impl PyModel {
    /// Node embedding as a `num_nodes x dim` list of lists.
    fn embedding(&self) -> Vec<Vec<f64>> {
        rows(&self.trained.embed().y)
    }

    /// Reconstructed-neighborhood likelihood of the pair; symmetric.
    fn score_edge(&self, u: usize, v: usize) -> PyResult<f64> {
        if u == v {
            return Err(PyValueError::new_err("self-pairs are not scored"));
        }
        if u >= self.num_nodes || v >= self.num_nodes {
            return Err(PyValueError::new_err(format!(
                "pair ({u}, {v}) out of range for {} nodes",
                self.num_nodes
            )));
        }
        Ok(self.scorer.score(u, v))
    }

    /// Decoded attribute vector of an arbitrary node pair.
    fn predict_edge_attributes(&self, u: usize, v: usize) -> PyResult<Vec<f64>> {
        if self.trained.edge_decoder().is_none() {
            return Err(PyValueError::new_err(
                "model was trained without the coupled edge decoder",
            ));
        }
        if u == v || u >= self.num_nodes || v >= self.num_nodes {
            return Err(PyValueError::new_err(format!(
                "pair ({u}, {v}) is not a valid node pair"
            )));
        }
        Ok(self.trained.predict_edge_attributes(u, v))
    }

    /// Mean total loss per epoch.
    fn loss_history(&self) -> Vec<f64> {
        self.trained.history.iter().map(|t| t.total).collect()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.trained.model.config.dim
    }

    fn __repr__(&self) -> String {
        format!("Model(num_nodes={}, dim={})", self.num_nodes, self.dim())
    }
}

/// Train a model on a graph; `attrs` maps `(u, v)` to a topic vector and is
/// required unless `config.edge_attr_mode == "off"`.
#[pyfunction]
#[pyo3(signature = (graph, config, attrs = None))]
fn train(
    py: Python<'_>,
    graph: &PyGraph,
    config: &PyConfig,
    attrs: Option<BTreeMap<(usize, usize), Vec<f64>>>,
) -> PyResult<PyModel> {
    let attrs = attrs.map(|d| attrs_from_dict(None, &d)).transpose()?;
    let g = graph.inner.clone();
    let cfg = config.inner.clone();
    let trained = py
        .allow_threads(move || train_model(&g, attrs.as_ref(), &cfg, None))
        .map_err(to_py_err)?;
    let scorer = trained.edge_scorer();
    Ok(PyModel {
        num_nodes: graph.inner.num_nodes(),
        scorer,
        trained,
    })
}

/// Planted-community graph with block-topic edge attributes. Returns
/// `(graph, attrs, labels)` where `labels[u]` lists node `u`'s labels.
#[pyfunction]
#[pyo3(signature = (blocks, nodes_per_block, p_in, p_out, edge_topics, attr_noise = 0.2, seed = 0))]
fn generate_sbm(
    blocks: usize,
    nodes_per_block: usize,
    p_in: f64,
    p_out: f64,
    edge_topics: usize,
    attr_noise: f64,
    seed: u64,
) -> PyResult<(PyGraph, BTreeMap<(usize, usize), Vec<f64>>, Vec<Vec<usize>>)> {
    let (g, attrs, labels) = sbm(&SbmConfig {
        blocks,
        nodes_per_block,
        p_in,
        p_out,
        edge_topics,
        attr_noise,
        seed,
    })
    .map_err(to_py_err)?;
    Ok((
        PyGraph { inner: g },
        attrs_to_dict(&attrs),
        labels_to_lists(&labels),
    ))
}

/// Names of the six structural role statistics, in column order.
#[pyfunction]
fn role_names() -> Vec<&'static str> {
    roles::ROLE_NAMES.to_vec()
}

/// Min-max scaled role statistics, one row per node.
#[pyfunction]
fn role_features(graph: &PyGraph) -> Vec<Vec<f64>> {
    rows(&roles::role_features(&graph.inner).scaled)
}

/// Truncated-random-walk visit frequencies, one row per start node.
#[pyfunction]
#[pyo3(signature = (graph, walks_per_node = 10, walk_length = 5, seed = 0))]
fn walk_similarity(
    graph: &PyGraph,
    walks_per_node: usize,
    walk_length: usize,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let sim = proximity::build_similarity(
        &graph.inner,
        &WalkConfig {
            walks_per_node,
            walk_length,
            seed,
        },
    )
    .map_err(to_py_err)?;
    Ok(rows(&sim.matrix))
}

/// Katz proximity `(I - beta A)^-1 - I`; `beta` must stay below the
/// reciprocal spectral radius of the adjacency matrix.
#[pyfunction]
fn katz_index(graph: &PyGraph, beta: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(
        &proximity::katz_index(&graph.inner, beta).map_err(to_py_err)?,
    ))
}

/// Repeat-averaged link prediction. Returns a dict with `map_mean`,
/// `map_std`, `precision_at` (list of `(k, mean, std)`), and `failures`.
#[pyfunction]
#[pyo3(signature = (graph, config, attrs = None, holdout_fraction = 0.2, max_eval_nodes = 1024, repeats = 5, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn link_prediction(
    py: Python<'_>,
    graph: &PyGraph,
    config: &PyConfig,
    attrs: Option<BTreeMap<(usize, usize), Vec<f64>>>,
    holdout_fraction: f64,
    max_eval_nodes: usize,
    repeats: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let attrs = attrs.map(|d| attrs_from_dict(None, &d)).transpose()?;
    let g = graph.inner.clone();
    let cfg = config.inner.clone();
    let params = EvalParams {
        holdout_fraction,
        max_eval_nodes,
        repeats,
        seed,
    };
    let report = py
        .allow_threads(move || eval::run_link_prediction(&g, attrs.as_ref(), &cfg, &params, None))
        .map_err(to_py_err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("map_mean", report.map.mean)?;
    out.set_item("map_std", report.map.std)?;
    let grid: Vec<(usize, f64, f64)> = report
        .precision_at
        .iter()
        .map(|(k, s)| (*k, s.mean, s.std))
        .collect();
    out.set_item("precision_at", grid)?;
    out.set_item("repeats", report.repeats_attempted)?;
    out.set_item("failures", report.failures)?;
    Ok(out.into_any().unbind())
}

/// One-vs-rest logistic classification of an embedding; returns
/// `(micro_f1, macro_f1)`.
#[pyfunction]
#[pyo3(signature = (embedding, labels, train_ratio = 0.5, seed = 0))]
fn node_classification(
    embedding: Vec<Vec<f64>>,
    labels: Vec<Vec<usize>>,
    train_ratio: f64,
    seed: u64,
) -> PyResult<(f64, f64)> {
    if embedding.is_empty() {
        return Err(PyValueError::new_err("embedding has no rows"));
    }
    let d = embedding[0].len();
    if embedding.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("embedding rows differ in length"));
    }
    let flat: Vec<f64> = embedding.iter().flatten().copied().collect();
    let emb = Array2::from_shape_vec((embedding.len(), d), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = eval::node_classification(&emb, &labels_from_lists(labels), train_ratio, seed)
        .map_err(to_py_err)?;
    Ok((out.micro_f1, out.macro_f1))
}

#[pymodule]
fn elaine_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sbm, m)?)?;
    m.add_function(wrap_pyfunction!(role_names, m)?)?;
    m.add_function(wrap_pyfunction!(role_features, m)?)?;
    m.add_function(wrap_pyfunction!(walk_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(katz_index, m)?)?;
    m.add_function(wrap_pyfunction!(link_prediction, m)?)?;
    m.add_function(wrap_pyfunction!(node_classification, m)?)?;
    Ok(())
}
