//! Undirected weighted graphs over dense node ids, plus the attributed inputs
//! that ride along with them: per-edge attribute vectors, per-node label sets,
//! and a stochastic block-model generator with planted edge topics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{ElaineError, Result};

/// Undirected graph with positive edge weights and node ids `0..n`.
///
/// Edges are stored once under their unordered key `(min, max)`; duplicate
/// insertions merge by summing weights. Self-loops are rejected.
#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize, f64)>,
    adjacency: Vec<Vec<(usize, f64)>>,
    weighted_degrees: Vec<f64>,
}

impl Graph {
    pub fn from_edges(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (u, v, w) in edges {
            if u == v {
                return Err(ElaineError::Validation(format!(
                    "self-loop at node {u} is not allowed"
                )));
            }
            if u >= n || v >= n {
                return Err(ElaineError::Validation(format!(
                    "edge ({u}, {v}) references a node outside 0..{n}"
                )));
            }
            if !w.is_finite() || w <= 0.0 {
                return Err(ElaineError::Validation(format!(
                    "edge ({u}, {v}) has non-positive or non-finite weight {w}"
                )));
            }
            let key = (u.min(v), u.max(v));
            *merged.entry(key).or_insert(0.0) += w;
        }

        let mut adjacency = vec![Vec::new(); n];
        for (&(u, v), &w) in &merged {
            adjacency[u].push((v, w));
            adjacency[v].push((u, w));
        }
        for list in &mut adjacency {
            list.sort_unstable_by_key(|&(v, _)| v);
        }
        let weighted_degrees = adjacency
            .iter()
            .map(|list| list.iter().map(|&(_, w)| w).sum())
            .collect();

        Ok(Graph {
            n,
            edges: merged.into_iter().map(|((u, v), w)| (u, v, w)).collect(),
            adjacency,
            weighted_degrees,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(u, v, w)` with `u < v`, sorted lexicographically.
    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Neighbors of `u` with edge weights, sorted by neighbor id.
    pub fn neighbors(&self, u: usize) -> &[(usize, f64)] {
        &self.adjacency[u]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.adjacency[u].len()
    }

    pub fn weighted_degree(&self, u: usize) -> f64 {
        self.weighted_degrees[u]
    }

    pub fn is_isolated(&self, u: usize) -> bool {
        self.adjacency[u].is_empty()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.weight(u, v).is_some()
    }

    pub fn weight(&self, u: usize, v: usize) -> Option<f64> {
        self.adjacency[u]
            .binary_search_by_key(&v, |&(x, _)| x)
            .ok()
            .map(|i| self.adjacency[u][i].1)
    }

    /// Dense weighted adjacency matrix (symmetric, zero diagonal).
    pub fn weighted_adjacency(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n, self.n));
        for &(u, v, w) in &self.edges {
            a[[u, v]] = w;
            a[[v, u]] = w;
        }
        a
    }

    /// Dense binary adjacency matrix (weights ignored).
    pub fn binary_adjacency(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n, self.n));
        for &(u, v, _) in &self.edges {
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
        a
    }

    /// Stable fingerprint of `(n, sorted edge list with weights)`, used to key
    /// caches and to tie embeddings back to the graph they came from.
    pub fn structure_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(u64::try_from(self.n).unwrap().to_le_bytes());
        for &(u, v, w) in &self.edges {
            hasher.update(u64::try_from(u).unwrap().to_le_bytes());
            hasher.update(u64::try_from(v).unwrap().to_le_bytes());
            hasher.update(w.to_bits().to_le_bytes());
        }
        let digest = hasher.finalize();
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parse an edge-list file: one `u v [w]` per line, whitespace-separated,
    /// `w` defaulting to 1. `#` starts a comment. Node count is the largest id
    /// plus one. Duplicate edges merge by summing weights.
    pub fn load(path: impl AsRef<Path>) -> Result<Graph> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ElaineError::io(path, e))?;
        let shown = path.display().to_string();

        let mut raw: Vec<(usize, usize, f64)> = Vec::new();
        let mut max_id = 0usize;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = content.split_whitespace().collect();
            if tokens.len() != 2 && tokens.len() != 3 {
                return Err(ElaineError::parse(
                    &shown,
                    line_no,
                    format!("expected 'u v [w]', got {} fields", tokens.len()),
                ));
            }
            let u: usize = tokens[0].parse().map_err(|_| {
                ElaineError::parse(&shown, line_no, format!("bad node id {:?}", tokens[0]))
            })?;
            let v: usize = tokens[1].parse().map_err(|_| {
                ElaineError::parse(&shown, line_no, format!("bad node id {:?}", tokens[1]))
            })?;
            let w: f64 = if tokens.len() == 3 {
                tokens[2].parse().map_err(|_| {
                    ElaineError::parse(&shown, line_no, format!("bad weight {:?}", tokens[2]))
                })?
            } else {
                1.0
            };
            if u == v {
                return Err(ElaineError::parse(
                    &shown,
                    line_no,
                    format!("self-loop at node {u}"),
                ));
            }
            if !w.is_finite() || w <= 0.0 {
                return Err(ElaineError::parse(
                    &shown,
                    line_no,
                    format!("weight must be positive and finite, got {w}"),
                ));
            }
            max_id = max_id.max(u).max(v);
            raw.push((u, v, w));
        }
        if raw.is_empty() {
            return Err(ElaineError::Validation(format!("{shown}: no edges found")));
        }
        Graph::from_edges(max_id + 1, raw)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for &(u, v, w) in &self.edges {
            out.push_str(&format!("{u}\t{v}\t{w}\n"));
        }
        fs::write(path, out).map_err(|e| ElaineError::io(path, e))
    }
}

/// Per-edge attribute vectors of a fixed dimension `p`, keyed by the unordered
/// edge. Entries live in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct EdgeAttributes {
    dim: usize,
    rows: BTreeMap<(usize, usize), Vec<f64>>,
    missing_filled: usize,
}

impl EdgeAttributes {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(ElaineError::Validation(
                "edge attribute dimension must be at least 1".into(),
            ));
        }
        Ok(EdgeAttributes {
            dim,
            rows: BTreeMap::new(),
            missing_filled: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of graph edges that had no attribute row and were zero-filled.
    pub fn missing_filled(&self) -> usize {
        self.missing_filled
    }

    pub fn insert(&mut self, u: usize, v: usize, values: Vec<f64>) -> Result<()> {
        if u == v {
            return Err(ElaineError::Validation(format!(
                "edge attribute for self-loop ({u}, {u})"
            )));
        }
        if values.len() != self.dim {
            return Err(ElaineError::Validation(format!(
                "edge attribute for ({u}, {v}) has {} entries, expected {}",
                values.len(),
                self.dim
            )));
        }
        for &x in &values {
            if !x.is_finite() || !(0.0..=1.0).contains(&x) {
                return Err(ElaineError::Validation(format!(
                    "edge attribute for ({u}, {v}) has entry {x} outside [0, 1]"
                )));
            }
        }
        self.rows.insert((u.min(v), u.max(v)), values);
        Ok(())
    }

    pub fn get(&self, u: usize, v: usize) -> Option<&[f64]> {
        self.rows.get(&(u.min(v), u.max(v))).map(|r| r.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &[f64])> {
        self.rows.iter().map(|(&(u, v), r)| (u, v, r.as_slice()))
    }

    /// Parse `u v a1 ... ap` lines against a known graph. Every referenced
    /// pair must be an edge of `g`; edges of `g` without a row get a zero
    /// vector (counted and logged). The dimension `p` is fixed by the first
    /// data line.
    pub fn load(path: impl AsRef<Path>, g: &Graph) -> Result<EdgeAttributes> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ElaineError::io(path, e))?;
        let shown = path.display().to_string();

        let mut dim: Option<usize> = None;
        let mut rows: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = content.split_whitespace().collect();
            if tokens.len() < 3 {
                return Err(ElaineError::parse(
                    &shown,
                    line_no,
                    "expected 'u v a1 ... ap' with at least one attribute",
                ));
            }
            let u: usize = tokens[0].parse().map_err(|_| {
                ElaineError::parse(&shown, line_no, format!("bad node id {:?}", tokens[0]))
            })?;
            let v: usize = tokens[1].parse().map_err(|_| {
                ElaineError::parse(&shown, line_no, format!("bad node id {:?}", tokens[1]))
            })?;
            let p = tokens.len() - 2;
            match dim {
                None => dim = Some(p),
                Some(d) if d != p => {
                    return Err(ElaineError::parse(
                        &shown,
                        line_no,
                        format!("attribute arity {p} differs from earlier rows ({d})"),
                    ));
                }
                _ => {}
            }
            if u >= g.num_nodes() || v >= g.num_nodes() || !g.has_edge(u, v) {
                return Err(ElaineError::parse(
                    &shown,
                    line_no,
                    format!("({u}, {v}) is not an edge of the graph"),
                ));
            }
            let mut values = Vec::with_capacity(p);
            for t in &tokens[2..] {
                let x: f64 = t.parse().map_err(|_| {
                    ElaineError::parse(&shown, line_no, format!("bad attribute value {t:?}"))
                })?;
                if !x.is_finite() || !(0.0..=1.0).contains(&x) {
                    return Err(ElaineError::parse(
                        &shown,
                        line_no,
                        format!("attribute value {x} outside [0, 1]"),
                    ));
                }
                values.push(x);
            }
            let key = (u.min(v), u.max(v));
            if rows.insert(key, values).is_some() {
                return Err(ElaineError::parse(
                    &shown,
                    line_no,
                    format!("duplicate attribute row for edge ({u}, {v})"),
                ));
            }
        }

        let dim = dim
            .ok_or_else(|| ElaineError::Validation(format!("{shown}: no attribute rows found")))?;
        let mut ea = EdgeAttributes {
            dim,
            rows,
            missing_filled: 0,
        };
        ea.fill_missing(g);
        if ea.missing_filled > 0 {
            log::warn!(
                "{shown}: {} graph edges had no attribute row; filled with zeros",
                ea.missing_filled
            );
        }
        Ok(ea)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| ElaineError::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for (&(u, v), values) in &self.rows {
            let mut line = format!("{u}\t{v}");
            for x in values {
                line.push_str(&format!("\t{x}"));
            }
            writeln!(out, "{line}").map_err(|e| ElaineError::io(path, e))?;
        }
        Ok(())
    }

    /// Restrict to the edges of `g`, zero-filling any of `g`'s edges that have
    /// no attribute row. Used when training on a sub-graph of the original.
    pub fn subset_for(&self, g: &Graph) -> EdgeAttributes {
        let mut out = EdgeAttributes {
            dim: self.dim,
            rows: BTreeMap::new(),
            missing_filled: 0,
        };
        for &(u, v, _) in g.edges() {
            if let Some(r) = self.rows.get(&(u, v)) {
                out.rows.insert((u, v), r.clone());
            }
        }
        out.fill_missing(g);
        out
    }

    fn fill_missing(&mut self, g: &Graph) {
        for &(u, v, _) in g.edges() {
            if !self.rows.contains_key(&(u, v)) {
                self.rows.insert((u, v), vec![0.0; self.dim]);
                self.missing_filled += 1;
            }
        }
    }
}

/// Multi-label node annotations with dense label ids `0..num_labels`.
#[derive(Debug, Clone)]
pub struct NodeLabels {
    labels: Vec<BTreeSet<usize>>,
    num_labels: usize,
}

impl NodeLabels {
    pub fn new(labels: Vec<BTreeSet<usize>>) -> Self {
        let num_labels = labels
            .iter()
            .flat_map(|s| s.iter().copied())
            .max()
            .map_or(0, |m| m + 1);
        NodeLabels { labels, num_labels }
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn of(&self, u: usize) -> &BTreeSet<usize> {
        &self.labels[u]
    }

    pub fn has_label(&self, u: usize, label: usize) -> bool {
        self.labels[u].contains(&label)
    }

    /// Parse `u l1,l2,...` lines; nodes without a line carry no labels.
    pub fn load(path: impl AsRef<Path>, n: usize) -> Result<NodeLabels> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ElaineError::io(path, e))?;
        let shown = path.display().to_string();

        let mut labels: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = content.split_whitespace().collect();
            if tokens.len() != 2 {
                return Err(ElaineError::parse(
                    &shown,
                    line_no,
                    "expected 'u l1,l2,...'",
                ));
            }
            let u: usize = tokens[0].parse().map_err(|_| {
                ElaineError::parse(&shown, line_no, format!("bad node id {:?}", tokens[0]))
            })?;
            if u >= n {
                return Err(ElaineError::parse(
                    &shown,
                    line_no,
                    format!("node {u} outside 0..{n}"),
                ));
            }
            if !seen.insert(u) {
                return Err(ElaineError::parse(
                    &shown,
                    line_no,
                    format!("duplicate label row for node {u}"),
                ));
            }
            for part in tokens[1].split(',') {
                let l: usize = part.trim().parse().map_err(|_| {
                    ElaineError::parse(&shown, line_no, format!("bad label id {part:?}"))
                })?;
                labels[u].insert(l);
            }
        }
        Ok(NodeLabels::new(labels))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (u, set) in self.labels.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let joined: Vec<String> = set.iter().map(|l| l.to_string()).collect();
            out.push_str(&format!("{u}\t{}\n", joined.join(",")));
        }
        fs::write(path, out).map_err(|e| ElaineError::io(path, e))
    }
}

/// Configuration for the planted-topic stochastic block model.
#[derive(Debug, Clone)]
pub struct SbmConfig {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Edge-attribute dimension; one topic is reserved per block, so this
    /// must be at least `blocks`.
    pub edge_topics: usize,
    /// Blend factor in [0, 1]: 0 gives pure one-hot topic vectors on
    /// intra-block edges, 1 gives the uniform vector everywhere.
    pub attr_noise: f64,
    pub seed: u64,
}

/// Sample a stochastic block model with planted edge topics.
///
/// Nodes `b * nodes_per_block .. (b+1) * nodes_per_block` form block `b` and
/// are labeled with it. Intra-block pairs draw an edge with probability
/// `p_in`, inter-block pairs with `p_out`. An intra-block edge of block `b`
/// carries the attribute vector `(1-noise) * onehot(b) + noise * uniform`,
/// an inter-block edge the uniform vector `(1/p, ..., 1/p)`.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<(Graph, EdgeAttributes, NodeLabels)> {
    if cfg.blocks == 0 || cfg.nodes_per_block == 0 {
        return Err(ElaineError::Validation(
            "blocks and nodes_per_block must be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.p_out)
        || !(0.0..=1.0).contains(&cfg.p_in)
        || cfg.p_out >= cfg.p_in
    {
        return Err(ElaineError::Validation(format!(
            "block model needs 0 <= p_out < p_in <= 1, got p_in={}, p_out={}",
            cfg.p_in, cfg.p_out
        )));
    }
    if cfg.edge_topics < cfg.blocks {
        return Err(ElaineError::Validation(format!(
            "edge_topics ({}) must be at least the number of blocks ({})",
            cfg.edge_topics, cfg.blocks
        )));
    }
    if !(0.0..=1.0).contains(&cfg.attr_noise) {
        return Err(ElaineError::Validation(format!(
            "attr_noise must lie in [0, 1], got {}",
            cfg.attr_noise
        )));
    }

    let n = cfg.blocks * cfg.nodes_per_block;
    let p = cfg.edge_topics;
    let uniform = 1.0 / p as f64;
    let block_of = |u: usize| u / cfg.nodes_per_block;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut edges = Vec::new();
    let mut attrs = EdgeAttributes::new(p)?;
    for u in 0..n {
        for v in (u + 1)..n {
            let same = block_of(u) == block_of(v);
            let prob = if same { cfg.p_in } else { cfg.p_out };
            if rng.gen::<f64>() >= prob {
                continue;
            }
            edges.push((u, v, 1.0));
            let row = if same {
                let b = block_of(u);
                (0..p)
                    .map(|t| {
                        let onehot = if t == b { 1.0 } else { 0.0 };
                        (1.0 - cfg.attr_noise) * onehot + cfg.attr_noise * uniform
                    })
                    .collect()
            } else {
                vec![uniform; p]
            };
            attrs.insert(u, v, row)?;
        }
    }

    let graph = Graph::from_edges(n, edges)?;
    let labels = NodeLabels::new(
        (0..n)
            .map(|u| std::iter::once(block_of(u)).collect())
            .collect(),
    );
    Ok((graph, attrs, labels))
}
