//! Graph datasets: TU-format parsing and writing, featurization, batching
//! and fold assignment.
//!
//! TU files are 1-indexed; everything inside the crate is 0-indexed and the
//! conversion happens only in [`parse_tu_dataset`] and [`write_tu_dataset`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GcfxError, Result};
use crate::sparse::NormAdj;

/// One input sample: nodes, undirected edges, node features and an optional
/// graph label.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub graph_id: usize,
    node_count: usize,
    /// Undirected edges stored once as `(u, v)` with `u < v`, sorted.
    edges: Vec<(usize, usize)>,
    pub node_features: Array2<f64>,
    pub node_labels: Option<Vec<i64>>,
    pub label: Option<i64>,
}

impl Graph {
    /// Builds a graph, dropping self-loops and duplicate or mirrored edges.
    pub fn new(graph_id: usize, node_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if node_count == 0 {
            return Err(GcfxError::Argument(format!(
                "graph {graph_id} has no nodes"
            )));
        }
        let mut set = BTreeSet::new();
        for &(u, v) in edges {
            if u >= node_count || v >= node_count {
                return Err(GcfxError::Argument(format!(
                    "edge ({u}, {v}) out of range for {node_count} nodes"
                )));
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        Ok(Self {
            graph_id,
            node_count,
            edges: set.into_iter().collect(),
            node_features: Array2::zeros((node_count, 0)),
            node_labels: None,
            label: None,
        })
    }

    pub fn with_label(mut self, label: Option<i64>) -> Self {
        self.label = label;
        self
    }

    pub fn with_node_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.node_count {
            return Err(GcfxError::shape(format!(
                "{} node labels for {} nodes",
                labels.len(),
                self.node_count
            )));
        }
        self.node_labels = Some(labels);
        Ok(self)
    }

    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.node_count {
            return Err(GcfxError::shape(format!(
                "feature matrix has {} rows for {} nodes",
                features.nrows(),
                self.node_count
            )));
        }
        self.node_features = features;
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.ncols()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Symmetric 0/1 adjacency with a zero diagonal.
    pub fn adjacency(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.node_count, self.node_count));
        for &(u, v) in &self.edges {
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
        a
    }

    pub fn norm_adj(&self) -> NormAdj {
        NormAdj::from_edges(self.node_count, &self.edges)
    }

    /// Edge density over unordered node pairs; 0 for single-node graphs.
    pub fn density(&self) -> f64 {
        let n = self.node_count as f64;
        if self.node_count < 2 {
            0.0
        } else {
            self.edges.len() as f64 / (n * (n - 1.0) / 2.0)
        }
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.node_count {
            return Err(GcfxError::shape("permutation length mismatch"));
        }
        let edges: Vec<_> = self
            .edges
            .iter()
            .map(|&(u, v)| (perm[u], perm[v]))
            .collect();
        let mut g = Graph::new(self.graph_id, self.node_count, &edges)?;
        let mut feats = Array2::zeros(self.node_features.dim());
        for (old, &new) in perm.iter().enumerate() {
            feats.row_mut(new).assign(&self.node_features.row(old));
        }
        g.node_features = feats;
        g.node_labels = self.node_labels.as_ref().map(|l| {
            let mut out = vec![0; l.len()];
            for (old, &new) in perm.iter().enumerate() {
                out[new] = l[old];
            }
            out
        });
        g.label = self.label;
        Ok(g)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| GcfxError::Format(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn parse_int_lines(path: &Path) -> Result<Vec<(usize, i64)>> {
    let file = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.into_iter().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v = t.parse::<i64>().map_err(|_| GcfxError::Validation {
            file: file.clone(),
            line: i + 1,
            msg: format!("expected an integer, found {t:?}"),
        })?;
        out.push((i + 1, v));
    }
    Ok(out)
}

/// Resolves `<root>/<name>/<name>_<suffix>.txt`.
fn tu_file(root: &Path, name: &str, suffix: &str) -> PathBuf {
    root.join(name).join(format!("{name}_{suffix}.txt"))
}

/// Splits a `--dataset <root>/<NAME>` argument into root and name.
pub fn split_dataset_path(path: &Path) -> Result<(PathBuf, String)> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| GcfxError::Config(format!("bad dataset path {}", path.display())))?
        .to_string();
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((root, name))
}

/// Reads a TU benchmark dataset from `<root>/<name>/`.
pub fn parse_tu_dataset(root: &Path, name: &str) -> Result<Vec<Graph>> {
    let a_path = tu_file(root, name, "A");
    let ind_path = tu_file(root, name, "graph_indicator");
    for p in [&a_path, &ind_path] {
        if !p.is_file() {
            return Err(GcfxError::Format(format!(
                "missing mandatory file {}",
                p.display()
            )));
        }
    }

    let indicator = parse_int_lines(&ind_path)?;
    let ind_file = ind_path.display().to_string();
    // node (0-indexed global) -> graph (0-indexed), with contiguity checks
    let mut node_graph = Vec::with_capacity(indicator.len());
    let mut graph_start = Vec::new();
    let mut prev: i64 = 0;
    for &(line, gid) in &indicator {
        if gid == prev + 1 {
            graph_start.push(node_graph.len());
            prev = gid;
        } else if gid != prev {
            return Err(GcfxError::Validation {
                file: ind_file.clone(),
                line,
                msg: format!("graph id {gid} breaks contiguity after {prev}"),
            });
        }
        node_graph.push((gid - 1) as usize);
    }
    let n_graphs = graph_start.len();
    let total_nodes = node_graph.len();
    let node_count = |g: usize| {
        let end = if g + 1 < n_graphs {
            graph_start[g + 1]
        } else {
            total_nodes
        };
        end - graph_start[g]
    };

    let a_file = a_path.display().to_string();
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_graphs];
    for (i, line) in read_lines(&a_path)?.into_iter().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let bad = |msg: String| GcfxError::Validation {
            file: a_file.clone(),
            line: i + 1,
            msg,
        };
        let mut parts = t.split(',').map(str::trim);
        let (u, v) = match (parts.next(), parts.next(), parts.next()) {
            (Some(u), Some(v), None) => (u, v),
            _ => return Err(bad(format!("expected \"i, j\", found {t:?}"))),
        };
        let u: usize = u.parse().map_err(|_| bad(format!("bad node id {u:?}")))?;
        let v: usize = v.parse().map_err(|_| bad(format!("bad node id {v:?}")))?;
        if u == 0 || v == 0 || u > total_nodes || v > total_nodes {
            return Err(bad(format!(
                "edge ({u}, {v}) references an unknown node (have {total_nodes})"
            )));
        }
        let (gu, gv) = (node_graph[u - 1], node_graph[v - 1]);
        if gu != gv {
            return Err(bad(format!("edge ({u}, {v}) crosses graphs {gu} and {gv}")));
        }
        let off = graph_start[gu];
        edges[gu].push((u - 1 - off, v - 1 - off));
    }

    let graph_labels = {
        let p = tu_file(root, name, "graph_labels");
        if p.is_file() {
            let labels = parse_int_lines(&p)?;
            if labels.len() != n_graphs {
                return Err(GcfxError::Validation {
                    file: p.display().to_string(),
                    line: labels.len(),
                    msg: format!("{} labels for {n_graphs} graphs", labels.len()),
                });
            }
            Some(labels.into_iter().map(|(_, l)| l).collect::<Vec<_>>())
        } else {
            None
        }
    };
    let node_labels = {
        let p = tu_file(root, name, "node_labels");
        if p.is_file() {
            let labels = parse_int_lines(&p)?;
            if labels.len() != total_nodes {
                return Err(GcfxError::Validation {
                    file: p.display().to_string(),
                    line: labels.len(),
                    msg: format!("{} node labels for {total_nodes} nodes", labels.len()),
                });
            }
            Some(labels.into_iter().map(|(_, l)| l).collect::<Vec<_>>())
        } else {
            None
        }
    };

    let mut graphs = Vec::with_capacity(n_graphs);
    for (g, e) in edges.into_iter().enumerate() {
        let n = node_count(g);
        let mut graph = Graph::new(g, n, &e)?;
        graph.label = graph_labels.as_ref().map(|l| l[g]);
        if let Some(nl) = &node_labels {
            let s = graph_start[g];
            graph.node_labels = Some(nl[s..s + n].to_vec());
        }
        graphs.push(graph);
    }
    Ok(graphs)
}

/// Writes graphs to `<root>/<name>/` in TU format, listing both directions of
/// every edge. Labels are written only when present on every graph/node.
pub fn write_tu_dataset(graphs: &[Graph], root: &Path, name: &str) -> Result<()> {
    let dir = root.join(name);
    fs::create_dir_all(&dir)?;
    let mut a = String::new();
    let mut ind = String::new();
    let mut offset = 0;
    for (g, graph) in graphs.iter().enumerate() {
        for _ in 0..graph.node_count {
            ind.push_str(&format!("{}\n", g + 1));
        }
        for &(u, v) in &graph.edges {
            a.push_str(&format!("{}, {}\n", u + 1 + offset, v + 1 + offset));
            a.push_str(&format!("{}, {}\n", v + 1 + offset, u + 1 + offset));
        }
        offset += graph.node_count;
    }
    fs::write(tu_file(root, name, "A"), a)?;
    fs::write(tu_file(root, name, "graph_indicator"), ind)?;

    if graphs.iter().all(|g| g.label.is_some()) && !graphs.is_empty() {
        let s: String = graphs
            .iter()
            .map(|g| format!("{}\n", g.label.unwrap()))
            .collect();
        fs::write(tu_file(root, name, "graph_labels"), s)?;
    }
    if graphs.iter().all(|g| g.node_labels.is_some()) && !graphs.is_empty() {
        let s: String = graphs
            .iter()
            .flat_map(|g| g.node_labels.as_ref().unwrap().iter())
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(tu_file(root, name, "node_labels"), s)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    NodeLabelOnehot,
    DegreeOnehot,
}

impl std::str::FromStr for FeatureMode {
    type Err = GcfxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node_label_onehot" | "node-label" | "labels" => Ok(FeatureMode::NodeLabelOnehot),
            "degree_onehot" | "degree" => Ok(FeatureMode::DegreeOnehot),
            other => Err(GcfxError::Config(format!("unknown feature mode {other:?}"))),
        }
    }
}

/// A fitted featurization that can be replayed on new graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Featurizer {
    /// Sorted vocabulary of node label values.
    NodeLabels { vocab: Vec<i64> },
    /// Degrees at or above `cap` share the last bucket.
    Degree { cap: usize },
}

impl Featurizer {
    /// Fits the featurizer; `degree_cap` defaults to the dataset max degree.
    pub fn fit(graphs: &[Graph], mode: FeatureMode, degree_cap: Option<usize>) -> Result<Self> {
        match mode {
            FeatureMode::NodeLabelOnehot => {
                let mut vocab = BTreeSet::new();
                for g in graphs {
                    let labels = g.node_labels.as_ref().ok_or_else(|| {
                        GcfxError::Config(format!(
                            "node_label_onehot needs node labels; graph {} has none",
                            g.graph_id
                        ))
                    })?;
                    vocab.extend(labels.iter().copied());
                }
                Ok(Featurizer::NodeLabels {
                    vocab: vocab.into_iter().collect(),
                })
            }
            FeatureMode::DegreeOnehot => {
                let cap = degree_cap
                    .unwrap_or_else(|| graphs.iter().flat_map(|g| g.degrees()).max().unwrap_or(0));
                Ok(Featurizer::Degree { cap })
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Featurizer::NodeLabels { vocab } => vocab.len(),
            Featurizer::Degree { cap } => cap + 1,
        }
    }

    pub fn apply(&self, graph: &Graph) -> Result<Graph> {
        let n = graph.node_count;
        let mut feats = Array2::zeros((n, self.dim()));
        match self {
            Featurizer::NodeLabels { vocab } => {
                let labels = graph.node_labels.as_ref().ok_or_else(|| {
                    GcfxError::Config(format!("graph {} has no node labels", graph.graph_id))
                })?;
                for (v, l) in labels.iter().enumerate() {
                    let idx = vocab.binary_search(l).map_err(|_| {
                        GcfxError::Config(format!("node label {l} not in the fitted vocabulary"))
                    })?;
                    feats[[v, idx]] = 1.0;
                }
            }
            Featurizer::Degree { cap } => {
                for (v, d) in graph.degrees().into_iter().enumerate() {
                    feats[[v, d.min(*cap)]] = 1.0;
                }
            }
        }
        graph.clone().with_features(feats)
    }

    pub fn apply_all(&self, graphs: &[Graph]) -> Result<Vec<Graph>> {
        graphs.iter().map(|g| self.apply(g)).collect()
    }
}

/// Fits and applies a featurization in one step.
pub fn featurize(
    graphs: &[Graph],
    mode: FeatureMode,
    degree_cap: Option<usize>,
) -> Result<Vec<Graph>> {
    Featurizer::fit(graphs, mode, degree_cap)?.apply_all(graphs)
}

/// Block-diagonal minibatch of graphs.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    graphs: Vec<Graph>,
    node_offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: Vec<Graph>) -> Result<Self> {
        if graphs.is_empty() {
            return Err(GcfxError::Argument("empty batch".into()));
        }
        let d = graphs[0].feature_dim();
        if graphs.iter().any(|g| g.feature_dim() != d) {
            return Err(GcfxError::shape(
                "graphs in a batch must share feature width",
            ));
        }
        let mut node_offsets = vec![0];
        for g in &graphs {
            node_offsets.push(node_offsets.last().unwrap() + g.node_count);
        }
        Ok(Self {
            graphs,
            node_offsets,
        })
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    /// Prefix sums; graph `r` owns global rows `offsets[r]..offsets[r+1]`.
    pub fn node_offsets(&self) -> &[usize] {
        &self.node_offsets
    }

    pub fn total_nodes(&self) -> usize {
        *self.node_offsets.last().unwrap()
    }

    pub fn global_edges(&self) -> Vec<(usize, usize)> {
        self.graphs
            .iter()
            .zip(&self.node_offsets)
            .flat_map(|(g, &off)| g.edges.iter().map(move |&(u, v)| (u + off, v + off)))
            .collect()
    }

    pub fn features(&self) -> Array2<f64> {
        let views: Vec<_> = self.graphs.iter().map(|g| g.node_features.view()).collect();
        concatenate(Axis(0), &views).expect("feature widths checked in new")
    }

    pub fn norm_adj(&self) -> NormAdj {
        NormAdj::from_edges(self.total_nodes(), &self.global_edges())
    }

    pub fn adjacency(&self) -> Array2<f64> {
        let n = self.total_nodes();
        let mut a = Array2::zeros((n, n));
        for (u, v) in self.global_edges() {
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
        a
    }

    pub fn unbatch(self) -> Vec<Graph> {
        self.graphs
    }
}

/// Fold assignment for k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fold_assignments: Vec<usize>,
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    /// Set when stratification was requested but not possible.
    pub warning: Option<String>,
}

impl DatasetSplit {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_assignments.len())
            .filter(|&i| self.fold_assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_assignments.len())
            .filter(|&i| self.fold_assignments[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Assigns `labels.len()` items to `k` folds, stratified when every class has
/// at least `k` members.
pub fn make_folds_from_labels(labels: &[Option<i64>], k: usize, seed: u64) -> Result<DatasetSplit> {
    let n = labels.len();
    if k < 2 || k > n {
        return Err(GcfxError::Argument(format!(
            "need 2 <= k <= {n}, got k = {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warning = None;
    let mut classes: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    let all_labeled = labels.iter().all(Option::is_some);
    if all_labeled {
        for (i, l) in labels.iter().enumerate() {
            classes.entry(l.unwrap()).or_default().push(i);
        }
        if let Some((c, m)) = classes.iter().find(|(_, m)| m.len() < k) {
            warning = Some(format!(
                "class {c} has {} members (< k = {k}); folds are not stratified",
                m.len()
            ));
        }
    } else {
        warning = Some("unlabeled graphs present; folds are not stratified".into());
    }
    let stratified = all_labeled && warning.is_none();

    let order: Vec<usize> = if stratified {
        let mut order = Vec::with_capacity(n);
        for members in classes.values_mut() {
            members.shuffle(&mut rng);
            order.extend_from_slice(members);
        }
        order
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    };
    // dealing the class-grouped order round-robin keeps both class balance
    // and fold sizes within one of each other
    let mut fold_assignments = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_assignments[i] = pos % k;
    }
    Ok(DatasetSplit {
        fold_assignments,
        k,
        seed,
        stratified,
        warning,
    })
}

pub fn make_folds(graphs: &[Graph], k: usize, seed: u64) -> Result<DatasetSplit> {
    let labels: Vec<_> = graphs.iter().map(|g| g.label).collect();
    make_folds_from_labels(&labels, k, seed)
}
