//! Synthetic graphs with known common (graph-wise) and local (node-wise)
//! generative factors.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::error::{GcfxError, Result};
use crate::evaluation::{cross_validate, cross_validate_features, EmbeddingRecord};
use crate::graph_data::{make_folds_from_labels, Graph};

/// Per-class structure of the common factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CommonParams {
    /// Class `k` draws every edge independently with probability `p[k]`.
    EdgeDensity { p: Vec<f64> },
    /// Class 0 is built from triangles, class 1 from stars; both receive
    /// extra Bernoulli(`background_p`) edges.
    Motif { background_p: f64 },
}

/// Generator template: the common factor is the class, the local factor a
/// per-node categorical label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub common: CommonParams,
    /// Probabilities of the node categories; node features are their one-hot
    /// encoding.
    pub local_probs: Vec<f64>,
}

impl FactorSpec {
    /// Two density classes, `p = [0.2, 0.6]`, three uniform node categories.
    pub fn density_benchmark() -> Self {
        Self::density(vec![0.2, 0.6])
    }

    pub fn density(p: Vec<f64>) -> Self {
        Self {
            common: CommonParams::EdgeDensity { p },
            local_probs: vec![1.0 / 3.0; 3],
        }
    }

    pub fn motif_benchmark() -> Self {
        Self {
            common: CommonParams::Motif { background_p: 0.05 },
            local_probs: vec![1.0 / 3.0; 3],
        }
    }

    pub fn classes(&self) -> usize {
        match &self.common {
            CommonParams::EdgeDensity { p } => p.len(),
            CommonParams::Motif { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        match &self.common {
            CommonParams::EdgeDensity { p } => {
                if p.len() < 2 {
                    return Err(GcfxError::Config("need at least two common classes".into()));
                }
                if !p.iter().all(|&x| prob(x)) {
                    return Err(GcfxError::Config(
                        "edge probabilities must lie in [0, 1]".into(),
                    ));
                }
            }
            CommonParams::Motif { background_p } => {
                if !prob(*background_p) {
                    return Err(GcfxError::Config(
                        "background probability must lie in [0, 1]".into(),
                    ));
                }
            }
        }
        if self.local_probs.is_empty()
            || self.local_probs.iter().any(|&w| !(w >= 0.0))
            || self.local_probs.iter().sum::<f64>() <= 0.0
        {
            return Err(GcfxError::Config(
                "local category weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(())
    }
}

/// Ground truth behind one generated graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub common_class: usize,
    pub node_categories: Vec<usize>,
}

fn motif_edges<R: Rng>(class: usize, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.shuffle(rng);
    let mut edges = Vec::new();
    if class == 0 {
        let groups: Vec<&[usize]> = nodes.chunks(3).collect();
        for g in &groups {
            for i in 0..g.len() {
                for j in (i + 1)..g.len() {
                    edges.push((g[i], g[j]));
                }
            }
        }
        for w in groups.windows(2) {
            edges.push((w[0][0], w[1][0]));
        }
    } else {
        let hubs = n.div_ceil(4).max(1);
        for w in nodes[..hubs].windows(2) {
            edges.push((w[0], w[1]));
        }
        for &v in &nodes[hubs..] {
            edges.push((nodes[rng.random_range(0..hubs)], v));
        }
    }
    edges
}

/// Draws `n_graphs` graphs: class uniform over `0..K`, |V| uniform in
/// `node_range` (inclusive), edges from the class structure, node labels from
/// the local categorical. The graph label is the class.
pub fn generate(
    spec: &FactorSpec,
    n_graphs: usize,
    node_range: (usize, usize),
    seed: u64,
) -> Result<Vec<(Graph, GroundTruth)>> {
    spec.validate()?;
    let (lo, hi) = node_range;
    if lo < 2 || lo > hi {
        return Err(GcfxError::Config(format!(
            "node range [{lo}, {hi}] must satisfy 2 ≤ min ≤ max"
        )));
    }
    let categories =
        WeightedIndex::new(&spec.local_probs).map_err(|e| GcfxError::Config(e.to_string()))?;
    let k = spec.classes();
    (0..n_graphs)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let class = rng.random_range(0..k);
            let n = rng.random_range(lo..=hi);
            let mut edges = match &spec.common {
                CommonParams::EdgeDensity { .. } => Vec::new(),
                CommonParams::Motif { .. } => motif_edges(class, n, &mut rng),
            };
            let p = match &spec.common {
                CommonParams::EdgeDensity { p } => p[class],
                CommonParams::Motif { background_p } => *background_p,
            };
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.random_bool(p) {
                        edges.push((u, v));
                    }
                }
            }
            let node_categories: Vec<usize> = (0..n).map(|_| categories.sample(&mut rng)).collect();
            let graph = Graph::new(i, n, &edges)?
                .with_label(Some(class as i64))
                .with_node_labels(node_categories.iter().map(|&c| c as i64).collect())?;
            Ok((
                graph,
                GroundTruth {
                    common_class: class,
                    node_categories,
                },
            ))
        })
        .collect()
}

/// k-fold linear-probe accuracy on `z_c` alone.
pub fn probe_recovery(
    records: &[EmbeddingRecord],
    folds: usize,
    cfg: &ClassifierConfig,
) -> Result<f64> {
    let labels: Vec<Option<i64>> = records.iter().map(|r| r.label).collect();
    let split = make_folds_from_labels(&labels, folds, cfg.seed)?;
    Ok(cross_validate(records, &split, cfg, 1.0)?.mean)
}

/// k-fold probe accuracy of the hand-coded observed edge density.
pub fn density_ceiling(graphs: &[Graph], folds: usize, cfg: &ClassifierConfig) -> Result<f64> {
    let labels: Vec<Option<i64>> = graphs.iter().map(|g| g.label).collect();
    let y = labels
        .iter()
        .map(|l| l.ok_or_else(|| GcfxError::Argument("unlabeled graph".into())))
        .collect::<Result<Vec<_>>>()?;
    let x = Array2::from_shape_fn((graphs.len(), 1), |(i, _)| graphs[i].density());
    let split = make_folds_from_labels(&labels, folds, cfg.seed)?;
    Ok(cross_validate_features(&x, &y, &split, cfg)?.mean)
}
