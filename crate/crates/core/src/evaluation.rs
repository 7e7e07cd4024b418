//! Frozen-embedding inference and the cross-validated linear evaluation
//! protocol, including α-gated common/local combinations.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classifier::{accuracy, ClassifierConfig, LogisticRegression, Standardizer};
use crate::error::{GcfxError, Result};
use crate::graph_data::{make_folds_from_labels, DatasetSplit, Graph};
use crate::model::{DeepGcfx, Noise, PreparedGraph};
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub graph_id: usize,
    pub label: Option<i64>,
    pub z_c: Array1<f64>,
    /// `Σ_j z_l(j)`
    pub z_l_sum: Array1<f64>,
}

/// Per-node local factors of one graph, |V|×d.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub graph_id: usize,
    pub z_l: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Posterior means.
    Deterministic,
    /// One reparameterized sample per graph; graph `i` uses stream `i`.
    Stochastic { seed: u64 },
}

/// Embeds already-prepared graphs with an explicit model.
pub fn embed_prepared(
    model: &DeepGcfx,
    params: &ParamSet,
    graphs: &[PreparedGraph],
    mode: EmbedMode,
) -> Result<(Vec<EmbeddingRecord>, Vec<NodeEmbeddings>)> {
    let d = model.config.latent;
    let mut records = Vec::with_capacity(graphs.len());
    let mut nodes = Vec::with_capacity(graphs.len());
    for (i, g) in graphs.iter().enumerate() {
        let n = g.node_count();
        let noise = match mode {
            EmbedMode::Deterministic => Noise::zeros(n, d),
            EmbedMode::Stochastic { seed } => Noise::seeded(seed, i as u64, n, d),
        };
        let inf = model.infer(params, g, &noise)?;
        let z_l_sum = inf.z_l.sum_axis(Axis(0));
        if !inf.z_c.iter().chain(z_l_sum.iter()).all(|x| x.is_finite()) {
            return Err(GcfxError::numeric(
                "embedding",
                format!("graph {} has non-finite latents", g.graph_id),
            ));
        }
        records.push(EmbeddingRecord {
            graph_id: g.graph_id,
            label: g.label,
            z_c: inf.z_c,
            z_l_sum,
        });
        nodes.push(NodeEmbeddings {
            graph_id: g.graph_id,
            z_l: inf.z_l,
        });
    }
    Ok((records, nodes))
}

/// Featurizes raw graphs with the checkpoint's featurizer and embeds them.
pub fn embed_dataset_with_nodes(
    graphs: &[Graph],
    ckpt: &Checkpoint,
    mode: EmbedMode,
) -> Result<(Vec<EmbeddingRecord>, Vec<NodeEmbeddings>)> {
    let model = ckpt.build_model()?;
    if ckpt.featurizer.dim() != model.config.d_in {
        return Err(GcfxError::Config(format!(
            "featurizer width {} does not match model input width {}",
            ckpt.featurizer.dim(),
            model.config.d_in
        )));
    }
    let prepared: Vec<PreparedGraph> = ckpt
        .featurizer
        .apply_all(graphs)?
        .iter()
        .map(PreparedGraph::new)
        .collect();
    embed_prepared(&model, &ckpt.params, &prepared, mode)
}

pub fn embed_dataset(
    graphs: &[Graph],
    ckpt: &Checkpoint,
    mode: EmbedMode,
) -> Result<Vec<EmbeddingRecord>> {
    Ok(embed_dataset_with_nodes(graphs, ckpt, mode)?.0)
}

/// `α·z_c + (1−α)·z_l_sum`
pub fn combine_alpha(record: &EmbeddingRecord, alpha: f64) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GcfxError::Argument(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if record.z_c.len() != record.z_l_sum.len() {
        return Err(GcfxError::shape("z_c and z_l_sum widths differ"));
    }
    Ok(&record.z_c * alpha + &record.z_l_sum * (1.0 - alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub accuracy: f64,
    pub c: f64,
    pub alpha: f64,
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: Vec<FoldResult>,
    /// Folds whose training portion held a single class; excluded from the
    /// mean.
    pub invalid_folds: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation of the fold accuracies.
    pub std: f64,
    pub alpha_used: f64,
}

impl EvalReport {
    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }

    fn from_folds(folds: Vec<FoldResult>, invalid_folds: Vec<usize>, alpha_used: f64) -> Self {
        let n = folds.len().max(1) as f64;
        let mean = folds.iter().map(|f| f.accuracy).sum::<f64>() / n;
        let var = folds
            .iter()
            .map(|f| (f.accuracy - mean).powi(2))
            .sum::<f64>()
            / n;
        Self {
            folds,
            invalid_folds,
            mean,
            std: var.sqrt(),
            alpha_used,
        }
    }
}

fn stack(rows: &[Array1<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), d));
    for (mut o, r) in out.rows_mut().into_iter().zip(rows) {
        o.assign(r);
    }
    out
}

fn take_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn has_two_classes(y: &[i64]) -> bool {
    y.iter().any(|&l| l != y[0])
}

/// Standardizes on the training rows, fits, and scores on the test rows.
pub fn fit_and_score(
    x_train: &Array2<f64>,
    y_train: &[i64],
    x_test: &Array2<f64>,
    y_test: &[i64],
    c: f64,
    cfg: &ClassifierConfig,
) -> Result<f64> {
    let s = Standardizer::fit(x_train.view());
    let m = LogisticRegression::fit(
        s.apply(x_train.view()).view(),
        y_train,
        c,
        cfg.max_iter,
        cfg.tol,
    )?;
    Ok(accuracy(&m.predict(s.apply(x_test.view()).view()), y_test))
}

/// Inner cross-validation over the C grid on a training portion. Returns the
/// best C and its mean inner accuracy; ties go to the smaller C.
pub fn select_c(
    x: &Array2<f64>,
    y: &[i64],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    if cfg.c_grid.is_empty() {
        return Err(GcfxError::Argument("empty C grid".into()));
    }
    let k = cfg.inner_folds.min(y.len());
    if k < 2 {
        return Ok((cfg.c_grid[0], f64::NAN));
    }
    let labels: Vec<Option<i64>> = y.iter().map(|&l| Some(l)).collect();
    let split = make_folds_from_labels(&labels, k, seed)?;
    let folds: Vec<(Vec<usize>, Vec<usize>)> = (0..k)
        .map(|f| (split.train_indices(f), split.test_indices(f)))
        .filter(|(tr, te)| {
            !te.is_empty() && has_two_classes(&tr.iter().map(|&i| y[i]).collect::<Vec<_>>())
        })
        .collect();
    if folds.is_empty() {
        return Ok((1.0, f64::NAN));
    }
    let mut best = (cfg.c_grid[0], f64::NEG_INFINITY);
    let mut grid = cfg.c_grid.clone();
    grid.sort_by(f64::total_cmp);
    for &c in &grid {
        let mut acc = 0.0;
        for (tr, te) in &folds {
            let ytr: Vec<i64> = tr.iter().map(|&i| y[i]).collect();
            let yte: Vec<i64> = te.iter().map(|&i| y[i]).collect();
            acc += fit_and_score(&take_rows(x, tr), &ytr, &take_rows(x, te), &yte, c, cfg)?;
        }
        acc /= folds.len() as f64;
        if acc > best.1 {
            best = (c, acc);
        }
    }
    Ok(best)
}

fn labels_of(records: &[EmbeddingRecord]) -> Result<Vec<i64>> {
    records
        .iter()
        .map(|r| {
            r.label
                .ok_or_else(|| GcfxError::Argument(format!("graph {} has no label", r.graph_id)))
        })
        .collect()
}

fn features_at(records: &[EmbeddingRecord], alpha: f64) -> Result<Array2<f64>> {
    let rows = records
        .iter()
        .map(|r| combine_alpha(r, alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack(&rows))
}

fn check_split(n: usize, split: &DatasetSplit) -> Result<()> {
    if split.fold_assignments.len() != n {
        return Err(GcfxError::Argument(format!(
            "split covers {} items but {n} records were given",
            split.fold_assignments.len()
        )));
    }
    Ok(())
}

/// Outer k-fold evaluation of precomputed feature rows.
pub fn cross_validate_features(
    x: &Array2<f64>,
    y: &[i64],
    split: &DatasetSplit,
    cfg: &ClassifierConfig,
) -> Result<EvalReport> {
    cross_validate_candidates(&[(1.0, x.clone())], y, split, cfg)
}

/// For each outer fold, picks (α, C) by inner validation on the training
/// portion only, then scores the held-out fold.
fn cross_validate_candidates(
    candidates: &[(f64, Array2<f64>)],
    y: &[i64],
    split: &DatasetSplit,
    cfg: &ClassifierConfig,
) -> Result<EvalReport> {
    check_split(y.len(), split)?;
    let mut folds = Vec::new();
    let mut invalid = Vec::new();
    for f in 0..split.k {
        let tr = split.train_indices(f);
        let te = split.test_indices(f);
        let ytr: Vec<i64> = tr.iter().map(|&i| y[i]).collect();
        let yte: Vec<i64> = te.iter().map(|&i| y[i]).collect();
        if te.is_empty() || ytr.is_empty() || !has_two_classes(&ytr) {
            invalid.push(f);
            continue;
        }
        let inner_seed = cfg.seed.wrapping_add(f as u64);
        let mut best: Option<(f64, f64, f64, &Array2<f64>)> = None;
        for (alpha, x) in candidates {
            let (c, score) = select_c(&take_rows(x, &tr), &ytr, cfg, inner_seed)?;
            let better = match best {
                None => true,
                Some((a0, _, s, _)) => score > s || (score == s && *alpha > a0),
            };
            if better {
                best = Some((*alpha, c, score, x));
            }
        }
        let (alpha, c, _, x) = best.expect("at least one candidate");
        let acc = fit_and_score(&take_rows(x, &tr), &ytr, &take_rows(x, &te), &yte, c, cfg)?;
        folds.push(FoldResult {
            fold: f,
            accuracy: acc,
            c,
            alpha,
            test_size: te.len(),
        });
    }
    let alpha_used = modal_alpha(&folds);
    Ok(EvalReport::from_folds(folds, invalid, alpha_used))
}

/// Most frequently chosen α across folds; ties go to the larger value.
fn modal_alpha(folds: &[FoldResult]) -> f64 {
    let mut counts: Vec<(f64, usize)> = Vec::new();
    for f in folds {
        match counts.iter_mut().find(|(a, _)| *a == f.alpha) {
            Some(e) => e.1 += 1,
            None => counts.push((f.alpha, 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .map_or(f64::NAN, |(a, _)| a)
}

/// Cross-validated accuracy of a linear classifier on `α·z_c + (1−α)·z_l_sum`.
pub fn cross_validate(
    records: &[EmbeddingRecord],
    split: &DatasetSplit,
    cfg: &ClassifierConfig,
    alpha: f64,
) -> Result<EvalReport> {
    let y = labels_of(records)?;
    cross_validate_candidates(&[(alpha, features_at(records, alpha)?)], &y, split, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSearch {
    /// α chosen by nested validation (modal across outer folds).
    pub best_alpha: f64,
    /// Outer-fold accuracies with α selected on training portions only.
    pub report: EvalReport,
    /// Outer accuracy at every grid α.
    pub curve: Vec<AlphaPoint>,
    /// Best point of `curve`; selected on test folds, for comparison only.
    pub best_on_test: AlphaPoint,
}

pub fn default_alpha_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

pub fn alpha_grid_search(
    records: &[EmbeddingRecord],
    split: &DatasetSplit,
    grid: &[f64],
    cfg: &ClassifierConfig,
) -> Result<AlphaSearch> {
    if grid.is_empty() {
        return Err(GcfxError::Argument("alpha grid is empty".into()));
    }
    let y = labels_of(records)?;
    let candidates = grid
        .iter()
        .map(|&a| Ok((a, features_at(records, a)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = cross_validate_candidates(&candidates, &y, split, cfg)?;
    let mut curve = Vec::with_capacity(grid.len());
    for c in &candidates {
        let r = cross_validate_candidates(std::slice::from_ref(c), &y, split, cfg)?;
        curve.push(AlphaPoint {
            alpha: c.0,
            mean: r.mean,
            std: r.std,
        });
    }
    let best_on_test = *curve
        .iter()
        .max_by(|a, b| a.mean.total_cmp(&b.mean).then(a.alpha.total_cmp(&b.alpha)))
        .expect("non-empty grid");
    Ok(AlphaSearch {
        best_alpha: report.alpha_used,
        report,
        curve,
        best_on_test,
    })
}

/// `name  mean ± std` with accuracies in percent, optionally with the α in
/// brackets.
pub fn table_row(name: &str, report: &EvalReport, alpha: Option<f64>) -> String {
    let mut s = format!(
        "{name:<12} {:>6.2} ± {:.2}",
        100.0 * report.mean,
        100.0 * report.std
    );
    if let Some(a) = alpha {
        s.push_str(&format!(" ({a})"));
    }
    s
}

/// Writes `graph_id,label,z_c…,z_l_sum…` rows preceded by `#` comment lines.
pub fn write_embeddings_csv<W: Write>(
    out: W,
    records: &[EmbeddingRecord],
    comments: &str,
) -> Result<()> {
    let mut out = out;
    for line in comments.lines() {
        writeln!(out, "# {line}")?;
    }
    let d = records.first().map_or(0, |r| r.z_c.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["graph_id".to_string(), "label".to_string()];
    header.extend((0..d).map(|k| format!("z_c_{k}")));
    header.extend((0..d).map(|k| format!("z_l_sum_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![
            r.graph_id.to_string(),
            r.label.map_or(String::new(), |l| l.to_string()),
        ];
        row.extend(r.z_c.iter().chain(r.z_l_sum.iter()).map(|x| x.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings_csv<R: Read>(input: R) -> Result<Vec<EmbeddingRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(input);
    let width = r.headers().map_err(csv_err)?.len();
    if width < 2 || (width - 2) % 2 != 0 {
        return Err(GcfxError::Format(
            "embedding header must be graph_id,label then 2·d columns".into(),
        ));
    }
    let d = (width - 2) / 2;
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let line = i + 2;
        let fail = |msg: String| GcfxError::Validation {
            file: "embeddings".into(),
            line,
            msg,
        };
        let graph_id = row[0]
            .trim()
            .parse()
            .map_err(|_| fail(format!("bad graph_id {:?}", &row[0])))?;
        let label = match row[1].trim() {
            "" => None,
            s => Some(s.parse().map_err(|_| fail(format!("bad label {s:?}")))?),
        };
        let vals = (2..width)
            .map(|k| {
                row[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| fail(format!("bad value {:?}", &row[k])))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRecord {
            graph_id,
            label,
            z_c: Array1::from(vals[..d].to_vec()),
            z_l_sum: Array1::from(vals[d..].to_vec()),
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> GcfxError {
    GcfxError::Format(format!("csv: {e}"))
}
