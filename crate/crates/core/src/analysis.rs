//! Factor-quality diagnostics: rank correlations between common and local
//! factors over accumulation iterations, inter-patch MAPD, correlation
//! matrices and reconstruction AUC.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GcfxError, Result};
use crate::evaluation::EmbeddingRecord;
use crate::model::{DeepGcfx, Inference, Noise, PreparedGraph};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// Set when either input is constant; `rho` is then 0.
    pub degenerate: bool,
}

/// Ranks starting at 1; tied values share the average of their ranks.
pub fn average_ranks(x: ArrayView1<f64>) -> Array1<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = Array1::zeros(x.len());
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(GcfxError::Argument(format!(
            "spearman needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(GcfxError::Argument(
            "spearman needs at least two observations".into(),
        ));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(GcfxError::numeric("spearman", "non-finite input"));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.sum() / n;
    let my = ry.sum() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(ry.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Spearman {
            rho: 0.0,
            degenerate: true,
        });
    }
    Ok(Spearman {
        rho: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Mean absolute pairwise difference between the rows of `vectors`:
/// `(2/(P(P−1))) Σ_{u<v} (1/d) Σ_k |v_u[k] − v_v[k]|`.
pub fn mapd(vectors: ArrayView2<f64>) -> Result<f64> {
    let p = vectors.nrows();
    if p < 2 {
        return Err(GcfxError::Argument(format!(
            "mapd needs at least two vectors, got {p}"
        )));
    }
    let d = vectors.ncols();
    if d == 0 {
        return Err(GcfxError::Argument("mapd needs non-empty vectors".into()));
    }
    let mut total = 0.0;
    for u in 0..p {
        for v in (u + 1)..p {
            let s: f64 = vectors
                .row(u)
                .iter()
                .zip(vectors.row(v).iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            total += s / d as f64;
        }
    }
    Ok(2.0 * total / (p * (p - 1)) as f64)
}

/// Mean over rows of `|spearman(vector, row)|` and the number of degenerate
/// rows.
pub fn mean_abs_spearman_rows(
    vector: ArrayView1<f64>,
    rows: ArrayView2<f64>,
) -> Result<(f64, usize)> {
    if rows.ncols() != vector.len() {
        return Err(GcfxError::shape(format!(
            "cross-entity correlation needs equal widths, got {} and {}",
            vector.len(),
            rows.ncols()
        )));
    }
    if rows.nrows() == 0 {
        return Err(GcfxError::Argument("no rows to correlate against".into()));
    }
    let mut sum = 0.0;
    let mut degenerate = 0;
    for r in rows.rows() {
        let s = spearman(vector, r)?;
        sum += s.rho.abs();
        degenerate += usize::from(s.degenerate);
    }
    Ok((sum / rows.nrows() as f64, degenerate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTrace {
    pub iterations: Vec<usize>,
    /// `|corr(z_c, z_l)|` averaged over nodes.
    pub common_vs_local: Vec<f64>,
    /// `|corr(z_c, patch-wise common parts)|` averaged over nodes.
    pub common_vs_patch_common: Vec<f64>,
    /// `|corr(z_c, aggregation decoder codes)|` averaged over nodes.
    pub common_vs_decoder: Vec<f64>,
    /// Number of degenerate (constant-input) correlations encountered.
    pub degenerate: usize,
}

impl CorrelationTrace {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    /// Pointwise mean of traces with identical iteration grids.
    pub fn mean(traces: &[CorrelationTrace]) -> Result<CorrelationTrace> {
        let first = traces
            .first()
            .ok_or_else(|| GcfxError::Argument("no traces to average".into()))?;
        if traces.iter().any(|t| t.iterations != first.iterations) {
            return Err(GcfxError::Argument(
                "traces cover different iterations".into(),
            ));
        }
        let n = traces.len() as f64;
        let avg = |f: fn(&CorrelationTrace) -> &Vec<f64>| -> Vec<f64> {
            (0..first.len())
                .map(|i| traces.iter().map(|t| f(t)[i]).sum::<f64>() / n)
                .collect()
        };
        Ok(CorrelationTrace {
            iterations: first.iterations.clone(),
            common_vs_local: avg(|t| &t.common_vs_local),
            common_vs_patch_common: avg(|t| &t.common_vs_patch_common),
            common_vs_decoder: avg(|t| &t.common_vs_decoder),
            degenerate: traces.iter().map(|t| t.degenerate).sum(),
        })
    }
}

/// Posterior-mean inference truncated after `iters` accumulation steps;
/// `iters = 0` uses random filtering seeded with `seed`.
pub fn infer_at(
    model: &DeepGcfx,
    params: &ParamSet,
    graph: &PreparedGraph,
    iters: usize,
    seed: u64,
) -> Result<Inference> {
    let noise = Noise::zeros(graph.node_count(), model.config.latent);
    if iters == 0 {
        model.infer_random(params, graph, &noise, seed)
    } else {
        model.with_accum_iters(iters).infer(params, graph, &noise)
    }
}

/// Correlation trace for iterations `0..=m_max` on one graph.
pub fn correlation_vs_iterations(
    model: &DeepGcfx,
    params: &ParamSet,
    graph: &PreparedGraph,
    m_max: usize,
    seed: u64,
) -> Result<CorrelationTrace> {
    let mut t = CorrelationTrace {
        iterations: Vec::with_capacity(m_max + 1),
        common_vs_local: Vec::new(),
        common_vs_patch_common: Vec::new(),
        common_vs_decoder: Vec::new(),
        degenerate: 0,
    };
    for i in 0..=m_max {
        let inf = infer_at(model, params, graph, i, seed)?;
        let (a, da) = mean_abs_spearman_rows(inf.z_c.view(), inf.z_l.view())?;
        let (b, db) = mean_abs_spearman_rows(inf.z_c.view(), inf.patch_common.view())?;
        let (c, dc) = mean_abs_spearman_rows(inf.z_c.view(), inf.agg_codes.view())?;
        t.iterations.push(i);
        t.common_vs_local.push(a);
        t.common_vs_patch_common.push(b);
        t.common_vs_decoder.push(c);
        t.degenerate += da + db + dc;
    }
    Ok(t)
}

/// Per-graph traces for every graph; graph `i` uses random-filtering seed
/// `seed + i`. Average them with [`CorrelationTrace::mean`].
pub fn dataset_correlation_traces(
    model: &DeepGcfx,
    params: &ParamSet,
    graphs: &[PreparedGraph],
    m_max: usize,
    seed: u64,
) -> Result<Vec<CorrelationTrace>> {
    graphs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            correlation_vs_iterations(model, params, g, m_max, seed.wrapping_add(i as u64))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphMapd {
    pub graph_id: usize,
    pub common: f64,
    pub local: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapdReport {
    pub mapd_common: f64,
    pub mapd_local: f64,
    pub per_graph: Vec<GraphMapd>,
    /// Graphs with a single node, for which MAPD is undefined.
    pub skipped: usize,
}

impl MapdReport {
    /// Share of graphs whose common parts are closer together than their
    /// local parts.
    pub fn fraction_common_below_local(&self) -> f64 {
        if self.per_graph.is_empty() {
            return 0.0;
        }
        self.per_graph.iter().filter(|g| g.common < g.local).count() as f64
            / self.per_graph.len() as f64
    }
}

/// MAPD over the patch-wise common and local parts after the final
/// accumulation step, per graph and as dataset means.
pub fn mapd_report(
    model: &DeepGcfx,
    params: &ParamSet,
    graphs: &[PreparedGraph],
) -> Result<MapdReport> {
    let mut per_graph = Vec::new();
    let mut skipped = 0;
    for g in graphs {
        if g.node_count() < 2 {
            skipped += 1;
            continue;
        }
        let inf = model.infer(
            params,
            g,
            &Noise::zeros(g.node_count(), model.config.latent),
        )?;
        per_graph.push(GraphMapd {
            graph_id: g.graph_id,
            common: mapd(inf.patch_common.view())?,
            local: mapd(inf.h_l.view())?,
        });
    }
    let n = per_graph.len().max(1) as f64;
    Ok(MapdReport {
        mapd_common: per_graph.iter().map(|g| g.common).sum::<f64>() / n,
        mapd_local: per_graph.iter().map(|g| g.local).sum::<f64>() / n,
        per_graph,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// Common dimensions against local dimensions.
    Deepgcfx,
    /// A single latent split into its first and second halves.
    SplitHalfBaseline,
}

impl std::str::FromStr for CorrelationMode {
    type Err = GcfxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deepgcfx" => Ok(Self::Deepgcfx),
            "split_half_baseline" | "split-half" => Ok(Self::SplitHalfBaseline),
            other => Err(GcfxError::Argument(format!(
                "unknown correlation mode {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    /// `values[[i, j]] = |spearman(a[:, i], b[:, j])|` over samples.
    pub values: Array2<f64>,
    pub degenerate: usize,
}

impl CorrelationMatrix {
    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }
}

/// Absolute rank correlations between dimensions, each dimension taken as a
/// sample across graphs (rows). In split-half mode `z_l` must be `None` and
/// the columns of `z_c` are split into halves.
pub fn correlation_matrix(
    z_c: ArrayView2<f64>,
    z_l: Option<ArrayView2<f64>>,
    mode: CorrelationMode,
) -> Result<CorrelationMatrix> {
    let (a, b) = match (mode, z_l) {
        (CorrelationMode::Deepgcfx, Some(l)) => {
            if l.nrows() != z_c.nrows() {
                return Err(GcfxError::shape(
                    "common and local latents need one row per graph",
                ));
            }
            (z_c, l)
        }
        (CorrelationMode::Deepgcfx, None) => {
            return Err(GcfxError::Argument(
                "deepgcfx mode needs local latents".into(),
            ));
        }
        (CorrelationMode::SplitHalfBaseline, None) => {
            let d = z_c.ncols();
            if d < 2 || d % 2 != 0 {
                return Err(GcfxError::shape(format!(
                    "cannot split a latent of width {d} into halves"
                )));
            }
            (
                z_c.slice_move(ndarray::s![.., ..d / 2]),
                z_c.slice_move(ndarray::s![.., d / 2..]),
            )
        }
        (CorrelationMode::SplitHalfBaseline, Some(_)) => {
            return Err(GcfxError::Argument(
                "split-half mode takes a single latent".into(),
            ));
        }
    };
    let mut values = Array2::zeros((a.ncols(), b.ncols()));
    let mut degenerate = 0;
    for i in 0..a.ncols() {
        for j in 0..b.ncols() {
            let s = spearman(a.column(i), b.column(j))?;
            values[[i, j]] = s.rho.abs();
            degenerate += usize::from(s.degenerate);
        }
    }
    Ok(CorrelationMatrix { values, degenerate })
}

/// Stacks `z_c` and `z_l_sum` of each record into two sample matrices.
pub fn latent_matrices(records: &[EmbeddingRecord]) -> (Array2<f64>, Array2<f64>) {
    let d = records.first().map_or(0, |r| r.z_c.len());
    let mut c = Array2::zeros((records.len(), d));
    let mut l = Array2::zeros((records.len(), d));
    for (i, r) in records.iter().enumerate() {
        c.row_mut(i).assign(&r.z_c);
        l.row_mut(i).assign(&r.z_l_sum);
    }
    (c, l)
}

/// Area under the ROC curve via the rank-sum statistic; ties count half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(GcfxError::Argument("one label per score required".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(GcfxError::Argument(
            "ROC AUC needs both positives and negatives".into(),
        ));
    }
    let ranks = average_ranks(ArrayView1::from(scores));
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Pooled ROC AUC of aggregation-decoder edge probabilities against the true
/// adjacency over all unordered node pairs.
pub fn reconstruction_auc(
    model: &DeepGcfx,
    params: &ParamSet,
    graphs: &[PreparedGraph],
) -> Result<f64> {
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for g in graphs {
        let inf = model.infer(
            params,
            g,
            &Noise::zeros(g.node_count(), model.config.latent),
        )?;
        let n = g.node_count();
        for u in 0..n {
            for v in (u + 1)..n {
                scores.push(inf.agg_probs[[u, v]]);
                truth.push(g.target[[u, v]] > 0.5);
            }
        }
    }
    roc_auc(&scores, &truth)
}

fn comment_lines(comments: &str) -> String {
    comments.lines().map(|l| format!("# {l}\n")).collect()
}

pub fn trace_csv(trace: &CorrelationTrace, comments: &str) -> String {
    let mut s = comment_lines(comments);
    s.push_str("iteration,common_vs_local,common_vs_patch_common,common_vs_decoder\n");
    for i in 0..trace.len() {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            trace.iterations[i],
            trace.common_vs_local[i],
            trace.common_vs_patch_common[i],
            trace.common_vs_decoder[i]
        );
    }
    s
}

pub fn matrix_csv(m: &CorrelationMatrix, comments: &str) -> String {
    let mut s = comment_lines(comments);
    for row in m.values.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn mapd_csv(r: &MapdReport, comments: &str) -> String {
    let mut s = comment_lines(comments);
    let _ = writeln!(s, "# skipped_single_node = {}", r.skipped);
    let _ = writeln!(s, "# mapd_common = {}", r.mapd_common);
    let _ = writeln!(s, "# mapd_local = {}", r.mapd_local);
    s.push_str("graph_id,mapd_common,mapd_local\n");
    for g in &r.per_graph {
        let _ = writeln!(s, "{},{},{}", g.graph_id, g.common, g.local);
    }
    s
}

fn plot_err<E: std::fmt::Display>(e: E) -> GcfxError {
    GcfxError::Format(format!("plot rendering: {e}"))
}

/// Prepends `comments` as an XML comment after the SVG prolog.
fn with_provenance(svg: String, comments: &str) -> String {
    if comments.is_empty() {
        return svg;
    }
    let note = format!("<!--\n{}\n-->\n", comments.replace("--", "- -"));
    match svg.find("?>") {
        Some(i) => format!("{}\n{}{}", &svg[..i + 2], note, &svg[i + 2..]),
        None => format!("{note}{svg}"),
    }
}

pub fn trace_svg(trace: &CorrelationTrace, title: &str, comments: &str) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let x_max = trace.iterations.last().copied().unwrap_or(0).max(1) as f64;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0.0..x_max, 0.0..1.0)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("ACCUM iterations")
            .y_desc("|Spearman R|")
            .draw()
            .map_err(plot_err)?;
        let series: [(&str, &Vec<f64>, RGBColor); 3] = [
            ("z_c vs z_l", &trace.common_vs_local, RED),
            ("z_c vs patch common", &trace.common_vs_patch_common, BLUE),
            ("z_c vs D_agg codes", &trace.common_vs_decoder, GREEN),
        ];
        for (name, ys, color) in series {
            let pts: Vec<(f64, f64)> = trace
                .iterations
                .iter()
                .map(|&i| i as f64)
                .zip(ys.iter().copied())
                .collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(name)
                .legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
                });
            chart
                .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(with_provenance(svg, comments))
}

pub fn matrix_svg(m: &CorrelationMatrix, title: &str, comments: &str) -> Result<String> {
    let (rows, cols) = m.values.dim();
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (560, 560)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(36)
            .build_cartesian_2d(0..cols, 0..rows)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_mesh()
            .x_desc("local dimension")
            .y_desc("common dimension")
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(m.values.indexed_iter().map(|((i, j), &v)| {
                let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))) as u8;
                Rectangle::new(
                    [(j, i), (j + 1, i + 1)],
                    RGBColor(255, shade, shade).filled(),
                )
            }))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(with_provenance(svg, comments))
}

pub fn mapd_svg(r: &MapdReport, title: &str, comments: &str) -> Result<String> {
    let hi = r
        .per_graph
        .iter()
        .flat_map(|g| [g.common, g.local])
        .fold(0.0f64, f64::max)
        .max(1e-12)
        * 1.05;
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (520, 520)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(52)
            .build_cartesian_2d(0.0..hi, 0.0..hi)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("MAPD common")
            .y_desc("MAPD local")
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(vec![(0.0, 0.0), (hi, hi)], BLACK.mix(0.4)))
            .map_err(plot_err)?;
        chart
            .draw_series(
                r.per_graph
                    .iter()
                    .map(|g| Circle::new((g.common, g.local), 3, BLUE.mix(0.6).filled())),
            )
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(with_provenance(svg, comments))
}

/// Writes `text` to `dir/name`, creating `dir` if needed.
pub fn write_artifact(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}
