//! `gcfx`: train, embed, evaluate and analyze deepGCFX graph models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gcfx::analysis::{
    correlation_matrix, dataset_correlation_traces, latent_matrices, mapd_csv, mapd_report,
    mapd_svg, matrix_csv, matrix_svg, reconstruction_auc, trace_csv, trace_svg, write_artifact,
    CorrelationMode, CorrelationTrace,
};
use gcfx::checkpoint::Checkpoint;
use gcfx::classifier::ClassifierConfig;
use gcfx::decoders::RegMode;
use gcfx::evaluation::{
    alpha_grid_search, cross_validate, default_alpha_grid, embed_dataset_with_nodes,
    read_embeddings_csv, table_row, write_embeddings_csv, AlphaSearch, EmbedMode, EmbeddingRecord,
    EvalReport,
};
use gcfx::graph_data::{
    make_folds_from_labels, parse_tu_dataset, split_dataset_path, write_tu_dataset, FeatureMode,
    Graph,
};
use gcfx::model::PreparedGraph;
use gcfx::synthetic::{generate, CommonParams, FactorSpec};
use gcfx::trainer::{small_graph_gradient_check, train, TrainConfig};
use gcfx::GcfxError;

type Result<T> = anyhow::Result<T>;

/// Tags library errors with the module that raised them.
trait InModule<T> {
    fn module(self, name: &str) -> Result<T>;
}

impl<T> InModule<T> for gcfx::Result<T> {
    fn module(self, name: &str) -> Result<T> {
        self.map_err(|e: GcfxError| anyhow!("[{name}] {e}"))
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "gcfx",
    version,
    about = "Graph-wise common latent factor extraction"
)]
struct Cli {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a TU dataset and write a checkpoint.
    Train(TrainArgs),
    /// Write graph embeddings (z_c and summed z_l) as CSV.
    Embed(EmbedArgs),
    /// Cross-validated linear evaluation of graph embeddings.
    EvalGraph(EvalArgs),
    /// Correlation traces, MAPD, correlation matrices and reconstruction AUC.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic TU dataset with known common and local factors.
    SynthGen(SynthArgs),
    /// Compare analytic and finite-difference gradients on a small graph.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    /// Dataset directory `<root>/<NAME>` holding `NAME_A.txt` etc.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long, visible_alias = "out")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    accum_iters: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    dec_hidden: Option<usize>,
    #[arg(long)]
    d_dec: Option<usize>,
    /// Train through hard masks instead of the sigmoid relaxation.
    #[arg(long)]
    hard_masks: bool,
    #[arg(long)]
    soft_mask_tau: Option<f64>,
    /// `conditional` or `uniform`.
    #[arg(long)]
    reg_mode: Option<String>,
    /// Fixed edge weight in the reconstruction loss (default: per-graph balance).
    #[arg(long)]
    pos_weight: Option<f64>,
    /// `node_label_onehot` or `degree_onehot`.
    #[arg(long)]
    feature_mode: Option<String>,
    #[arg(long)]
    degree_cap: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sample latents instead of using posterior means.
    #[arg(long)]
    stochastic: bool,
    /// Also write per-node z_l rows to this CSV.
    #[arg(long)]
    nodes_out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct EvalArgs {
    /// Embedding CSV written by `embed`; alternative to `--ckpt` + `--dataset`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Also evaluate `α·z_c + (1−α)·Σ z_l` at this α.
    #[arg(long)]
    alpha: Option<f64>,
    /// Sweep α over a grid with nested selection.
    #[arg(long)]
    alpha_sweep: bool,
    /// Comma-separated α grid for the sweep.
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    #[arg(long)]
    folds: Option<usize>,
    /// Write the full report as TOML.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Correlation of z_c with local quantities against ACCUM iterations.
    #[arg(long)]
    trace: bool,
    /// MAPD of patch-wise common and local parts.
    #[arg(long)]
    mapd: bool,
    /// Dimension-wise correlation matrix between latents.
    #[arg(long)]
    corrmatrix: bool,
    /// ROC AUC of reconstructed edges.
    #[arg(long)]
    auc: bool,
    /// `deepgcfx` or `split_half_baseline`.
    #[arg(long)]
    mode: Option<String>,
    /// Last ACCUM iteration of the trace (default: the model's).
    #[arg(long)]
    m_max: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct SynthArgs {
    /// Number of common-factor classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Comma-separated edge probability per class.
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<f64>>,
    /// Triangle-versus-star motif classes instead of edge densities.
    #[arg(long)]
    motif: bool,
    #[arg(long)]
    graphs: Option<usize>,
    #[arg(long)]
    min_nodes: Option<usize>,
    #[arg(long)]
    max_nodes: Option<usize>,
    /// Output dataset directory `<root>/<NAME>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct GradcheckArgs {
    #[arg(long)]
    epsilon: Option<f64>,
    /// Largest accepted relative error.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EmbedSection {
    out: Option<PathBuf>,
    stochastic: bool,
    nodes_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSection {
    embeddings: Option<PathBuf>,
    alpha: Option<f64>,
    alpha_sweep: bool,
    alpha_grid: Vec<f64>,
    folds: usize,
    out: Option<PathBuf>,
    classifier: ClassifierConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            embeddings: None,
            alpha: None,
            alpha_sweep: false,
            alpha_grid: default_alpha_grid(),
            folds: 10,
            out: None,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AnalyzeSection {
    trace: bool,
    mapd: bool,
    corrmatrix: bool,
    auc: bool,
    mode: CorrelationMode,
    m_max: Option<usize>,
    out: PathBuf,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            trace: false,
            mapd: false,
            corrmatrix: false,
            auc: false,
            mode: CorrelationMode::Deepgcfx,
            m_max: None,
            out: PathBuf::from("analysis"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthSection {
    classes: usize,
    p: Option<Vec<f64>>,
    motif: bool,
    graphs: usize,
    min_nodes: usize,
    max_nodes: usize,
    out: Option<PathBuf>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            classes: 2,
            p: None,
            motif: false,
            graphs: 500,
            min_nodes: 10,
            max_nodes: 20,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckSection {
    epsilon: f64,
    tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            tolerance: 1e-3,
        }
    }
}

/// Everything a command needs; serialized into every artifact it writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    command: String,
    seed: u64,
    threads: usize,
    dataset: Option<PathBuf>,
    ckpt: PathBuf,
    train: TrainConfig,
    embed: EmbedSection,
    eval: EvalSection,
    analyze: AnalyzeSection,
    synth: SynthSection,
    gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            threads: 1,
            dataset: None,
            ckpt: PathBuf::from("model.gcfx"),
            train: TrainConfig::default(),
            embed: EmbedSection::default(),
            eval: EvalSection::default(),
            analyze: AnalyzeSection::default(),
            synth: SynthSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("[cli] cannot read config {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| anyhow!("[cli] configuration error in {}: {e}", path.display()))
    }

    fn provenance(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| anyhow!("[cli] cannot serialize run config: {e}"))
    }

    fn dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| anyhow!("[cli] configuration error: --dataset is required"))
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_flag<T: std::str::FromStr<Err = GcfxError>>(
    value: Option<String>,
    module: &str,
) -> Result<Option<T>> {
    value.map(|s| s.parse::<T>()).transpose().module(module)
}

/// Merges flags over the config file over defaults. The global seed and
/// thread count are copied into every section that uses them.
fn resolve(cli: Cli) -> Result<(RunConfig, Command)> {
    let mut run = RunConfig::load(cli.config.as_deref())?;
    set(&mut run.seed, cli.seed);
    set(&mut run.threads, cli.threads);
    let mut command = cli.command;
    match &mut command {
        Command::Train(a) => {
            run.command = "train".into();
            set(&mut run.dataset, a.dataset.take().map(Some));
            set(&mut run.ckpt, a.ckpt.take());
            let t = &mut run.train;
            set(&mut t.epochs, a.epochs);
            set(&mut t.batch_size, a.batch_size);
            set(&mut t.learning_rate, a.learning_rate);
            set(&mut t.beta, a.beta);
            set(&mut t.gamma, a.gamma);
            set(&mut t.accum_iters, a.accum_iters);
            set(&mut t.hidden, a.hidden);
            set(&mut t.layers, a.layers);
            set(&mut t.latent, a.latent);
            set(&mut t.dec_hidden, a.dec_hidden);
            set(&mut t.d_dec, a.d_dec);
            if a.hard_masks {
                t.soft_masks = false;
            }
            set(&mut t.soft_mask_tau, a.soft_mask_tau);
            set(
                &mut t.reg_mode,
                parse_flag::<RegMode>(a.reg_mode.take(), "decoders")?,
            );
            set(&mut t.pos_weight, a.pos_weight.map(Some));
            set(
                &mut t.feature_mode,
                parse_flag::<FeatureMode>(a.feature_mode.take(), "graph_data")?,
            );
            set(&mut t.degree_cap, a.degree_cap.map(Some));
        }
        Command::Embed(a) => {
            run.command = "embed".into();
            set(&mut run.dataset, a.dataset.take().map(Some));
            set(&mut run.ckpt, a.ckpt.take());
            set(&mut run.embed.out, a.out.take().map(Some));
            set(&mut run.embed.nodes_out, a.nodes_out.take().map(Some));
            if a.stochastic {
                run.embed.stochastic = true;
            }
        }
        Command::EvalGraph(a) => {
            run.command = "eval-graph".into();
            set(&mut run.dataset, a.dataset.take().map(Some));
            set(&mut run.ckpt, a.ckpt.take());
            let e = &mut run.eval;
            set(&mut e.embeddings, a.embeddings.take().map(Some));
            set(&mut e.alpha, a.alpha.map(Some));
            if a.alpha_sweep || a.alpha_grid.is_some() {
                e.alpha_sweep = true;
            }
            set(&mut e.alpha_grid, a.alpha_grid.take());
            set(&mut e.folds, a.folds);
            set(&mut e.out, a.out.take().map(Some));
        }
        Command::Analyze(a) => {
            run.command = "analyze".into();
            set(&mut run.dataset, a.dataset.take().map(Some));
            set(&mut run.ckpt, a.ckpt.take());
            let s = &mut run.analyze;
            s.trace |= a.trace;
            s.mapd |= a.mapd;
            s.corrmatrix |= a.corrmatrix;
            s.auc |= a.auc;
            set(
                &mut s.mode,
                parse_flag::<CorrelationMode>(a.mode.take(), "analysis")?,
            );
            set(&mut s.m_max, a.m_max.map(Some));
            set(&mut s.out, a.out.take());
        }
        Command::SynthGen(a) => {
            run.command = "synth-gen".into();
            let s = &mut run.synth;
            set(&mut s.classes, a.classes);
            set(&mut s.p, a.p.take().map(Some));
            s.motif |= a.motif;
            set(&mut s.graphs, a.graphs);
            set(&mut s.min_nodes, a.min_nodes);
            set(&mut s.max_nodes, a.max_nodes);
            set(&mut s.out, a.out.take().map(Some));
        }
        Command::Gradcheck(a) => {
            run.command = "gradcheck".into();
            set(&mut run.gradcheck.epsilon, a.epsilon);
            set(&mut run.gradcheck.tolerance, a.tolerance);
        }
    }
    run.train.seed = run.seed;
    run.train.threads = run.threads;
    run.eval.classifier.seed = run.seed;
    if run.threads == 0 {
        bail!("[cli] configuration error: --threads must be at least 1");
    }
    Ok((run, command))
}

fn load_dataset(path: &Path) -> Result<Vec<Graph>> {
    let (root, name) = split_dataset_path(path).module("graph_data")?;
    parse_tu_dataset(&root, &name).module("graph_data")
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).module("checkpoint")
}

fn cmd_train(run: &RunConfig) -> Result<()> {
    let graphs = load_dataset(run.dataset()?)?;
    let outcome = train(&graphs, &run.train).module("trainer")?;
    let mut ckpt = outcome.checkpoint;
    let provenance = run.provenance()?;
    ckpt.provenance = Some(provenance.clone());
    ckpt.save(&run.ckpt).module("checkpoint")?;

    let mut csv = comment_block(&provenance);
    csv.push_str("epoch,total,agg,c_prior,l_prior,reg\n");
    for h in &ckpt.history {
        let p = h.parts;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h.epoch, h.total, p.agg, p.c_prior, p.l_prior, p.reg
        ));
    }
    let loss_path = run.ckpt.with_extension("loss.csv");
    fs::write(&loss_path, csv)
        .with_context(|| format!("[cli] cannot write {}", loss_path.display()))?;

    match ckpt.history.last() {
        Some(h) => println!(
            "trained {} epochs on {} graphs; final loss {:.6}",
            ckpt.epoch,
            graphs.len(),
            h.total
        ),
        None => println!(
            "wrote initial parameters ({} graphs, 0 epochs)",
            graphs.len()
        ),
    }
    println!("checkpoint {}", run.ckpt.display());
    if let Some(e) = outcome.aborted {
        bail!("[trainer] {e}; checkpoint holds the last finite parameters");
    }
    Ok(())
}

fn comment_block(text: &str) -> String {
    text.lines().map(|l| format!("# {l}\n")).collect()
}

fn embed_mode(run: &RunConfig) -> EmbedMode {
    if run.embed.stochastic {
        EmbedMode::Stochastic { seed: run.seed }
    } else {
        EmbedMode::Deterministic
    }
}

fn cmd_embed(run: &RunConfig) -> Result<()> {
    let graphs = load_dataset(run.dataset()?)?;
    let ckpt = load_checkpoint(&run.ckpt)?;
    let (records, nodes) =
        embed_dataset_with_nodes(&graphs, &ckpt, embed_mode(run)).module("evaluation")?;
    let provenance = run.provenance()?;
    match &run.embed.out {
        Some(path) => {
            let f = fs::File::create(path)
                .with_context(|| format!("[cli] cannot create {}", path.display()))?;
            write_embeddings_csv(f, &records, &provenance).module("evaluation")?;
        }
        None => write_embeddings_csv(std::io::stdout().lock(), &records, &provenance)
            .module("evaluation")?,
    }
    if let Some(path) = &run.embed.nodes_out {
        let d = nodes.first().map_or(0, |n| n.z_l.ncols());
        let mut s = comment_block(&provenance);
        s.push_str("graph_id,node");
        for k in 0..d {
            s.push_str(&format!(",z_l_{k}"));
        }
        s.push('\n');
        for n in &nodes {
            for (v, row) in n.z_l.rows().into_iter().enumerate() {
                s.push_str(&format!("{},{v}", n.graph_id));
                for x in row {
                    s.push_str(&format!(",{x}"));
                }
                s.push('\n');
            }
        }
        fs::write(path, s).with_context(|| format!("[cli] cannot write {}", path.display()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    run: &'a RunConfig,
    z_c: &'a EvalReport,
    fixed_alpha: Option<&'a EvalReport>,
    alpha_search: Option<&'a AlphaSearch>,
}

fn eval_records(run: &RunConfig) -> Result<Vec<EmbeddingRecord>> {
    if let Some(path) = &run.eval.embeddings {
        let f = fs::File::open(path)
            .with_context(|| format!("[cli] cannot open {}", path.display()))?;
        return read_embeddings_csv(f).module("evaluation");
    }
    let graphs = load_dataset(run.dataset()?)?;
    let ckpt = load_checkpoint(&run.ckpt)?;
    Ok(embed_dataset_with_nodes(&graphs, &ckpt, embed_mode(run))
        .module("evaluation")?
        .0)
}

fn cmd_eval(run: &RunConfig) -> Result<()> {
    let e = &run.eval;
    let records = eval_records(run)?;
    let labels: Vec<Option<i64>> = records.iter().map(|r| r.label).collect();
    let split = make_folds_from_labels(&labels, e.folds, run.seed).module("graph_data")?;
    let base = cross_validate(&records, &split, &e.classifier, 1.0).module("evaluation")?;
    println!("{}", table_row("deepGCFX", &base, None));
    let fixed = e
        .alpha
        .map(|a| cross_validate(&records, &split, &e.classifier, a))
        .transpose()
        .module("evaluation")?;
    if let (Some(r), Some(a)) = (&fixed, e.alpha) {
        println!("{}", table_row("deepGCFX++", r, Some(a)));
    }
    let search = if e.alpha_sweep {
        let s = alpha_grid_search(&records, &split, &e.alpha_grid, &e.classifier)
            .module("evaluation")?;
        println!("alpha,mean,std");
        for p in &s.curve {
            println!("{:.2},{:.4},{:.4}", p.alpha, p.mean, p.std);
        }
        println!("{}", table_row("deepGCFX++", &s.report, Some(s.best_alpha)));
        println!(
            "best on test folds: alpha {} at {:.2} ± {:.2}",
            s.best_on_test.alpha,
            100.0 * s.best_on_test.mean,
            100.0 * s.best_on_test.std
        );
        Some(s)
    } else {
        None
    };
    if let Some(path) = &e.out {
        let out = EvalOutput {
            run,
            z_c: &base,
            fixed_alpha: fixed.as_ref(),
            alpha_search: search.as_ref(),
        };
        let text =
            toml::to_string(&out).map_err(|err| anyhow!("[cli] cannot serialize report: {err}"))?;
        fs::write(path, text).with_context(|| format!("[cli] cannot write {}", path.display()))?;
    }
    Ok(())
}

#[derive(Serialize, Default)]
struct AnalyzeSummary {
    graphs: usize,
    trace_sample_graph: Option<usize>,
    trace_mean_first: Option<f64>,
    trace_mean_last: Option<f64>,
    mapd_common: Option<f64>,
    mapd_local: Option<f64>,
    fraction_common_below_local: Option<f64>,
    corr_matrix_mean: Option<f64>,
    reconstruction_auc: Option<f64>,
}

fn cmd_analyze(run: &RunConfig) -> Result<()> {
    let a = &run.analyze;
    let all = !(a.trace || a.mapd || a.corrmatrix || a.auc);
    let graphs = load_dataset(run.dataset()?)?;
    let ckpt = load_checkpoint(&run.ckpt)?;
    let model = ckpt.build_model().module("checkpoint")?;
    let prepared: Vec<PreparedGraph> = ckpt
        .featurizer
        .apply_all(&graphs)
        .module("graph_data")?
        .iter()
        .map(PreparedGraph::new)
        .collect();
    if prepared.is_empty() {
        bail!("[analysis] dataset holds no graphs");
    }
    let provenance = run.provenance()?;
    let artifact = |name: &str, text: &str| write_artifact(&a.out, name, text).module("analysis");
    let mut summary = AnalyzeSummary {
        graphs: prepared.len(),
        ..Default::default()
    };

    if all || a.trace {
        let m_max = a.m_max.unwrap_or(model.config.accum_iters);
        let traces = dataset_correlation_traces(&model, &ckpt.params, &prepared, m_max, run.seed)
            .module("analysis")?;
        let sample = (run.seed % traces.len() as u64) as usize;
        let mean = CorrelationTrace::mean(&traces).module("analysis")?;
        let title = format!("graph {}", prepared[sample].graph_id);
        artifact("trace_sample.csv", &trace_csv(&traces[sample], &provenance))?;
        artifact(
            "trace_sample.svg",
            &trace_svg(&traces[sample], &title, &provenance).module("analysis")?,
        )?;
        artifact("trace_mean.csv", &trace_csv(&mean, &provenance))?;
        artifact(
            "trace_mean.svg",
            &trace_svg(&mean, "dataset mean", &provenance).module("analysis")?,
        )?;
        summary.trace_sample_graph = Some(prepared[sample].graph_id);
        summary.trace_mean_first = mean.common_vs_local.first().copied();
        summary.trace_mean_last = mean.common_vs_local.last().copied();
        println!(
            "mean |spearman(z_c, z_l)| by iteration: {}",
            mean.common_vs_local
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    if all || a.mapd {
        let r = mapd_report(&model, &ckpt.params, &prepared).module("analysis")?;
        artifact("mapd.csv", &mapd_csv(&r, &provenance))?;
        artifact(
            "mapd.svg",
            &mapd_svg(&r, "MAPD", &provenance).module("analysis")?,
        )?;
        println!(
            "mapd common {:.4} local {:.4}; common below local on {:.1}% of graphs",
            r.mapd_common,
            r.mapd_local,
            100.0 * r.fraction_common_below_local()
        );
        summary.mapd_common = Some(r.mapd_common);
        summary.mapd_local = Some(r.mapd_local);
        summary.fraction_common_below_local = Some(r.fraction_common_below_local());
    }
    if all || a.corrmatrix {
        let (records, _) = gcfx::evaluation::embed_prepared(
            &model,
            &ckpt.params,
            &prepared,
            EmbedMode::Deterministic,
        )
        .module("evaluation")?;
        let (c, l) = latent_matrices(&records);
        let m = match a.mode {
            CorrelationMode::Deepgcfx => correlation_matrix(c.view(), Some(l.view()), a.mode),
            CorrelationMode::SplitHalfBaseline => correlation_matrix(c.view(), None, a.mode),
        }
        .module("analysis")?;
        artifact("corrmatrix.csv", &matrix_csv(&m, &provenance))?;
        artifact(
            "corrmatrix.svg",
            &matrix_svg(&m, "|spearman| between latent dimensions", &provenance)
                .module("analysis")?,
        )?;
        println!("mean |spearman| across latent dimensions {:.4}", m.mean());
        summary.corr_matrix_mean = Some(m.mean());
    }
    if all || a.auc {
        let auc = reconstruction_auc(&model, &ckpt.params, &prepared).module("analysis")?;
        println!("reconstruction ROC AUC {auc:.4}");
        summary.reconstruction_auc = Some(auc);
    }

    #[derive(Serialize)]
    struct Out<'a> {
        run: &'a RunConfig,
        summary: &'a AnalyzeSummary,
    }
    let text = toml::to_string(&Out {
        run,
        summary: &summary,
    })
    .map_err(|e| anyhow!("[cli] cannot serialize summary: {e}"))?;
    artifact("summary.toml", &text)?;
    println!("artifacts in {}", a.out.display());
    Ok(())
}

fn synth_spec(s: &SynthSection) -> Result<FactorSpec> {
    if s.motif {
        if s.classes != 2 {
            bail!("[synthetic] configuration error: motif benchmark has exactly two classes");
        }
        return Ok(FactorSpec::motif_benchmark());
    }
    let p = match &s.p {
        Some(p) => {
            if p.len() != s.classes {
                bail!(
                    "[synthetic] configuration error: {} probabilities for {} classes",
                    p.len(),
                    s.classes
                );
            }
            p.clone()
        }
        // evenly spaced between 0.2 and 0.6
        None if s.classes >= 2 => (0..s.classes)
            .map(|k| 0.2 + 0.4 * k as f64 / (s.classes - 1) as f64)
            .collect(),
        None => bail!("[synthetic] configuration error: need at least two classes"),
    };
    Ok(FactorSpec {
        common: CommonParams::EdgeDensity { p },
        ..FactorSpec::density_benchmark()
    })
}

fn cmd_synth(run: &RunConfig) -> Result<()> {
    let s = &run.synth;
    let out = s
        .out
        .as_deref()
        .ok_or_else(|| anyhow!("[cli] configuration error: --out is required"))?;
    let spec = synth_spec(s)?;
    let graphs: Vec<Graph> = generate(&spec, s.graphs, (s.min_nodes, s.max_nodes), run.seed)
        .module("synthetic")?
        .into_iter()
        .map(|(g, _)| g)
        .collect();
    let (root, name) = split_dataset_path(out).module("graph_data")?;
    write_tu_dataset(&graphs, &root, &name).module("graph_data")?;
    let config_path = out.join(format!("{name}_run_config.toml"));
    fs::write(&config_path, run.provenance()?)
        .with_context(|| format!("[cli] cannot write {}", config_path.display()))?;
    println!("wrote {} graphs to {}", graphs.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(run: &RunConfig) -> Result<()> {
    let g = &run.gradcheck;
    let r = small_graph_gradient_check(run.seed, &run.train.objective(), g.epsilon)
        .module("trainer")?;
    println!(
        "checked {} parameters: max relative error {:.3e} (strict {:.3e}), max absolute error {:.3e}",
        r.checked, r.max_rel_error, r.max_strict_rel_error, r.max_abs_error
    );
    if let Some((name, k)) = &r.worst {
        println!("worst entry {name}[{k}]");
    }
    if !(r.max_strict_rel_error < g.tolerance) {
        bail!(
            "[trainer] gradient check failed: relative error {:.3e} exceeds {:.1e}",
            r.max_strict_rel_error,
            g.tolerance
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (run, command) = resolve(cli)?;
    match command {
        Command::Train(_) => cmd_train(&run),
        Command::Embed(_) => cmd_embed(&run),
        Command::EvalGraph(_) => cmd_eval(&run),
        Command::Analyze(_) => cmd_analyze(&run),
        Command::SynthGen(_) => cmd_synth(&run),
        Command::Gradcheck(_) => cmd_gradcheck(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
