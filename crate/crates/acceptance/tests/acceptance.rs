//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.
//!
//! The MUTAG criteria read the TU files from `$GCFX_MUTAG_DIR` (the `MUTAG/`
//! directory itself) or `data/MUTAG` at the workspace root.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use gcfx::analysis::{
    dataset_correlation_traces, mapd_report, reconstruction_auc, spearman, CorrelationTrace,
};
use gcfx::checkpoint::Checkpoint;
use gcfx::classifier::ClassifierConfig;
use gcfx::decoders::reconstruction_loss;
use gcfx::evaluation::{
    alpha_grid_search, combine_alpha, cross_validate, default_alpha_grid, embed_dataset, EmbedMode,
    EmbeddingRecord,
};
use gcfx::graph_data::{
    featurize, make_folds, make_folds_from_labels, parse_tu_dataset, split_dataset_path,
    write_tu_dataset, FeatureMode, Featurizer, Graph,
};
use gcfx::latent::{kl_to_standard_normal, GaussianPosterior};
use gcfx::model::{DeepGcfx, ModelConfig, Noise, PreparedGraph};
use gcfx::synthetic::{density_ceiling, generate, probe_recovery, FactorSpec};
use gcfx::trainer::{small_graph_gradient_check, train, train_featurized, TrainConfig};
use ndarray::{array, Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MUTAG_SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn run(
    id: usize,
    name: &str,
    limit: Duration,
    f: impl FnOnce() -> Result<Verdict, String>,
) -> bool {
    let t = Instant::now();
    let v = f().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
    let elapsed = t.elapsed();
    let in_time = elapsed <= limit;
    let pass = v.pass && in_time;
    println!(
        "criterion {id} [{name}] {}: {}; {:.2} s (limit {} s{})",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", exceeded" }
    );
    pass
}

fn e(err: gcfx::GcfxError) -> String {
    err.to_string()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn analytic_suite() -> Result<Verdict, String> {
    let mut failed = Vec::new();
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            failed.push(name.to_string());
        }
    };

    expect(
        "kl at prior",
        close(kl_to_standard_normal(&GaussianPosterior::standard(5)), 0.0),
    );
    let p = GaussianPosterior {
        mu: array![1.0],
        log_var: array![0.0],
    };
    expect("kl mu=1 d=1", close(kl_to_standard_normal(&p), 0.5));

    let x = array![1.0, 2.0, 3.0, 4.0, 5.0];
    let rho = |y: Array1<f64>| spearman(x.view(), y.view()).map(|s| s.rho).map_err(e);
    expect(
        "spearman +1",
        close(rho(array![2.0, 4.0, 8.0, 16.0, 32.0])?, 1.0),
    );
    expect(
        "spearman -1",
        close(rho(array![5.0, 4.0, 3.0, 2.0, 1.0])?, -1.0),
    );
    expect(
        "spearman hand case",
        close(rho(array![1.0, 3.0, 2.0, 5.0, 4.0])?, 0.8),
    );

    let (model, params) = DeepGcfx::init(ModelConfig::new(4), 1).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let n = rng.random_range(1..12);
        let h = Array2::from_shape_fn((n, 32), |_| rng.random_range(-2.0..2.0));
        let q = Array1::from_shape_fn(32, |_| rng.random_range(-2.0..2.0));
        let delta = model.accum.similarity_scores(&params, &h, &q).map_err(e)?;
        let masks = model.accum.compute_masks(&params, &h, &delta).map_err(e)?;
        expect(
            "m_c + m_l = 1",
            masks
                .iter()
                .all(|m| (&m.m_c + &m.m_l).iter().all(|&s| s == 1.0)),
        );
        let (h_c, h_l) = model.accum.split_features(&params, &h, &masks).map_err(e)?;
        expect(
            "h_c + h_l = h W_v",
            &h_c + &h_l == h.dot(params.get(model.accum.w_v)),
        );
    }

    let adj = array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
    let half = Array2::from_elem((3, 3), 0.5);
    expect(
        "bce at 0.5",
        close(
            reconstruction_loss(&half, &adj, 1.0).map_err(e)?,
            std::f64::consts::LN_2,
        ),
    );

    let r = EmbeddingRecord {
        graph_id: 0,
        label: None,
        z_c: array![1.0, -2.0, 3.5],
        z_l_sum: array![0.5, 4.0, -1.0],
    };
    let c = |a: f64| combine_alpha(&r, a).map_err(e);
    let near = |a: &Array1<f64>, b: &Array1<f64>| a.iter().zip(b).all(|(x, y)| close(*x, *y));
    expect("combine alpha=1", near(&c(1.0)?, &r.z_c));
    expect("combine alpha=0", near(&c(0.0)?, &r.z_l_sum));
    expect(
        "combine alpha=0.5",
        near(&c(0.5)?, &((&r.z_c + &r.z_l_sum) * 0.5)),
    );
    expect(
        "combine alpha out of range",
        combine_alpha(&r, 1.5).is_err() && combine_alpha(&r, -0.1).is_err(),
    );

    Ok(if failed.is_empty() {
        verdict(
            true,
            "KL, Spearman, mask partition, BCE and combine_alpha exact to 1e-9",
        )
    } else {
        verdict(false, format!("failed: {}", failed.join(", ")))
    })
}

fn gradient_check() -> Result<Verdict, String> {
    let g = small_graph_gradient_check(0, &TrainConfig::default().objective(), 1e-4).map_err(e)?;
    Ok(verdict(
        g.max_strict_rel_error < 1e-3,
        format!(
            "max relative error {:.3e} over {} parameters (threshold 1e-3)",
            g.max_strict_rel_error, g.checked
        ),
    ))
}

fn permutation_invariance() -> Result<Verdict, String> {
    let raw: Vec<Graph> = generate(&FactorSpec::density_benchmark(), 100, (2, 25), 3)
        .map_err(e)?
        .into_iter()
        .map(|(g, _)| g)
        .collect();
    let graphs = featurize(&raw, FeatureMode::NodeLabelOnehot, None).map_err(e)?;
    let (model, params) =
        DeepGcfx::init(ModelConfig::new(graphs[0].feature_dim()), 4).map_err(e)?;
    let d = model.config.latent;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_c, mut worst_l) = (0.0f64, 0.0f64);
    for g in &graphs {
        let n = g.node_count();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let a = model
            .infer(&params, &PreparedGraph::new(g), &Noise::zeros(n, d))
            .map_err(e)?;
        let p = g.permuted(&perm).map_err(e)?;
        let b = model
            .infer(&params, &PreparedGraph::new(&p), &Noise::zeros(n, d))
            .map_err(e)?;
        for (x, y) in a.z_c.iter().zip(&b.z_c) {
            worst_c = worst_c.max((x - y).abs());
        }
        for v in 0..n {
            for k in 0..d {
                worst_l = worst_l.max((a.z_l[[v, k]] - b.z_l[[perm[v], k]]).abs());
            }
        }
    }
    Ok(verdict(
        worst_c <= 1e-9 && worst_l <= 1e-9,
        format!("100 graphs: max |dz_c| {worst_c:.1e}, max |dz_l| after row permutation {worst_l:.1e} (threshold 1e-9)"),
    ))
}

fn synthetic_recovery() -> Result<Verdict, String> {
    let graphs: Vec<Graph> = generate(&FactorSpec::density_benchmark(), 500, (10, 20), 0)
        .map_err(e)?
        .into_iter()
        .map(|(g, _)| g)
        .collect();
    let cfg = TrainConfig::default();
    let out = train(&graphs, &cfg).map_err(e)?;
    if let Some(err) = out.aborted {
        return Err(format!("training aborted: {err}"));
    }
    let records = embed_dataset(&graphs, &out.checkpoint, EmbedMode::Deterministic).map_err(e)?;
    let cls = ClassifierConfig::default();
    let probe = probe_recovery(&records, 10, &cls).map_err(e)?;
    let ceiling = density_ceiling(&graphs, 10, &cls).map_err(e)?;
    Ok(verdict(
        probe >= 0.90 && ceiling >= 0.95,
        format!(
            "500 graphs, {} epochs: z_c probe {probe:.3} (threshold 0.90), density ceiling {ceiling:.3} (threshold 0.95)",
            cfg.epochs
        ),
    ))
}

fn mutag_dir() -> PathBuf {
    std::env::var_os("GCFX_MUTAG_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/MUTAG"))
}

fn load_mutag() -> Result<Vec<Graph>, String> {
    let dir = mutag_dir();
    let (root, name) = split_dataset_path(&dir).map_err(e)?;
    parse_tu_dataset(&root, &name)
        .map_err(|err| format!("dataset not found at {}: {err}", dir.display()))
}

/// Trained models and held-out graphs for one seed.
struct MutagRun {
    full: Checkpoint,
    held_out_model: Checkpoint,
    test: Vec<PreparedGraph>,
    all: Vec<PreparedGraph>,
    records: Vec<EmbeddingRecord>,
    seed: u64,
}

fn prepare(ckpt: &Checkpoint, graphs: &[Graph]) -> Result<Vec<PreparedGraph>, String> {
    Ok(ckpt
        .featurizer
        .apply_all(graphs)
        .map_err(e)?
        .iter()
        .map(|g| PreparedGraph::new(g).with_pos_weight(ckpt.train.pos_weight))
        .collect())
}

fn mutag_run(graphs: &[Graph], seed: u64) -> Result<MutagRun, String> {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let full = train(graphs, &cfg).map_err(e)?;
    if let Some(err) = full.aborted {
        return Err(format!("seed {seed}: training aborted: {err}"));
    }
    let full = full.checkpoint;

    // node-label vocabulary from every graph, so rare labels in the held-out
    // fold stay encodable; no graph labels are involved
    let featurizer = Featurizer::fit(graphs, cfg.feature_mode, cfg.degree_cap).map_err(e)?;
    let split = make_folds(graphs, 5, seed).map_err(e)?;
    let pick = |idx: Vec<usize>| {
        idx.into_iter()
            .map(|i| graphs[i].clone())
            .collect::<Vec<_>>()
    };
    let train_graphs = featurizer
        .apply_all(&pick(split.train_indices(0)))
        .map_err(e)?;
    let test_graphs = pick(split.test_indices(0));
    let held = train_featurized(&train_graphs, featurizer, &cfg).map_err(e)?;
    if let Some(err) = held.aborted {
        return Err(format!("seed {seed}: training aborted: {err}"));
    }
    let held_out_model = held.checkpoint;

    Ok(MutagRun {
        records: embed_dataset(graphs, &full, EmbedMode::Deterministic).map_err(e)?,
        all: prepare(&full, graphs)?,
        test: prepare(&held_out_model, &test_graphs)?,
        full,
        held_out_model,
        seed,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Passes when the median seed passes, i.e. at least two of three.
fn median_verdict(per_seed: Vec<(bool, String)>) -> Verdict {
    let passes = per_seed.iter().filter(|p| p.0).count();
    let detail = per_seed
        .iter()
        .map(|p| p.1.as_str())
        .collect::<Vec<_>>()
        .join("; ");
    verdict(
        2 * passes > per_seed.len(),
        format!("{passes}/{} seeds pass: {detail}", per_seed.len()),
    )
}

fn mutag_classification(runs: &[MutagRun]) -> Result<Verdict, String> {
    let cls = ClassifierConfig::default();
    let mut per_seed = Vec::new();
    let mut zc = Vec::new();
    for r in runs {
        let labels: Vec<Option<i64>> = r.records.iter().map(|x| x.label).collect();
        let split = make_folds_from_labels(&labels, 10, r.seed).map_err(e)?;
        let base = cross_validate(&r.records, &split, &cls, 1.0).map_err(e)?;
        let sweep =
            alpha_grid_search(&r.records, &split, &default_alpha_grid(), &cls).map_err(e)?;
        let ok = base.mean >= 0.83 && sweep.report.mean >= base.mean && sweep.best_alpha > 0.0;
        zc.push(base.mean);
        per_seed.push((
            ok,
            format!(
                "seed {} z_c {:.3}, swept {:.3} at alpha {}",
                r.seed, base.mean, sweep.report.mean, sweep.best_alpha
            ),
        ));
    }
    let mut v = median_verdict(per_seed);
    v.detail = format!(
        "median z_c accuracy {:.3} (threshold 0.83); {}",
        median(zc),
        v.detail
    );
    Ok(v)
}

fn mutag_trace(runs: &[MutagRun]) -> Result<Verdict, String> {
    let mut per_seed = Vec::new();
    for r in runs {
        let model = r.full.build_model().map_err(e)?;
        let m = model.config.accum_iters;
        let traces =
            dataset_correlation_traces(&model, &r.full.params, &r.all, m, r.seed).map_err(e)?;
        let mean = CorrelationTrace::mean(&traces).map_err(e)?;
        let (first, last) = (mean.common_vs_local[0], mean.common_vs_local[m]);
        per_seed.push((
            last < first && r.all.len() >= 50,
            format!(
                "seed {}: {} graphs, i=0 {first:.3}, i={m} {last:.3}",
                r.seed,
                r.all.len()
            ),
        ));
    }
    Ok(median_verdict(per_seed))
}

fn mutag_mapd(runs: &[MutagRun]) -> Result<Verdict, String> {
    let mut per_seed = Vec::new();
    for r in runs {
        let model = r.held_out_model.build_model().map_err(e)?;
        let rep = mapd_report(&model, &r.held_out_model.params, &r.test).map_err(e)?;
        let f = rep.fraction_common_below_local();
        per_seed.push((
            f >= 0.8,
            format!(
                "seed {}: common < local on {:.1}% of test graphs",
                r.seed,
                100.0 * f
            ),
        ));
    }
    Ok(median_verdict(per_seed))
}

fn mutag_auc(runs: &[MutagRun]) -> Result<Verdict, String> {
    let mut per_seed = Vec::new();
    for r in runs {
        let model = r.held_out_model.build_model().map_err(e)?;
        let auc = reconstruction_auc(&model, &r.held_out_model.params, &r.test).map_err(e)?;
        per_seed.push((auc >= 0.75, format!("seed {}: AUC {auc:.3}", r.seed)));
    }
    let mut v = median_verdict(per_seed);
    v.detail = format!("threshold 0.75; {}", v.detail);
    Ok(v)
}

fn reproducibility() -> Result<Verdict, String> {
    let graphs: Vec<Graph> = generate(&FactorSpec::density_benchmark(), 100, (5, 15), 8)
        .map_err(e)?
        .into_iter()
        .map(|(g, _)| g)
        .collect();
    let cfg = TrainConfig {
        epochs: 5,
        seed: 9,
        threads: 1,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|err| err.to_string())?;
    let mut files = Vec::new();
    for i in 0..2 {
        let path = dir.path().join(format!("run{i}.gcfx"));
        train(&graphs, &cfg)
            .map_err(e)?
            .checkpoint
            .save(&path)
            .map_err(e)?;
        files.push(std::fs::read(&path).map_err(|err| err.to_string())?);
    }
    let bitwise = files[0] == files[1];

    write_tu_dataset(&graphs, dir.path(), "SYN").map_err(e)?;
    let back = parse_tu_dataset(dir.path(), "SYN").map_err(e)?;
    let tu = back.len() == graphs.len()
        && graphs.iter().zip(&back).all(|(a, b)| {
            a.node_count() == b.node_count()
                && a.edges() == b.edges()
                && a.label == b.label
                && a.node_labels == b.node_labels
        });

    let loaded = Checkpoint::load(&dir.path().join("run0.gcfx")).map_err(e)?;
    let original = Checkpoint::from_bytes(&files[0]).map_err(e)?;
    let probe = &prepare(&loaded, &graphs[..1])?[0];
    let noise = Noise::seeded(1, 0, probe.node_count(), loaded.model.latent);
    let obj = cfg.objective();
    let l1 = loaded
        .build_model()
        .map_err(e)?
        .loss(&loaded.params, probe, &noise, &obj)
        .map_err(e)?;
    let l2 = original
        .build_model()
        .map_err(e)?
        .loss(&original.params, probe, &noise, &obj)
        .map_err(e)?;
    let ckpt = loaded.to_bytes().map_err(e)? == files[0] && l1 == l2;

    Ok(verdict(
        bitwise && tu && ckpt,
        format!("identical checkpoints: {bitwise}; TU round trip exact: {tu}; checkpoint round trip exact: {ckpt}"),
    ))
}

fn main() {
    let mut all = Vec::new();
    all.push(run(
        1,
        "analytic suite",
        Duration::from_secs(1),
        analytic_suite,
    ));
    all.push(run(
        2,
        "gradient check",
        Duration::from_secs(10),
        gradient_check,
    ));
    all.push(run(
        3,
        "permutation invariance",
        Duration::from_secs(60),
        permutation_invariance,
    ));
    all.push(run(
        4,
        "synthetic recovery",
        Duration::from_secs(600),
        synthetic_recovery,
    ));

    // criterion 5 includes training the three seeds; 6 to 8 reuse the models
    let mut mutag: Result<Vec<MutagRun>, String> = Err("not trained".into());
    all.push(run(
        5,
        "MUTAG classification",
        Duration::from_secs(1800),
        || {
            mutag =
                load_mutag().and_then(|g| MUTAG_SEEDS.iter().map(|&s| mutag_run(&g, s)).collect());
            mutag_classification(mutag.as_ref().map_err(Clone::clone)?)
        },
    ));
    let checks: [(usize, &str, fn(&[MutagRun]) -> Result<Verdict, String>); 3] = [
        (6, "MUTAG correlation trace", mutag_trace),
        (7, "MUTAG MAPD", mutag_mapd),
        (8, "MUTAG reconstruction AUC", mutag_auc),
    ];
    for (id, name, check) in checks {
        all.push(run(id, name, Duration::from_secs(600), || {
            check(mutag.as_ref().map_err(Clone::clone)?)
        }));
    }
    all.push(run(
        9,
        "reproducibility",
        Duration::from_secs(120),
        reproducibility,
    ));

    let passed = all.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria pass", all.len());
    if passed != all.len() {
        std::process::exit(1);
    }
}
