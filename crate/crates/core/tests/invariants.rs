//! Structural properties of the model and the analysis measures.

use gcfx::analysis::{correlation_vs_iterations, mapd, spearman, CorrelationTrace};
use gcfx::evaluation::{combine_alpha, EmbeddingRecord};
use gcfx::graph_data::{featurize, make_folds_from_labels, FeatureMode, Graph, GraphBatch};
use gcfx::latent::{kl_to_standard_normal, GaussianPosterior};
use gcfx::model::{DeepGcfx, ModelConfig, Noise, PreparedGraph};
use gcfx::params::ParamSet;
use gcfx::synthetic::{generate, FactorSpec};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(d_in: usize, seed: u64) -> (DeepGcfx, ParamSet) {
    let mut cfg = ModelConfig::new(d_in);
    cfg.hidden = 8;
    cfg.latent = 8;
    cfg.dec_hidden = 8;
    cfg.d_dec = 8;
    cfg.layers = 2;
    DeepGcfx::init(cfg, seed).unwrap()
}

fn synthetic_graphs(n: usize, seed: u64) -> Vec<Graph> {
    let raw: Vec<Graph> = generate(&FactorSpec::density_benchmark(), n, (3, 12), seed)
        .unwrap()
        .into_iter()
        .map(|(g, _)| g)
        .collect();
    featurize(&raw, FeatureMode::NodeLabelOnehot, None).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-2.0..2.0))
}

#[test]
fn batch_rows_match_single_graph_encoding() {
    let graphs = synthetic_graphs(6, 1);
    let (model, params) = small_model(graphs[0].feature_dim(), 2);
    let batch = GraphBatch::new(graphs.clone()).unwrap();
    let all = model.encoder.encode(&params, &batch).unwrap().h;
    let offsets = batch.node_offsets().to_vec();
    for (r, g) in graphs.iter().enumerate() {
        let single = model
            .encoder
            .encode(&params, &GraphBatch::new(vec![g.clone()]).unwrap())
            .unwrap()
            .h;
        let rows = all.slice(ndarray::s![offsets[r]..offsets[r + 1], ..]);
        assert_eq!(rows, single.view(), "graph {r}");
    }
    assert_eq!(batch.unbatch(), graphs);
}

#[test]
fn batch_adjacency_is_block_diagonal() {
    let graphs = synthetic_graphs(4, 3);
    let batch = GraphBatch::new(graphs.clone()).unwrap();
    let a = batch.adjacency();
    let off = batch.node_offsets();
    for u in 0..batch.total_nodes() {
        for v in 0..batch.total_nodes() {
            let block = |x: usize| off.iter().rposition(|&o| o <= x).unwrap();
            if block(u) != block(v) {
                assert_eq!(a[[u, v]], 0.0);
            }
        }
    }
    for (r, g) in graphs.iter().enumerate() {
        let s = ndarray::s![off[r]..off[r + 1], off[r]..off[r + 1]];
        assert_eq!(a.slice(s), g.adjacency().view());
    }
}

#[test]
fn node_relabeling_preserves_common_and_permutes_local() {
    let graphs = synthetic_graphs(100, 11);
    let (model, params) = small_model(graphs[0].feature_dim(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for g in &graphs {
        let n = g.node_count();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let p = g.permuted(&perm).unwrap();
        let d = model.config.latent;
        let a = model
            .infer(&params, &PreparedGraph::new(g), &Noise::zeros(n, d))
            .unwrap();
        let b = model
            .infer(&params, &PreparedGraph::new(&p), &Noise::zeros(n, d))
            .unwrap();
        for (x, y) in a.z_c.iter().zip(b.z_c.iter()) {
            assert!((x - y).abs() <= 1e-9, "z_c differs: {x} vs {y}");
        }
        for v in 0..n {
            for k in 0..d {
                assert!((a.z_l[[v, k]] - b.z_l[[perm[v], k]]).abs() <= 1e-9);
            }
            for u in 0..n {
                assert!((a.agg_probs[[u, v]] - b.agg_probs[[perm[u], perm[v]]]).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn decode_agg_commutes_with_row_permutation() {
    let (model, params) = small_model(3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z_c = random_matrix(&mut rng, 1, 8).row(0).to_owned();
    let z_l = random_matrix(&mut rng, 7, 8);
    let mut perm: Vec<usize> = (0..7).collect();
    perm.shuffle(&mut rng);
    let mut z_p = Array2::zeros(z_l.dim());
    for (old, &new) in perm.iter().enumerate() {
        z_p.row_mut(new).assign(&z_l.row(old));
    }
    let a = model
        .decoders
        .decode_agg(&params, &z_c, &z_l)
        .unwrap()
        .probs;
    let b = model
        .decoders
        .decode_agg(&params, &z_c, &z_p)
        .unwrap()
        .probs;
    for u in 0..7 {
        for v in 0..7 {
            assert_eq!(a[[u, v]], b[[perm[u], perm[v]]]);
            assert_eq!(a[[u, v]], a[[v, u]]);
        }
    }
}

#[test]
fn first_trace_point_is_the_random_filter_baseline() {
    let graphs = synthetic_graphs(5, 21);
    let (model, params) = small_model(graphs[0].feature_dim(), 7);
    for (i, g) in graphs.iter().enumerate() {
        let pg = PreparedGraph::new(g);
        let seed = 100 + i as u64;
        let noise = Noise::zeros(pg.node_count(), 8);
        let inf = model.infer_random(&params, &pg, &noise, seed).unwrap();
        let (h_c, h_l) = model.accum.run_accum_random(&params, &inf.h, seed).unwrap();
        assert_eq!(inf.h_c, h_c);
        assert_eq!(inf.h_l, h_l);

        let t = correlation_vs_iterations(&model, &params, &pg, 4, seed).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t.iterations, vec![0, 1, 2, 3, 4]);
        let again = correlation_vs_iterations(&model, &params, &pg, 0, seed).unwrap();
        assert_eq!(again.common_vs_local[0], t.common_vs_local[0]);
        for v in t
            .common_vs_local
            .iter()
            .chain(&t.common_vs_patch_common)
            .chain(&t.common_vs_decoder)
        {
            assert!((0.0..=1.0).contains(v));
        }
    }
}

#[test]
fn trace_mean_averages_pointwise() {
    let mk = |a: f64| CorrelationTrace {
        iterations: vec![0, 1],
        common_vs_local: vec![a, 2.0 * a],
        common_vs_patch_common: vec![a, a],
        common_vs_decoder: vec![0.0, a],
        degenerate: 1,
    };
    let m = CorrelationTrace::mean(&[mk(0.2), mk(0.4)]).unwrap();
    assert!((m.common_vs_local[1] - 0.6).abs() < 1e-12);
    assert!((m.common_vs_decoder[1] - 0.3).abs() < 1e-12);
}

#[test]
fn mapd_of_duplicated_vectors_is_zero() {
    let row = ndarray::array![[0.3, -1.0, 2.0]];
    let m = ndarray::concatenate![ndarray::Axis(0), row, row, row];
    assert_eq!(mapd(m.view()).unwrap(), 0.0);
    let mut m2 = m.clone();
    m2[[2, 1]] = 0.5;
    assert!(mapd(m2.view()).unwrap() > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_partition_the_value_path(seed in 0u64..1_000_000, n in 1usize..9) {
        let (model, params) = small_model(3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let h = random_matrix(&mut rng, n, 8);
        let q = random_matrix(&mut rng, 1, 8).row(0).to_owned();
        let delta = model.accum.similarity_scores(&params, &h, &q).unwrap();
        prop_assert!(delta.iter().all(|&d| d > 0.0 && d < 1.0));
        let masks = model.accum.compute_masks(&params, &h, &delta).unwrap();
        for m in &masks {
            prop_assert!((&m.m_c + &m.m_l).iter().all(|&x| x == 1.0));
        }
        let (h_c, h_l) = model.accum.split_features(&params, &h, &masks).unwrap();
        let values = h.dot(params.get(model.accum.w_v));
        prop_assert_eq!(&h_c + &h_l, values);
    }

    #[test]
    fn kl_is_non_negative(mu in prop::collection::vec(-5.0f64..5.0, 1..10), lv_seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(lv_seed);
        let log_var = Array1::from_shape_fn(mu.len(), |_| rng.random_range(-10.0..10.0));
        let p = GaussianPosterior { mu: Array1::from(mu), log_var };
        prop_assert!(kl_to_standard_normal(&p) >= 0.0);
    }

    #[test]
    fn folds_partition_and_balance(
        labels in prop::collection::vec(prop::option::weighted(0.95, 0i64..3), 2..80),
        k in 2usize..11,
        seed in 0u64..1000,
    ) {
        prop_assume!(k <= labels.len());
        let split = make_folds_from_labels(&labels, k, seed).unwrap();
        let mut seen = vec![0; labels.len()];
        for f in 0..k {
            let test = split.test_indices(f);
            let train = split.train_indices(f);
            prop_assert_eq!(test.len() + train.len(), labels.len());
            prop_assert!(test.iter().all(|i| !train.contains(i)));
            for &i in &test {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes = split.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(split, make_folds_from_labels(&labels, k, seed).unwrap());
    }

    #[test]
    fn combine_alpha_is_linear(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..8),
        alpha in 0.0f64..=1.0,
    ) {
        let r = EmbeddingRecord {
            graph_id: 0,
            label: None,
            z_c: pairs.iter().map(|p| p.0).collect(),
            z_l_sum: pairs.iter().map(|p| p.1).collect(),
        };
        let sum = combine_alpha(&r, alpha).unwrap() + combine_alpha(&r, 1.0 - alpha).unwrap();
        for (s, (a, b)) in sum.iter().zip(&pairs) {
            prop_assert!((s - (a + b)).abs() <= 1e-9);
        }
    }

    #[test]
    fn spearman_ignores_increasing_transforms(
        xs in prop::collection::vec(-5.0f64..5.0, 3..30),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array1::from(xs);
        let y = Array1::from_shape_fn(x.len(), |_| rng.random_range(-5.0..5.0));
        let base = spearman(x.view(), y.view()).unwrap();
        let fx = x.mapv(|v| v.exp() * 3.0 - 1.0);
        let fy = y.mapv(|v| v * v * v + v);
        let moved = spearman(fx.view(), fy.view()).unwrap();
        prop_assert!((base.rho - moved.rho).abs() <= 1e-12);
        prop_assert_eq!(base.degenerate, moved.degenerate);
    }

    #[test]
    fn mapd_translation_and_scale(
        seed in 0u64..1000,
        p in 2usize..8,
        d in 1usize..6,
        shift in -3.0f64..3.0,
        scale in -4.0f64..4.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_matrix(&mut rng, p, d);
        let offset = random_matrix(&mut rng, 1, d) * shift;
        let base = mapd(v.view()).unwrap();
        let shifted = mapd((&v + &offset).view()).unwrap();
        let scaled = mapd((&v * scale).view()).unwrap();
        prop_assert!((base - shifted).abs() <= 1e-12 * (1.0 + base));
        prop_assert!((scaled - scale.abs() * base).abs() <= 1e-12 * (1.0 + base));
    }
}
