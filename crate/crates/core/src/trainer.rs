//! Minibatch training, loss bookkeeping and finite-difference gradient checks.

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accum::MaskMode;
use crate::checkpoint::Checkpoint;
use crate::decoders::RegMode;
use crate::error::{GcfxError, Result};
use crate::graph_data::{FeatureMode, Featurizer, Graph};
use crate::model::{DeepGcfx, LossOutput, LossParts, ModelConfig, Noise, Objective, PreparedGraph};
use crate::optim::Adam;
use crate::params::ParamSet;

const NOISE_SALT: u64 = 0x6e6f_6973_65;
const SHUFFLE_SALT: u64 = 0x7368_7566_666c_65;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub gamma: f64,
    pub accum_iters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden: usize,
    pub layers: usize,
    pub latent: usize,
    pub dec_hidden: usize,
    pub d_dec: usize,
    /// Train through sigmoid-relaxed masks instead of hard thresholds.
    pub soft_masks: bool,
    pub soft_mask_tau: f64,
    pub reg_mode: RegMode,
    /// Fixed weight of edge slots in the reconstruction loss; per-graph
    /// `#non-edges / #edges` when unset.
    pub pos_weight: Option<f64>,
    pub feature_mode: FeatureMode,
    pub degree_cap: Option<usize>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            gamma: 0.1,
            accum_iters: 3,
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            hidden: 32,
            layers: 3,
            latent: 32,
            dec_hidden: 32,
            d_dec: 32,
            soft_masks: true,
            soft_mask_tau: 0.1,
            reg_mode: RegMode::Conditional,
            pos_weight: None,
            feature_mode: FeatureMode::NodeLabelOnehot,
            degree_cap: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GcfxError::Config(m.to_string()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be a finite value ≥ 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be a finite value ≥ 0");
        }
        if self.accum_iters == 0 {
            return bad("accum_iters must be ≥ 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.soft_mask_tau > 0.0 && self.soft_mask_tau.is_finite()) {
            return bad("soft_mask_tau must be positive");
        }
        if let Some(w) = self.pos_weight {
            if !(w > 0.0 && w.is_finite()) {
                return bad("pos_weight must be positive");
            }
        }
        if self.threads == 0 {
            return bad("threads must be ≥ 1");
        }
        Ok(())
    }

    pub fn model_config(&self, d_in: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            hidden: self.hidden,
            layers: self.layers,
            latent: self.latent,
            dec_hidden: self.dec_hidden,
            d_dec: self.d_dec,
            accum_iters: self.accum_iters,
            reg_mode: self.reg_mode,
        }
    }

    pub fn mask_mode(&self) -> MaskMode {
        if self.soft_masks {
            MaskMode::Soft {
                tau: self.soft_mask_tau,
            }
        } else {
            MaskMode::Hard
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            beta: self.beta,
            gamma: self.gamma,
            mask_mode: self.mask_mode(),
        }
    }
}

/// Mean loss components over the graphs seen in one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub parts: LossParts,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Set when training stopped on a non-finite loss; the checkpoint then
    /// holds the last finite parameters.
    pub aborted: Option<GcfxError>,
}

/// Sampling noise for graph `index` in `epoch`; one stream per pair.
pub fn training_noise(
    seed: u64,
    epoch: usize,
    index: usize,
    n_graphs: usize,
    nodes: usize,
    latent: usize,
) -> Noise {
    let stream = (epoch as u64) * (n_graphs as u64) + index as u64;
    Noise::seeded(seed ^ NOISE_SALT, stream, nodes, latent)
}

/// Fits the featurizer on `graphs` and trains.
pub fn train(graphs: &[Graph], config: &TrainConfig) -> Result<TrainOutcome> {
    let featurizer = Featurizer::fit(graphs, config.feature_mode, config.degree_cap)?;
    let featurized = featurizer.apply_all(graphs)?;
    train_featurized(&featurized, featurizer, config)
}

/// Trains on graphs whose features were produced by `featurizer`.
pub fn train_featurized(
    graphs: &[Graph],
    featurizer: Featurizer,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if graphs.is_empty() {
        return Err(GcfxError::Config(
            "training needs a non-empty dataset".into(),
        ));
    }
    let d_in = featurizer.dim();
    if let Some(g) = graphs.iter().find(|g| g.feature_dim() != d_in) {
        return Err(GcfxError::Config(format!(
            "graph {} has feature width {}, featurizer produces {d_in}",
            g.graph_id,
            g.feature_dim()
        )));
    }
    let (model, mut params) = DeepGcfx::init(config.model_config(d_in), config.seed)?;
    let prepared: Vec<PreparedGraph> = graphs
        .iter()
        .map(|g| PreparedGraph::new(g).with_pos_weight(config.pos_weight))
        .collect();
    let obj = config.objective();
    let mut opt = Adam::new(&params, config.learning_rate);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| GcfxError::Config(format!("thread pool: {e}")))?;
    let mut history = Vec::with_capacity(config.epochs);
    let n = prepared.len();
    let latent = config.latent;

    let ckpt = |params: &ParamSet, epoch: usize, history: &[EpochLog]| Checkpoint {
        train: config.clone(),
        model: model.config.clone(),
        featurizer: featurizer.clone(),
        epoch,
        history: history.to_vec(),
        params: params.clone(),
        provenance: None,
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossParts::default();
        let mut sum_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let eval = |&i: &usize| -> Result<(LossOutput, Vec<Array2<f64>>)> {
                let g = &prepared[i];
                let noise = training_noise(config.seed, epoch, i, n, g.node_count(), latent);
                model.loss_and_grad(&params, g, &noise, &obj)
            };
            let results: Vec<Result<_>> = if config.threads > 1 {
                pool.install(|| batch.par_iter().map(eval).collect())
            } else {
                batch.iter().map(eval).collect()
            };
            let mut grad = params.zeros_like();
            let mut batch_parts = LossParts::default();
            let mut batch_total = 0.0;
            for r in results {
                let (out, g) = match r {
                    Ok(v) => v,
                    Err(e) => return Ok(abort(ckpt(&params, epoch, &history), e)),
                };
                batch_parts = batch_parts.add(&out.parts);
                batch_total += out.total;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grad.iter_mut() {
                *g *= scale;
            }
            if grad.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                let e = GcfxError::numeric(
                    "gradient",
                    format!("non-finite gradient at epoch {}", epoch + 1),
                );
                return Ok(abort(ckpt(&params, epoch, &history), e));
            }
            let before = params.clone();
            opt.step(&mut params, &grad);
            if !params.all_finite() {
                let e = GcfxError::numeric(
                    "optimizer",
                    format!("non-finite parameters at epoch {}", epoch + 1),
                );
                return Ok(abort(ckpt(&before, epoch, &history), e));
            }
            sum = sum.add(&batch_parts);
            sum_total += batch_total;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            total: sum_total / n as f64,
            parts: sum.scaled(1.0 / n as f64),
        };
        info!(
            "epoch {:>4} total {:.6} agg {:.6} kl_c {:.6} kl_l {:.6} reg {:.6}",
            log.epoch,
            log.total,
            log.parts.agg,
            log.parts.c_prior,
            log.parts.l_prior,
            log.parts.reg
        );
        history.push(log);
    }
    Ok(TrainOutcome {
        checkpoint: ckpt(&params, config.epochs, &history),
        aborted: None,
    })
}

fn abort(checkpoint: Checkpoint, err: GcfxError) -> TrainOutcome {
    warn!("training aborted: {err}");
    TrainOutcome {
        checkpoint,
        aborted: Some(err),
    }
}

/// Absolute differences below this are within finite-difference resolution
/// (truncation `O(ε²)` plus round-off `O(u/ε)` at `ε = 1e-4`) and count as
/// agreement.
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Largest relative error without the absolute floor.
    pub max_strict_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a − b| / max(|a|, |b|)`, with 0/0 taken as 0.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Central finite differences of the total loss against the analytic
/// gradient for every scalar parameter. Entries whose absolute difference is
/// within [`FD_ABS_FLOOR`] contribute zero to `max_rel_error`.
pub fn gradient_check(
    model: &DeepGcfx,
    params: &ParamSet,
    graph: &PreparedGraph,
    noise: &Noise,
    obj: &Objective,
    epsilon: f64,
) -> Result<GradCheck> {
    let (_, analytic) = model.loss_and_grad(params, graph, noise, obj)?;
    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_strict_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (p, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = params.values()[p].as_slice().expect("standard layout")[k];
            let mut at = |x: f64| -> Result<f64> {
                probe.values_mut()[p]
                    .as_slice_mut()
                    .expect("standard layout")[k] = x;
                Ok(model.loss(&probe, graph, noise, obj)?.total)
            };
            let plus = at(orig + epsilon)?;
            let minus = at(orig - epsilon)?;
            probe.values_mut()[p]
                .as_slice_mut()
                .expect("standard layout")[k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.as_slice().expect("standard layout")[k];
            let strict = relative_error(a, numeric);
            let abs = (a - numeric).abs();
            let err = if abs <= FD_ABS_FLOOR { 0.0 } else { strict };
            report.max_strict_rel_error = report.max_strict_rel_error.max(strict);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.names()[p].clone(), k));
            }
        }
    }
    Ok(report)
}

/// Gradient check on a seeded 3-node path graph with width-4 features and
/// layers, soft masks and fixed seeded noise.
pub fn small_graph_gradient_check(
    seed: u64,
    objective: &Objective,
    epsilon: f64,
) -> Result<GradCheck> {
    use rand::Rng;
    let d = 4;
    let config = ModelConfig {
        d_in: d,
        hidden: d,
        layers: 2,
        latent: d,
        dec_hidden: d,
        d_dec: d,
        accum_iters: 3,
        reg_mode: RegMode::Conditional,
    };
    let (model, params) = DeepGcfx::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_SALT);
    let feats = Array2::from_shape_fn((3, d), |_| rng.random_range(-1.0..1.0));
    let graph = Graph::new(0, 3, &[(0, 1), (1, 2)])?.with_features(feats)?;
    let noise = Noise::seeded(seed, 0, 3, d);
    gradient_check(
        &model,
        &params,
        &PreparedGraph::new(&graph),
        &noise,
        objective,
        epsilon,
    )
}
