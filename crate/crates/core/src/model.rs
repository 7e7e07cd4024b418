//! The full model: encoder, accumulation, posterior heads and decoders,
//! together with the training objective
//!
//! `L = BCE_agg + β·KL(common) + γ·Σ_j KL(local_j) + BCE_reg`.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accum::{Accum, AccumRun, MaskMode};
use crate::autograd::{Gradients, Tape, Var};
use crate::decoders::{default_pos_weight, reconstruction_loss_var, Decoders, RegMode};
use crate::encoder::Encoder;
use crate::error::{GcfxError, Result};
use crate::graph_data::Graph;
use crate::latent::{sample_var, LatentHeads, PosteriorVars};
use crate::params::{Bound, ParamSet};
use crate::sparse::NormAdj;

/// Architecture hyperparameters. Two models with equal configs share a
/// parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub layers: usize,
    pub latent: usize,
    pub dec_hidden: usize,
    pub d_dec: usize,
    pub accum_iters: usize,
    pub reg_mode: RegMode,
}

impl ModelConfig {
    pub fn new(d_in: usize) -> Self {
        Self {
            d_in,
            hidden: 32,
            layers: 3,
            latent: 32,
            dec_hidden: 32,
            d_dec: 32,
            accum_iters: 3,
            reg_mode: RegMode::Conditional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0
            || self.hidden == 0
            || self.latent == 0
            || self.d_dec == 0
            || self.dec_hidden == 0
        {
            return Err(GcfxError::Config("all widths must be positive".into()));
        }
        if self.layers == 0 {
            return Err(GcfxError::Config("encoder needs at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DeepGcfx {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub accum: Accum,
    pub heads: LatentHeads,
    pub decoders: Decoders,
}

impl DeepGcfx {
    /// Builds the model and a freshly initialized parameter set.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamSet)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::init(
            &mut params,
            &mut rng,
            config.d_in,
            config.hidden,
            config.layers,
        )?;
        let accum = Accum::init(&mut params, &mut rng, config.hidden, config.accum_iters);
        let heads = LatentHeads::init(&mut params, &mut rng, config.hidden, config.latent);
        let decoders = Decoders::init(
            &mut params,
            &mut rng,
            config.latent,
            config.dec_hidden,
            config.d_dec,
            config.reg_mode,
        );
        Ok((
            Self {
                config,
                encoder,
                accum,
                heads,
                decoders,
            },
            params,
        ))
    }

    /// The same model with a different accumulation count.
    pub fn with_accum_iters(&self, iters: usize) -> Self {
        let mut m = self.clone();
        m.config.accum_iters = iters;
        m.accum.set_iters(iters);
        m
    }
}

/// A featurized graph with the operators the forward pass needs.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub graph_id: usize,
    pub label: Option<i64>,
    pub features: Array2<f64>,
    pub adj: Arc<NormAdj>,
    pub target: Arc<Array2<f64>>,
    pub pos_weight: f64,
}

impl PreparedGraph {
    pub fn new(graph: &Graph) -> Self {
        let target = graph.adjacency();
        Self {
            graph_id: graph.graph_id,
            label: graph.label,
            features: graph.node_features.clone(),
            adj: Arc::new(graph.norm_adj()),
            pos_weight: default_pos_weight(&target),
            target: Arc::new(target),
        }
    }

    /// Uses a fixed positive-edge weight instead of the per-graph balance.
    pub fn with_pos_weight(mut self, pos_weight: Option<f64>) -> Self {
        if let Some(w) = pos_weight {
            self.pos_weight = w;
        }
        self
    }

    pub fn node_count(&self) -> usize {
        self.features.nrows()
    }
}

/// Standard-normal draws consumed by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    /// 1×d_latent
    pub common: Array2<f64>,
    /// |V|×d_latent
    pub local: Array2<f64>,
    /// |V|×d_latent rows for the regularization decoder.
    pub reg_rows: Array2<f64>,
}

impl Noise {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, nodes: usize, latent: usize) -> Self {
        let mut draw =
            |r, c| Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal));
        let common = draw(1, latent);
        let local = draw(nodes, latent);
        let reg_rows = draw(nodes, latent);
        Self {
            common,
            local,
            reg_rows,
        }
    }

    /// Posterior-mean inference: no sampling noise. The regularization
    /// decoder still receives `reg_rows`, here zeros.
    pub fn zeros(nodes: usize, latent: usize) -> Self {
        Self {
            common: Array2::zeros((1, latent)),
            local: Array2::zeros((nodes, latent)),
            reg_rows: Array2::zeros((nodes, latent)),
        }
    }

    /// Deterministic per-(seed, stream) noise.
    pub fn seeded(seed: u64, stream: u64, nodes: usize, latent: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self::sample(&mut rng, nodes, latent)
    }
}

/// Loss terms in minimization sign convention, before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub agg: f64,
    pub c_prior: f64,
    pub l_prior: f64,
    pub reg: f64,
}

impl LossParts {
    pub fn weighted_total(&self, beta: f64, gamma: f64) -> f64 {
        self.agg + beta * self.c_prior + gamma * self.l_prior + self.reg
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            agg: self.agg * s,
            c_prior: self.c_prior * s,
            l_prior: self.l_prior * s,
            reg: self.reg * s,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            agg: self.agg + o.agg,
            c_prior: self.c_prior + o.c_prior,
            l_prior: self.l_prior + o.l_prior,
            reg: self.reg + o.reg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub parts: LossParts,
}

/// Tape handles for one complete forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub h: Var,
    pub accum: AccumRun,
    pub posterior: PosteriorVars,
    pub z_c: Var,
    pub z_l: Var,
    pub agg_codes: Var,
    pub agg_logits: Var,
    pub reg_logits: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub agg: Var,
    pub c_prior: Var,
    pub l_prior: Var,
    pub reg: Var,
}

/// Weights and mask treatment for the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub beta: f64,
    pub gamma: f64,
    pub mask_mode: MaskMode,
}

impl DeepGcfx {
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        b: &Bound,
        graph: &PreparedGraph,
        noise: &Noise,
        mode: MaskMode,
    ) -> ForwardVars {
        let x = tape.leaf(graph.features.clone());
        let h = self.encoder.forward(tape, b, &graph.adj, x);
        let accum = self.accum.run_var(tape, b, h, mode, self.accum.iters());
        self.decode_from(tape, b, h, accum, noise)
    }

    /// Forward pass with the random-filter baseline in place of the learned
    /// accumulation.
    pub fn forward_random_var<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        b: &Bound,
        graph: &PreparedGraph,
        noise: &Noise,
        rng: &mut R,
    ) -> ForwardVars {
        let x = tape.leaf(graph.features.clone());
        let h = self.encoder.forward(tape, b, &graph.adj, x);
        let accum = self.accum.run_random_var(tape, b, h, rng);
        self.decode_from(tape, b, h, accum, noise)
    }

    pub(crate) fn decode_from(
        &self,
        tape: &mut Tape,
        b: &Bound,
        h: Var,
        accum: AccumRun,
        noise: &Noise,
    ) -> ForwardVars {
        let posterior = self.heads.forward(tape, b, accum.h_c(), accum.h_l());
        let z_c = sample_var(tape, posterior.c_mu, posterior.c_lv, noise.common.clone());
        let z_l = sample_var(tape, posterior.l_mu, posterior.l_lv, noise.local.clone());
        let agg = self.decoders.agg_var(tape, b, z_c, z_l);
        let reg = self.decoders.reg_var(tape, b, z_c, noise.reg_rows.clone());
        ForwardVars {
            h,
            accum,
            posterior,
            z_c,
            z_l,
            agg_codes: agg.codes,
            agg_logits: agg.logits,
            reg_logits: reg.logits,
        }
    }

    pub fn loss_var(
        &self,
        tape: &mut Tape,
        f: &ForwardVars,
        graph: &PreparedGraph,
        obj: &Objective,
    ) -> LossVars {
        let agg = reconstruction_loss_var(tape, f.agg_logits, &graph.target, graph.pos_weight);
        let reg = reconstruction_loss_var(tape, f.reg_logits, &graph.target, graph.pos_weight);
        let c_prior = tape.kl_std_normal(f.posterior.c_mu, f.posterior.c_lv);
        let l_prior = tape.kl_std_normal(f.posterior.l_mu, f.posterior.l_lv);
        let wc = tape.affine(c_prior, obj.beta, 0.0);
        let wl = tape.affine(l_prior, obj.gamma, 0.0);
        let t = tape.add(agg, wc);
        let t = tape.add(t, wl);
        let total = tape.add(t, reg);
        LossVars {
            total,
            agg,
            c_prior,
            l_prior,
            reg,
        }
    }

    fn check_graph(&self, graph: &PreparedGraph, noise: &Noise) -> Result<()> {
        if self.accum.iters() == 0 {
            return Err(GcfxError::Config(
                "accumulation needs at least one iteration (0 is the random baseline)".into(),
            ));
        }
        if graph.features.ncols() != self.config.d_in {
            return Err(GcfxError::Config(format!(
                "graph {} has feature width {}, model expects {}",
                graph.graph_id,
                graph.features.ncols(),
                self.config.d_in
            )));
        }
        let n = graph.node_count();
        let d = self.config.latent;
        if noise.common.dim() != (1, d)
            || noise.local.dim() != (n, d)
            || noise.reg_rows.dim() != (n, d)
        {
            return Err(GcfxError::shape(
                "noise shapes do not match graph and latent width",
            ));
        }
        Ok(())
    }

    fn read_parts(tape: &Tape, lv: &LossVars) -> Result<LossOutput> {
        let parts = LossParts {
            agg: tape.scalar(lv.agg),
            c_prior: tape.scalar(lv.c_prior),
            l_prior: tape.scalar(lv.l_prior),
            reg: tape.scalar(lv.reg),
        };
        for (name, v) in [
            ("agg reconstruction", parts.agg),
            ("common prior", parts.c_prior),
            ("local prior", parts.l_prior),
            ("reg reconstruction", parts.reg),
        ] {
            if !v.is_finite() {
                return Err(GcfxError::numeric(name, format!("loss term is {v}")));
            }
        }
        Ok(LossOutput {
            total: tape.scalar(lv.total),
            parts,
        })
    }

    /// Objective value for one graph.
    pub fn loss(
        &self,
        params: &ParamSet,
        graph: &PreparedGraph,
        noise: &Noise,
        obj: &Objective,
    ) -> Result<LossOutput> {
        self.check_graph(graph, noise)?;
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let f = self.forward_var(&mut tape, &b, graph, noise, obj.mask_mode);
        let lv = self.loss_var(&mut tape, &f, graph, obj);
        Self::read_parts(&tape, &lv)
    }

    /// Objective value and its gradient for every parameter, in layout order.
    pub fn loss_and_grad(
        &self,
        params: &ParamSet,
        graph: &PreparedGraph,
        noise: &Noise,
        obj: &Objective,
    ) -> Result<(LossOutput, Vec<Array2<f64>>)> {
        self.check_graph(graph, noise)?;
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let f = self.forward_var(&mut tape, &b, graph, noise, obj.mask_mode);
        let lv = self.loss_var(&mut tape, &f, graph, obj);
        let out = Self::read_parts(&tape, &lv)?;
        let grads: Gradients = tape.backward(lv.total);
        let g = params
            .ids()
            .map(|id| {
                grads
                    .get_or_zeros(b.var(id), params.get(id).dim())
                    .as_standard_layout()
                    .into_owned()
            })
            .collect();
        Ok((out, g))
    }
}

/// Per-graph inference products under posterior means.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub h: Array2<f64>,
    pub h_c: Array1<f64>,
    pub h_l: Array2<f64>,
    pub z_c: Array1<f64>,
    pub z_l: Array2<f64>,
    /// Common parts of the last accumulation step, |V|×d.
    pub patch_common: Array2<f64>,
    pub agg_codes: Array2<f64>,
    pub agg_probs: Array2<f64>,
}

impl DeepGcfx {
    /// Hard-mask inference with the given noise (use [`Noise::zeros`] for
    /// posterior means).
    pub fn infer(
        &self,
        params: &ParamSet,
        graph: &PreparedGraph,
        noise: &Noise,
    ) -> Result<Inference> {
        self.check_graph(graph, noise)?;
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let f = self.forward_var(&mut tape, &b, graph, noise, MaskMode::Hard);
        Ok(Self::collect(&mut tape, &f))
    }

    /// Inference with the random-filter baseline; masks are drawn from a
    /// generator seeded with `seed`, exactly as in
    /// [`Accum::run_accum_random`](crate::accum::Accum::run_accum_random).
    pub fn infer_random(
        &self,
        params: &ParamSet,
        graph: &PreparedGraph,
        noise: &Noise,
        seed: u64,
    ) -> Result<Inference> {
        self.with_accum_iters(1).check_graph(graph, noise)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let f = self.forward_random_var(&mut tape, &b, graph, noise, &mut rng);
        Ok(Self::collect(&mut tape, &f))
    }

    pub(crate) fn collect(tape: &mut Tape, f: &ForwardVars) -> Inference {
        let probs = tape.sigmoid(f.agg_logits);
        let last = f.accum.steps.last().expect("at least one step");
        Inference {
            h: tape.value(f.h).clone(),
            h_c: tape.value(f.accum.h_c()).row(0).to_owned(),
            h_l: tape.value(f.accum.h_l()).clone(),
            z_c: tape.value(f.z_c).row(0).to_owned(),
            z_l: tape.value(f.z_l).clone(),
            patch_common: tape.value(last.h_c).clone(),
            agg_codes: tape.value(f.agg_codes).clone(),
            agg_probs: tape.value(probs).clone(),
        }
    }
}
