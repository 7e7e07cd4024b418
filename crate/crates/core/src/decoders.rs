//! Adjacency decoders.
//!
//! The aggregation decoder maps `[z_c, z_l(j)]` to a node code `d_j`; the
//! regularization decoder sees only `z_c` (plus per-node standard-normal
//! noise in the conditional form). Both score node pairs as `σ(d_jᵀ d_k)`.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, PROB_EPS};
use crate::error::{GcfxError, Result};
use crate::params::{xavier, Bound, ParamId, ParamSet};

/// How the regularization decoder produces distinct node codes from `z_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    /// `reg_mlp([z_c, ε_j])` with per-node noise `ε_j`.
    #[default]
    Conditional,
    /// `reg_mlp(z_c)` for every node; predicts a single density.
    Uniform,
}

impl std::str::FromStr for RegMode {
    type Err = GcfxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional" => Ok(RegMode::Conditional),
            "uniform" => Ok(RegMode::Uniform),
            other => Err(GcfxError::Config(format!("unknown reg mode {other:?}"))),
        }
    }
}

/// Two-layer perceptron with a ReLU hidden layer and linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Self {
            w1: params.add(format!("{prefix}.w1"), xavier(rng, input, hidden)),
            b1: params.add(format!("{prefix}.b1"), Array2::zeros((1, hidden))),
            w2: params.add(format!("{prefix}.w2"), xavier(rng, hidden, output)),
            b2: params.add(format!("{prefix}.b2"), Array2::zeros((1, output))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, b.var(self.w1));
        let h = tape.add_row(h, b.var(self.b1));
        let h = tape.relu(h);
        let o = tape.matmul(h, b.var(self.w2));
        tape.add_row(o, b.var(self.b2))
    }

    pub fn input_width(&self, params: &ParamSet) -> usize {
        params.get(self.w1).nrows()
    }
}

/// Pairwise edge probabilities; symmetric by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionScores {
    pub probs: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Decoders {
    pub agg: Mlp,
    pub reg: Mlp,
    pub reg_mode: RegMode,
    latent: usize,
}

/// Decoder outputs on the tape: node codes and pair logits.
#[derive(Debug, Clone, Copy)]
pub struct DecodeVars {
    pub codes: Var,
    pub logits: Var,
}

impl Decoders {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        latent: usize,
        hidden: usize,
        d_dec: usize,
        reg_mode: RegMode,
    ) -> Self {
        let agg = Mlp::init(params, rng, "dec_agg", 2 * latent, hidden, d_dec);
        let reg_in = match reg_mode {
            RegMode::Conditional => 2 * latent,
            RegMode::Uniform => latent,
        };
        let reg = Mlp::init(params, rng, "dec_reg", reg_in, hidden, d_dec);
        Self {
            agg,
            reg,
            reg_mode,
            latent,
        }
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn agg_var(&self, tape: &mut Tape, b: &Bound, z_c: Var, z_l: Var) -> DecodeVars {
        let n = tape.value(z_l).nrows();
        let zc = tape.broadcast_rows(z_c, n);
        let cat = tape.concat_cols(zc, z_l);
        let codes = self.agg.forward(tape, b, cat);
        let logits = tape.matmul_t(codes, codes);
        DecodeVars { codes, logits }
    }

    /// `noise_rows` is |V|×d_latent; ignored in [`RegMode::Uniform`].
    pub fn reg_var(
        &self,
        tape: &mut Tape,
        b: &Bound,
        z_c: Var,
        noise_rows: Array2<f64>,
    ) -> DecodeVars {
        let n = noise_rows.nrows();
        let zc = tape.broadcast_rows(z_c, n);
        let input = match self.reg_mode {
            RegMode::Conditional => {
                let eps = tape.leaf(noise_rows);
                tape.concat_cols(zc, eps)
            }
            RegMode::Uniform => zc,
        };
        let codes = self.reg.forward(tape, b, input);
        let logits = tape.matmul_t(codes, codes);
        DecodeVars { codes, logits }
    }

    fn check(&self, z_c: &Array1<f64>, rows_width: usize) -> Result<()> {
        if z_c.len() != self.latent || rows_width != self.latent {
            return Err(GcfxError::shape(format!(
                "decoder expects latent width {}",
                self.latent
            )));
        }
        Ok(())
    }

    pub fn decode_agg(
        &self,
        params: &ParamSet,
        z_c: &Array1<f64>,
        z_l: &Array2<f64>,
    ) -> Result<ReconstructionScores> {
        self.check(z_c, z_l.ncols())?;
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let zc = tape.leaf(z_c.clone().insert_axis(Axis(0)));
        let zl = tape.leaf(z_l.clone());
        let out = self.agg_var(&mut tape, &b, zc, zl);
        let logits = tape.sigmoid(out.logits);
        Ok(ReconstructionScores {
            probs: tape.value(logits).clone(),
        })
    }

    pub fn decode_reg(
        &self,
        params: &ParamSet,
        z_c: &Array1<f64>,
        node_count: usize,
        noise_rows: &Array2<f64>,
    ) -> Result<ReconstructionScores> {
        self.check(z_c, noise_rows.ncols())?;
        if noise_rows.nrows() != node_count {
            return Err(GcfxError::shape("one noise row per node required"));
        }
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let zc = tape.leaf(z_c.clone().insert_axis(Axis(0)));
        let out = self.reg_var(&mut tape, &b, zc, noise_rows.clone());
        let probs = tape.sigmoid(out.logits);
        Ok(ReconstructionScores {
            probs: tape.value(probs).clone(),
        })
    }
}

/// `#non-edges / #edges` over ordered off-diagonal pairs; 1 when edgeless.
pub fn default_pos_weight(adjacency: &Array2<f64>) -> f64 {
    let n = adjacency.nrows();
    let pairs = (n * n.saturating_sub(1)) as f64;
    let edges = adjacency.sum() - adjacency.diag().sum();
    if edges <= 0.0 || pairs <= edges {
        1.0
    } else {
        (pairs - edges) / edges
    }
}

/// Mean weighted binary cross-entropy over off-diagonal ordered pairs.
pub fn reconstruction_loss(
    probs: &Array2<f64>,
    adjacency: &Array2<f64>,
    pos_weight: f64,
) -> Result<f64> {
    if probs.dim() != adjacency.dim() || probs.nrows() != probs.ncols() {
        return Err(GcfxError::shape(
            "probabilities and adjacency must be square and equal",
        ));
    }
    if pos_weight <= 0.0 {
        return Err(GcfxError::Argument("pos_weight must be positive".into()));
    }
    let n = probs.nrows();
    if n < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for j in 0..n {
        for k in 0..n {
            if j == k {
                continue;
            }
            let p = probs[[j, k]].clamp(PROB_EPS, 1.0 - PROB_EPS);
            let a = adjacency[[j, k]];
            total -= pos_weight * a * p.ln() + (1.0 - a) * (1.0 - p).ln();
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Weighted BCE on the tape from pair logits.
pub fn reconstruction_loss_var(
    tape: &mut Tape,
    logits: Var,
    adjacency: &Arc<Array2<f64>>,
    pos_weight: f64,
) -> Var {
    tape.bce_offdiag(logits, Arc::clone(adjacency), pos_weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(mode: RegMode) -> (Decoders, ParamSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let d = Decoders::init(&mut ps, &mut rng, 3, 5, 4, mode);
        (d, ps)
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let (d, mut ps) = setup(RegMode::Conditional);
        for id in [d.agg.w2, d.agg.b2, d.reg.w2, d.reg.b2] {
            ps.get_mut(id).fill(0.0);
        }
        let s = d
            .decode_agg(&ps, &array![1.0, 2.0, 3.0], &Array2::ones((4, 3)))
            .unwrap();
        assert!(s.probs.iter().all(|&p| p == 0.5));
        let s = d
            .decode_reg(&ps, &array![1.0, 2.0, 3.0], 4, &Array2::ones((4, 3)))
            .unwrap();
        assert!(s.probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn probabilities_symmetric() {
        let (d, ps) = setup(RegMode::Conditional);
        let z_l = array![[0.1, -0.4, 2.0], [1.0, 0.0, -1.0], [0.3, 0.3, 0.3]];
        let s = d.decode_agg(&ps, &array![0.5, -0.5, 0.2], &z_l).unwrap();
        assert_eq!(s.probs, s.probs.t());
        let r = d.decode_reg(&ps, &array![0.5, -0.5, 0.2], 3, &z_l).unwrap();
        assert_eq!(r.probs, r.probs.t());
    }

    #[test]
    fn identical_noise_rows_uniform_probs() {
        let (d, ps) = setup(RegMode::Conditional);
        let r = d
            .decode_reg(
                &ps,
                &array![0.5, -0.5, 0.2],
                3,
                &Array2::from_elem((3, 3), 0.7),
            )
            .unwrap();
        let p0 = r.probs[[0, 0]];
        assert!(r.probs.iter().all(|&p| p == p0));
    }

    #[test]
    fn sigmoid_of_inner_product() {
        let mut tape = Tape::new();
        let codes = tape.leaf(array![[1.0, 1.0], [1.0, 1.0]]);
        let logits = tape.matmul_t(codes, codes);
        let p = tape.sigmoid(logits);
        assert!((tape.value(p)[[0, 1]] - 0.8807970779778823).abs() < 1e-15);
    }

    #[test]
    fn bce_cases() {
        let adj = array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let half = Array2::from_elem((3, 3), 0.5);
        assert!((reconstruction_loss(&half, &adj, 1.0).unwrap() - 2f64.ln()).abs() < 1e-12);

        let perfect = adj.clone();
        assert!(reconstruction_loss(&perfect, &adj, 1.0).unwrap() < 1e-6);

        let pair = array![[0.0, 1.0], [1.0, 0.0]];
        let probs = array![[0.5, 0.8], [0.8, 0.5]];
        assert!((reconstruction_loss(&probs, &pair, 1.0).unwrap() + 0.8f64.ln()).abs() < 1e-12);
        assert!(reconstruction_loss(&probs, &pair, 0.0).is_err());
    }

    #[test]
    fn pos_weight_counts_ordered_pairs() {
        let adj = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(default_pos_weight(&adj), 2.0);
        assert_eq!(default_pos_weight(&Array2::zeros((3, 3))), 1.0);
    }

    #[test]
    fn tape_bce_matches_plain() {
        let adj = Arc::new(array![[0.0, 1.0, 1.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let logits = array![[0.0, 1.2, -0.3], [1.2, 0.0, 2.0], [-0.3, 2.0, 0.0]];
        let probs = logits.mapv(crate::autograd::logistic);
        let mut tape = Tape::new();
        let l = tape.leaf(logits);
        let loss = reconstruction_loss_var(&mut tape, l, &adj, 1.5);
        let plain = reconstruction_loss(&probs, &adj, 1.5).unwrap();
        assert!((tape.scalar(loss) - plain).abs() < 1e-14);
    }
}
