//! Diagonal-Gaussian posteriors, reparameterized sampling and KL terms.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{GcfxError, Result};
use crate::params::{xavier, Bound, ParamId, ParamSet};

/// log-variance is clamped into `[-LOG_VAR_CLAMP, LOG_VAR_CLAMP]`.
pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Array1<f64>,
    pub log_var: Array1<f64>,
}

impl GaussianPosterior {
    pub fn standard(d: usize) -> Self {
        Self {
            mu: Array1::zeros(d),
            log_var: Array1::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// One common sample per graph and one local sample per node.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z_c: Array1<f64>,
    pub z_l: Array2<f64>,
}

/// `z = mu + exp(0.5·log_var) ⊙ noise`
pub fn sample(posterior: &GaussianPosterior, noise: &Array1<f64>) -> Result<Array1<f64>> {
    if noise.len() != posterior.dim() {
        return Err(GcfxError::shape("noise width must match the posterior"));
    }
    Ok(&posterior.mu + &(posterior.log_var.mapv(|l| (0.5 * l).exp()) * noise))
}

/// `0.5 · Σ_k (mu_k² + exp(log_var_k) − 1 − log_var_k)`
pub fn kl_to_standard_normal(posterior: &GaussianPosterior) -> f64 {
    0.5 * posterior
        .mu
        .iter()
        .zip(posterior.log_var.iter())
        .map(|(&m, &l)| m * m + l.exp() - 1.0 - l)
        .sum::<f64>()
}

/// Reparameterized sample on the tape; `noise` has the shape of `mu`.
pub fn sample_var(tape: &mut Tape, mu: Var, log_var: Var, noise: Array2<f64>) -> Var {
    let half = tape.affine(log_var, 0.5, 0.0);
    let std = tape.exp(half);
    let eps = tape.leaf(noise);
    let scaled = tape.mul(std, eps);
    tape.add(mu, scaled)
}

/// Linear mean and log-variance heads for the common and local posteriors.
#[derive(Debug, Clone)]
pub struct LatentHeads {
    pub c_mu_w: ParamId,
    pub c_mu_b: ParamId,
    pub c_lv_w: ParamId,
    pub c_lv_b: ParamId,
    pub l_mu_w: ParamId,
    pub l_mu_b: ParamId,
    pub l_lv_w: ParamId,
    pub l_lv_b: ParamId,
    latent: usize,
}

/// Tape handles for posterior parameters: common rows are 1×d, local |V|×d.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub c_mu: Var,
    pub c_lv: Var,
    pub l_mu: Var,
    pub l_lv: Var,
}

impl LatentHeads {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        hidden: usize,
        latent: usize,
    ) -> Self {
        let mut lin = |name: &str| {
            let w = params.add(format!("latent.{name}_w"), xavier(rng, hidden, latent));
            let b = params.add(format!("latent.{name}_b"), Array2::zeros((1, latent)));
            (w, b)
        };
        let (c_mu_w, c_mu_b) = lin("c_mu");
        let (c_lv_w, c_lv_b) = lin("c_lv");
        let (l_mu_w, l_mu_b) = lin("l_mu");
        let (l_lv_w, l_lv_b) = lin("l_lv");
        Self {
            c_mu_w,
            c_mu_b,
            c_lv_w,
            c_lv_b,
            l_mu_w,
            l_mu_b,
            l_lv_w,
            l_lv_b,
            latent,
        }
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, h_c: Var, h_l: Var) -> PosteriorVars {
        let p = |id| b.var(id);
        let c_mu = Self::linear(tape, h_c, p(self.c_mu_w), p(self.c_mu_b));
        let c_lv = Self::linear(tape, h_c, p(self.c_lv_w), p(self.c_lv_b));
        let c_lv = tape.clamp(c_lv, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        let l_mu = Self::linear(tape, h_l, p(self.l_mu_w), p(self.l_mu_b));
        let l_lv = Self::linear(tape, h_l, p(self.l_lv_w), p(self.l_lv_b));
        let l_lv = tape.clamp(l_lv, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        PosteriorVars {
            c_mu,
            c_lv,
            l_mu,
            l_lv,
        }
    }

    /// Posterior parameters for one graph: one common, one per node.
    pub fn posterior_params(
        &self,
        params: &ParamSet,
        h_c: &Array1<f64>,
        h_l: &Array2<f64>,
    ) -> Result<(GaussianPosterior, Vec<GaussianPosterior>)> {
        let hidden = params.get(self.c_mu_w).nrows();
        if h_c.len() != hidden || h_l.ncols() != hidden {
            return Err(GcfxError::shape(format!(
                "posterior heads expect width {hidden}"
            )));
        }
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let hc = tape.leaf(h_c.clone().insert_axis(Axis(0)));
        let hl = tape.leaf(h_l.clone());
        let pv = self.forward(&mut tape, &b, hc, hl);
        let common = GaussianPosterior {
            mu: tape.value(pv.c_mu).row(0).to_owned(),
            log_var: tape.value(pv.c_lv).row(0).to_owned(),
        };
        let locals = tape
            .value(pv.l_mu)
            .rows()
            .into_iter()
            .zip(tape.value(pv.l_lv).rows())
            .map(|(m, l)| GaussianPosterior {
                mu: m.to_owned(),
                log_var: l.to_owned(),
            })
            .collect();
        Ok((common, locals))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sample_cases() {
        let p = GaussianPosterior {
            mu: array![1.0],
            log_var: array![4f64.ln()],
        };
        assert!((sample(&p, &array![0.5]).unwrap()[0] - 2.0).abs() < 1e-12);
        assert_eq!(sample(&p, &array![0.0]).unwrap(), array![1.0]);
        let unit = GaussianPosterior {
            mu: array![0.3, -1.0],
            log_var: array![0.0, 0.0],
        };
        assert_eq!(
            sample(&unit, &array![0.25, 2.0]).unwrap(),
            array![0.55, 1.0]
        );
        assert!(sample(&unit, &array![0.0]).is_err());
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_to_standard_normal(&GaussianPosterior::standard(5)), 0.0);
        let p = GaussianPosterior {
            mu: array![1.0],
            log_var: array![0.0],
        };
        assert!((kl_to_standard_normal(&p) - 0.5).abs() < 1e-12);
        let p = GaussianPosterior {
            mu: array![0.0],
            log_var: array![4f64.ln()],
        };
        assert!((kl_to_standard_normal(&p) - 0.5 * (3.0 - 4f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn zero_heads_standard_posteriors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let heads = LatentHeads::init(&mut ps, &mut rng, 3, 2);
        for v in ps.values_mut() {
            v.fill(0.0);
        }
        let (c, ls) = heads
            .posterior_params(&ps, &array![1.0, 2.0, 3.0], &Array2::ones((5, 3)))
            .unwrap();
        assert_eq!(c, GaussianPosterior::standard(2));
        assert_eq!(ls.len(), 5);
        assert!(ls.iter().all(|l| *l == GaussianPosterior::standard(2)));
    }

    #[test]
    fn identical_rows_identical_locals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let heads = LatentHeads::init(&mut ps, &mut rng, 3, 3);
        let h_l = array![[0.1, 0.2, 0.3], [0.5, 0.5, 0.5], [0.1, 0.2, 0.3]];
        let (_, ls) = heads
            .posterior_params(&ps, &array![0.0, 0.0, 0.0], &h_l)
            .unwrap();
        assert_eq!(ls[0], ls[2]);
    }
}
