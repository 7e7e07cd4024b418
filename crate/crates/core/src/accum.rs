//! Iterative query-based reasoning with feature masking.
//!
//! Starting from a learned query `q_c(0)`, every iteration
//!
//! 1. scores each factor slot of each patch against the query:
//!    `δ_v = σ(f_s([h_v W_k, q_c W_q]))`;
//! 2. marks slot `k` of patch `v` as common when `σ(h_v W_k)[k] ≥ δ_v[k]`
//!    and as local otherwise;
//! 3. splits the value projection `h_v W_v` with those masks;
//! 4. sums the common parts over all patches and feeds the sum to a GRU
//!    whose state is the query.
//!
//! After the last iteration the GRU state is the graph-wise common vector
//! `h_c` and the local parts of the last split are the per-node residue.
//!
//! The indicator in step 2 has no gradient. In [`MaskMode::Hard`] the masks
//! are constants on the tape; [`MaskMode::Soft`] replaces the indicator with
//! `σ((σ(h W_k) − δ)/τ)` so that `f_s`, `W_q` and the query path train.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution};

use crate::autograd::{Tape, Var};
use crate::error::{GcfxError, Result};
use crate::gru::Gru;
use crate::params::{normal, xavier, Bound, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskMode {
    Hard,
    Soft { tau: f64 },
}

/// Query state after `iteration` accumulation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonQueryState {
    pub q_c: Array1<f64>,
    pub iteration: usize,
}

/// Complementary common/local masks for one node.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub m_c: Array1<f64>,
    pub m_l: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Accum {
    pub w_k: ParamId,
    pub w_q: ParamId,
    pub w_v: ParamId,
    pub fs_w1: ParamId,
    pub fs_b1: ParamId,
    pub fs_w2: ParamId,
    pub fs_b2: ParamId,
    pub gru: Gru,
    pub q_init: ParamId,
    iters: usize,
    width: usize,
}

/// Tape handles for one iteration of the procedure.
#[derive(Debug, Clone)]
pub struct AccumStep {
    /// Query after this step, 1×d.
    pub q: Var,
    /// Masked common parts, |V|×d.
    pub h_c: Var,
    /// Masked local parts, |V|×d.
    pub h_l: Var,
    /// Common mask values used in this step.
    pub m_c: Var,
}

/// Everything produced by a full run on the tape.
#[derive(Debug, Clone)]
pub struct AccumRun {
    pub q_init: Var,
    pub steps: Vec<AccumStep>,
}

impl AccumRun {
    pub fn h_c(&self) -> Var {
        self.steps.last().map(|s| s.q).unwrap_or(self.q_init)
    }

    pub fn h_l(&self) -> Var {
        self.steps.last().expect("at least one step").h_l
    }
}

impl Accum {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        width: usize,
        iters: usize,
    ) -> Self {
        let d = width;
        let w_k = params.add("accum.w_k", xavier(rng, d, d));
        let w_q = params.add("accum.w_q", xavier(rng, d, d));
        let w_v = params.add("accum.w_v", xavier(rng, d, d));
        let fs_w1 = params.add("accum.fs_w1", xavier(rng, 2 * d, d));
        let fs_b1 = params.add("accum.fs_b1", Array2::zeros((1, d)));
        let fs_w2 = params.add("accum.fs_w2", xavier(rng, d, d));
        let fs_b2 = params.add("accum.fs_b2", Array2::zeros((1, d)));
        let gru = Gru::init(params, rng, "accum.gru", d, d);
        let q_init = params.add("accum.q_init", normal(rng, 1, d, 0.01));
        Self {
            w_k,
            w_q,
            w_v,
            fs_w1,
            fs_b1,
            fs_w2,
            fs_b2,
            gru,
            q_init,
            iters,
            width,
        }
    }

    pub fn iters(&self) -> usize {
        self.iters
    }

    pub fn set_iters(&mut self, iters: usize) {
        self.iters = iters;
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// δ for every node given precomputed keys `h W_k`.
    pub fn similarity_var(&self, tape: &mut Tape, b: &Bound, keys: Var, q: Var) -> Var {
        let n = tape.value(keys).nrows();
        let qp = tape.matmul(q, b.var(self.w_q));
        let qp = tape.broadcast_rows(qp, n);
        let cat = tape.concat_cols(keys, qp);
        let hid = tape.matmul(cat, b.var(self.fs_w1));
        let hid = tape.add_row(hid, b.var(self.fs_b1));
        let hid = tape.tanh(hid);
        let out = tape.matmul(hid, b.var(self.fs_w2));
        let out = tape.add_row(out, b.var(self.fs_b2));
        tape.sigmoid(out)
    }

    fn masks_var(&self, tape: &mut Tape, key_sig: Var, delta: Var, mode: MaskMode) -> (Var, Var) {
        match mode {
            MaskMode::Hard => {
                let (m_c, m_l) = hard_masks(tape.value(key_sig), tape.value(delta));
                (tape.leaf(m_c), tape.leaf(m_l))
            }
            MaskMode::Soft { tau } => {
                let diff = tape.sub(key_sig, delta);
                let scaled = tape.affine(diff, 1.0 / tau, 0.0);
                let m_c = tape.sigmoid(scaled);
                let m_l = tape.affine(m_c, -1.0, 1.0);
                (m_c, m_l)
            }
        }
    }

    /// Runs `iters` steps (use [`Accum::iters`] for the configured count).
    pub fn run_var(
        &self,
        tape: &mut Tape,
        b: &Bound,
        h: Var,
        mode: MaskMode,
        iters: usize,
    ) -> AccumRun {
        let keys = tape.matmul(h, b.var(self.w_k));
        let key_sig = tape.sigmoid(keys);
        let values = tape.matmul(h, b.var(self.w_v));
        let q_init = b.var(self.q_init);
        let mut q = q_init;
        let mut steps = Vec::with_capacity(iters);
        for _ in 0..iters {
            let delta = self.similarity_var(tape, b, keys, q);
            let (m_c, m_l) = self.masks_var(tape, key_sig, delta, mode);
            let h_c = tape.mul(m_c, values);
            let h_l = tape.mul(m_l, values);
            let update = tape.sum_rows(h_c);
            q = self.gru.step(tape, b, update, q);
            steps.push(AccumStep { q, h_c, h_l, m_c });
        }
        AccumRun { q_init, steps }
    }

    /// Single accumulation step with i.i.d. Bernoulli(0.5) masks.
    pub fn run_random_var<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        b: &Bound,
        h: Var,
        rng: &mut R,
    ) -> AccumRun {
        let values = tape.matmul(h, b.var(self.w_v));
        let (m_c, m_l) = random_masks(tape.value(values).dim(), rng);
        let m_c = tape.leaf(m_c);
        let m_l = tape.leaf(m_l);
        let h_c = tape.mul(m_c, values);
        let h_l = tape.mul(m_l, values);
        let update = tape.sum_rows(h_c);
        let q_init = b.var(self.q_init);
        let q = self.gru.step(tape, b, update, q_init);
        AccumRun {
            q_init,
            steps: vec![AccumStep { q, h_c, h_l, m_c }],
        }
    }

    fn check_width(&self, what: &str, cols: usize) -> Result<()> {
        if cols != self.width {
            return Err(GcfxError::shape(format!(
                "{what} width {cols}, expected {}",
                self.width
            )));
        }
        Ok(())
    }

    /// Factor-wise similarity of every patch to the query; entries in (0,1).
    pub fn similarity_scores(
        &self,
        params: &ParamSet,
        h: &Array2<f64>,
        q_c: &Array1<f64>,
    ) -> Result<Array2<f64>> {
        self.check_width("patch", h.ncols())?;
        self.check_width("query", q_c.len())?;
        if !h.iter().chain(q_c.iter()).all(|x| x.is_finite()) {
            return Err(GcfxError::numeric("accum", "non-finite similarity input"));
        }
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let hv = tape.leaf(h.clone());
        let keys = tape.matmul(hv, b.var(self.w_k));
        let q = tape.leaf(q_c.clone().insert_axis(ndarray::Axis(0)));
        let delta = self.similarity_var(&mut tape, &b, keys, q);
        Ok(tape.value(delta).clone())
    }

    /// Hard masks: slot is common iff `σ(h W_k) ≥ δ`.
    pub fn compute_masks(
        &self,
        params: &ParamSet,
        h: &Array2<f64>,
        delta: &Array2<f64>,
    ) -> Result<Vec<MaskPair>> {
        self.check_width("patch", h.ncols())?;
        if delta.dim() != h.dim() {
            return Err(GcfxError::shape("similarity scores must match patch shape"));
        }
        let key_sig = h.dot(params.get(self.w_k)).mapv(crate::autograd::logistic);
        let (m_c, m_l) = hard_masks(&key_sig, delta);
        Ok(m_c
            .rows()
            .into_iter()
            .zip(m_l.rows())
            .map(|(c, l)| MaskPair {
                m_c: c.to_owned(),
                m_l: l.to_owned(),
            })
            .collect())
    }

    /// Splits `h W_v` into common and local parts.
    pub fn split_features(
        &self,
        params: &ParamSet,
        h: &Array2<f64>,
        masks: &[MaskPair],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_width("patch", h.ncols())?;
        if masks.len() != h.nrows() {
            return Err(GcfxError::shape("one mask pair per node required"));
        }
        let values = h.dot(params.get(self.w_v));
        let mut h_c = values.clone();
        let mut h_l = values;
        for (v, m) in masks.iter().enumerate() {
            h_c.row_mut(v).zip_mut_with(&m.m_c, |x, &c| *x *= c);
            h_l.row_mut(v).zip_mut_with(&m.m_l, |x, &l| *x *= l);
        }
        Ok((h_c, h_l))
    }

    /// Sums the common parts and advances the query by one GRU step.
    pub fn accumulate(
        &self,
        params: &ParamSet,
        h_c: &Array2<f64>,
        prev: &CommonQueryState,
    ) -> Result<CommonQueryState> {
        self.check_width("common part", h_c.ncols())?;
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let hc = tape.leaf(h_c.clone());
        let update = tape.sum_rows(hc);
        let q = tape.leaf(prev.q_c.clone().insert_axis(ndarray::Axis(0)));
        let next = self.gru.step(&mut tape, &b, update, q);
        Ok(CommonQueryState {
            q_c: tape.value(next).row(0).to_owned(),
            iteration: prev.iteration + 1,
        })
    }

    /// Full run with hard masks. Returns `h_c = q_c(M)`, the final local parts
    /// and the query trace `q_c(0..=M)`.
    pub fn run_accum(
        &self,
        params: &ParamSet,
        h: &Array2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>, Vec<CommonQueryState>)> {
        self.check_width("patch", h.ncols())?;
        if self.iters == 0 {
            return Err(GcfxError::Config(
                "accumulation needs at least one iteration (0 is the random baseline)".into(),
            ));
        }
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let hv = tape.leaf(h.clone());
        let run = self.run_var(&mut tape, &b, hv, MaskMode::Hard, self.iters);
        let row = |v: Var| tape.value(v).row(0).to_owned();
        let mut trace = vec![CommonQueryState {
            q_c: row(run.q_init),
            iteration: 0,
        }];
        for (i, s) in run.steps.iter().enumerate() {
            trace.push(CommonQueryState {
                q_c: row(s.q),
                iteration: i + 1,
            });
        }
        Ok((row(run.h_c()), tape.value(run.h_l()).clone(), trace))
    }

    /// Random-filter baseline: Bernoulli(0.5) masks, one accumulation step.
    pub fn run_accum_random(
        &self,
        params: &ParamSet,
        h: &Array2<f64>,
        seed: u64,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check_width("patch", h.ncols())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let hv = tape.leaf(h.clone());
        let run = self.run_random_var(&mut tape, &b, hv, &mut rng);
        Ok((
            tape.value(run.h_c()).row(0).to_owned(),
            tape.value(run.h_l()).clone(),
        ))
    }
}

pub(crate) fn hard_masks(key_sig: &Array2<f64>, delta: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut m_c = Array2::zeros(key_sig.dim());
    let mut m_l = Array2::zeros(key_sig.dim());
    ndarray::Zip::from(&mut m_c)
        .and(&mut m_l)
        .and(key_sig)
        .and(delta)
        .for_each(|c, l, &k, &d| {
            if k >= d {
                *c = 1.0;
            } else {
                *l = 1.0;
            }
        });
    (m_c, m_l)
}

pub(crate) fn random_masks<R: Rng + ?Sized>(
    dim: (usize, usize),
    rng: &mut R,
) -> (Array2<f64>, Array2<f64>) {
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let m_c = Array2::from_shape_fn(dim, |_| if coin.sample(rng) { 1.0 } else { 0.0 });
    let m_l = m_c.mapv(|c| 1.0 - c);
    (m_c, m_l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn setup(d: usize, iters: usize) -> (Accum, ParamSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let acc = Accum::init(&mut ps, &mut rng, d, iters);
        (acc, ps)
    }

    fn random_h(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal(&mut rng, n, d, 1.0)
    }

    #[test]
    fn similarity_in_open_unit_interval() {
        let (acc, ps) = setup(6, 3);
        let h = random_h(5, 6, 1) * 5.0;
        let d = acc
            .similarity_scores(&ps, &h, &Array1::from_elem(6, 0.3))
            .unwrap();
        assert!(d.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn zero_fs_output_gives_half() {
        let (acc, mut ps) = setup(4, 2);
        ps.get_mut(acc.fs_w2).fill(0.0);
        ps.get_mut(acc.fs_b2).fill(0.0);
        let d = acc
            .similarity_scores(&ps, &random_h(3, 4, 2), &Array1::zeros(4))
            .unwrap();
        assert!(d.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn identical_patches_identical_scores() {
        let (acc, ps) = setup(4, 2);
        let mut h = random_h(3, 4, 3);
        let r0 = h.row(0).to_owned();
        h.row_mut(2).assign(&r0);
        let d = acc
            .similarity_scores(&ps, &h, &Array1::from_elem(4, 0.1))
            .unwrap();
        assert_eq!(d.row(0), d.row(2));
    }

    #[test]
    fn non_finite_rejected() {
        let (acc, ps) = setup(2, 1);
        let h = array![[f64::NAN, 0.0]];
        assert!(matches!(
            acc.similarity_scores(&ps, &h, &Array1::zeros(2)),
            Err(GcfxError::Numeric { .. })
        ));
    }

    #[test]
    fn threshold_and_inclusive_boundary() {
        let (m_c, m_l) = hard_masks(&array![[0.9, 0.2]], &array![[0.5, 0.5]]);
        assert_eq!(m_c, array![[1.0, 0.0]]);
        assert_eq!(m_l, array![[0.0, 1.0]]);
        let (m_c, _) = hard_masks(&array![[0.3, 0.7]], &array![[0.3, 0.7]]);
        assert_eq!(m_c, array![[1.0, 1.0]]);
    }

    #[test]
    fn split_by_hand() {
        let (acc, mut ps) = setup(2, 1);
        *ps.get_mut(acc.w_v) = Array2::eye(2);
        let masks = vec![MaskPair {
            m_c: array![1.0, 0.0],
            m_l: array![0.0, 1.0],
        }];
        let (hc, hl) = acc
            .split_features(&ps, &array![[2.0, -3.0]], &masks)
            .unwrap();
        assert_eq!(hc, array![[2.0, 0.0]]);
        assert_eq!(hl, array![[0.0, -3.0]]);

        let all = vec![MaskPair {
            m_c: array![1.0, 1.0],
            m_l: array![0.0, 0.0],
        }];
        let (hc, hl) = acc.split_features(&ps, &array![[2.0, -3.0]], &all).unwrap();
        assert_eq!(hc, array![[2.0, -3.0]]);
        assert!(hl.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn closed_update_gate_keeps_query() {
        let (acc, mut ps) = setup(3, 1);
        ps.get_mut(acc.gru.b_z).fill(-1e3);
        let prev = CommonQueryState {
            q_c: array![0.4, -0.2, 1.5],
            iteration: 0,
        };
        let next = acc.accumulate(&ps, &Array2::zeros((4, 3)), &prev).unwrap();
        assert_eq!(next.q_c, prev.q_c);
        assert_eq!(next.iteration, 1);
    }

    #[test]
    fn single_node_update_is_its_common_part() {
        // with W_n = I, U = 0, biases 0 and the update gate fully open the new
        // state is tanh(q_update)
        let (acc, mut ps) = setup(2, 1);
        for id in [
            acc.gru.u_n,
            acc.gru.u_r,
            acc.gru.u_z,
            acc.gru.w_z,
            acc.gru.w_r,
        ] {
            ps.get_mut(id).fill(0.0);
        }
        *ps.get_mut(acc.gru.w_n) = Array2::eye(2);
        ps.get_mut(acc.gru.b_z).fill(1e3);
        let prev = CommonQueryState {
            q_c: array![0.0, 0.0],
            iteration: 0,
        };
        let next = acc.accumulate(&ps, &array![[0.3, -0.6]], &prev).unwrap();
        assert_eq!(next.q_c, array![0.3f64.tanh(), (-0.6f64).tanh()]);
    }

    #[test]
    fn run_lengths() {
        let (acc, ps) = setup(4, 1);
        let (hc, hl, trace) = acc.run_accum(&ps, &random_h(6, 4, 4)).unwrap();
        assert_eq!(hc.len(), 4);
        assert_eq!(hl.dim(), (6, 4));
        assert_eq!(trace.len(), 2);
        let (acc3, ps3) = setup(4, 3);
        let (_, _, trace) = acc3.run_accum(&ps3, &random_h(2, 4, 4)).unwrap();
        assert_eq!(
            trace.iter().map(|s| s.iteration).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn random_baseline_reproducible_and_balanced() {
        let (acc, ps) = setup(4, 2);
        let h = random_h(5, 4, 6);
        assert_eq!(
            acc.run_accum_random(&ps, &h, 9).unwrap(),
            acc.run_accum_random(&ps, &h, 9).unwrap()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m_c, m_l) = random_masks((200, 50), &mut rng);
        let frac = m_c.sum() / m_c.len() as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
        assert!((&m_c + &m_l).iter().all(|&x| x == 1.0));
    }
}
