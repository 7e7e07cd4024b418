//! L2-regularized multinomial logistic regression for linear probes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GcfxError, Result};

/// Per-feature mean and standard deviation fitted on training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    /// Constant columns get unit scale so they map to zero.
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let var = x
            .rows()
            .into_iter()
            .fold(Array1::zeros(x.ncols()), |acc: Array1<f64>, r| {
                acc + (&r - &mean).mapv(|d| d * d)
            })
            / n;
        let std = var.mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
        Self { mean, std }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Inverse regularization strengths tried by inner validation.
    pub c_grid: Vec<f64>,
    pub inner_folds: usize,
    pub max_iter: usize,
    /// Stop when the gradient's infinity norm falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            c_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3],
            inner_folds: 5,
            max_iter: 500,
            tol: 1e-7,
            seed: 0,
        }
    }
}

/// Fitted model: `argmax_k (x W + b)_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    pub classes: Vec<i64>,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LogisticRegression {
    /// Minimizes `(1/n) Σ_i CE_i + ||W||² / (2 C n)` with L-BFGS.
    pub fn fit(x: ArrayView2<f64>, y: &[i64], c: f64, max_iter: usize, tol: f64) -> Result<Self> {
        if x.nrows() != y.len() || y.is_empty() {
            return Err(GcfxError::Argument(
                "one label per training row required".into(),
            ));
        }
        if !(c > 0.0) {
            return Err(GcfxError::Argument("C must be positive".into()));
        }
        let mut classes: Vec<i64> = y.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(GcfxError::Argument(
                "training data holds a single class".into(),
            ));
        }
        let (n, p, k) = (x.nrows(), x.ncols(), classes.len());
        let idx: Vec<usize> = y
            .iter()
            .map(|l| classes.binary_search(l).expect("label in class list"))
            .collect();
        let reg = 1.0 / (c * n as f64);
        let objective = |theta: &[f64]| -> (f64, Vec<f64>) {
            let w = ArrayView2::from_shape((p, k), &theta[..p * k]).expect("weight block");
            let b = &theta[p * k..];
            let mut logits = x.dot(&w);
            for mut row in logits.rows_mut() {
                row.iter_mut().zip(b).for_each(|(l, bi)| *l += bi);
            }
            let mut loss = 0.0;
            for (mut row, &t) in logits.rows_mut().into_iter().zip(&idx) {
                let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                loss += m + z.ln() - row[t];
                row.mapv_inplace(|v| (v - m).exp() / z);
                row[t] -= 1.0;
            }
            let resid = logits / n as f64;
            let gw = x.t().dot(&resid) + &w * reg;
            let gb = resid.sum_axis(Axis(0));
            let value = loss / n as f64 + 0.5 * reg * w.iter().map(|v| v * v).sum::<f64>();
            let mut grad = gw.into_raw_vec_and_offset().0;
            grad.extend(gb.iter());
            (value, grad)
        };
        let theta = lbfgs(objective, vec![0.0; p * k + k], max_iter, tol);
        let weights =
            Array2::from_shape_vec((p, k), theta[..p * k].to_vec()).expect("weight block");
        let bias = Array1::from(theta[p * k..].to_vec());
        Ok(Self {
            classes,
            weights,
            bias,
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<i64> {
        let scores = x.dot(&self.weights) + &self.bias;
        scores
            .rows()
            .into_iter()
            .map(|r| {
                let best = r
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |a, (i, &v)| if v > a.1 { (i, v) } else { a },
                    );
                self.classes[best.0]
            })
            .collect()
    }
}

pub fn accuracy(pred: &[i64], truth: &[i64]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS (two-loop recursion, memory 10) with Armijo
/// backtracking. Deterministic for a deterministic objective.
pub fn lbfgs<F>(f: F, x0: Vec<f64>, max_iter: usize, tol: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    const MEMORY: usize = 10;
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    for _ in 0..max_iter {
        if g.iter().fold(0.0f64, |a, v| a.max(v.abs())) < tol {
            break;
        }
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push((rho, a));
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0 / g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y), (rho, a)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
            s_hist.clear();
            y_hist.clear();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let improvement = fx - fn_;
        if dot(&s, &y) > 1e-12 {
            if s_hist.len() == MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        x = xn;
        fx = fn_;
        g = gn;
        if improvement.abs() <= 1e-15 * fx.abs().max(1.0) {
            break;
        }
    }
    x
}
