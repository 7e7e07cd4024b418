//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every forward operation appends a node to a [`Tape`] and returns a [`Var`]
//! handle. Calling [`Tape::backward`] on a scalar (1×1) node walks the tape in
//! reverse and returns the gradient of that scalar with respect to every node.
//! Scalars are represented as 1×1 matrices; row vectors as 1×d matrices.

use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis};

use crate::sparse::NormAdj;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    SpMM(Arc<NormAdj>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    BroadcastRows(Var),
    ConcatCols(Var, Var, usize),
    SumRows(Var),
    SumAll(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Affine(Var, f64),
    Clamp(Var, f64, f64),
    Bce {
        logits: Var,
        target: Arc<Array2<f64>>,
        pos_weight: f64,
        denom: f64,
    },
    KlStd {
        mu: Var,
        log_var: Var,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Lower and upper clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Records a computation so it can be differentiated.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` did not influence the output.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, materialized as zeros of `shape` when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Inserts an input or parameter.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    /// Multiplies by a constant symmetric sparse operator.
    pub fn spmm(&mut self, adj: &Arc<NormAdj>, x: Var) -> Var {
        let v = adj.apply(self.value(x));
        self.push(v, Op::SpMM(Arc::clone(adj), x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a 1×d row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// Repeats a 1×d row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row);
        let v = r
            .broadcast((n, r.ncols()))
            .expect("row broadcast")
            .to_owned();
        self.push(v, Op::BroadcastRows(row))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let split = self.value(a).ncols();
        let v = concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat rows must match");
        self.push(v, Op::ConcatCols(a, b, split))
    }

    /// Column-wise sum over rows, producing a 1×d row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).mapv(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the band.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Weighted binary cross-entropy between `sigmoid(logits)` and a 0/1
    /// target, averaged over off-diagonal entries. Probabilities are clamped
    /// to `[PROB_EPS, 1 - PROB_EPS]` before the log.
    pub fn bce_offdiag(&mut self, logits: Var, target: Arc<Array2<f64>>, pos_weight: f64) -> Var {
        let l = self.value(logits);
        let n = l.nrows();
        let count = n * n.saturating_sub(1);
        let mut total = 0.0;
        for j in 0..n {
            for k in 0..n {
                if j == k {
                    continue;
                }
                let p = sigmoid(l[[j, k]]).clamp(PROB_EPS, 1.0 - PROB_EPS);
                let a = target[[j, k]];
                total -= pos_weight * a * p.ln() + (1.0 - a) * (1.0 - p).ln();
            }
        }
        let denom = count.max(1) as f64;
        let v = Array2::from_elem((1, 1), if count == 0 { 0.0 } else { total / denom });
        self.push(
            v,
            Op::Bce {
                logits,
                target,
                pos_weight,
                denom,
            },
        )
    }

    /// `0.5 · Σ (mu² + exp(lv) − 1 − lv)` summed over every entry.
    pub fn kl_std_normal(&mut self, mu: Var, log_var: Var) -> Var {
        let m = self.value(mu);
        let lv = self.value(log_var);
        let kl = 0.5
            * m.iter()
                .zip(lv.iter())
                .map(|(&m, &l)| m * m + l.exp() - 1.0 - l)
                .sum::<f64>();
        self.push(Array2::from_elem((1, 1), kl), Op::KlStd { mu, log_var })
    }

    /// Reverse pass from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: d a = g b, d b = gᵀ a
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::SpMM(adj, x) => {
                    acc(&mut grads, *x, adj.apply(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g.clone());
                }
                Op::BroadcastRows(row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                }
                Op::ConcatCols(a, b, split) => {
                    let ga = g.slice(s![.., ..*split]).to_owned();
                    let gb = g.slice(s![.., *split..]).to_owned();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::SumRows(a) => {
                    let n = self.value(*a).nrows();
                    let ga = g.broadcast((n, g.ncols())).unwrap().to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = &g * &node.value;
                    acc(&mut grads, *a, ga);
                }
                Op::Affine(a, scale) => {
                    acc(&mut grads, *a, &g * *scale);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x < *lo || x > *hi {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Bce {
                    logits,
                    target,
                    pos_weight,
                    denom,
                } => {
                    let l = self.value(*logits);
                    let n = l.nrows();
                    let scale = g[[0, 0]] / denom;
                    let mut gl = Array2::zeros((n, n));
                    for j in 0..n {
                        for k in 0..n {
                            if j == k {
                                continue;
                            }
                            let raw = sigmoid(l[[j, k]]);
                            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&raw) {
                                continue;
                            }
                            let a = target[[j, k]];
                            // d/ds of −[w a ln σ + (1−a) ln(1−σ)]
                            gl[[j, k]] = scale * (-pos_weight * a * (1.0 - raw) + (1.0 - a) * raw);
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::KlStd { mu, log_var } => {
                    let s = g[[0, 0]];
                    let gm = self.value(*mu).mapv(|m| s * m);
                    let gl = self.value(*log_var).mapv(|l| s * 0.5 * (l.exp() - 1.0));
                    acc(&mut grads, *mu, gm);
                    acc(&mut grads, *log_var, gl);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}
