//! Gated recurrent unit over row vectors.
//!
//! ```text
//! r  = σ(x W_r + h U_r + b_r)
//! z  = σ(x W_z + h U_z + b_z)
//! n  = tanh(x W_n + b_n + r ⊙ (h U_n + b_hn))
//! h' = (1 − z) ⊙ h + z ⊙ n
//! ```
//! With the update gate at zero the state passes through unchanged.

use rand::Rng;

use ndarray::Array2;

use crate::autograd::{Tape, Var};
use crate::params::{xavier, Bound, ParamId, ParamSet};

#[derive(Debug, Clone)]
pub struct Gru {
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
    pub b_hn: ParamId,
}

impl Gru {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        prefix: &str,
        input: usize,
        state: usize,
    ) -> Self {
        let mut w = |name: &str, rows: usize| {
            params.add(format!("{prefix}.{name}"), xavier(rng, rows, state))
        };
        let (w_r, u_r) = (w("w_r", input), w("u_r", state));
        let (w_z, u_z) = (w("w_z", input), w("u_z", state));
        let (w_n, u_n) = (w("w_n", input), w("u_n", state));
        let mut b = |name: &str| params.add(format!("{prefix}.{name}"), Array2::zeros((1, state)));
        Self {
            w_r,
            u_r,
            b_r: b("b_r"),
            w_z,
            u_z,
            b_z: b("b_z"),
            w_n,
            u_n,
            b_n: b("b_n"),
            b_hn: b("b_hn"),
        }
    }

    fn gate(tape: &mut Tape, x: Var, h: Var, w: Var, u: Var, b: Var) -> Var {
        let xw = tape.matmul(x, w);
        let hu = tape.matmul(h, u);
        let s = tape.add(xw, hu);
        let s = tape.add_row(s, b);
        tape.sigmoid(s)
    }

    /// One recurrent step with input `x` and previous state `h` (both 1×d rows).
    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var) -> Var {
        let p = |id| bound.var(id);
        let r = Self::gate(tape, x, h, p(self.w_r), p(self.u_r), p(self.b_r));
        let z = Self::gate(tape, x, h, p(self.w_z), p(self.u_z), p(self.b_z));
        let xn = tape.matmul(x, p(self.w_n));
        let xn = tape.add_row(xn, p(self.b_n));
        let hn = tape.matmul(h, p(self.u_n));
        let hn = tape.add_row(hn, p(self.b_hn));
        let rhn = tape.mul(r, hn);
        let pre = tape.add(xn, rhn);
        let n = tape.tanh(pre);
        // h + z ⊙ (n − h)
        let diff = tape.sub(n, h);
        let zd = tape.mul(z, diff);
        tape.add(h, zd)
    }
}
