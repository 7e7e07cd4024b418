//! Adaptive-moment (Adam) optimizer over a [`ParamSet`].

use ndarray::{Array2, Zip};

use crate::params::ParamSet;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn minimizes_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new(&ps, 0.1);
        for _ in 0..500 {
            let g = ps.get(id).mapv(|x| 2.0 * x);
            opt.step(&mut ps, &[g]);
        }
        assert!(ps.get(id).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", array![[1.0]]);
        let mut opt = Adam::new(&ps, 0.01);
        opt.step(&mut ps, &[array![[5.0]]]);
        assert!((ps.get(id)[[0, 0]] - 0.99).abs() < 1e-9);
    }
}
