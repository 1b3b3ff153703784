//! AdamW: adaptive moments with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let c = self.config;
        // Zero learning rate must leave parameters bit-identical, decay included.
        if c.learning_rate == 0.0 {
            self.step += 1;
            return;
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads.iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let m = self.first[id].data_mut();
            let v = self.second[id].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                p[k] -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::default();
        store.insert("x", Matrix::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = AdamW::new(
            AdamWConfig {
                learning_rate: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let mut g = Gradients::zeros_like(&store);
            let x = store.get(0).clone();
            g.accumulate(0, &Matrix::from_vec(1, 2, x.data().iter().map(|v| 2.0 * v).collect()));
            opt.step(&mut store, &g);
        }
        assert!(store.get(0).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut store = ParamStore::default();
        store.insert("x", Matrix::from_vec(1, 2, vec![0.3, -0.7]));
        let before = store.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            &store,
        );
        let mut g = Gradients::zeros_like(&store);
        g.accumulate(0, &Matrix::from_vec(1, 2, vec![1.0, 1.0]));
        opt.step(&mut store, &g);
        assert_eq!(store, before);
    }
}
