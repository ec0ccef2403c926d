//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::tensor::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        Adam { cfg, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.t += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, eps } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let tensors = params.tensors_mut().iter_mut().zip(grads.tensors());
        for (((p, g), m), v) in tensors.zip(self.m.tensors_mut()).zip(self.v.tensors_mut()) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                p.data[i] -= lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", &[2], vec![1.0, -1.0]);
        let mut g = ps.zeros_like();
        g.get_mut(id).copy_from_slice(&[3.0, -0.5]);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        adam.step(&mut ps, &g);
        // bias-corrected m/sqrt(v) is sign(g) on the first step
        assert!((ps.get(id)[0] - (1.0 - 5e-4)).abs() < 1e-10);
        assert!((ps.get(id)[1] - (-1.0 + 5e-4)).abs() < 1e-10);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", &[1], vec![2.0]);
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.05, ..AdamConfig::default() }, &ps);
        for _ in 0..2000 {
            let mut g = ps.zeros_like();
            g.get_mut(id)[0] = 2.0 * (ps.get(id)[0] - 0.5);
            adam.step(&mut ps, &g);
        }
        assert!((ps.get(id)[0] - 0.5).abs() < 1e-3);
    }
}
