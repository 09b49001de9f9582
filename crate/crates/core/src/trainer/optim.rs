//! Adaptive-moment optimizer with decoupled weight decay.

use crate::nn::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.96, eps: 1e-8, weight_decay: 0.03 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| {
                    let (r, c) = params.get(id).shape();
                    Tensor::zeros(r, c)
                })
                .collect::<Vec<_>>()
        };
        AdamW { config, step: 0, first: zeros(), second: zeros() }
    }

    /// Restores optimizer state (for resuming from a checkpoint).
    pub fn with_state(config: AdamWConfig, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Self {
        AdamW { config, step, first, second }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Applies one update. Weight decay only touches matrices (both
    /// dimensions > 1); gains, biases and single-row embeddings are exempt.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let decay = {
                let (r, c) = params.get(id).shape();
                r > 1 && c > 1
            };
            let p = params.get_mut(id);
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                if decay {
                    *pv -= lr * weight_decay * *pv;
                }
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamStore::new();
        let id = p.add("x", Tensor::scalar(1.0));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &p);
        let mut g = Gradients::zeros_like(&p);
        g.get_mut(id).data_mut()[0] = 3.0;
        opt.update(&mut p, &g, 0.1);
        // bias-corrected first step is lr·sign(g) up to eps
        assert!((p.get(id).item() - 0.9).abs() < 1e-8);
    }
}
