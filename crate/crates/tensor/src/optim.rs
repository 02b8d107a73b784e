use crate::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| vec![0.0; t.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            state: AdamState {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f32) {
        self.state.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, grad) in grads.iter() {
            let m = &mut self.state.m[id.0];
            let v = &mut self.state.v[id.0];
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Cosine annealing from `base` at `epoch = 0` down to `min` at `epoch = total`.
pub fn cosine_lr(base: f32, min: f32, epoch: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let frac = (epoch.min(total) as f64) / total as f64;
    let cos = (std::f64::consts::PI * frac).cos();
    (min as f64 + 0.5 * (base - min) as f64 * (1.0 + cos)) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0.0, 0, 200), 1e-4);
        assert!(cosine_lr(1e-4, 0.0, 200, 200).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0.0, 100, 200) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..2000 {
            let mut g = Graph::new(&store);
            let w = g.param(id);
            let target = g.input(Tensor::new(&[2], vec![0.5, 1.5]).unwrap());
            let loss = g.mse(w, target);
            let grads = g.backward(loss);
            adam.step(&mut store, &grads, 1e-2);
        }
        let w = store.get(id).data();
        assert!((w[0] - 0.5).abs() < 1e-3 && (w[1] - 1.5).abs() < 1e-3, "{w:?}");
    }
}
