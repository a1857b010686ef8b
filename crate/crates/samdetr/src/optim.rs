//! AdamW: Adam moment estimates with bias correction and decoupled weight
//! decay, honoring each parameter's learning-rate multiplier.

use samdetr_core::nn::ParamStore;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

pub struct AdamW {
    weight_decay: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let m = store.iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        let v = store.iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        AdamW { weight_decay, t: 0, m, v }
    }

    /// One update over every parameter; `grads` is indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient count must match the store");
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            let id = samdetr_core::nn::ParamId::from_index(i);
            let lr_i = lr * store.entry(id).lr_mult;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = store.get_mut(id).data_mut();
            assert_eq!(grad.len(), data.len(), "gradient length mismatch at parameter {i}");
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr_i * (m_hat / (v_hat.sqrt() + EPS) + self.weight_decay * data[j]);
            }
        }
    }
}
