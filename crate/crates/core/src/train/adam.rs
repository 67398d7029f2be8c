//! Adam with decoupled weight decay over named parameter sets.

use std::collections::BTreeMap;

use crate::model::ParamSet;

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| {
            p.tensors
                .iter()
                .map(|(k, t)| (k.clone(), vec![0.0; t.data.len()]))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, weight_decay: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (name, w) in params.tensors.iter_mut() {
            let g = &grads.get(name).data;
            let m = self.m.get_mut(name).expect("state matches params");
            let v = self.v.get_mut(name).expect("state matches params");
            for i in 0..w.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                w.data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * w.data[i]);
            }
        }
    }
}
