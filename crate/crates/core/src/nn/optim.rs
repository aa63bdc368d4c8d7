use super::tensor::Module;
use super::Real;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2.5e-3, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

/// First and second moment buffers for one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<R> {
    pub m: Vec<R>,
    pub v: Vec<R>,
}

/// Adam with bias correction. State is keyed by parameter name so it can be
/// checkpointed next to the network it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<R> {
    pub config: AdamConfig,
    pub t: u64,
    pub state: BTreeMap<String, Moments<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, state: BTreeMap::new() }
    }

    pub fn step(&mut self, net: &mut dyn Module<R>) {
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (R::lit(c.beta1), R::lit(c.beta2));
        let (ob1, ob2) = (R::lit(1.0 - c.beta1), R::lit(1.0 - c.beta2));
        let step = R::lit(c.lr / bc1);
        let inv_bc2 = R::lit(1.0 / bc2);
        let eps = R::lit(c.eps);
        for (name, p) in net.params_mut() {
            let slot = self.state.entry(name).or_insert_with(|| Moments {
                m: vec![R::zero(); p.len()],
                v: vec![R::zero(); p.len()],
            });
            for i in 0..p.value.len() {
                let g = p.grad[i];
                slot.m[i] = b1 * slot.m[i] + ob1 * g;
                slot.v[i] = b2 * slot.v[i] + ob2 * g * g;
                let denom = (slot.v[i] * inv_bc2).sqrt() + eps;
                p.value[i] -= step * slot.m[i] / denom;
            }
        }
    }
}
