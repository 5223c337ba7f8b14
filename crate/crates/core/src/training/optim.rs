use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{ParamGroup, ParamStore};

/// SGD with heavy-ball momentum (`v = mu v + g; p -= lr v`) and
/// per-group learning rates.
#[derive(Debug, Clone)]
pub struct Sgd {
    store: ParamStore,
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            store: store.clone(),
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor>) {
        self.velocity = velocity;
    }

    /// Applies one update. Parameters without a gradient are left alone,
    /// momentum included.
    pub fn step(&mut self, grads: &GradStore, lr_backbone: f64, lr_rest: f64) -> Result<()> {
        for (name, param) in self.store.params() {
            let Some(g) = grads.get(param.var.as_tensor()) else {
                continue;
            };
            let p = param.var.as_tensor();
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                g = (g + (p * self.weight_decay)?)?;
            }
            let v = match self.velocity.get(&name) {
                Some(v) if self.momentum != 0.0 => ((v * self.momentum)? + g)?,
                _ => g,
            };
            let lr = match param.group {
                ParamGroup::Backbone => lr_backbone,
                ParamGroup::Rest => lr_rest,
            };
            if lr != 0.0 {
                param.var.set(&(p - (&v * lr)?)?)?;
            }
            self.velocity.insert(name, v.detach());
        }
        Ok(())
    }
}
