use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments for every parameter of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Extends the moment buffers after parameters were appended to the store.
    pub fn sync(&mut self, store: &ParamStore) {
        for (id, p) in store.iter().skip(self.m.len()) {
            debug_assert_eq!(id.index(), self.m.len());
            self.m.push(Tensor::zeros(p.value.shape()));
            self.v.push(Tensor::zeros(p.value.shape()));
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient are left
    /// untouched, including their weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.is_empty() {
            return Err(Error::contract("adam step without any gradient"));
        }
        self.sync(store);
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let param = store.value_mut(id);
            if g.shape() != param.shape() {
                return Err(Error::dim(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    param.shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &gv), mv), vv) in param.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                if c.weight_decay != 0.0 {
                    *p -= c.lr * c.weight_decay * *p;
                }
                *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    state.step(store, grads)
}
