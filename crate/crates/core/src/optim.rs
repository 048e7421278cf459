use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-15,
        }
    }
}

/// First and second moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f32, cfg: &AdamConfig) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let step_size = lr / bc1;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let denom = (self.v[i] / bc2).sqrt() + cfg.epsilon;
            params[i] -= step_size * self.m[i] / denom;
        }
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u64(self.step);
        w.f32s(&self.m);
        w.f32s(&self.v);
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        let step = r.u64()?;
        let m = r.f32s()?;
        let v = r.f32s()?;
        if m.len() != v.len() {
            return Err(Error::Format("adam moment length mismatch".into()));
        }
        Ok(Self { step, m, v })
    }
}
