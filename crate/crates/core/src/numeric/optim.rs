//! Adam optimizer over parameter slots.
//!
//! Parameters are immutable tensors; a step builds replacement leaves and
//! writes them back into the owner's slots. Moment state is keyed by slot
//! index, so the slot ordering must stay stable across steps.

use crate::error::Result;

use super::tensor::{Gradients, Tensor};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, slots: &mut [&mut Tensor], grads: &Gradients) -> Result<()> {
        if self.m.is_empty() {
            self.m = slots.iter().map(|s| vec![0.0; s.numel()]).collect();
            self.v = slots.iter().map(|s| vec![0.0; s.numel()]).collect();
        }
        assert_eq!(self.m.len(), slots.len(), "slot count changed across steps");
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for (i, slot) in slots.iter_mut().enumerate() {
            let g = match grads.get(slot) {
                Some(g) => g,
                None => continue,
            };
            let gd = g.data();
            let mut data = slot.data().to_vec();
            for (j, x) in data.iter_mut().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gd[j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * gd[j] * gd[j];
                let mhat = *m / b1c;
                let vhat = *v / b2c;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            let shape = slot.shape().to_vec();
            **slot = Tensor::param(data, &shape)?;
        }
        Ok(())
    }
}
