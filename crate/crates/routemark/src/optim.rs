//! Named parameter storage and a lazily-stepped AdamW optimizer.
//!
//! Only one adapter per routed block receives gradient in a given step, so
//! the optimizer updates a parameter slot only when a gradient for it is
//! present: moments, bias-correction step counts and weight decay all
//! advance per slot. Untouched slots are bit-identical after a step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{EngineError, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamRef {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamRef(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, r: ParamRef) -> &Tensor {
        &self.tensors[r.0]
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut Tensor {
        &mut self.tensors[r.0]
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.names[r.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamRef, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamRef(i), self.names[i].as_str(), t))
    }

    /// Combined checksum over every tensor, order-sensitive.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
        for t in &self.tensors {
            h = h.rotate_left(7) ^ t.bit_checksum();
        }
        h
    }
}

/// Gradients keyed by parameter slot; BTreeMap keeps reduction order fixed.
pub type Gradients = BTreeMap<usize, Tensor>;

/// Accumulates `g / scale` into the slot for deterministic batch averaging.
pub fn accumulate_grad(grads: &mut Gradients, slot: usize, g: &Tensor, scale: f32) {
    match grads.get_mut(&slot) {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b / scale;
            }
        }
        None => {
            let mut t = g.clone();
            for v in t.data_mut() {
                *v /= scale;
            }
            grads.insert(slot, t);
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Decoupled-weight-decay Adam with per-slot bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, m: Vec::new(), v: Vec::new(), t: Vec::new() }
    }

    fn ensure(&mut self, slots: usize) {
        while self.m.len() < slots {
            self.m.push(None);
            self.v.push(None);
            self.t.push(0);
        }
    }

    /// Applies one update to every slot that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), EngineError> {
        self.ensure(store.len());
        for (&slot, grad) in grads {
            let param = store.get_mut(ParamRef(slot));
            if param.shape() != grad.shape() {
                return Err(EngineError::ShapeMismatch {
                    op: "adamw",
                    detail: format!(
                        "param {:?} vs grad {:?} at slot {slot}",
                        param.shape(),
                        grad.shape()
                    ),
                });
            }
            if self.m[slot].is_none() {
                self.m[slot] = Some(Tensor::zeros(param.shape()));
                self.v[slot] = Some(Tensor::zeros(param.shape()));
            }
            self.t[slot] += 1;
            let t = self.t[slot];
            let c = self.cfg;
            let bc1 = 1.0 - c.beta1.powi(t as i32);
            let bc2 = 1.0 - c.beta2.powi(t as i32);
            let m = self.m[slot].as_mut().unwrap();
            let v = self.v[slot].as_mut().unwrap();
            for ((w, g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }

    /// (moment1, moment2, step) for a slot, if it has ever been updated.
    pub fn slot_state(&self, slot: usize) -> Option<(&Tensor, &Tensor, u64)> {
        let m = self.m.get(slot)?.as_ref()?;
        let v = self.v.get(slot)?.as_ref()?;
        Some((m, v, self.t[slot]))
    }

    pub fn restore_slot(&mut self, slot: usize, m: Tensor, v: Tensor, t: u64) {
        self.ensure(slot + 1);
        self.m[slot] = Some(m);
        self.v[slot] = Some(v);
        self.t[slot] = t;
    }

    pub fn slots(&self) -> usize {
        self.m.len()
    }
}
