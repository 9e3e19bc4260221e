//! Trainable parameters and in-place optimizer steps.
//!
//! A [`Parameter`] owns its value, its accumulated gradient, and optimizer
//! state. Networks hand tracked views of their parameters to each new tape
//! with [`Parameter::tracked`] and pull gradients back afterwards with
//! [`Parameter::accumulate_grad_from`].

use std::cell::Cell;

use super::{Tape, Tensor};

pub struct Parameter {
    pub name: String,
    value: Tensor,
    grad: Vec<f32>,
    /// First moment for Adam, velocity for SGD with momentum.
    m: Vec<f32>,
    /// Second moment for Adam; unused by SGD.
    v: Vec<f32>,
    steps: u64,
    /// Last (tape id, node id) this parameter was watched on, so that two
    /// uses inside one forward pass share a single leaf node and their
    /// gradients accumulate there.
    node_cache: Cell<Option<(u64, usize)>>,
}

impl Clone for Parameter {
    /// Clones value, gradient, and optimizer state. The tape-node cache is
    /// deliberately dropped: a clone must watch itself on whatever tape it
    /// meets next instead of aliasing the original's leaf node.
    fn clone(&self) -> Parameter {
        Parameter {
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            m: self.m.clone(),
            v: self.v.clone(),
            steps: self.steps,
            node_cache: Cell::new(None),
        }
    }
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Parameter {
        let n = value.numel();
        Parameter {
            name: name.into(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
            node_cache: Cell::new(None),
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Replace the value, keeping optimizer state dimensions in sync.
    pub fn set_value(&mut self, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.value.shape(),
            "parameter {}: shape change {:?} -> {:?}",
            self.name,
            self.value.shape(),
            value.shape()
        );
        self.value = value;
        self.node_cache.set(None);
    }

    pub fn grad(&self) -> &[f32] {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// View of this parameter attached to `tape` as a leaf. Repeat calls on
    /// the same tape return the same node.
    pub fn tracked(&self, tape: &Tape) -> Tensor {
        if let Some((tid, nid)) = self.node_cache.get() {
            if tid == tape.id() {
                return self.value.detach().with_node(tape.clone(), nid);
            }
        }
        let t = tape.watch(&self.value);
        if let Some((_, nid)) = t.node() {
            self.node_cache.set(Some((tape.id(), *nid)));
        }
        t
    }

    /// Pull this parameter's gradient off a tape after backward, adding into
    /// the local accumulator.
    pub fn accumulate_grad_from(&mut self, tape: &Tape) {
        let Some((tid, nid)) = self.node_cache.get() else {
            return;
        };
        if tid != tape.id() {
            return;
        }
        if let Some(g) = tape.grad_of_id(nid) {
            for (a, v) in self.grad.iter_mut().zip(g) {
                *a += v;
            }
        }
    }

    /// Adam update with bias correction. Clears nothing; call
    /// [`Parameter::zero_grad`] once the step is applied.
    pub fn adam_step(&mut self, lr: f32, beta1: f32, beta2: f32, eps: f32) {
        self.steps += 1;
        let t = self.steps as f32;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let mut data = self.value.to_vec();
        for i in 0..data.len() {
            let g = self.grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        self.value = Tensor::from_vec(self.value.shape().to_vec(), data);
        self.node_cache.set(None);
    }

    /// Classic momentum SGD: v <- mu v + g, w <- w - lr v.
    pub fn sgd_momentum_step(&mut self, lr: f32, momentum: f32) {
        self.steps += 1;
        let mut data = self.value.to_vec();
        for i in 0..data.len() {
            self.m[i] = momentum * self.m[i] + self.grad[i];
            data[i] -= lr * self.m[i];
        }
        self.value = Tensor::from_vec(self.value.shape().to_vec(), data);
        self.node_cache.set(None);
    }

    pub fn grad_l2_norm(&self) -> f64 {
        self.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
    }
}

/// Backpropagate a scalar loss and accumulate gradients for the given
/// parameters in one call.
pub fn backward_and_collect(tape: &Tape, loss: &Tensor, params: &mut [&mut Parameter]) {
    tape.backward(loss);
    for p in params.iter_mut() {
        p.accumulate_grad_from(tape);
    }
}
