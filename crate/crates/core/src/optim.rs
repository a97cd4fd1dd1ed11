//! AdamW, learning-rate schedules, gradient clipping and parameter averaging.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
    pub step: u64,
    pub first: Vec<Tensor<F>>,
    pub second: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(store: &ParamStore<F>, weight_decay: F) -> Self {
        let zeros: Vec<Tensor<F>> = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        AdamW {
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            eps: F::of(1e-8),
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Tensor<F>>], lr: F) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *w -= lr * self.weight_decay * *w;
                *mi = self.beta1 * *mi + (F::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (F::one() - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps.min(step)) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Option<Tensor<F>>], max_norm: F) -> F {
    let norm = grads
        .iter()
        .flatten()
        .map(Tensor::sq_norm)
        .sum::<F>()
        .sqrt();
    if norm > max_norm && norm > F::zero() {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.scale_assign(k);
        }
    }
    norm
}

pub fn grad_norm<F: Scalar>(grads: &[Option<Tensor<F>>]) -> F {
    grads
        .iter()
        .flatten()
        .map(Tensor::sq_norm)
        .sum::<F>()
        .sqrt()
}

/// Exponential moving average of a parameter store.
#[derive(Debug)]
pub struct Ema<F> {
    pub decay: F,
    pub shadow: ParamStore<F>,
}

impl<F: Scalar> Ema<F> {
    pub fn new(store: &ParamStore<F>, decay: F) -> Self {
        Ema {
            decay,
            shadow: store.clone(),
        }
    }

    pub fn update(&mut self, store: &ParamStore<F>) {
        let d = self.decay;
        for (s, (_, p)) in self.shadow.tensors_mut().iter_mut().zip(store.iter()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (F::one() - d) * b;
            }
        }
    }
}
