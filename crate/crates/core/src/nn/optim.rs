//! Optimizer: Adam with decoupled weight decay, cosine learning-rate
//! schedule, and global-norm gradient clipping.

use std::collections::HashMap;

use ndarray::Array2;

use crate::scalar::Scalar;

use super::params::{ParamId, ParamStore};

/// Cosine annealing from `base` at step 0 toward zero at `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    assert!(total > 0, "schedule needs at least one step");
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the pre-clip norm. The norm is accumulated in f64.
pub fn clip_global_norm<F: Scalar>(grads: &mut [(ParamId, Array2<F>)], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, g) in grads.iter() {
        for &v in g.iter() {
            let v = v.as_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Adam with decoupled weight decay. Moments are kept per parameter and the
/// decay term is applied directly to the weights, not through the gradient.
pub struct AdamW<F: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: HashMap<usize, Array2<F>>,
    v: HashMap<usize, Array2<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[(ParamId, Array2<F>)],
        lr: f64,
    ) {
        self.step += 1;
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let one = F::one();
        let bc1 = F::of(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = F::of(1.0 - self.beta2.powi(self.step as i32));
        let lrf = F::of(lr);
        let epsf = F::of(self.eps);
        let wd = F::of(lr * self.weight_decay);
        for (id, g) in grads {
            let m = self
                .m
                .entry(id.0)
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(id.0)
                .or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = b1 * *mi + (one - b1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            });
            let w = store.get_mut(*id);
            ndarray::Zip::from(&mut *w)
                .and(&*m)
                .and(&*v)
                .for_each(|wi, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *wi = *wi - wd * *wi - lrf * mhat / (vhat.sqrt() + epsf);
                });
        }
    }
}
