use std::collections::HashMap;
use std::f64::consts::PI;

use crate::param::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter of `module` that has an entry in `grads`.
    pub fn step(&mut self, module: &mut impl Module<T>, grads: &HashMap<String, Tensor<T>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (eps, wd) = (self.eps, self.weight_decay);
        let moments = &mut self.moments;
        module.visit_mut(&mut |p| {
            if p.is_buffer() {
                return;
            }
            let Some(grad) = grads.get(p.name()) else { return };
            let n = grad.numel();
            let (m, v) = moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let values = p.value_mut().data_mut();
            for i in 0..n {
                let gi = grad.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i].as_f64() / c1;
                let vhat = v[i].as_f64() / c2;
                let mut x = values[i].as_f64();
                if wd > 0.0 {
                    x -= lr * wd * x;
                }
                x -= lr * mhat / (vhat.sqrt() + eps);
                values[i] = T::of(x);
            }
        });
    }
}

/// Cosine decay from `base` to `base * floor` over `total` steps.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub base: f64,
    pub total: u64,
    pub floor: f64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total == 0 {
            return self.base;
        }
        let p = (step.min(self.total) as f64) / self.total as f64;
        let min = self.base * self.floor;
        min + 0.5 * (self.base - min) * (1.0 + (PI * p).cos())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut HashMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
