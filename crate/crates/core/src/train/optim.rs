use std::f64::consts::PI;

use crate::params::ParamSet;
use crate::scalar::Real;

/// Linear warmup to `base` over `warmup` steps, then cosine decay to zero at
/// `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl WarmupCosine {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.base * (1.0 + (PI * t).cos())
    }
}

/// Adam with decoupled weight decay. Decay applies to tensors of rank two or
/// more only; biases and norm parameters are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW<P> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: P,
    v: P,
    step: u32,
}

impl<P> AdamW<P> {
    pub fn new<T: Real>(params: &P, weight_decay: f64) -> Self
    where
        P: ParamSet<T>,
    {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn update<T: Real>(&mut self, params: &mut P, grad: &P, lr: f64)
    where
        P: ParamSet<T>,
    {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            let decay = if p.shape.len() >= 2 { lr * self.weight_decay } else { 0.0 };
            for (((p, &g), m), v) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                let g = g.as_f64();
                let mm = b1 * m.as_f64() + (1.0 - b1) * g;
                let vv = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = T::of(mm);
                *v = T::of(vv);
                let x = p.as_f64();
                *p = T::of(x - decay * x - lr * (mm / c1) / ((vv / c2).sqrt() + self.eps));
            }
        }
    }
}
