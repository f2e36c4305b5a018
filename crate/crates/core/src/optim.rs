//! Adam, cosine step-size decay and global-norm gradient clipping.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Cosine decay from `initial` at step 0 to `end` at step `total − 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub initial: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(initial: f64, end: f64, total_steps: usize) -> Result<Self> {
        if !(initial > 0.0 && end > 0.0 && end <= initial) {
            return Err(Error::Config(format!("step sizes must satisfy 0 < end <= initial, got {initial} → {end}")));
        }
        if total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        Ok(Self { initial, end, total_steps })
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.total_steps == 1 {
            return self.initial;
        }
        let last = (self.total_steps - 1) as f64;
        let progress = (step as f64).min(last) / last;
        self.end + 0.5 * (self.initial - self.end) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Mat::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(k);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.values().iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected update with step size `lr`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Mat], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient count must match parameters");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in store.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}
