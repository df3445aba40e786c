//! SGD with momentum, Adam, and the cosine learning-rate schedule.
//!
//! Updates are computed in `f64` and stored back as `f32`. A parameter
//! without a gradient is treated as having a zero gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub config: SgdConfig,
    buffers: Vec<Vec<f32>>,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u64,
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

fn check_layout(buffers: &[Vec<f32>], params: &[Tensor<f32>]) -> Result<()> {
    if buffers.len() != params.len() || buffers.iter().zip(params).any(|(b, p)| b.len() != p.numel()) {
        return Err(Error::invalid("optimizer state does not match the parameter layout"));
    }
    Ok(())
}

fn check_finite(params: &[Tensor<f32>], who: &str) -> Result<()> {
    match params.iter().position(|p| p.data().iter().any(|v| !v.is_finite())) {
        Some(i) => Err(Error::NonFinite(format!("parameter {i} after {who} step"))),
        None => Ok(()),
    }
}

impl SgdMomentum {
    pub fn new(config: SgdConfig, params: &[Tensor<f32>]) -> Self {
        Self { config, buffers: params.iter().map(|p| vec![0.0; p.numel()]).collect(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn buffers(&self) -> &[Vec<f32>] {
        &self.buffers
    }

    /// `v ← βv + g + wd·p; p ← p − lr·v`.
    pub fn step(&mut self, params: &mut [Tensor<f32>], lr: f64) -> Result<()> {
        check_lr(lr)?;
        check_layout(&self.buffers, params)?;
        let SgdConfig { momentum, weight_decay } = self.config;
        for (p, buf) in params.iter_mut().zip(&mut self.buffers) {
            let grad = p.grad().map(<[f32]>::to_vec);
            for (i, (w, v)) in p.data_mut().iter_mut().zip(buf.iter_mut()).enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i] as f64) + weight_decay * *w as f64;
                let nv = momentum * *v as f64 + g;
                *v = nv as f32;
                *w = (*w as f64 - lr * nv) as f32;
            }
        }
        self.steps += 1;
        check_finite(params, "SGD")
    }
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self { config, first: zeros(), second: zeros(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First and second moment estimates.
    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.first, &self.second)
    }

    /// Bias-corrected Adam with weight decay folded into the gradient.
    pub fn step(&mut self, params: &mut [Tensor<f32>], lr: f64) -> Result<()> {
        check_lr(lr)?;
        check_layout(&self.first, params)?;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad().map(<[f32]>::to_vec);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i] as f64) + weight_decay * *w as f64;
                let nm = beta1 * m[i] as f64 + (1.0 - beta1) * g;
                let nv = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
                m[i] = nm as f32;
                v[i] = nv as f32;
                let update = (nm / c1) / ((nv / c2).sqrt() + eps);
                *w = (*w as f64 - lr * update) as f32;
            }
        }
        check_finite(params, "Adam")
    }
}

/// `lr_init · (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} exceeds schedule length {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(lr_init);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_init * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f32, g: f32) -> Vec<Tensor<f32>> {
        let mut t = Tensor::new([1], vec![v]).unwrap();
        t.set_grad(Some(vec![g])).unwrap();
        vec![t]
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = scalar_param(0.75, 0.0);
        let mut sgd = SgdMomentum::new(SgdConfig { momentum: 0.9, weight_decay: 0.0 }, &p);
        sgd.step(&mut p, 0.1).unwrap();
        assert_eq!(p[0].data()[0], 0.75);
        let mut adam = Adam::new(AdamConfig { beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }, &p);
        adam.step(&mut p, 0.1).unwrap();
        assert_eq!(p[0].data()[0], 0.75);
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = scalar_param(1.0, 1.0);
        let mut sgd = SgdMomentum::new(SgdConfig { momentum: 0.0, weight_decay: 0.0 }, &p);
        sgd.step(&mut p, 0.1).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(sgd.steps(), 1);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = scalar_param(1.0, 1.0);
        let mut sgd = SgdMomentum::new(SgdConfig { momentum: 0.9, weight_decay: 0.0 }, &p);
        sgd.step(&mut p, 0.1).unwrap();
        sgd.step(&mut p, 0.1).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((p[0].data()[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_hand_computed_trace() {
        // β = (0.5, 0.999), lr = 0.01, wd = 0, gradients 0.2, -0.1, 0.4 applied to p0 = 0.5.
        // Hand calculation of m_t, v_t, the bias corrections and the update.
        let (b1, b2, lr, eps) = (0.5f64, 0.999f64, 0.01f64, 1e-8f64);
        let gs = [0.2f64, -0.1, 0.4];
        let mut expected = Vec::new();
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 0.5f64);
        for (t, g) in gs.iter().enumerate() {
            let t = t as i32 + 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            expected.push(p);
        }
        // Step one: m̂ = 0.2, v̂ = 0.04, update = 1 → p = 0.49 exactly.
        assert!((expected[0] - 0.49).abs() < 1e-9);

        let mut params = scalar_param(0.5, 0.0);
        let mut adam = Adam::new(AdamConfig { beta1: b1, beta2: b2, eps, weight_decay: 0.0 }, &params);
        for (g, want) in gs.iter().zip(&expected) {
            params[0].set_grad(Some(vec![*g as f32])).unwrap();
            adam.step(&mut params, lr).unwrap();
            assert!((params[0].data()[0] as f64 - want).abs() < 1e-7, "{} vs {want}", params[0].data()[0]);
        }
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn non_positive_learning_rate_rejected() {
        let mut p = scalar_param(1.0, 1.0);
        let mut sgd = SgdMomentum::new(SgdConfig { momentum: 0.9, weight_decay: 0.0 }, &p);
        assert!(sgd.step(&mut p, 0.0).is_err());
        assert!(sgd.step(&mut p, -1.0).is_err());
    }

    #[test]
    fn nan_after_step_is_reported() {
        let mut p = scalar_param(1.0, f32::INFINITY);
        let mut sgd = SgdMomentum::new(SgdConfig { momentum: 0.9, weight_decay: 0.0 }, &p);
        assert!(matches!(sgd.step(&mut p, 0.1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.025).unwrap(), 0.025);
        assert!(cosine_lr(10, 10, 0.025).unwrap().abs() < 1e-15);
        assert!((cosine_lr(5, 10, 0.025).unwrap() - 0.0125).abs() < 1e-15);
        assert!(cosine_lr(11, 10, 0.025).is_err());
    }
}
