//! AdamW with decoupled weight decay and the linear warmup / linear decay
//! learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{bail, Result};
use crate::param::Parameter;
use crate::scalar::Scalar;
use crate::sparsity::MaskRegistry;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// First and second moments for the trainable parameters only, plus the
/// shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Allocates moment buffers for every trainable parameter in `params`.
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Parameter<T>>) -> Self {
        let mut moments = BTreeMap::new();
        for p in params.into_iter().filter(|p| p.trainable()) {
            let n = p.numel();
            moments.insert(p.name.clone(), Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] });
        }
        Self { config, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Floats held in moment buffers.
    pub fn allocated_floats(&self) -> usize {
        self.moments.values().map(|s| s.m.len() + s.v.len()).sum()
    }

    pub fn tracked(&self) -> usize {
        self.moments.len()
    }
}

/// AdamW bundled with the masks it must re-apply after every update.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub state: OptimizerState<T>,
    pub masks: MaskRegistry,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Parameter<T>>) -> Self {
        Self { state: OptimizerState::new(config, params), masks: MaskRegistry::default() }
    }

    pub fn with_masks(mut self, masks: MaskRegistry) -> Self {
        self.masks = masks;
        self
    }

    /// One update of every trainable parameter from its grad slot. Frozen
    /// parameters are skipped; registered masks are re-applied afterwards.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>], lr: f64) -> Result<()> {
        for p in params.iter() {
            if p.trainable() && p.tensor.grad().is_none() {
                bail!(Contract, "trainable parameter `{}` has no gradient", p.name);
            }
        }
        let cfg = self.state.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
        let eps = T::from_f64(cfg.eps);
        let wd = T::from_f64(cfg.weight_decay);
        let lr_t = T::from_f64(lr);
        for p in params.iter_mut() {
            if !p.trainable() {
                continue;
            }
            let n = p.numel();
            let slot = self
                .state
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] });
            let grad = p.tensor.grad().map(|g| g.to_vec()).unwrap_or_default();
            let data = p.tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + one_b1 * g;
                slot.v[i] = b2 * slot.v[i] + one_b2 * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] = data[i] - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
            }
            self.masks.enforce(p)?;
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `peak_lr` over `warmup_iters`, then linear decay to
/// 0 at `total_iters`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub total_iters: usize,
    pub warmup_iters: usize,
}

impl LrSchedule {
    pub const DEFAULT_WARMUP_FRACTION: f64 = 0.10;

    /// Warmup of `ceil(0.10 · total)` iterations. A single-iteration budget
    /// has no room for a ramp and decays from the peak.
    pub fn new(peak_lr: f64, total_iters: usize) -> Result<Self> {
        Self::with_warmup_fraction(peak_lr, total_iters, Self::DEFAULT_WARMUP_FRACTION)
    }

    pub fn with_warmup_fraction(peak_lr: f64, total_iters: usize, fraction: f64) -> Result<Self> {
        if total_iters == 0 {
            bail!(Config, "schedule needs at least one iteration");
        }
        if !(0.0..1.0).contains(&fraction) {
            bail!(Config, "warmup fraction {fraction} outside [0, 1)");
        }
        let warmup = if total_iters == 1 {
            0
        } else {
            let raw = num_traits::Float::ceil(fraction * total_iters as f64) as usize;
            raw.clamp(1, total_iters - 1)
        };
        Self::with_warmup(peak_lr, total_iters, warmup)
    }

    pub fn with_warmup(peak_lr: f64, total_iters: usize, warmup_iters: usize) -> Result<Self> {
        if !(peak_lr.is_finite() && peak_lr >= 0.0) {
            bail!(Config, "peak learning rate {peak_lr} must be finite and nonnegative");
        }
        let valid = if total_iters == 1 { warmup_iters == 0 } else { 0 < warmup_iters && warmup_iters < total_iters };
        if !valid {
            bail!(Config, "warmup {warmup_iters} invalid for {total_iters} iterations");
        }
        Ok(Self { peak_lr, total_iters, warmup_iters })
    }

    pub fn lr_at(&self, iter: usize) -> Result<f64> {
        if iter > self.total_iters {
            bail!(Contract, "iteration {iter} beyond schedule of {}", self.total_iters);
        }
        let lr = if iter < self.warmup_iters {
            self.peak_lr * (iter as f64 / self.warmup_iters as f64)
        } else {
            let span = (self.total_iters - self.warmup_iters) as f64;
            self.peak_lr * ((self.total_iters - iter) as f64 / span)
        };
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::GroupTag;
    use crate::tensor::Tensor;

    fn scalar_param(v: f64, trainable: bool) -> Parameter<f64> {
        Parameter::new("p", GroupTag::Bias, Tensor::scalar(v).with_requires_grad(trainable))
    }

    #[test]
    fn degenerate_betas_single_step() {
        let mut p = scalar_param(1.0, true);
        p.tensor.accumulate_grad(&[1.0]).unwrap();
        let cfg = AdamWConfig { beta1: 0.0, beta2: 0.0, eps: 0.0, weight_decay: 0.0 };
        let mut opt = AdamW::new(cfg, [&p]);
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.tensor.data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Parameter::new("w", GroupTag::LinearWeight, Tensor::full(&[3], 0.7f64).with_requires_grad(true));
        let mut opt = AdamW::new(AdamWConfig::default(), [&p]);
        for _ in 0..5 {
            p.tensor.zero_grad();
            p.tensor.accumulate_grad(&[0.0; 3]).unwrap();
            opt.step(&mut [&mut p], 1e-2).unwrap();
        }
        assert_eq!(p.tensor.data(), &[0.7; 3]);
    }

    /// Scalar reference AdamW written out independently of the buffered one.
    fn reference_adamw(p0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            p -= lr * mh / (vh.sqrt() + eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn quadratic_descent_matches_reference_and_decreases() {
        let expected = reference_adamw(1.0, 0.05, 10);
        let mut p = scalar_param(1.0, true);
        let mut opt = AdamW::new(AdamWConfig::default(), [&p]);
        let mut prev = 1.0f64;
        for want in expected {
            p.tensor.zero_grad();
            let g = 2.0 * p.tensor.data()[0];
            p.tensor.accumulate_grad(&[g]).unwrap();
            opt.step(&mut [&mut p], 0.05).unwrap();
            let now = p.tensor.data()[0];
            assert!((now - want).abs() < 1e-12);
            assert!(now.abs() < prev.abs());
            prev = now;
        }
    }

    #[test]
    fn missing_grad_on_trainable_is_an_error() {
        let mut p = scalar_param(1.0, true);
        let mut opt = AdamW::new(AdamWConfig::default(), [&p]);
        assert!(matches!(opt.step(&mut [&mut p], 0.1), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn state_only_for_trainable_parameters() {
        let a = Parameter::new("a", GroupTag::Bias, Tensor::<f32>::zeros(&[5]).with_requires_grad(true));
        let b = Parameter::new("b", GroupTag::Head, Tensor::<f32>::zeros(&[7, 3]));
        let state = OptimizerState::new(AdamWConfig::default(), [&a, &b]);
        assert_eq!(state.allocated_floats(), 10);
        assert_eq!(state.tracked(), 1);
    }

    #[test]
    fn schedule_points() {
        let s = LrSchedule::with_warmup(1e-4, 1000, 100).unwrap();
        assert_eq!(s.lr_at(100).unwrap(), 1e-4);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(550).unwrap() - 5e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(1000).unwrap(), 0.0);
        assert!(s.lr_at(1001).is_err());
        assert_eq!(LrSchedule::new(1e-4, 1000).unwrap().warmup_iters, 100);
        assert_eq!(LrSchedule::new(1e-4, 15).unwrap().warmup_iters, 2);
        let one = LrSchedule::new(1e-3, 1).unwrap();
        assert_eq!(one.lr_at(0).unwrap(), 1e-3);
        assert!(LrSchedule::with_warmup(1e-4, 10, 10).is_err());
        assert!(LrSchedule::with_warmup(1e-4, 10, 0).is_err());
    }
}
