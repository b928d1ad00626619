//! Optimizers over flat parameter slices.
//!
//! Moment buffers live next to the parameter they belong to ([`Moments`]) and
//! have exactly as many entries as the stored values: for a sparse layer that
//! is the number of kept weights, never the dense size.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum OptimizerKind {
    /// `w <- w - lr * g`.
    Sgd,
    /// Bias-corrected adaptive moments on `g`.
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::InvalidArgument(format!("unknown optimizer {s:?} (sgd|adam)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup` steps, then cosine decay to
    /// `min_ratio * lr` at the last iteration.
    Cosine { warmup: usize, min_ratio: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { warmup, min_ratio } => {
                if step < warmup {
                    return base * (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1) as f64;
                let progress = ((step - warmup) as f64 / span).min(1.0);
                let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                base * (min_ratio + (1.0 - min_ratio) * cosine)
            }
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
    step: u64,
}

impl<T: Scalar> Moments<T> {
    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Hyperparameters plus the current learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    /// Weight decay `alpha`, folded into the gradient as `alpha * w`.
    pub weight_decay: T,
    /// Gradient scale `gamma`; raw gradients are divided by it.
    pub grad_scale: T,
}

impl<T: Scalar> Optimizer<T> {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay: T::zero(),
            grad_scale: T::one(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }

    pub fn with_weight_decay(mut self, alpha: f64) -> Self {
        self.weight_decay = T::lit(alpha);
        self
    }

    pub fn with_grad_scale(mut self, gamma: f64) -> Self {
        self.grad_scale = T::lit(gamma);
        self
    }

    /// `(1 / gamma) * grad + alpha * w`, or just the scaled gradient when
    /// `decay` is false. Same expression as the sparse-add kernel.
    pub fn combine(&self, grad: &[T], w: &[T], decay: bool) -> Vec<T> {
        let beta = T::one() / self.grad_scale;
        let alpha = if decay { self.weight_decay } else { T::zero() };
        grad.iter().zip(w).map(|(&g, &v)| beta * g + alpha * v).collect()
    }

    /// Applies one update to `w` in place from the combined gradient `g`.
    pub fn update(&self, state: &mut Moments<T>, w: &mut [T], g: &[T]) -> Result<()> {
        if w.len() != g.len() {
            return Err(crate::error::shape_err("Optimizer::update", w.len(), g.len()));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (v, &gi) in w.iter_mut().zip(g) {
                    *v = *v - self.lr * gi;
                }
            }
            OptimizerKind::Adam => {
                if state.first.is_empty() {
                    state.first = vec![T::zero(); w.len()];
                    state.second = vec![T::zero(); w.len()];
                } else if state.first.len() != w.len() {
                    return Err(crate::error::shape_err("Optimizer::update state", state.first.len(), w.len()));
                }
                state.step += 1;
                let t = state.step as i32;
                let one = T::one();
                let c1 = one - self.beta1.powi(t);
                let c2 = one - self.beta2.powi(t);
                for i in 0..w.len() {
                    let gi = g[i];
                    let m = self.beta1 * state.first[i] + (one - self.beta1) * gi;
                    let s = self.beta2 * state.second[i] + (one - self.beta2) * gi * gi;
                    state.first[i] = m;
                    state.second[i] = s;
                    let m_hat = m / c1;
                    let s_hat = s / c2;
                    w[i] = w[i] - self.lr * m_hat / (s_hat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_rule() {
        let opt = Optimizer::<f64>::sgd(0.1);
        let mut state = Moments::default();
        let mut w = vec![1.0, -2.0];
        opt.update(&mut state, &mut w, &[0.5, 1.0]).unwrap();
        assert_eq!(w, vec![1.0 - 0.05, -2.0 - 0.1]);
        assert!(state.is_empty());
        let mut w2 = w.clone();
        opt.update(&mut state, &mut w2, &[0.0, 0.0]).unwrap();
        assert_eq!(w2, w);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let opt = Optimizer::<f64>::adam(0.01);
        let mut state = Moments::default();
        let mut w = vec![0.0, 0.0, 0.0];
        opt.update(&mut state, &mut w, &[3.0, -0.5, 0.0]).unwrap();
        assert!((w[0] + 0.01).abs() < 1e-9);
        assert!((w[1] - 0.01).abs() < 1e-9);
        assert_eq!(w[2], 0.0);
        assert_eq!(state.len(), 3);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn combine_scales_and_decays() {
        let opt = Optimizer::<f64>::sgd(0.1).with_grad_scale(4.0).with_weight_decay(0.5);
        assert_eq!(opt.combine(&[8.0], &[2.0], true), vec![3.0]);
        assert_eq!(opt.combine(&[8.0], &[2.0], false), vec![2.0]);
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = LrSchedule::Cosine { warmup: 10, min_ratio: 0.1 };
        assert!((s.lr_at(1.0, 0, 100) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(1.0, 10, 100) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(1.0, 100, 100) - 0.1).abs() < 1e-12);
        assert!(s.lr_at(1.0, 50, 100) < 1.0);
        assert_eq!(LrSchedule::Constant.lr_at(0.3, 7, 10), 0.3);
    }
}
