//! AdamW with a linear warmup / linear decay schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

use super::tensor::Param;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Piecewise-linear learning-rate schedule: ramps from 0 to `base_lr` over
/// `warmup_steps`, then decays linearly to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn multiplier(&self, step: u64) -> f64 {
        let s = step as f64;
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            s / self.warmup_steps as f64
        };
        let decay = if self.total_steps > self.warmup_steps {
            (self.total_steps as f64 - s) / (self.total_steps - self.warmup_steps) as f64
        } else if step <= self.total_steps {
            1.0
        } else {
            0.0
        };
        warm.min(decay).clamp(0.0, 1.0)
    }

    pub fn lr(&self, step: u64) -> f64 {
        self.base_lr * self.multiplier(step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state: moment buffers per parameter, step counter and
/// hyperparameters. Moment buffers are matched to parameters by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub moments: Vec<Moments>,
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl OptimizerState {
    pub fn new<'a>(
        params: impl IntoIterator<Item = &'a Param>,
        schedule: LrSchedule,
        weight_decay: f64,
        clip_norm: Option<f64>,
    ) -> Self {
        let moments = params
            .into_iter()
            .map(|p| {
                let n = p.value.data().len();
                Moments {
                    name: p.name.clone(),
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Self {
            step: 0,
            schedule,
            weight_decay,
            clip_norm,
            moments,
        }
    }

    /// One AdamW update over every parameter with `requires_grad`.
    ///
    /// The learning rate for the update is taken at the current step counter
    /// (so step 0 of a warmup schedule moves nothing); bias correction uses
    /// `step + 1`.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<StepInfo> {
        if params.len() != self.moments.len() {
            return Err(Error::Shape {
                op: "adamw_step",
                detail: format!(
                    "{} params vs {} moment buffers",
                    params.len(),
                    self.moments.len()
                ),
            });
        }
        for (p, m) in params.iter().zip(&self.moments) {
            if p.value.data().len() != m.m.len() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    detail: format!("moment buffer for `{}` has wrong size", p.name),
                });
            }
        }
        let grad_norm = match self.clip_norm {
            Some(max) => clip_grad_norm(params, max),
            None => global_grad_norm(params),
        };

        let lr = self.schedule.lr(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let wd = self.weight_decay;

        for (p, mom) in params.iter_mut().zip(self.moments.iter_mut()) {
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let g = grad.data().to_vec();
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let gi = g[i];
                mom.m[i] = BETA1 * mom.m[i] + (1.0 - BETA1) * gi;
                mom.v[i] = BETA2 * mom.v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + wd * theta[i]);
            }
        }
        self.step += 1;
        Ok(StepInfo { lr, grad_norm })
    }
}

pub fn global_grad_norm(params: &[&mut Param]) -> f64 {
    params
        .iter()
        .filter(|p| p.requires_grad)
        .map(|p| p.grad_sq_norm())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut().filter(|p| p.requires_grad) {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor2D;

    fn scalar(v: f64, g: f64) -> Param {
        let mut p = Param::new("x", Tensor2D::from_vec(1, 1, vec![v]));
        p.grad = Some(Tensor2D::from_vec(1, 1, vec![g]));
        p
    }

    fn flat(lr: f64) -> LrSchedule {
        LrSchedule {
            base_lr: lr,
            warmup_steps: 0,
            total_steps: u64::MAX / 2,
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar(1.25, 0.0);
        let mut st = OptimizerState::new([&p], flat(0.1), 0.0, None);
        for _ in 0..5 {
            st.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value.data()[0], 1.25);
    }

    #[test]
    fn warmup_step_zero_does_not_move() {
        let mut p = scalar(1.0, 3.0);
        let sched = LrSchedule {
            base_lr: 0.1,
            warmup_steps: 100,
            total_steps: 1000,
        };
        let mut st = OptimizerState::new([&p], sched, 0.01, None);
        let info = st.step(&mut [&mut p]).unwrap();
        assert_eq!(info.lr, 0.0);
        assert_eq!(p.value.data()[0], 1.0);
    }

    #[test]
    fn scalar_trajectory_matches_hand_recurrence() {
        // Independent recurrence written out longhand.
        let (lr, wd) = (0.05, 0.01);
        let mut x_ref = 2.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut expected = Vec::new();
        for t in 1..=10 {
            let g = 1.0;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9_f64.powi(t));
            let vh = v / (1.0 - 0.999_f64.powi(t));
            x_ref -= lr * (mh / (vh.sqrt() + 1e-8) + wd * x_ref);
            expected.push(x_ref);
        }

        let mut p = scalar(2.0, 1.0);
        let mut st = OptimizerState::new([&p], flat(lr), wd, None);
        for want in expected {
            p.grad = Some(Tensor2D::from_vec(1, 1, vec![1.0]));
            st.step(&mut [&mut p]).unwrap();
            assert!((p.value.data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_is_continuous_with_peak_at_warmup() {
        let s = LrSchedule {
            base_lr: 2.0,
            warmup_steps: 10,
            total_steps: 50,
        };
        assert_eq!(s.lr(10), 2.0);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(50), 0.0);
        assert_eq!(s.lr(80), 0.0);
        assert!((s.lr(5) - 1.0).abs() < 1e-15);
        assert!((s.lr(30) - 1.0).abs() < 1e-15);
        for k in 1..60 {
            assert!((s.lr(k) - s.lr(k - 1)).abs() <= 0.2 + 1e-12);
        }
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut p = scalar(1.0, 5.0);
        p.requires_grad = false;
        let mut st = OptimizerState::new([&p], flat(0.1), 0.5, Some(1.0));
        st.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data()[0], 1.0);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut a = scalar(0.0, 3.0);
        let mut b = scalar(0.0, 4.0);
        let pre = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(pre, 5.0);
        let post = global_grad_norm(&[&mut a, &mut b]);
        assert!(post <= 1.0 + 1e-12);
        assert!((a.grad.unwrap().data()[0] - 0.6).abs() < 1e-15);
    }
}
