//! Diffusion schedules and the forward/reverse update rules, including the
//! resolution-switching (pyramid) branch.
//!
//! The noise schedule interpolates alpha linearly from `alpha_1` to
//! `alpha_T`; the downsampling factor is 1 for the first half of the steps
//! and 2 for the second half. Schedule math is kept in f64 and applied to
//! f32 tensors.

use crate::error::{Error, Result};
use crate::rawproc::upsample;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// The four numbers that determine a schedule; what configs and checkpoints
/// carry instead of the expanded tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub t_max: usize,
    pub alpha_1: f64,
    pub alpha_t: f64,
    pub eta: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { t_max: 2000, alpha_1: 0.999999, alpha_t: 0.99, eta: 0.0 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::build(self.t_max, self.alpha_1, self.alpha_t, self.eta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    /// Total steps; timesteps are 1-based (t in 1..=T).
    pub t_max: usize,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    r: Vec<usize>,
    pub eta: f64,
}

impl DiffusionSchedule {
    /// Linear-in-alpha schedule with the half/half downsampling split.
    pub fn build(t_max: usize, alpha_1: f64, alpha_t: f64, eta: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::invalid("DiffusionSchedule::build", format!("T must be >= 2, got {t_max}")));
        }
        if !(alpha_t > 0.0 && alpha_t <= alpha_1 && alpha_1 <= 1.0) {
            return Err(Error::invalid(
                "DiffusionSchedule::build",
                format!("need 0 < alpha_T <= alpha_1 <= 1, got {alpha_1}, {alpha_t}"),
            ));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid("DiffusionSchedule::build", format!("eta must be in [0,1], got {eta}")));
        }
        let mut alpha = Vec::with_capacity(t_max);
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prod = 1.0f64;
        for t in 1..=t_max {
            let a = alpha_1 + (t - 1) as f64 / (t_max - 1) as f64 * (alpha_t - alpha_1);
            prod *= a;
            alpha.push(a);
            alpha_bar.push(prod);
        }
        let half = t_max.div_ceil(2);
        let r = (1..=t_max).map(|t| if t <= half { 1 } else { 2 }).collect();
        let sched = DiffusionSchedule { t_max, alpha, alpha_bar, r, eta };
        // 1 - abar_{t-1} - sigma_t^2 must stay non-negative for eta <= 1.
        for t in 2..=t_max {
            let s = sched.sigma_at(t, 1.0);
            if 1.0 - sched.alpha_bar(t - 1) - s * s < -1e-12 {
                return Err(Error::invalid(
                    "DiffusionSchedule::build",
                    format!("reverse coefficient negative at t={t}"),
                ));
            }
        }
        Ok(sched)
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Downsampling factor at step t.
    pub fn r(&self, t: usize) -> usize {
        self.r[t - 1]
    }

    /// Coarsest resolution factor of the whole schedule.
    pub fn r_max(&self) -> usize {
        *self.r.last().unwrap()
    }

    fn sigma_at(&self, t: usize, eta: f64) -> f64 {
        let ab_prev = self.alpha_bar(t - 1);
        let ab = self.alpha_bar(t);
        eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
    }

    /// Reverse-process noise level at step t (2 <= t <= T).
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma_at(t, self.eta)
    }

    /// q(x_t | x_rt0): x_t = sqrt(abar_t) x_rt0 + sqrt(1-abar_t) eps.
    /// `x_rt0` must already be at the resolution for r_t.
    pub fn forward_sample(&self, x_rt0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if !x_rt0.same_shape(eps) {
            return Err(Error::shape(
                "forward_sample",
                format!("{:?} vs {:?}", x_rt0.shape(), eps.shape()),
            ));
        }
        let ab = self.alpha_bar(t);
        let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        x_rt0.scale(sa).add(&eps.scale(sn))
    }

    /// Invert the forward relation: x0_hat = (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t).
    pub fn predict_x0(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        if !x_t.same_shape(eps_hat) {
            return Err(Error::shape(
                "predict_x0",
                format!("{:?} vs {:?}", x_t.shape(), eps_hat.shape()),
            ));
        }
        let ab = self.alpha_bar(t);
        let inv = 1.0 / ab.sqrt();
        let sn = (1.0 - ab).sqrt();
        x_t.sub(&eps_hat.scale(sn as f32)).map(|d| d.scale(inv as f32))
    }

    /// One reverse update from step t to t-1 (t >= 2).
    ///
    /// At a resolution boundary (r_t > r_{t-1}) the clean estimate is
    /// upsampled and re-noised from scratch; otherwise the standard
    /// deterministic-family update applies.
    pub fn reverse_step(
        &self,
        x_t: &Tensor,
        t: usize,
        eps_hat: &Tensor,
        x0_hat: &Tensor,
        z: &Tensor,
    ) -> Result<Tensor> {
        if t < 2 || t > self.t_max {
            return Err(Error::invalid("reverse_step", format!("t={t} out of range 2..={}", self.t_max)));
        }
        let (r_t, r_prev) = (self.r(t), self.r(t - 1));
        if r_t < r_prev {
            return Err(Error::invalid(
                "reverse_step",
                format!("schedule invariant violated: r_t={r_t} < r_(t-1)={r_prev}"),
            ));
        }
        let ab_prev = self.alpha_bar(t - 1);
        let sa = ab_prev.sqrt() as f32;
        if r_t > r_prev {
            let up = upsample(x0_hat, r_t / r_prev)?;
            if !up.same_shape(z) {
                return Err(Error::shape("reverse_step", format!("{:?} vs z {:?}", up.shape(), z.shape())));
            }
            return up.scale(sa).add(&z.scale((1.0 - ab_prev).sqrt() as f32));
        }
        if !x_t.same_shape(eps_hat) || !x_t.same_shape(x0_hat) || !x_t.same_shape(z) {
            return Err(Error::shape(
                "reverse_step",
                format!(
                    "x_t {:?}, eps {:?}, x0 {:?}, z {:?}",
                    x_t.shape(),
                    eps_hat.shape(),
                    x0_hat.shape(),
                    z.shape()
                ),
            ));
        }
        let sigma = self.sigma(t);
        let coef_eps = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt() as f32;
        x0_hat
            .scale(sa)
            .add(&eps_hat.scale(coef_eps))?
            .add(&z.scale(sigma as f32))
    }
}
