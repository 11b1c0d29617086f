//! Linear beta noise schedule and the closed-form forward diffusion step.
//!
//! All schedule arithmetic is double precision so the cumulative product
//! alpha_bar stays accurate out to t = T.

use crate::error::{PowdrError, Result};
use crate::wavelet::SubbandTensor;

/// Precomputed beta/alpha/alpha_bar sequences for T steps.
///
/// Arrays are stored 1-indexed conceptually: `beta(t)` for t in 1..=T.
/// By convention `alpha_bar(0) = 1`, which makes the t = 1 reverse step
/// deterministic.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "step {t} out of range");
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "step {t} out of range");
        self.alpha[t - 1]
    }

    /// alpha_bar(t) for t in 0..=T, with alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "step {t} out of range");
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// Linear beta schedule from `beta_start` to `beta_end` over T steps.
pub fn linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(PowdrError::argument("T must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(PowdrError::argument(format!(
            "need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let mut beta = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let b = if t_max == 1 {
            beta_start
        } else {
            beta_start + (t as f64 - 1.0) / (t_max as f64 - 1.0) * (beta_end - beta_start)
        };
        beta.push(b);
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0f64;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        t_max,
        beta_start,
        beta_end,
        beta,
        alpha,
        alpha_bar,
    })
}

/// Closed-form forward diffusion: x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
pub fn forward_noise(
    x0: &SubbandTensor,
    t: usize,
    eps: &SubbandTensor,
    sched: &NoiseSchedule,
) -> Result<SubbandTensor> {
    if !x0.same_shape(eps) {
        return Err(PowdrError::argument("x0/eps shape mismatch"));
    }
    if t < 1 || t > sched.t_max {
        return Err(PowdrError::argument(format!("step {t} out of range 1..={}", sched.t_max)));
    }
    let ab = sched.alpha_bar(t);
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&x, &e)| ca * x + cb * e)
        .collect();
    Ok(SubbandTensor { dims: x0.dims, data })
}
