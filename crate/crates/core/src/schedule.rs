//! Cosine noise schedule with SNR shifting and v-parameterization algebra.
//!
//! The shifted schedule scales the amplitude ratio `lambda = alpha / sigma`
//! by `s^2` and renormalizes so that `alpha^2 + sigma^2 = 1`. At `s = 1` it is
//! the base schedule `(cos(pi t / 2), sin(pi t / 2))`; `s < 1` moves mass
//! toward higher noise levels.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::latent::LatentSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub shift: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { shift: 0.5 }
    }
}

impl ScheduleParams {
    pub fn new(shift: f64) -> Result<Self> {
        let p = Self { shift };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shift.is_finite() && self.shift > 0.0) {
            return Err(LabError::invalid(format!("schedule shift must be > 0, got {}", self.shift)));
        }
        Ok(())
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<AlphaSigma> {
        shifted_alpha_sigma(t, self)
    }
}

/// Signal and noise coefficients at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSigma {
    pub alpha: f64,
    pub sigma: f64,
}

impl AlphaSigma {
    /// `alpha * x0 + sigma * eps`
    pub fn diffuse(&self, x0: f64, eps: f64) -> f64 {
        self.alpha * x0 + self.sigma * eps
    }

    /// `alpha * eps - sigma * x0`
    pub fn velocity(&self, x0: f64, eps: f64) -> f64 {
        self.alpha * eps - self.sigma * x0
    }

    /// `alpha * x_t - sigma * v`
    pub fn x0(&self, x_t: f64, v: f64) -> f64 {
        self.alpha * x_t - self.sigma * v
    }

    /// `sigma * x_t + alpha * v`
    pub fn eps(&self, x_t: f64, v: f64) -> f64 {
        self.sigma * x_t + self.alpha * v
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(LabError::invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

pub fn base_alpha_sigma(t: f64) -> Result<AlphaSigma> {
    check_t(t)?;
    Ok(match t {
        0.0 => AlphaSigma { alpha: 1.0, sigma: 0.0 },
        1.0 => AlphaSigma { alpha: 0.0, sigma: 1.0 },
        _ => {
            let (s, c) = (FRAC_PI_2 * t).sin_cos();
            AlphaSigma { alpha: c, sigma: s }
        }
    })
}

pub fn shifted_alpha_sigma(t: f64, params: &ScheduleParams) -> Result<AlphaSigma> {
    check_t(t)?;
    params.validate()?;
    Ok(match t {
        0.0 => AlphaSigma { alpha: 1.0, sigma: 0.0 },
        1.0 => AlphaSigma { alpha: 0.0, sigma: 1.0 },
        _ => {
            // lambda_s = (cos / sin) * s^2; alpha = lambda_s / sqrt(1 + lambda_s^2)
            // written without the division so neither endpoint overflows.
            let (s, c) = (FRAC_PI_2 * t).sin_cos();
            let a = c * params.shift * params.shift;
            let r = a.hypot(s);
            AlphaSigma { alpha: a / r, sigma: s / r }
        }
    })
}

fn zip_map(
    a: &LatentSequence,
    b: &LatentSequence,
    f: impl Fn(f64, f64) -> f64,
) -> Result<LatentSequence> {
    a.ensure_same_shape(b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    LatentSequence::new(a.frames(), a.dim(), data)
}

/// `v = alpha * eps - sigma * x0`
pub fn velocity(
    x0: &LatentSequence,
    eps: &LatentSequence,
    t: f64,
    params: &ScheduleParams,
) -> Result<LatentSequence> {
    let ab = shifted_alpha_sigma(t, params)?;
    zip_map(x0, eps, |x, e| ab.velocity(x, e))
}

/// `x0 = alpha * x_t - sigma * v`
pub fn recover_x0(
    x_t: &LatentSequence,
    v: &LatentSequence,
    t: f64,
    params: &ScheduleParams,
) -> Result<LatentSequence> {
    let ab = shifted_alpha_sigma(t, params)?;
    zip_map(x_t, v, |x, v| ab.x0(x, v))
}

/// `eps = sigma * x_t + alpha * v`
pub fn recover_eps(
    x_t: &LatentSequence,
    v: &LatentSequence,
    t: f64,
    params: &ScheduleParams,
) -> Result<LatentSequence> {
    let ab = shifted_alpha_sigma(t, params)?;
    zip_map(x_t, v, |x, v| ab.eps(x, v))
}

/// `x_t = alpha * x0 + sigma * eps`
pub fn diffuse(
    x0: &LatentSequence,
    eps: &LatentSequence,
    t: f64,
    params: &ScheduleParams,
) -> Result<LatentSequence> {
    let ab = shifted_alpha_sigma(t, params)?;
    zip_map(x0, eps, |x, e| ab.diffuse(x, e))
}

/// Strictly decreasing sampling times in `(0, 1]` for the few-step student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct StudentTimeGrid {
    times: Vec<f64>,
}

impl StudentTimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(LabError::invalid("student time grid is empty"));
        }
        if let Some(t) = times.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(LabError::invalid(format!("grid time {t} outside (0, 1]")));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(LabError::invalid(format!("grid {times:?} is not strictly decreasing")));
        }
        Ok(Self { times })
    }

    /// `{1, (n-1)/n, ..., 1/n}`; `uniform(4)` is the default grid.
    pub fn uniform(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| (n - i) as f64 / n as f64).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

impl Default for StudentTimeGrid {
    fn default() -> Self {
        Self { times: vec![1.0, 0.75, 0.5, 0.25] }
    }
}

impl TryFrom<Vec<f64>> for StudentTimeGrid {
    type Error = LabError;

    fn try_from(times: Vec<f64>) -> Result<Self> {
        Self::new(times)
    }
}

impl From<StudentTimeGrid> for Vec<f64> {
    fn from(g: StudentTimeGrid) -> Self {
        g.times
    }
}
