//! Axis-dependent diffusion schedule derived from the white-noise and
//! random-walk coefficients, and the per-axis forward process.
//!
//! Windows are passed as channel-major `6 × L` slices.

use serde::{Deserialize, Serialize};

use crate::data::{CHANNELS, CHANNEL_NAMES};
use crate::error::{Error, Result};
use crate::sim::NoiseParams;

pub const T_EFFECTIVE_MIN: f64 = 0.1;
pub const T_EFFECTIVE_MAX: f64 = 10.0;
/// Below this `ᾱ` the x0 inversion is refused.
pub const MIN_ALPHA_BAR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!(
                "schedule needs at least 2 steps, got {}",
                self.steps
            )));
        }
        if !(0.0 < self.beta_min && self.beta_min < self.beta_max && self.beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min < beta_max < 1, got {} and {}",
                self.beta_min, self.beta_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSchedule {
    pub config: ScheduleConfig,
    pub t_effective: Vec<f64>,
    pub beta: [Vec<f64>; CHANNELS],
    pub alpha_bar: [Vec<f64>; CHANNELS],
    /// Axes whose variance curve was flat and got the plain linear ramp.
    pub fallback: [bool; CHANNELS],
}

/// `σ_white² + σ_rw²·t` for one axis.
pub fn cumulative_variance(params: &NoiseParams, axis: usize, t: f64) -> f64 {
    params.sigma_white[axis].powi(2) + params.sigma_rw[axis].powi(2) * t
}

/// Effective time of step `s` on the linear map of `0..T` onto `[0.1, 10]`.
pub fn effective_time(s: usize, steps: usize) -> f64 {
    T_EFFECTIVE_MIN + (T_EFFECTIVE_MAX - T_EFFECTIVE_MIN) * s as f64 / (steps - 1) as f64
}

/// Min-max maps each axis' cumulative variance over the effective-time grid
/// onto `[beta_min, beta_max]`. A flat axis falls back to a linear ramp.
pub fn build_schedule(params: &NoiseParams, cfg: &ScheduleConfig) -> Result<AxisSchedule> {
    cfg.validate()?;
    params.validate()?;
    let steps = cfg.steps;
    let t_effective: Vec<f64> = (0..steps).map(|s| effective_time(s, steps)).collect();
    let mut beta: [Vec<f64>; CHANNELS] = Default::default();
    let mut alpha_bar: [Vec<f64>; CHANNELS] = Default::default();
    let mut fallback = [false; CHANNELS];
    let range = cfg.beta_max - cfg.beta_min;
    for i in 0..CHANNELS {
        let v: Vec<f64> = t_effective.iter().map(|&t| cumulative_variance(params, i, t)).collect();
        let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
        let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = vmax - vmin;
        fallback[i] = !(span > 0.0) || span < 1e-15 * vmax;
        beta[i] = if fallback[i] {
            log::debug!(
                "axis {} has a flat variance curve, using a linear beta ramp",
                CHANNEL_NAMES[i]
            );
            (0..steps)
                .map(|s| cfg.beta_min + range * s as f64 / (steps - 1) as f64)
                .collect()
        } else {
            v.iter()
                .map(|&x| (cfg.beta_min + range * (x - vmin) / span).clamp(cfg.beta_min, cfg.beta_max))
                .collect()
        };
        let mut acc = 1.0;
        alpha_bar[i] = beta[i]
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
    }
    Ok(AxisSchedule {
        config: *cfg,
        t_effective,
        beta,
        alpha_bar,
        fallback,
    })
}

impl AxisSchedule {
    pub fn steps(&self) -> usize {
        self.config.steps
    }

    /// `ᾱ` at step `t` with the convention `ᾱ_{−1} = 1`.
    pub fn alpha_bar_prev(&self, axis: usize, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[axis][t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Contract(format!("step {t} outside 0..{}", self.steps())));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.config.validate()?;
        let n = s.steps();
        if s.t_effective.len() != n || s.beta.iter().chain(&s.alpha_bar).any(|v| v.len() != n) {
            return Err(Error::Format(format!("schedule arrays do not all have {n} steps")));
        }
        Ok(s)
    }
}

/// Marginal `x_t | x0 ~ N(a_t·x0, v_t)` per axis of the ancestral chain
/// started at `x_T ~ N(0, I)` when every step uses the exact noise.
///
/// Entry `t` describes the input of reverse step `t`. Each step maps
/// `x ↦ c1·x0 + c2·x + σ·z` with the usual posterior coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainMarginals {
    pub mean_coef: [Vec<f64>; CHANNELS],
    pub variance: [Vec<f64>; CHANNELS],
}

pub fn chain_marginals(schedule: &AxisSchedule) -> ChainMarginals {
    let steps = schedule.steps();
    let mut mean_coef: [Vec<f64>; CHANNELS] = Default::default();
    let mut variance: [Vec<f64>; CHANNELS] = Default::default();
    for i in 0..CHANNELS {
        let (mut a, mut v) = (vec![0.0; steps], vec![0.0; steps]);
        v[steps - 1] = 1.0;
        for t in (1..steps).rev() {
            let (beta, ab, ab_prev) = (
                schedule.beta[i][t],
                schedule.alpha_bar[i][t],
                schedule.alpha_bar[i][t - 1],
            );
            let c1 = ab_prev.sqrt() * beta / (1.0 - ab);
            let c2 = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let s2 = beta * (1.0 - ab_prev) / (1.0 - ab);
            a[t - 1] = c1 + c2 * a[t];
            v[t - 1] = c2 * c2 * v[t] + s2;
        }
        mean_coef[i] = a;
        variance[i] = v;
    }
    ChainMarginals { mean_coef, variance }
}

fn window_len(a: &[f64], b: &[f64]) -> Result<usize> {
    if a.len() != b.len() || a.len() % CHANNELS != 0 || a.is_empty() {
        return Err(Error::Contract(format!(
            "windows of {} and {} values are not matching 6 x L arrays",
            a.len(),
            b.len()
        )));
    }
    Ok(a.len() / CHANNELS)
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε` per axis.
pub fn q_sample(x0: &[f64], t: usize, schedule: &AxisSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let len = window_len(x0, eps)?;
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..CHANNELS {
        let ab = schedule.alpha_bar[i][t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let r = i * len..(i + 1) * len;
        out.extend(x0[r.clone()].iter().zip(&eps[r]).map(|(x, e)| a * x + b * e));
    }
    Ok(out)
}

/// `x̂0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t` per axis.
pub fn predict_x0(xt: &[f64], eps_hat: &[f64], t: usize, schedule: &AxisSchedule) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let len = window_len(xt, eps_hat)?;
    let mut out = Vec::with_capacity(xt.len());
    for i in 0..CHANNELS {
        let ab = schedule.alpha_bar[i][t];
        if ab < MIN_ALPHA_BAR {
            return Err(Error::Numerical(format!(
                "alpha_bar {ab:e} of axis {} at step {t} is too small to invert",
                CHANNEL_NAMES[i]
            )));
        }
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let r = i * len..(i + 1) * len;
        out.extend(xt[r.clone()].iter().zip(&eps_hat[r]).map(|(x, e)| (x - b * e) / a));
    }
    Ok(out)
}
