//! Few-step denoising arithmetic.
//!
//! Everything here is epsilon-prediction: the noise predictor estimates the
//! noise in `x_t`, [`predict_x0`] inverts the forward process with it, and
//! [`step`] either returns that estimate (last step) or re-noises it to the
//! next timestep, consistency-model style.

mod caches;

pub use caches::{CacheConfig, CacheStats, NoiseKey, SchedulerCaches};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Latent;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

/// Cumulative signal levels `alpha_bar[0..=T]` of a scaled-linear beta
/// schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolate linearly in `sqrt(beta)` from `beta_start` to
    /// `beta_end` over `total_steps`.
    pub fn scaled_linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps < 2 {
            return Err(Error::contract("schedule needs at least two steps"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::contract(format!(
                "beta range must satisfy 0 < start < end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
        let last = (total_steps - 1) as f64;
        let mut alpha_bar = Vec::with_capacity(total_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..total_steps {
            let root = lo + (hi - lo) * i as f64 / last;
            acc *= 1.0 - root * root;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha_bar })
    }

    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::contract(format!("timestep {t} outside [0, {}]", self.total_steps())))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Computes the coefficients for `t` from scratch.
    pub fn coefficients(&self, t: usize) -> Result<Coefficients> {
        Ok(Coefficients::from_alpha_bar(self.alpha_bar(t)?))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// `sqrt(alpha_bar_t)` and `sqrt(1 - alpha_bar_t)` for one timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub signal: f64,
    pub noise: f64,
}

impl Coefficients {
    pub fn from_alpha_bar(alpha_bar: f64) -> Self {
        Self {
            signal: alpha_bar.sqrt(),
            noise: (1.0 - alpha_bar).sqrt(),
        }
    }
}

/// Strictly decreasing timesteps visited by the sampler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

impl TimestepPlan {
    pub fn new(steps: Vec<usize>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::contract("timestep plan is empty"));
        }
        if steps.contains(&0) {
            return Err(Error::contract("timesteps start at 1"));
        }
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::contract(format!("timesteps {steps:?} are not strictly decreasing")));
        }
        Ok(Self { steps })
    }

    /// `count` evenly spaced timesteps ending just above zero, starting at
    /// `round(strength * total_steps)`. Collapses duplicates when the start
    /// is smaller than `count`.
    pub fn uniform(total_steps: usize, count: usize, strength: f64) -> Result<Self> {
        if count == 0 {
            return Err(Error::contract("step count must be positive"));
        }
        if !(strength > 0.0 && strength <= 1.0) {
            return Err(Error::contract(format!("strength must lie in (0, 1], got {strength}")));
        }
        let start = ((strength * total_steps as f64).round() as usize).clamp(1, total_steps);
        let mut steps: Vec<usize> = (0..count)
            .map(|i| (start * (count - i)).div_ceil(count))
            .collect();
        steps.dedup();
        Self::new(steps)
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// Timestep the input is noised to before denoising begins.
    pub fn start(&self) -> usize {
        self.steps[0]
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Target after the step at `position`.
    pub fn target_after(&self, position: usize) -> StepTarget {
        match self.steps.get(position + 1) {
            Some(&t) => StepTarget::Timestep(t),
            None => StepTarget::Final,
        }
    }

    pub fn check_within(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.start() > schedule.total_steps() {
            return Err(Error::contract(format!(
                "timestep {} exceeds schedule length {}",
                self.start(),
                schedule.total_steps()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for TimestepPlan {
    type Error = Error;

    fn try_from(steps: Vec<usize>) -> Result<Self> {
        Self::new(steps)
    }
}

impl From<TimestepPlan> for Vec<usize> {
    fn from(plan: TimestepPlan) -> Self {
        plan.steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepTarget {
    Timestep(usize),
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgMode {
    None,
    #[default]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub mode: CfgMode,
    pub scale: f64,
}

impl GuidanceConfig {
    pub fn new(mode: CfgMode, scale: f64) -> Result<Self> {
        let cfg = Self { mode, scale };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::contract(format!(
                "guidance scale must be finite and >= 0, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: CfgMode::Full,
            scale: 1.5,
        }
    }
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * noise`.
pub fn add_noise(x0: &Latent, noise: &Latent, c: Coefficients) -> Result<Latent> {
    x0.zip_map(noise, |x, n| c.signal * x + c.noise * n)
}

/// Inverse of [`add_noise`] given the noise estimate.
pub fn predict_x0(x_t: &Latent, eps: &Latent, c: Coefficients) -> Result<Latent> {
    x_t.zip_map(eps, |x, e| (x - c.noise * e) / c.signal)
}

/// Classifier-free guidance blend, written as `(1 - s) * u + s * c` so the
/// `s = 0` and `s = 1` cases reproduce their inputs bit for bit.
pub fn cfg_combine(eps_uncond: &Latent, eps_cond: &Latent, cfg: GuidanceConfig) -> Result<Latent> {
    eps_uncond.check_same_shape(eps_cond)?;
    match cfg.mode {
        CfgMode::None => Ok(eps_cond.clone()),
        CfgMode::Full => {
            let s = cfg.scale;
            eps_uncond.zip_map(eps_cond, |u, c| (1.0 - s) * u + s * c)
        }
    }
}

/// One sampler step from `t` to `next`.
///
/// `current` holds the coefficients of `t`, `next` those of the target
/// timestep (ignored for the final step). Re-noising requires
/// `fresh_noise`.
pub fn step(
    x_t: &Latent,
    eps: &Latent,
    current: Coefficients,
    next: Option<Coefficients>,
    fresh_noise: Option<&Latent>,
) -> Result<Latent> {
    let x0 = predict_x0(x_t, eps, current)?;
    match next {
        None => Ok(x0),
        Some(c) => {
            let noise = fresh_noise
                .ok_or_else(|| Error::contract("fresh noise is required for a non-final step"))?;
            add_noise(&x0, noise, c)
        }
    }
}

/// Schedule-aware wrappers resolving coefficients through the caches.
#[derive(Debug)]
pub struct Scheduler {
    schedule: NoiseSchedule,
    table: Option<Vec<Coefficients>>,
}

impl Scheduler {
    /// With `cache_coefficients` every timestep's coefficients are computed
    /// once up front; otherwise they are recomputed per lookup by the same
    /// arithmetic.
    pub fn new(schedule: NoiseSchedule, cache_coefficients: bool) -> Self {
        let table = cache_coefficients.then(|| {
            schedule
                .alpha_bars()
                .iter()
                .map(|&ab| Coefficients::from_alpha_bar(ab))
                .collect()
        });
        Self { schedule, table }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn is_cached(&self) -> bool {
        self.table.is_some()
    }

    pub fn coefficients(&self, t: usize) -> Result<Coefficients> {
        match &self.table {
            Some(table) => table.get(t).copied().ok_or_else(|| {
                Error::contract(format!("timestep {t} outside [0, {}]", self.schedule.total_steps()))
            }),
            None => self.schedule.coefficients(t),
        }
    }

    fn checked(&self, t: usize) -> Result<Coefficients> {
        if t == 0 {
            return Err(Error::contract("timestep must be >= 1"));
        }
        self.coefficients(t)
    }

    pub fn add_noise(&self, x0: &Latent, noise: &Latent, t: usize) -> Result<Latent> {
        add_noise(x0, noise, self.checked(t)?)
    }

    pub fn predict_x0(&self, x_t: &Latent, eps: &Latent, t: usize) -> Result<Latent> {
        predict_x0(x_t, eps, self.checked(t)?)
    }

    pub fn step(
        &self,
        x_t: &Latent,
        eps: &Latent,
        t: usize,
        target: StepTarget,
        fresh_noise: Option<&Latent>,
    ) -> Result<Latent> {
        let next = match target {
            StepTarget::Final => None,
            StepTarget::Timestep(n) if n >= t => {
                return Err(Error::contract(format!("next timestep {n} must precede {t}")));
            }
            StepTarget::Timestep(n) => Some(self.checked(n)?),
        };
        step(x_t, eps, self.checked(t)?, next, fresh_noise)
    }
}
