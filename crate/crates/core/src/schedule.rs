//! Noise schedules and the forward noising process.
//!
//! A schedule stores cumulative signal retention `alpha_bar[t]` for integer
//! timesteps `t in [0, len)`, with `alpha_bar[0] = 1` (no noise) and values
//! nonincreasing in `t`. The noise scale at `t` is
//! `sigma(t) = sqrt((1 - alpha_bar[t]) / alpha_bar[t])`, and the forward
//! process draws
//!
//! `x_t = sqrt(alpha_bar[t]) * (x + sigma(t) * eps)`, `eps ~ N(0, I)`,
//!
//! which has variance `1 - alpha_bar[t]` around `sqrt(alpha_bar[t]) * x`.
//!
//! Named noise levels (`low`, `high`) are defined on the default 1000-step
//! linear-beta schedule and carry across other schedules by matching `sigma`,
//! not by reusing the raw index.

use crate::error::{Error, Result};
use ndarray::{Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Timestep on the default schedule that defines the named `low` level.
pub const LOW_TIMESTEP: usize = 10;
/// Timestep on the default schedule that defines the named `high` level.
pub const HIGH_TIMESTEP: usize = 396;

const DEFAULT_LEN: usize = 1000;
const DEFAULT_BETA_START: f64 = 1e-4;
const DEFAULT_BETA_END: f64 = 0.02;

/// Noise scale for a given cumulative signal retention.
///
/// Defined for `alpha_bar` in `(0, 1]`; returns 0 at `alpha_bar = 1`.
pub fn sigma_from_alpha(alpha_bar: f64) -> Result<f64> {
    if !alpha_bar.is_finite() || alpha_bar <= 0.0 || alpha_bar > 1.0 {
        return Err(Error::Domain(format!(
            "alpha_bar must lie in (0, 1], got {alpha_bar}"
        )));
    }
    Ok(((1.0 - alpha_bar) / alpha_bar).sqrt())
}

/// Cumulative noise schedule over integer timesteps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    name: String,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from per-step noise rates `beta` interpolated
    /// linearly from `beta_start` to `beta_end` over `len` steps.
    /// `alpha_bar[t]` is the product of the first `t` factors `(1 - beta)`.
    pub fn linear_beta(name: &str, len: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if len < 2 {
            return Err(Error::Config(format!(
                "schedule len must be >= 2, got {len}"
            )));
        }
        for (key, v) in [("beta_start", beta_start), ("beta_end", beta_end)] {
            if !v.is_finite() || v <= 0.0 || v >= 1.0 {
                return Err(Error::Config(format!("{key} must lie in (0, 1), got {v}")));
            }
        }
        if beta_end < beta_start {
            return Err(Error::Config(format!(
                "beta_end ({beta_end}) must be >= beta_start ({beta_start})"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(len);
        let mut prod = 1.0;
        alpha_bar.push(prod);
        for i in 0..len - 1 {
            let beta = beta_start + (i as f64) / ((len - 1) as f64) * (beta_end - beta_start);
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        let s = Self {
            name: name.to_string(),
            alpha_bar,
        };
        s.validate()?;
        Ok(s)
    }

    /// The default 1000-step linear schedule (beta 1e-4 to 0.02).
    pub fn default_linear() -> Self {
        Self::linear_beta(
            "linear-1000",
            DEFAULT_LEN,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
        )
        .expect("default schedule parameters are valid")
    }

    /// Builds a schedule from explicit `alpha_bar` values.
    pub fn from_alpha_bar(name: &str, alpha_bar: Vec<f64>) -> Result<Self> {
        let s = Self {
            name: name.to_string(),
            alpha_bar,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.alpha_bar.len() < 2 {
            return Err(Error::Config(format!(
                "schedule '{}' needs at least 2 alpha_bar entries, got {}",
                self.name,
                self.alpha_bar.len()
            )));
        }
        for (t, &a) in self.alpha_bar.iter().enumerate() {
            if !a.is_finite() || a <= 0.0 || a > 1.0 {
                return Err(Error::Config(format!(
                    "schedule '{}': alpha_bar[{t}] = {a} is outside (0, 1]",
                    self.name
                )));
            }
            if t > 0 && a > self.alpha_bar[t - 1] {
                return Err(Error::Config(format!(
                    "schedule '{}': alpha_bar must be nonincreasing, but [{t}] = {a} > [{}] = {}",
                    self.name,
                    t - 1,
                    self.alpha_bar[t - 1]
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of timesteps; valid `t` are `0..len()`.
    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                t_max: self.len(),
            })
    }

    /// Noise scale at timestep `t`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        sigma_from_alpha(self.alpha_bar(t)?)
    }

    /// Smallest timestep whose sigma reaches `target`; the last timestep if
    /// none does. Used to carry named levels across schedules.
    pub fn timestep_for_sigma(&self, target: f64) -> Result<usize> {
        if !target.is_finite() || target < 0.0 {
            return Err(Error::Domain(format!(
                "target sigma must be finite and >= 0, got {target}"
            )));
        }
        for t in 0..self.len() {
            if self.sigma(t)? >= target {
                return Ok(t);
            }
        }
        Ok(self.len() - 1)
    }

    /// Loads a schedule from a JSON file of shape
    /// `{"name": str, "alpha_bar": [..]}` and validates its invariants.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: NoiseSchedule = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    /// Writes the schedule as JSON (round-trips exactly).
    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Semantic tag of a noise level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelKind {
    None,
    Low,
    High,
    Range,
}

impl LevelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LevelKind::None => "none",
            LevelKind::Low => "low",
            LevelKind::High => "high",
            LevelKind::Range => "range",
        }
    }
}

/// A resolved noise level: a kind plus the timestep window it spans on a
/// concrete schedule. `low`/`high` have `t_min == t_max`; `range` samples
/// uniformly from `[t_min, t_max]`; `none` carries no timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevel {
    pub kind: LevelKind,
    pub t_min: usize,
    pub t_max: usize,
}

impl NoiseLevel {
    pub fn none() -> Self {
        NoiseLevel {
            kind: LevelKind::None,
            t_min: 0,
            t_max: 0,
        }
    }

    /// The `low` level on `schedule`: the timestep matching the default
    /// schedule's sigma at step 10 (about 0.0436).
    pub fn low_for(schedule: &NoiseSchedule) -> Result<Self> {
        let t = schedule.timestep_for_sigma(reference_sigma_low())?;
        Ok(NoiseLevel {
            kind: LevelKind::Low,
            t_min: t,
            t_max: t,
        })
    }

    /// The `high` level on `schedule`: the timestep matching the default
    /// schedule's sigma at step 396 (about 1.99).
    pub fn high_for(schedule: &NoiseSchedule) -> Result<Self> {
        let t = schedule.timestep_for_sigma(reference_sigma_high())?;
        Ok(NoiseLevel {
            kind: LevelKind::High,
            t_min: t,
            t_max: t,
        })
    }

    /// The span between the low and high levels on `schedule`.
    pub fn range_for(schedule: &NoiseSchedule) -> Result<Self> {
        let lo = Self::low_for(schedule)?;
        let hi = Self::high_for(schedule)?;
        Self::range(lo.t_min, hi.t_max, schedule)
    }

    /// An explicit `[t_min, t_max]` window validated against `schedule`.
    pub fn range(t_min: usize, t_max: usize, schedule: &NoiseSchedule) -> Result<Self> {
        if t_min > t_max {
            return Err(Error::Config(format!(
                "noise level t_min ({t_min}) must be <= t_max ({t_max})"
            )));
        }
        if t_max >= schedule.len() {
            return Err(Error::TimestepOutOfRange {
                t: t_max,
                t_max: schedule.len(),
            });
        }
        Ok(NoiseLevel {
            kind: LevelKind::Range,
            t_min,
            t_max,
        })
    }

    /// Draws a timestep: the fixed one for `low`/`high`, uniform over the
    /// window for `range`. Sampling from `none` is an error.
    pub fn sample_t(&self, rng: &mut ChaCha8Rng) -> Result<usize> {
        match self.kind {
            LevelKind::None => Err(Error::Contract(
                "cannot sample a timestep from noise level 'none'".into(),
            )),
            _ if self.t_min == self.t_max => Ok(self.t_min),
            _ => Ok(rng.gen_range(self.t_min..=self.t_max)),
        }
    }
}

/// Sigma defining the named `low` level (default schedule, step 10).
pub fn reference_sigma_low() -> f64 {
    NoiseSchedule::default_linear()
        .sigma(LOW_TIMESTEP)
        .expect("in range")
}

/// Sigma defining the named `high` level (default schedule, step 396).
pub fn reference_sigma_high() -> f64 {
    NoiseSchedule::default_linear()
        .sigma(HIGH_TIMESTEP)
        .expect("in range")
}

/// Applies the forward process to one image in place:
/// `x <- sqrt(alpha_bar) * (x + sigma * eps)`. Consumes `x.len()` normal
/// draws from `rng` in row-major order.
pub fn noise_in_place(
    mut x: ArrayViewMutD<'_, f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let ab = schedule.alpha_bar(t)?;
    let sigma = sigma_from_alpha(ab)?;
    let scale = ab.sqrt();
    for v in x.iter_mut() {
        let eps: f64 = rng.sample(rand_distr::StandardNormal);
        *v = scale * (*v + sigma * eps);
    }
    Ok(())
}

/// Forward-noises a batch `(n, c, h, w)` at a single timestep, drawing noise
/// image by image from `rng`.
pub fn forward_noise(
    x: &Array4<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<f64>> {
    let mut out = x.clone();
    noise_in_place(out.view_mut().into_dyn(), t, schedule, rng)?;
    Ok(out)
}

/// Forward-noises a single image view, returning a new array.
pub fn noised(
    x: &ArrayViewD<'_, f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<ndarray::ArrayD<f64>> {
    let mut out = x.to_owned();
    noise_in_place(out.view_mut(), t, schedule, rng)?;
    Ok(out)
}
