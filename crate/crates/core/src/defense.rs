//! Noise-and-denoise inference defense.
//!
//! In `denoise` mode each query draws a timestep from the policy's noise
//! level, pushes the input through the forward noise process, denoises it
//! in one shot, clips to `[0, 1]`, and runs the normal prediction pipeline
//! on the result. `none` mode is numerically identical to calling the
//! pipeline directly. With `samples > 1` the per-sample predictions are
//! aggregated: majority vote for discrete outputs, mean for continuous
//! ones. Noise is redrawn on every query, and the defense consumes its own
//! seed stream so attackers never share its randomness.

use crate::error::{Error, Result};
use crate::models::{analytic_denoise, ModelBundle, Prediction};
use crate::rng;
use crate::schedule::{self, LevelKind, NoiseLevel, NoiseSchedule};
use crate::tasks::TaskKind;
use ndarray::{Array1, Array2, Array3, Ix3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    None,
    Denoise,
}

/// Which denoiser the defense runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseDenoiser {
    /// The bundle's trained denoiser.
    Learned,
    /// Closed-form Gaussian-prior posterior mean with the given prior.
    Analytic { mu: f64, rho: f64 },
}

impl Default for DefenseDenoiser {
    fn default() -> Self {
        DefenseDenoiser::Learned
    }
}

/// Inference-time defense specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefensePolicy {
    pub mode: DefenseMode,
    pub level: NoiseLevel,
    /// Denoised draws aggregated per query; 1 is the standard setting.
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub denoiser: DefenseDenoiser,
}

impl DefensePolicy {
    /// The undefended pipeline.
    pub fn none() -> Self {
        DefensePolicy {
            mode: DefenseMode::None,
            level: NoiseLevel::none(),
            samples: 1,
            seed: 0,
            denoiser: DefenseDenoiser::Learned,
        }
    }

    /// Single-sample denoising defense at `level`.
    pub fn denoise(level: NoiseLevel, seed: u64) -> Self {
        DefensePolicy {
            mode: DefenseMode::Denoise,
            level,
            samples: 1,
            seed,
            denoiser: DefenseDenoiser::Learned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("defense samples must be >= 1".into()));
        }
        if self.mode == DefenseMode::Denoise && self.level.kind == LevelKind::None {
            return Err(Error::Config(
                "denoise mode requires a noise level other than 'none'".into(),
            ));
        }
        Ok(())
    }

    /// Short label for reports: `none`, `denoise-low`, `denoise-range`, ...
    pub fn label(&self) -> String {
        match self.mode {
            DefenseMode::None => "none".into(),
            DefenseMode::Denoise => format!("denoise-{}", self.level.kind.as_str()),
        }
    }
}

/// Runs the defense and the prediction pipeline for one query. Queries are
/// independent: query `i` reads rng stream index `i` of the policy seed and
/// redraws its noise on every call.
pub fn defend_then_predict(
    bundle: &ModelBundle,
    task: TaskKind,
    x: &Array3<f64>,
    policy: &DefensePolicy,
    schedule: &NoiseSchedule,
    query_index: u64,
) -> Result<Prediction> {
    policy.validate()?;
    if policy.mode == DefenseMode::None {
        return bundle.predict(task, x);
    }
    let mut rng = rng::stream(policy.seed, "defense", query_index);
    let mut preds = Vec::with_capacity(policy.samples);
    for _ in 0..policy.samples {
        let t = policy.level.sample_t(&mut rng)?;
        let x_t = schedule::noised(&x.view().into_dyn(), t, schedule, &mut rng)?
            .into_dimensionality::<Ix3>()
            .expect("rank preserved");
        let mut x_hat = match policy.denoiser {
            DefenseDenoiser::Learned => bundle.denoiser.denoise(&x_t, t, schedule)?,
            DefenseDenoiser::Analytic { mu, rho } => analytic_denoise(&x_t, t, schedule, mu, rho)?,
        };
        x_hat.mapv_inplace(|v| v.clamp(0.0, 1.0));
        preds.push(bundle.predict(task, &x_hat)?);
    }
    aggregate(preds)
}

/// Folds per-sample predictions into one: majority vote for classes and
/// masks (ties to the smallest id), mean for depth and embeddings.
fn aggregate(preds: Vec<Prediction>) -> Result<Prediction> {
    if preds.len() == 1 {
        return Ok(preds.into_iter().next().expect("len 1"));
    }
    match &preds[0] {
        Prediction::Class(_) => {
            let votes: Vec<usize> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Class(c) => Ok(*c),
                    other => Err(mixed(other)),
                })
                .collect::<Result<_>>()?;
            Ok(Prediction::Class(majority(&votes)))
        }
        Prediction::Seg(first) => {
            let dim = first.dim();
            let mut masks = Vec::with_capacity(preds.len());
            for p in &preds {
                match p {
                    Prediction::Seg(m) => masks.push(m),
                    other => return Err(mixed(other)),
                }
            }
            let mut out = Array2::zeros(dim);
            for i in 0..dim.0 {
                for j in 0..dim.1 {
                    let votes: Vec<usize> = masks.iter().map(|m| m[[i, j]] as usize).collect();
                    out[[i, j]] = majority(&votes) as u8;
                }
            }
            Ok(Prediction::Seg(out))
        }
        Prediction::Depth(first) => {
            let mut sum = Array2::zeros(first.dim());
            for p in &preds {
                match p {
                    Prediction::Depth(m) => sum += m,
                    other => return Err(mixed(other)),
                }
            }
            Ok(Prediction::Depth(sum / preds.len() as f64))
        }
        Prediction::Embed(first) => {
            let mut sum = Array1::zeros(first.len());
            for p in &preds {
                match p {
                    Prediction::Embed(e) => sum += e,
                    other => return Err(mixed(other)),
                }
            }
            Ok(Prediction::Embed(sum / preds.len() as f64))
        }
    }
}

fn mixed(p: &Prediction) -> Error {
    Error::Contract(format!("mixed prediction kinds in aggregation: {p:?}"))
}

/// Most frequent value; ties break to the smallest.
fn majority(votes: &[usize]) -> usize {
    let max = votes.iter().copied().max().expect("nonempty");
    let mut counts = vec![0usize; max + 1];
    for &v in votes {
        counts[v] += 1;
    }
    let best = counts.iter().copied().max().expect("nonempty");
    counts.iter().position(|&c| c == best).expect("present")
}
