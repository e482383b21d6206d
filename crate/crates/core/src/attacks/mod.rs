//! Gradient attacks: one configurable ascent engine covering PGD, MI-FGSM,
//! and the block-transform variant, with optional noise-and-denoise steps
//! inside the crafting loop.
//!
//! Per iteration the engine perturbs the current adversarial image, with
//! probability `p_diffusion` pushes it through forward noise and the
//! denoiser (gradients flow through the denoiser), applies the configured
//! input transform, and ascends the task loss: the gradient is
//! l1-normalized per image, folded into a momentum buffer, and the
//! perturbation moves by `step_size * sign(momentum)` before being clipped
//! to the budget box and then to the valid pixel range, in that order.

pub mod reference;
pub mod transform;

pub use transform::{sia_transform, BlockOpKind, SiaParams, BLOCK_OP_COUNT};

use crate::error::{Error, Result};
use crate::models::{ModelBundle, TaskTarget};
use crate::rng;
use crate::schedule::{self, LevelKind, NoiseLevel, NoiseSchedule};
use crate::tasks::TaskKind;
use ndarray::{Array3, Ix3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Divisor floor in the gradient l1 normalization.
pub const GRAD_NORM_EPS: f64 = 1e-12;

/// Input transform applied inside the crafting loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    /// Independent random block transforms on a 3x3 grid.
    SiaBlock,
    /// One random transform over the whole image.
    SiaImage,
}

impl TransformKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::SiaBlock => "sia_block",
            TransformKind::SiaImage => "sia_image",
        }
    }
}

/// Full attack specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Label used in reports; presets set it to their own name.
    pub method_name: String,
    /// Momentum decay; 0 disables momentum.
    pub mu: f64,
    pub iterations: usize,
    pub step_size: f64,
    /// Linf budget; 0 disables the attack entirely.
    pub budget: f64,
    pub transform: TransformKind,
    /// Per-iteration probability of noising and denoising the input.
    pub p_diffusion: f64,
    /// Timesteps drawn when diffusion fires; may be `none` iff
    /// `p_diffusion` is zero.
    pub noise_level: NoiseLevel,
    pub seed: u64,
    #[serde(default)]
    pub sia: SiaParams,
}

/// Shared preset defaults: budget 3/255, 50 iterations, step 4·budget/T.
pub const DEFAULT_BUDGET: f64 = 3.0 / 255.0;
pub const DEFAULT_ITERATIONS: usize = 50;

impl AttackConfig {
    /// Named presets: `pgd` (no momentum), `mifgsm` (momentum 1), `sia`
    /// (momentum 1 plus block transforms). All share the same budget,
    /// iteration count, and step size, and no in-loop diffusion.
    pub fn preset(name: &str) -> Result<AttackConfig> {
        let (mu, transform) = match name {
            "pgd" => (0.0, TransformKind::Identity),
            "mifgsm" => (1.0, TransformKind::Identity),
            "sia" => (1.0, TransformKind::SiaBlock),
            other => {
                return Err(Error::Config(format!(
                    "unknown attack preset {other:?}; expected pgd, mifgsm, or sia"
                )))
            }
        };
        Ok(AttackConfig {
            method_name: name.to_string(),
            mu,
            iterations: DEFAULT_ITERATIONS,
            step_size: DEFAULT_BUDGET / DEFAULT_ITERATIONS as f64 * 4.0,
            budget: DEFAULT_BUDGET,
            transform,
            p_diffusion: 0.0,
            noise_level: NoiseLevel::none(),
            seed: 0,
            sia: SiaParams::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::Config(format!(
                "mu must be finite and >= 0, got {}",
                self.mu
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "step_size must be finite and > 0, got {}",
                self.step_size
            )));
        }
        if !(self.budget.is_finite() && (0.0..1.0).contains(&self.budget)) {
            return Err(Error::Config(format!(
                "budget must lie in [0, 1), got {}",
                self.budget
            )));
        }
        if self.budget > 0.0 && self.step_size > self.budget {
            return Err(Error::Config(format!(
                "step_size {} exceeds budget {}",
                self.step_size, self.budget
            )));
        }
        if !(0.0..=1.0).contains(&self.p_diffusion) {
            return Err(Error::Config(format!(
                "p_diffusion must lie in [0, 1], got {}",
                self.p_diffusion
            )));
        }
        if self.p_diffusion > 0.0 && self.noise_level.kind == LevelKind::None {
            return Err(Error::Config(
                "p_diffusion > 0 requires a noise level other than 'none'".into(),
            ));
        }
        self.sia.validate()?;
        Ok(())
    }
}

/// Mutable crafting state for one image.
#[derive(Clone, Debug)]
pub struct AttackState {
    /// Perturbation; stays inside the budget box and the valid-range box.
    pub a: Array3<f64>,
    /// Momentum buffer.
    pub g: Array3<f64>,
    pub iteration: usize,
}

impl AttackState {
    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        AttackState {
            a: Array3::zeros(shape),
            g: Array3::zeros(shape),
            iteration: 0,
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One ascent step: per-image l1 normalization, momentum fold, signed step,
/// budget clip, then valid-range clip against `x_o`.
pub fn attack_step(
    state: &mut AttackState,
    grad: &Array3<f64>,
    x_o: &Array3<f64>,
    cfg: &AttackConfig,
) -> Result<()> {
    if grad.dim() != state.a.dim() || x_o.dim() != state.a.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", state.a.dim()),
            actual: format!("grad {:?} / x_o {:?}", grad.dim(), x_o.dim()),
        });
    }
    let l1: f64 = grad.iter().map(|v| v.abs()).sum();
    let denom = l1.max(GRAD_NORM_EPS);
    for (gv, &dv) in state.g.iter_mut().zip(grad.iter()) {
        *gv = cfg.mu * *gv + dv / denom;
    }
    for ((av, &gv), &xv) in state.a.iter_mut().zip(state.g.iter()).zip(x_o.iter()) {
        let stepped = *av + cfg.step_size * sign(gv);
        *av = stepped.clamp(-cfg.budget, cfg.budget).clamp(-xv, 1.0 - xv);
    }
    state.iteration += 1;
    Ok(())
}

/// Crafts an adversarial image for one sample. Deterministic in
/// `(cfg.seed, image_index)`; randomness is consumed only by the features
/// that need it, so configurations without diffusion or transforms are
/// exactly the classic straight-line loops.
pub fn run_attack(
    bundle: &ModelBundle,
    task: TaskKind,
    target: &TaskTarget,
    x_o: &Array3<f64>,
    schedule: &NoiseSchedule,
    cfg: &AttackConfig,
    image_index: u64,
) -> Result<Array3<f64>> {
    cfg.validate()?;
    if cfg.budget == 0.0 {
        return Ok(x_o.clone());
    }
    let mut rng = rng::stream(cfg.seed, "attack", image_index);
    let mut state = AttackState::zeros(x_o.dim());
    for iter in 0..cfg.iterations {
        let x_a = x_o + &state.a;
        let grad = pipeline_loss_grad(bundle, task, target, &x_a, schedule, cfg, &mut rng, iter)?;
        attack_step(&mut state, &grad, x_o, cfg)?;
    }
    let x_adv = x_o + &state.a;
    debug_assert!(state.a.iter().all(|&v| v.abs() <= cfg.budget + 1e-9));
    debug_assert!(x_adv.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)));
    Ok(x_adv)
}

/// Loss gradient w.r.t. the adversarial image through the optional
/// noise/denoise hop and the configured transform.
#[allow(clippy::too_many_arguments)]
fn pipeline_loss_grad(
    bundle: &ModelBundle,
    task: TaskKind,
    target: &TaskTarget,
    x_a: &Array3<f64>,
    schedule: &NoiseSchedule,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<Array3<f64>> {
    // Draw randomness only for enabled features so disabled ones leave the
    // stream untouched.
    let diffuse = cfg.p_diffusion > 0.0 && rng.gen::<f64>() < cfg.p_diffusion;
    let (x_model, den_cache, sqrt_ab) = if diffuse {
        let t = cfg.noise_level.sample_t(rng)?;
        let x_t = schedule::noised(&x_a.view().into_dyn(), t, schedule, rng)?
            .into_dimensionality::<Ix3>()
            .expect("rank preserved");
        let (x_d, cache) = bundle.denoiser.denoise_cached(&x_t, t, schedule)?;
        let ab = schedule.alpha_bar(t)?;
        (x_d, Some(cache), ab.sqrt())
    } else {
        (x_a.clone(), None, 1.0)
    };

    let sia_instance = match cfg.transform {
        TransformKind::Identity => None,
        TransformKind::SiaBlock => Some(transform::sample_sia(x_model.dim(), &cfg.sia, rng)?),
        TransformKind::SiaImage => Some(transform::sample_sia(
            x_model.dim(),
            &cfg.sia.whole_image(),
            rng,
        )?),
    };
    let (x_in, sia_instance) = match sia_instance {
        None => (x_model, None),
        Some(mut inst) => {
            let y = inst.apply(&x_model)?;
            (y, Some(inst))
        }
    };

    let (loss, g_in) = bundle.task_loss_grad(task, &x_in, target)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            value: loss,
        });
    }
    let g_model = match &sia_instance {
        None => g_in,
        Some(inst) => inst.vjp(&g_in)?,
    };
    Ok(match den_cache {
        None => g_model,
        Some(cache) => {
            // x_t = sqrt(alpha_bar) * (x_a + sigma * eps), so the noised
            // input's Jacobian w.r.t. x_a is sqrt(alpha_bar) * identity.
            let (g_xt, _) = bundle.denoiser.backward(&cache, &g_model, false);
            g_xt.mapv(|v| v * sqrt_ab)
        }
    })
}

/// Attacks a batch of images in parallel; image `i` uses rng stream index
/// `i`, so results are independent of thread count and batch order.
pub fn run_attack_batch(
    bundle: &ModelBundle,
    task: TaskKind,
    targets: &[TaskTarget],
    images: &[Array3<f64>],
    schedule: &NoiseSchedule,
    cfg: &AttackConfig,
) -> Result<Vec<Array3<f64>>> {
    if targets.len() != images.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} targets", images.len()),
            actual: format!("{}", targets.len()),
        });
    }
    images
        .par_iter()
        .zip(targets.par_iter())
        .enumerate()
        .map(|(i, (x, target))| run_attack(bundle, task, target, x, schedule, cfg, i as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BackboneConfig;
    use crate::models::{generate_toy_dataset, DatasetConfig, DenoiserConfig};
    use approx::assert_abs_diff_eq;

    fn fixture() -> (ModelBundle, Vec<crate::models::ToySample>, NoiseSchedule) {
        let data = generate_toy_dataset(&DatasetConfig {
            n: 10,
            resolution: 32,
            ..DatasetConfig::default()
        })
        .unwrap();
        let bundle = ModelBundle::init(
            BackboneConfig::default(),
            DenoiserConfig::default(),
            data.channel_means(),
            5,
        )
        .unwrap();
        (bundle, data.samples, NoiseSchedule::default_linear())
    }

    fn quick_cfg(transform: TransformKind, p_diffusion: f64) -> AttackConfig {
        let mut cfg = AttackConfig::preset("pgd").unwrap();
        cfg.iterations = 4;
        cfg.budget = 8.0 / 255.0;
        cfg.step_size = cfg.budget / 2.0;
        cfg.transform = transform;
        cfg.p_diffusion = p_diffusion;
        if p_diffusion > 0.0 {
            cfg.noise_level = NoiseLevel::low_for(&NoiseSchedule::default_linear()).unwrap();
        }
        cfg
    }

    #[test]
    fn presets_match_their_definitions() {
        let pgd = AttackConfig::preset("pgd").unwrap();
        assert_eq!(pgd.mu, 0.0);
        assert_eq!(pgd.transform, TransformKind::Identity);
        let mi = AttackConfig::preset("mifgsm").unwrap();
        assert_eq!(mi.mu, 1.0);
        assert_eq!(mi.transform, TransformKind::Identity);
        let sia = AttackConfig::preset("sia").unwrap();
        assert_eq!(sia.mu, 1.0);
        assert_eq!(sia.transform, TransformKind::SiaBlock);
        for c in [&pgd, &mi, &sia] {
            assert_eq!(c.budget, 3.0 / 255.0);
            assert_eq!(c.iterations, 50);
            assert_abs_diff_eq!(c.step_size, 3.0 / 255.0 / 50.0 * 4.0, epsilon = 1e-15);
            assert_eq!(c.p_diffusion, 0.0);
            c.validate().unwrap();
        }
        assert!(AttackConfig::preset("fgsm").is_err());
    }

    #[test]
    fn step_obeys_clip_order_and_sign_convention() {
        let x_o = Array3::from_elem((1, 1, 3), 0.5);
        let mut cfg = AttackConfig::preset("pgd").unwrap();
        cfg.budget = 0.1;
        cfg.step_size = 0.1;
        let mut st = AttackState::zeros((1, 1, 3));
        // Positive, negative, and zero gradient components.
        let grad = Array3::from_shape_vec((1, 1, 3), vec![2.0, -1.0, 0.0]).unwrap();
        attack_step(&mut st, &grad, &x_o, &cfg).unwrap();
        assert_abs_diff_eq!(st.a[[0, 0, 0]], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(st.a[[0, 0, 1]], -0.1, epsilon = 1e-15);
        assert_eq!(st.a[[0, 0, 2]], 0.0);
        // Saturated at +budget with positive gradient: stays.
        attack_step(&mut st, &grad, &x_o, &cfg).unwrap();
        assert_abs_diff_eq!(st.a[[0, 0, 0]], 0.1, epsilon = 1e-15);
        // Valid-range clip beats budget clip: x_o = 0 forbids negative a.
        let x_edge = Array3::zeros((1, 1, 3));
        let mut st2 = AttackState::zeros((1, 1, 3));
        let down = Array3::from_elem((1, 1, 3), -1.0);
        attack_step(&mut st2, &down, &x_edge, &cfg).unwrap();
        assert!(st2.a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_budget_returns_clean_image() {
        let (bundle, samples, sched) = fixture();
        let mut cfg = quick_cfg(TransformKind::Identity, 0.0);
        cfg.budget = 0.0;
        let target = bundle
            .attack_target(TaskKind::Classification, &samples[0])
            .unwrap();
        let out = run_attack(
            &bundle,
            TaskKind::Classification,
            &target,
            &samples[0].image,
            &sched,
            &cfg,
            0,
        )
        .unwrap();
        assert_eq!(out, samples[0].image);
    }

    #[test]
    fn budget_and_range_hold_for_every_configuration() {
        let (bundle, samples, sched) = fixture();
        for (k, cfg) in [
            quick_cfg(TransformKind::Identity, 0.0),
            quick_cfg(TransformKind::SiaBlock, 0.0),
            quick_cfg(TransformKind::SiaImage, 0.0),
            quick_cfg(TransformKind::Identity, 1.0),
            quick_cfg(TransformKind::SiaBlock, 0.5),
        ]
        .iter()
        .enumerate()
        {
            let s = &samples[k % samples.len()];
            let target = bundle.attack_target(TaskKind::Classification, s).unwrap();
            let adv = run_attack(
                &bundle,
                TaskKind::Classification,
                &target,
                &s.image,
                &sched,
                cfg,
                k as u64,
            )
            .unwrap();
            let linf = (&adv - &s.image).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(linf <= cfg.budget + 1e-9, "config {k}: linf {linf}");
            assert!(adv.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn same_seed_reproduces_same_adversary() {
        let (bundle, samples, sched) = fixture();
        let cfg = quick_cfg(TransformKind::SiaBlock, 0.5);
        let target = bundle
            .attack_target(TaskKind::Classification, &samples[1])
            .unwrap();
        let run = || {
            run_attack(
                &bundle,
                TaskKind::Classification,
                &target,
                &samples[1].image,
                &sched,
                &cfg,
                7,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batch_crafting_matches_sequential_indexing() {
        let (bundle, samples, sched) = fixture();
        let cfg = quick_cfg(TransformKind::SiaBlock, 0.5);
        let images: Vec<_> = samples[0..4].iter().map(|s| s.image.clone()).collect();
        let targets: Vec<_> = samples[0..4]
            .iter()
            .map(|s| bundle.attack_target(TaskKind::Classification, s).unwrap())
            .collect();
        let batch = run_attack_batch(
            &bundle,
            TaskKind::Classification,
            &targets,
            &images,
            &sched,
            &cfg,
        )
        .unwrap();
        for (i, adv) in batch.iter().enumerate() {
            let single = run_attack(
                &bundle,
                TaskKind::Classification,
                &targets[i],
                &images[i],
                &sched,
                &cfg,
                i as u64,
            )
            .unwrap();
            assert_eq!(adv, &single, "image {i} differs from its solo run");
        }
    }

    #[test]
    fn longer_attacks_do_at_least_as_much_damage() {
        let (bundle, samples, sched) = fixture();
        let mut short = quick_cfg(TransformKind::Identity, 0.0);
        short.iterations = 3;
        let mut long = short.clone();
        long.iterations = 6;
        let mut mean_short = 0.0;
        let mut mean_long = 0.0;
        for (i, s) in samples[0..4].iter().enumerate() {
            let target = bundle.attack_target(TaskKind::Classification, s).unwrap();
            for (cfg, acc) in [(&short, &mut mean_short), (&long, &mut mean_long)] {
                let adv = run_attack(
                    &bundle,
                    TaskKind::Classification,
                    &target,
                    &s.image,
                    &sched,
                    cfg,
                    i as u64,
                )
                .unwrap();
                let (loss, _) = bundle
                    .task_loss_grad(TaskKind::Classification, &adv, &target)
                    .unwrap();
                *acc += loss / 4.0;
            }
        }
        assert!(
            mean_long >= mean_short,
            "{mean_long} (T=6) vs {mean_short} (T=3)"
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = AttackConfig::preset("pgd").unwrap();
        let cases = [
            AttackConfig {
                mu: -0.1,
                ..base.clone()
            },
            AttackConfig {
                iterations: 0,
                ..base.clone()
            },
            AttackConfig {
                step_size: 0.0,
                ..base.clone()
            },
            AttackConfig {
                budget: 1.0,
                ..base.clone()
            },
            AttackConfig {
                step_size: 0.5,
                budget: 0.25,
                ..base.clone()
            },
            AttackConfig {
                p_diffusion: 1.5,
                ..base.clone()
            },
            AttackConfig {
                p_diffusion: 0.5,
                ..base.clone()
            },
        ];
        for (i, cfg) in cases.iter().enumerate() {
            assert!(cfg.validate().is_err(), "case {i} should fail validation");
        }
    }
}
