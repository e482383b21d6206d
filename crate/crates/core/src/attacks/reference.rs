//! Hand-written single-purpose attack loops, kept deliberately free of the
//! engine's configuration machinery. The engine must reproduce these
//! bit-for-bit in the matching configurations; any drift in its momentum,
//! normalization, or clipping plumbing shows up as an inequality.

use crate::error::Result;
use crate::models::{ModelBundle, TaskTarget};
use crate::tasks::TaskKind;
use ndarray::Array3;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Textbook projected gradient descent: signed-gradient ascent with a
/// budget clip then a valid-range clip each iteration. No momentum, no
/// transforms, no noise.
pub fn reference_pgd(
    bundle: &ModelBundle,
    task: TaskKind,
    target: &TaskTarget,
    x_o: &Array3<f64>,
    budget: f64,
    step_size: f64,
    iterations: usize,
) -> Result<Array3<f64>> {
    let mut a = Array3::<f64>::zeros(x_o.dim());
    for _ in 0..iterations {
        let x_a = x_o + &a;
        let (_, grad) = bundle.task_loss_grad(task, &x_a, target)?;
        for ((av, &gv), &xv) in a.iter_mut().zip(grad.iter()).zip(x_o.iter()) {
            *av = (*av + step_size * sign(gv))
                .clamp(-budget, budget)
                .clamp(-xv, 1.0 - xv);
        }
    }
    Ok(x_o + &a)
}

/// Textbook momentum iterative FGSM: the l1-normalized gradient accumulates
/// into a momentum buffer with decay 1, and the perturbation steps by the
/// sign of that buffer, with the same two clips. Requires a nonzero
/// gradient at every iterate.
pub fn reference_mifgsm(
    bundle: &ModelBundle,
    task: TaskKind,
    target: &TaskTarget,
    x_o: &Array3<f64>,
    budget: f64,
    step_size: f64,
    iterations: usize,
) -> Result<Array3<f64>> {
    let mut a = Array3::<f64>::zeros(x_o.dim());
    let mut g = Array3::<f64>::zeros(x_o.dim());
    for _ in 0..iterations {
        let x_a = x_o + &a;
        let (_, grad) = bundle.task_loss_grad(task, &x_a, target)?;
        let l1: f64 = grad.iter().map(|v| v.abs()).sum();
        for (gv, &dv) in g.iter_mut().zip(grad.iter()) {
            *gv = *gv + dv / l1;
        }
        for ((av, &gv), &xv) in a.iter_mut().zip(g.iter()).zip(x_o.iter()) {
            *av = (*av + step_size * sign(gv))
                .clamp(-budget, budget)
                .clamp(-xv, 1.0 - xv);
        }
    }
    Ok(x_o + &a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{run_attack, AttackConfig};
    use crate::models::{
        generate_toy_dataset, BackboneConfig, DatasetConfig, DenoiserConfig, ModelBundle,
    };
    use crate::schedule::NoiseSchedule;

    #[test]
    fn engine_presets_reduce_to_reference_loops_bitwise() {
        let data = generate_toy_dataset(&DatasetConfig {
            n: 6,
            resolution: 32,
            ..DatasetConfig::default()
        })
        .unwrap();
        let bundle = ModelBundle::init(
            BackboneConfig::default(),
            DenoiserConfig::default(),
            data.channel_means(),
            2,
        )
        .unwrap();
        let sched = NoiseSchedule::default_linear();
        for name in ["pgd", "mifgsm"] {
            let mut cfg = AttackConfig::preset(name).unwrap();
            cfg.iterations = 6;
            for (i, s) in data.samples[0..3].iter().enumerate() {
                let target = bundle
                    .attack_target(crate::tasks::TaskKind::Classification, s)
                    .unwrap();
                let engine = run_attack(
                    &bundle,
                    crate::tasks::TaskKind::Classification,
                    &target,
                    &s.image,
                    &sched,
                    &cfg,
                    i as u64,
                )
                .unwrap();
                let reference = match name {
                    "pgd" => reference_pgd(
                        &bundle,
                        crate::tasks::TaskKind::Classification,
                        &target,
                        &s.image,
                        cfg.budget,
                        cfg.step_size,
                        cfg.iterations,
                    )
                    .unwrap(),
                    _ => reference_mifgsm(
                        &bundle,
                        crate::tasks::TaskKind::Classification,
                        &target,
                        &s.image,
                        cfg.budget,
                        cfg.step_size,
                        cfg.iterations,
                    )
                    .unwrap(),
                };
                assert_eq!(
                    engine, reference,
                    "{name} image {i} drifted from the reference"
                );
            }
        }
    }
}
