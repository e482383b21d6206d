//! Grid execution: craft, defend, measure, persist.

use crate::attacks::run_attack_batch;
use crate::defense::{defend_then_predict, DefensePolicy};
use crate::error::{Error, Result};
use crate::models::{generate_toy_dataset, load_models, ModelBundle, Prediction, ToySample};
use crate::runner::config::{AttackSpec, ExperimentConfig, EVAL_VAL_FRACTION};
use crate::runner::record::{
    cell_fingerprint, hash_model_files, ExperimentRecord, ResultsStore, RESULTS_FILE,
};
use crate::schedule::NoiseSchedule;
use crate::tasks::{self, TaskKind};
use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;
use std::path::Path;
use std::time::Instant;

/// Name of the metric a task is scored by.
pub fn task_metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classification => "accuracy",
        TaskKind::Segmentation => "miou",
        TaskKind::Depth => "rmse_depth",
        TaskKind::Retrieval => "map",
    }
}

/// All metrics recorded for a cell of `task`.
pub fn cell_metrics(task: TaskKind) -> [&'static str; 3] {
    [task_metric_name(task), "cls_cos_sim", "psnr"]
}

/// One cell that could not be computed; the run continues past it.
#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub cell: String,
    pub error: String,
}

/// What a grid run did: how many records were appended, how many cells the
/// store already covered, and which cells failed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridOutcome {
    pub records_written: usize,
    pub cells_skipped: usize,
    pub failures: Vec<CellFailure>,
}

impl GridOutcome {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "wrote {} records, skipped {} completed cells, {} failures",
            self.records_written,
            self.cells_skipped,
            self.failures.len()
        );
        for f in &self.failures {
            s.push_str(&format!("\n  FAILED {}: {}", f.cell, f.error));
        }
        s
    }
}

fn now_rfc3339() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_else(|_| "unknown".into())
}

/// Runs every (attack, defense, task) cell of `cfg`, appending records to
/// `results.jsonl` under `out_dir`. Cells whose metrics are already stored
/// are skipped by fingerprint, so rerunning a finished grid writes nothing.
/// Adversarial images are crafted once per (attack, task) and reused across
/// defenses. Per-cell failures are collected, not fatal.
pub fn run_grid(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<GridOutcome> {
    cfg.validate()?;
    cfg.check_paths()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let schedule = cfg.load_schedule()?;
    let data = generate_toy_dataset(&cfg.dataset)?;
    let (_, val_idx) = data.split_indices(EVAL_VAL_FRACTION)?;
    if cfg.eval_size > val_idx.len() {
        return Err(Error::Config(format!(
            "eval_size {} exceeds the validation split ({} images)",
            cfg.eval_size,
            val_idx.len()
        )));
    }
    let eval: Vec<&ToySample> = val_idx[..cfg.eval_size]
        .iter()
        .map(|&i| &data.samples[i])
        .collect();

    let bundle = load_models(&cfg.models_dir)?;
    if bundle.resolution() != cfg.dataset.resolution {
        return Err(Error::Config(format!(
            "models expect resolution {}, dataset is {}",
            bundle.resolution(),
            cfg.dataset.resolution
        )));
    }
    let models_hash = hash_model_files(&cfg.models_dir)?;
    let mut store = ResultsStore::load(&out_dir.join(RESULTS_FILE))?;

    let clean_images: Vec<Array3<f64>> = eval.iter().map(|s| s.image.clone()).collect();
    let clean_embeds: Vec<Array1<f64>> = eval
        .par_iter()
        .map(|s| bundle.embed_of(&s.image))
        .collect::<Result<_>>()?;

    let mut outcome = GridOutcome::default();
    for attack in &cfg.attacks {
        for &task in &cfg.tasks {
            let metrics = cell_metrics(task);
            let fingerprints: Vec<String> = cfg
                .defenses
                .iter()
                .map(|d| {
                    cell_fingerprint(
                        &cfg.dataset,
                        &models_hash,
                        schedule.name(),
                        attack,
                        d,
                        task,
                        cfg.eval_size,
                        cfg.seeds.attack,
                        cfg.seeds.defense,
                    )
                })
                .collect();
            let pending: Vec<usize> = (0..cfg.defenses.len())
                .filter(|&di| !store.has_all(&fingerprints[di], &metrics))
                .collect();
            outcome.cells_skipped += cfg.defenses.len() - pending.len();
            if pending.is_empty() {
                continue;
            }

            log(&format!(
                "crafting {} for task {}",
                attack.label(),
                task.as_str()
            ));
            let craft_start = Instant::now();
            let attacked = match craft_images(
                &bundle,
                attack,
                task,
                &eval,
                &clean_images,
                &schedule,
                cfg.seeds.attack,
            ) {
                Ok(v) => v,
                Err(e) => {
                    for &di in &pending {
                        outcome.failures.push(CellFailure {
                            cell: cell_label(attack, &cfg.defenses[di].label(), task),
                            error: e.to_string(),
                        });
                    }
                    continue;
                }
            };
            let craft_s = craft_start.elapsed().as_secs_f64();
            let psnr_value = match batch_psnr(&clean_images, &attacked) {
                Ok(v) => v,
                Err(e) => {
                    for &di in &pending {
                        outcome.failures.push(CellFailure {
                            cell: cell_label(attack, &cfg.defenses[di].label(), task),
                            error: e.to_string(),
                        });
                    }
                    continue;
                }
            };

            for &di in &pending {
                let defense = &cfg.defenses[di];
                let label = cell_label(attack, &defense.label(), task);
                let eval_start = Instant::now();
                let result = defense
                    .to_policy(&schedule, cfg.seeds.defense)
                    .and_then(|policy| {
                        eval_cell(
                            &bundle,
                            task,
                            &eval,
                            &clean_embeds,
                            &attacked,
                            &policy,
                            &schedule,
                        )
                    });
                match result {
                    Ok(pairs) => {
                        let wall = craft_s + eval_start.elapsed().as_secs_f64();
                        let stamp = now_rfc3339();
                        for (metric, value) in pairs.into_iter().chain([("psnr", psnr_value)]) {
                            store.append(ExperimentRecord {
                                fingerprint: fingerprints[di].clone(),
                                attack: attack.clone(),
                                defense: defense.clone(),
                                task,
                                metric: metric.to_string(),
                                value,
                                n_images: eval.len(),
                                wall_time_s: wall,
                                timestamp: stamp.clone(),
                            })?;
                            outcome.records_written += 1;
                        }
                        log(&format!("done {label}"));
                    }
                    Err(e) => {
                        outcome.failures.push(CellFailure {
                            cell: label,
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
    }
    Ok(outcome)
}

fn cell_label(attack: &AttackSpec, defense_label: &str, task: TaskKind) -> String {
    format!("{}|{}|{}", attack.label(), defense_label, task.as_str())
}

/// Clean pass-through for the `none` row, otherwise a full batch attack
/// with per-image rng streams indexed by evaluation position.
fn craft_images(
    bundle: &ModelBundle,
    attack: &AttackSpec,
    task: TaskKind,
    eval: &[&ToySample],
    clean_images: &[Array3<f64>],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Array3<f64>>> {
    if attack.is_clean() {
        return Ok(clean_images.to_vec());
    }
    let cfg = attack.to_attack_config(schedule, seed)?;
    let targets = eval
        .iter()
        .map(|s| bundle.attack_target(task, s))
        .collect::<Result<Vec<_>>>()?;
    run_attack_batch(bundle, task, &targets, clean_images, schedule, &cfg)
}

/// Defended evaluation of one cell: the task metric plus the mean cosine
/// similarity between clean and defended embeddings. Query `i` of the
/// defense feeds the task prediction; queries `n + i` feed the embedding
/// pass (retrieval reuses its task pass, which already yields embeddings).
fn eval_cell(
    bundle: &ModelBundle,
    task: TaskKind,
    eval: &[&ToySample],
    clean_embeds: &[Array1<f64>],
    attacked: &[Array3<f64>],
    policy: &DefensePolicy,
    schedule: &NoiseSchedule,
) -> Result<Vec<(&'static str, f64)>> {
    let n = attacked.len();
    let preds: Vec<Prediction> = (0..n)
        .into_par_iter()
        .map(|i| defend_then_predict(bundle, task, &attacked[i], policy, schedule, i as u64))
        .collect::<Result<_>>()?;

    let embeds: Vec<Array1<f64>> = if task == TaskKind::Retrieval {
        preds
            .iter()
            .map(|p| match p {
                Prediction::Embed(e) => Ok(e.clone()),
                other => Err(unexpected(task, other)),
            })
            .collect::<Result<_>>()?
    } else {
        (0..n)
            .into_par_iter()
            .map(|i| {
                match defend_then_predict(
                    bundle,
                    TaskKind::Retrieval,
                    &attacked[i],
                    policy,
                    schedule,
                    (n + i) as u64,
                )? {
                    Prediction::Embed(e) => Ok(e),
                    other => Err(unexpected(TaskKind::Retrieval, &other)),
                }
            })
            .collect::<Result<_>>()?
    };

    let task_value = match task {
        TaskKind::Classification => {
            let mut p = Vec::with_capacity(n);
            for pred in &preds {
                match pred {
                    Prediction::Class(c) => p.push(*c),
                    other => return Err(unexpected(task, other)),
                }
            }
            let labels: Vec<usize> = eval.iter().map(|s| s.label).collect();
            tasks::accuracy(&p, &labels)?
        }
        TaskKind::Segmentation => {
            let mut masks: Vec<Array2<u8>> = Vec::with_capacity(n);
            for pred in &preds {
                match pred {
                    Prediction::Seg(m) => masks.push(m.clone()),
                    other => return Err(unexpected(task, other)),
                }
            }
            let truths: Vec<Array2<u8>> = eval.iter().map(|s| s.seg_mask.clone()).collect();
            tasks::miou(&masks, &truths, bundle.backbone.config.seg_classes, true)?
        }
        TaskKind::Depth => {
            let mut maps: Vec<Array2<f64>> = Vec::with_capacity(n);
            for pred in &preds {
                match pred {
                    Prediction::Depth(m) => maps.push(m.clone()),
                    other => return Err(unexpected(task, other)),
                }
            }
            let truths: Vec<Array2<f64>> = eval.iter().map(|s| s.depth_map.clone()).collect();
            tasks::rmse_depth(&maps, &truths)?
        }
        TaskKind::Retrieval => {
            let groups: Vec<u32> = eval.iter().map(|s| s.retrieval_group).collect();
            tasks::map_retrieval(&embeds, &groups)?.map
        }
    };

    let cos = tasks::mean_cosine_similarity(clean_embeds, &embeds)?;
    Ok(vec![
        (task_metric_name(task), task_value),
        ("cls_cos_sim", cos),
    ])
}

fn unexpected(task: TaskKind, got: &Prediction) -> Error {
    Error::Contract(format!(
        "prediction kind mismatch for task {}: {got:?}",
        task.as_str()
    ))
}

/// PSNR of the whole batch treated as one signal.
fn batch_psnr(clean: &[Array3<f64>], attacked: &[Array3<f64>]) -> Result<f64> {
    let total: usize = clean.iter().map(|x| x.len()).sum();
    let mut a = Array1::<f64>::zeros(total);
    let mut b = Array1::<f64>::zeros(total);
    let mut k = 0;
    for (x, y) in clean.iter().zip(attacked.iter()) {
        for (&xv, &yv) in x.iter().zip(y.iter()) {
            a[k] = xv;
            b[k] = yv;
            k += 1;
        }
    }
    tasks::psnr(&a.into_dyn(), &b.into_dyn())
}
