//! Trains the toy bundle: first the denoiser on the standard denoising
//! objective, then the backbone and heads on all four tasks jointly.
//!
//! Backbone training mixes in noisy and denoised views of the images so the
//! features stay usable behind the noise-and-denoise defense; hard
//! high-noise views are deliberately included at a rate that leaves a
//! measurable (but bounded) clean-utility gap when the defense runs at
//! strong noise.

use super::backbone::{BackboneConfig, BackboneGrads, TaskHeadGrads};
use super::denoiser::{DenoiserConfig, DenoiserGrads};
use super::io::TrainingSummary;
use super::{depth_token_means, seg_ce_from_logits, seg_token_counts, ModelBundle};
use crate::error::{Error, Result};
use crate::nn::{self, Adam};
use crate::rng;
use crate::schedule::{self, NoiseSchedule};
use crate::tasks::{self, TaskKind};
use ndarray::{Array1, Array2, Array3, Axis, Ix3};
use rand::seq::SliceRandom;
use rand::Rng;

/// Hyperparameters for [`train_toy_models`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub denoiser_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_denoiser: f64,
    pub seg_weight: f64,
    pub depth_weight: f64,
    pub val_fraction: f64,
    /// Probability of replacing a training image with a Gaussian-noised view.
    pub aug_gauss_prob: f64,
    /// Max std of that Gaussian pixel noise.
    pub aug_gauss_sigma: f64,
    /// Probability of a noised-then-denoised view at a mild timestep.
    pub aug_denoise_low_prob: f64,
    /// Probability of a noised-then-denoised view at a strong timestep.
    pub aug_denoise_high_prob: f64,
    /// Highest timestep drawn while training the denoiser.
    pub max_timestep: usize,
    /// Training fails with `TrainingDiverged` below this val accuracy.
    pub min_val_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            denoiser_epochs: 28,
            batch_size: 16,
            lr: 3e-3,
            lr_denoiser: 3e-3,
            seg_weight: 0.5,
            depth_weight: 0.3,
            val_fraction: 0.2,
            aug_gauss_prob: 0.20,
            aug_gauss_sigma: 0.10,
            aug_denoise_low_prob: 0.25,
            aug_denoise_high_prob: 0.33,
            max_timestep: 450,
            min_val_accuracy: 0.6,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.denoiser_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr_denoiser > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        let p = self.aug_gauss_prob + self.aug_denoise_low_prob + self.aug_denoise_high_prob;
        if !(0.0..=1.0).contains(&self.aug_gauss_prob)
            || !(0.0..=1.0).contains(&self.aug_denoise_low_prob)
            || !(0.0..=1.0).contains(&self.aug_denoise_high_prob)
            || p > 1.0
        {
            return Err(Error::Config(format!(
                "augmentation probabilities must be in [0, 1] and sum to <= 1, got {p}"
            )));
        }
        if self.aug_gauss_sigma < 0.0 {
            return Err(Error::Config("aug_gauss_sigma must be >= 0".into()));
        }
        if self.max_timestep == 0 {
            return Err(Error::Config("max_timestep must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone architecture used for every trained bundle at a given image
/// resolution. Finer patches than the structural default: class labels ride
/// on shape geometry, which 8-pixel patches wash out.
pub fn backbone_config_for(data_cfg: &super::DatasetConfig) -> BackboneConfig {
    BackboneConfig {
        resolution: data_cfg.resolution,
        patch: 4,
        num_classes: data_cfg.num_classes,
        seg_classes: data_cfg.num_classes + 1,
        ..BackboneConfig::default()
    }
}

/// Trains a full bundle on `data`. Deterministic for a fixed dataset and
/// config. `log` receives one line per epoch.
pub fn train_toy_models(
    data: &super::ToyDataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&str),
) -> Result<ModelBundle> {
    cfg.validate()?;
    let (train_idx, val_idx) = data.split_indices(cfg.val_fraction)?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config(format!(
            "split produced {} train / {} val samples; need both nonempty",
            train_idx.len(),
            val_idx.len()
        )));
    }
    let sched = NoiseSchedule::default_linear();
    let mut bundle = ModelBundle::init(
        backbone_config_for(&data.config),
        DenoiserConfig::default(),
        data.channel_means(),
        cfg.seed,
    )?;
    let n = data.samples.len();

    // Phase one: denoiser on noised images, MSE back to the clean image.
    let mut adam_d = Adam::new(cfg.lr_denoiser);
    let mut step = 0usize;
    for epoch in 0..cfg.denoiser_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::stream(cfg.seed, "den-shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = DenoiserGrads::zeros_like(&bundle.denoiser);
            let inv = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let x = &data.samples[i].image;
                let mut r = rng::stream(cfg.seed, "den-noise", (epoch * n + i) as u64);
                let t = sample_denoiser_timestep(cfg, &mut r);
                let xt = schedule::noised(&x.view().into_dyn(), t, &sched, &mut r)?
                    .into_dimensionality::<Ix3>()
                    .expect("rank preserved");
                let (y, cache) = bundle.denoiser.denoise_cached(&xt, t, &sched)?;
                let m = y.len() as f64;
                let mut gy = &y - x;
                let loss = gy.iter().map(|d| d * d).sum::<f64>() / m;
                gy.mapv_inplace(|d| 2.0 * d / m);
                let (_, grads) = bundle.denoiser.backward(&cache, &gy, true);
                acc.scaled_add(&grads.expect("requested"), inv);
                batch_loss += loss * inv;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: step,
                    value: batch_loss,
                });
            }
            adam_d.update(&mut bundle.denoiser.param_slices_mut(), &acc.grad_slices())?;
            epoch_loss += batch_loss;
            batches += 1;
            step += 1;
        }
        log(&format!(
            "denoiser epoch {:>3}: mse {:.5}",
            epoch + 1,
            epoch_loss / batches as f64
        ));
    }

    // Phase two: backbone and heads on clean plus augmented views.
    let mut adam_b = Adam::new(cfg.lr);
    let mut final_train_loss = 0.0;
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::stream(cfg.seed, "bb-shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc_bb = BackboneGrads::zeros_like(&bundle.backbone);
            let mut acc_heads = TaskHeadGrads::zeros_like(&bundle.heads);
            let inv = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let mut r = rng::stream(cfg.seed, "bb-augment", (epoch * n + i) as u64);
                let view = augmented_view(&bundle, &data.samples[i].image, cfg, &sched, &mut r)?;
                let (loss, g_bb, g_heads) =
                    multi_task_loss_grads(&bundle, &view, &data.samples[i], cfg)?;
                acc_bb.scaled_add(&g_bb, inv);
                acc_heads.scaled_add(&g_heads, inv);
                batch_loss += loss * inv;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: step,
                    value: batch_loss,
                });
            }
            let mut params = bundle.backbone.param_slices_mut();
            params.extend(bundle.heads.param_slices_mut());
            let mut grads = acc_bb.grad_slices();
            grads.extend(acc_heads.grad_slices());
            adam_b.update(&mut params, &grads)?;
            epoch_loss += batch_loss;
            batches += 1;
            step += 1;
        }
        final_train_loss = epoch_loss / batches as f64;
        log(&format!(
            "backbone epoch {:>3}: loss {:.5}",
            epoch + 1,
            final_train_loss
        ));
    }

    let summary = validate_bundle(
        &bundle,
        data,
        &val_idx,
        &sched,
        cfg.epochs,
        final_train_loss,
    )?;
    log(&format!(
        "val: acc {:.3}, miou {:.3}, depth rmse {:.3}, map {:.3}, denoiser mse {:.5}",
        summary.val_cls_accuracy,
        summary.val_seg_miou,
        summary.val_depth_rmse,
        summary.val_retrieval_map,
        summary.denoiser_val_mse
    ));
    if summary.val_cls_accuracy < cfg.min_val_accuracy {
        return Err(Error::TrainingDiverged(format!(
            "val accuracy {:.3} below the {:.3} floor",
            summary.val_cls_accuracy, cfg.min_val_accuracy
        )));
    }
    bundle.training = Some(summary);
    Ok(bundle)
}

/// Draws one training view: clean, Gaussian-noised, or noised-then-denoised
/// at a mild or strong timestep.
/// Draws a denoiser-training timestep. Inference denoises at the named low
/// and high levels, so training weights those bands instead of spreading
/// every update uniformly over scales nothing deploys at.
fn sample_denoiser_timestep(cfg: &TrainConfig, r: &mut rand_chacha::ChaCha8Rng) -> usize {
    let max = cfg.max_timestep;
    let band = |lo: usize, hi: usize| (lo.clamp(1, max), hi.clamp(1, max));
    let u: f64 = r.gen();
    let (lo, hi) = if u < 0.3 {
        band(5, 80)
    } else if u < 0.7 {
        band(max.saturating_sub(150), max)
    } else {
        (1, max)
    };
    r.gen_range(lo..=hi)
}

fn augmented_view(
    bundle: &ModelBundle,
    image: &Array3<f64>,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    r: &mut rand_chacha::ChaCha8Rng,
) -> Result<Array3<f64>> {
    let u: f64 = r.gen();
    let denoised_at =
        |range: (usize, usize), r: &mut rand_chacha::ChaCha8Rng| -> Result<Array3<f64>> {
            let t = r.gen_range(range.0..=range.1);
            let xt = schedule::noised(&image.view().into_dyn(), t, sched, r)?
                .into_dimensionality::<Ix3>()
                .expect("rank preserved");
            bundle.denoiser.denoise(&xt, t, sched)
        };
    if u < cfg.aug_gauss_prob {
        let s: f64 = r.gen::<f64>() * cfg.aug_gauss_sigma;
        let mut out = image.clone();
        for v in out.iter_mut() {
            *v += s * r.sample::<f64, _>(rand_distr::StandardNormal);
        }
        Ok(out)
    } else if u < cfg.aug_gauss_prob + cfg.aug_denoise_low_prob {
        denoised_at((5, 80), r)
    } else if u < cfg.aug_gauss_prob + cfg.aug_denoise_low_prob + cfg.aug_denoise_high_prob {
        denoised_at(
            (
                cfg.max_timestep.saturating_sub(120).max(1),
                cfg.max_timestep,
            ),
            r,
        )
    } else {
        Ok(image.clone())
    }
}

/// Weighted multi-task loss at one view and its parameter gradients.
fn multi_task_loss_grads(
    bundle: &ModelBundle,
    view: &Array3<f64>,
    sample: &super::ToySample,
    cfg: &TrainConfig,
) -> Result<(f64, BackboneGrads, TaskHeadGrads)> {
    let bb_cfg = &bundle.backbone.config;
    let (feats, cache) = bundle.backbone.forward_cached(view)?;
    let mut g_tokens = Array2::zeros(feats.tokens.dim());
    let embed_row = feats.embed.view().insert_axis(Axis(0)).to_owned();

    // Classification.
    let logits_c = bundle.heads.cls.forward(&embed_row)?;
    let (loss_c, glogits_c) = nn::cross_entropy_mean(&logits_c, &[sample.label])?;
    let (g_row, g_cls) = bundle.heads.cls.backward(&embed_row, &glogits_c, true);
    let g_embed: Array1<f64> = g_row.row(0).to_owned();

    // Segmentation.
    let logits_s = bundle.heads.seg.forward(&feats.tokens)?;
    let counts = seg_token_counts(&sample.seg_mask, bb_cfg.patch, bb_cfg.seg_classes)?;
    let (loss_s, mut glogits_s) =
        seg_ce_from_logits(&logits_s, &counts, sample.seg_mask.len() as f64);
    glogits_s.mapv_inplace(|v| v * cfg.seg_weight);
    let (g_tok_s, g_seg) = bundle.heads.seg.backward(&feats.tokens, &glogits_s, true);
    g_tokens += &g_tok_s;

    // Depth: MSE between token softplus outputs and patch-mean ground truth.
    let pre_d = bundle.heads.depth.forward(&feats.tokens)?;
    let target_d = depth_token_means(&sample.depth_map, bb_cfg.patch);
    let m = target_d.len() as f64;
    let mut loss_d = 0.0;
    let mut gpre_d = Array2::zeros(pre_d.dim());
    for i in 0..target_d.len() {
        let p = nn::softplus(pre_d[[i, 0]]);
        let diff = p - target_d[i];
        loss_d += diff * diff / m;
        gpre_d[[i, 0]] = cfg.depth_weight * 2.0 * diff / m * nn::sigmoid(pre_d[[i, 0]]);
    }
    let (g_tok_d, g_depth) = bundle.heads.depth.backward(&feats.tokens, &gpre_d, true);
    g_tokens += &g_tok_d;

    let (_, g_bb) = bundle
        .backbone
        .backward(&cache, Some(&g_tokens), Some(&g_embed), true);

    let total = loss_c + cfg.seg_weight * loss_s + cfg.depth_weight * loss_d;
    let heads_grads = TaskHeadGrads {
        cls: g_cls.expect("requested"),
        seg: g_seg.expect("requested"),
        depth: g_depth.expect("requested"),
    };
    Ok((total, g_bb.expect("requested"), heads_grads))
}

/// Clean validation metrics for every task plus denoiser reconstruction MSE.
fn validate_bundle(
    bundle: &ModelBundle,
    data: &super::ToyDataset,
    val_idx: &[usize],
    sched: &NoiseSchedule,
    epochs: usize,
    final_train_loss: f64,
) -> Result<TrainingSummary> {
    let mut cls_preds = Vec::new();
    let mut labels = Vec::new();
    let mut seg_preds = Vec::new();
    let mut seg_truths = Vec::new();
    let mut depth_preds = Vec::new();
    let mut depth_truths = Vec::new();
    let mut embeds = Vec::new();
    let mut groups = Vec::new();
    for &i in val_idx {
        let s = &data.samples[i];
        let feats = bundle.backbone.forward(&s.image)?;
        match bundle.predict_from_features(TaskKind::Classification, &feats)? {
            super::Prediction::Class(c) => cls_preds.push(c),
            _ => unreachable!(),
        }
        labels.push(s.label);
        match bundle.predict_from_features(TaskKind::Segmentation, &feats)? {
            super::Prediction::Seg(m) => seg_preds.push(m),
            _ => unreachable!(),
        }
        seg_truths.push(s.seg_mask.clone());
        match bundle.predict_from_features(TaskKind::Depth, &feats)? {
            super::Prediction::Depth(m) => depth_preds.push(m),
            _ => unreachable!(),
        }
        depth_truths.push(s.depth_map.clone());
        embeds.push(feats.embed);
        groups.push(s.retrieval_group);
    }
    let acc = tasks::accuracy(&cls_preds, &labels)?;
    let miou = tasks::miou(&seg_preds, &seg_truths, data.seg_classes(), true)?;
    let rmse = tasks::rmse_depth(&depth_preds, &depth_truths)?;
    let map = tasks::map_retrieval(&embeds, &groups)?.map;

    let mut den_mse = 0.0;
    let mut den_count = 0usize;
    for (k, &i) in val_idx.iter().enumerate() {
        let x = &data.samples[i].image;
        for (j, &t) in [
            crate::schedule::LOW_TIMESTEP,
            150,
            crate::schedule::HIGH_TIMESTEP,
        ]
        .iter()
        .enumerate()
        {
            let mut r = rng::stream(data.config.seed, "val-denoise", (k * 3 + j) as u64);
            let xt = schedule::noised(&x.view().into_dyn(), t, sched, &mut r)?
                .into_dimensionality::<Ix3>()
                .expect("rank preserved");
            let y = bundle.denoiser.denoise(&xt, t, sched)?;
            den_mse += (&y - x).iter().map(|d| d * d).sum::<f64>() / x.len() as f64;
            den_count += 1;
        }
    }
    Ok(TrainingSummary {
        epochs,
        final_train_loss,
        val_cls_accuracy: acc,
        val_seg_miou: miou,
        val_depth_rmse: rmse,
        val_retrieval_map: map,
        denoiser_val_mse: den_mse / den_count as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{generate_toy_dataset, DatasetConfig};

    fn tiny_setup() -> (super::super::ToyDataset, TrainConfig) {
        let data = generate_toy_dataset(&DatasetConfig {
            n: 60,
            resolution: 32,
            ..DatasetConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            denoiser_epochs: 1,
            min_val_accuracy: 0.0,
            ..TrainConfig::default()
        };
        (data, cfg)
    }

    #[test]
    fn tiny_training_runs_and_is_deterministic() {
        let (data, cfg) = tiny_setup();
        let a = train_toy_models(&data, &cfg, &mut |_| {}).unwrap();
        let b = train_toy_models(&data, &cfg, &mut |_| {}).unwrap();
        assert!(a.training.is_some());
        for ((na, sa, da), (nb, sb, db)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(sa, sb);
            assert_eq!(da, db, "tensor {na} differs between identical runs");
        }
    }

    #[test]
    fn accuracy_floor_gate_fires() {
        let (data, mut cfg) = tiny_setup();
        cfg.min_val_accuracy = 1.1;
        let err = train_toy_models(&data, &cfg, &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged(_)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = TrainConfig::default();
        for bad in [
            TrainConfig {
                epochs: 0,
                ..base.clone()
            },
            TrainConfig {
                lr: 0.0,
                ..base.clone()
            },
            TrainConfig {
                val_fraction: 1.0,
                ..base.clone()
            },
            TrainConfig {
                aug_gauss_prob: 0.9,
                aug_denoise_low_prob: 0.4,
                ..base.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
