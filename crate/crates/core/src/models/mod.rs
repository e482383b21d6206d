//! Toy dataset, backbone, task heads, and denoisers, plus the task
//! pipelines (loss/gradient for crafting, predictions for scoring) that the
//! attack engine and defense wrap.

pub mod backbone;
pub mod dataset;
pub mod denoiser;
pub mod io;
pub mod train;

pub use backbone::{BackboneConfig, Features, TaskHeads, ToyBackbone};
pub use dataset::{generate_toy_dataset, DatasetConfig, ToyDataset, ToySample};
pub use denoiser::{analytic_denoise, DenoiserConfig, ToyDenoiser};
pub use io::{load_models, save_models, TrainingSummary};
pub use train::{backbone_config_for, train_toy_models, TrainConfig};

use crate::error::{Error, Result};
use crate::nn;
use crate::rng;
use crate::tasks::{self, TaskKind};
use ndarray::{Array1, Array2, Array3, Axis};

/// Backbone, task heads, and denoiser trained together on one toy dataset.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub backbone: ToyBackbone,
    pub heads: TaskHeads,
    pub denoiser: ToyDenoiser,
    pub training: Option<TrainingSummary>,
}

/// Per-task reference the attack loss is computed against.
///
/// Classification and segmentation use ground truth; depth uses the model's
/// own clean prediction (token grid); retrieval uses the clean embedding.
#[derive(Clone, Debug)]
pub enum TaskTarget {
    Class(usize),
    Seg(Array2<u8>),
    Depth(Array1<f64>),
    Embed(Array1<f64>),
}

/// A model output in metric space.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class(usize),
    /// Per-pixel class ids at image resolution.
    Seg(Array2<u8>),
    /// Per-pixel nonnegative depth at image resolution.
    Depth(Array2<f64>),
    Embed(Array1<f64>),
}

impl ModelBundle {
    pub fn init(
        backbone: BackboneConfig,
        denoiser: DenoiserConfig,
        data_mean: [f64; 3],
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::stream(seed, "model-init", 0);
        let bb = ToyBackbone::init(backbone.clone(), &mut r)?;
        let heads = TaskHeads::init(&backbone, &mut r);
        let den = ToyDenoiser::init(denoiser, data_mean, &mut r)?;
        Ok(ModelBundle {
            backbone: bb,
            heads,
            denoiser: den,
            training: None,
        })
    }

    pub fn resolution(&self) -> usize {
        self.backbone.config.resolution
    }

    /// All tensors across backbone, heads, and denoiser, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = self.backbone.named_tensors();
        out.extend(self.heads.named_tensors());
        out.extend(self.denoiser.named_tensors());
        out
    }

    /// Clean-image embedding (mean final token).
    pub fn embed_of(&self, image: &Array3<f64>) -> Result<Array1<f64>> {
        Ok(self.backbone.forward(image)?.embed)
    }

    /// Builds the crafting reference for `task` from a sample.
    pub fn attack_target(&self, task: TaskKind, sample: &ToySample) -> Result<TaskTarget> {
        Ok(match task {
            TaskKind::Classification => TaskTarget::Class(sample.label),
            TaskKind::Segmentation => TaskTarget::Seg(sample.seg_mask.clone()),
            TaskKind::Depth => {
                let feats = self.backbone.forward(&sample.image)?;
                TaskTarget::Depth(self.depth_tokens(&feats)?)
            }
            TaskKind::Retrieval => TaskTarget::Embed(self.embed_of(&sample.image)?),
        })
    }

    fn depth_tokens(&self, feats: &Features) -> Result<Array1<f64>> {
        let pre = self.heads.depth.forward(&feats.tokens)?;
        Ok(pre.column(0).mapv(nn::softplus))
    }

    /// Attack loss at `image` against `target`, and its gradient w.r.t. the
    /// image. Larger loss always means more damage to the model.
    pub fn task_loss_grad(
        &self,
        task: TaskKind,
        image: &Array3<f64>,
        target: &TaskTarget,
    ) -> Result<(f64, Array3<f64>)> {
        let (feats, cache) = self.backbone.forward_cached(image)?;
        let (loss, g_tokens, g_embed) = self.loss_cotangents(task, &feats, target)?;
        let (gx, _) = self
            .backbone
            .backward(&cache, g_tokens.as_ref(), g_embed.as_ref(), false);
        Ok((loss, gx))
    }

    /// Shared core: loss plus cotangents w.r.t. the backbone outputs.
    fn loss_cotangents(
        &self,
        task: TaskKind,
        feats: &Features,
        target: &TaskTarget,
    ) -> Result<(f64, Option<Array2<f64>>, Option<Array1<f64>>)> {
        match (task, target) {
            (TaskKind::Classification, TaskTarget::Class(label)) => {
                let embed_row = feats.embed.view().insert_axis(Axis(0)).to_owned();
                let logits = self.heads.cls.forward(&embed_row)?;
                let (loss, glogits) = nn::cross_entropy_mean(&logits, &[*label])?;
                let (g_row, _) = self.heads.cls.backward(&embed_row, &glogits, false);
                Ok((loss, None, Some(g_row.row(0).to_owned())))
            }
            (TaskKind::Segmentation, TaskTarget::Seg(mask)) => {
                let logits = self.heads.seg.forward(&feats.tokens)?;
                let counts = seg_token_counts(
                    mask,
                    self.backbone.config.patch,
                    self.backbone.config.seg_classes,
                )?;
                let norm = (mask.len()) as f64;
                let (loss, glogits) = seg_ce_from_logits(&logits, &counts, norm);
                let (g_tokens, _) = self.heads.seg.backward(&feats.tokens, &glogits, false);
                Ok((loss, Some(g_tokens), None))
            }
            (TaskKind::Depth, TaskTarget::Depth(reference)) => {
                let pre = self.heads.depth.forward(&feats.tokens)?;
                let pred = pre.column(0).mapv(nn::softplus);
                if pred.len() != reference.len() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{} token depths", pred.len()),
                        actual: format!("{}", reference.len()),
                    });
                }
                let n = pred.len() as f64;
                let loss =
                    tasks::rmse_loss(&pred.clone().into_dyn(), &reference.clone().into_dyn())?;
                let denom = n * loss.max(tasks::RMSE_LOSS_EPS);
                let mut gpre = Array2::zeros(pre.dim());
                for i in 0..pred.len() {
                    let gd = (pred[i] - reference[i]) / denom;
                    gpre[[i, 0]] = gd * nn::sigmoid(pre[[i, 0]]);
                }
                let (g_tokens, _) = self.heads.depth.backward(&feats.tokens, &gpre, false);
                Ok((loss, Some(g_tokens), None))
            }
            (TaskKind::Retrieval, TaskTarget::Embed(reference)) => {
                let e = &feats.embed;
                let cos = tasks::cosine_similarity(e, reference)?;
                let ne = e.dot(e).sqrt();
                let nr = reference.dot(reference).sqrt();
                // d(-cos)/de = cos * e / |e|^2 - r / (|e| |r|).
                let g_embed = e.mapv(|v| cos * v / (ne * ne)) - &reference.mapv(|v| v / (ne * nr));
                Ok((-cos, None, Some(g_embed)))
            }
            _ => Err(Error::Contract(format!(
                "target {target:?} does not match task {}",
                task.as_str()
            ))),
        }
    }

    /// Model output for `task` at image resolution.
    pub fn predict(&self, task: TaskKind, image: &Array3<f64>) -> Result<Prediction> {
        let feats = self.backbone.forward(image)?;
        self.predict_from_features(task, &feats)
    }

    /// Same as [`Self::predict`] but reusing an existing forward pass.
    pub fn predict_from_features(&self, task: TaskKind, feats: &Features) -> Result<Prediction> {
        let p = self.backbone.config.patch;
        let g = self.backbone.config.grid();
        let res = self.backbone.config.resolution;
        Ok(match task {
            TaskKind::Classification => {
                let embed_row = feats.embed.view().insert_axis(Axis(0)).to_owned();
                let logits = self.heads.cls.forward(&embed_row)?;
                Prediction::Class(argmax_row(logits.row(0).as_slice().expect("contiguous")))
            }
            TaskKind::Segmentation => {
                let logits = self.heads.seg.forward(&feats.tokens)?;
                let mut mask = Array2::zeros((res, res));
                for ty in 0..g {
                    for tx in 0..g {
                        let cls =
                            argmax_row(logits.row(ty * g + tx).as_slice().expect("contiguous"))
                                as u8;
                        for py in 0..p {
                            for px in 0..p {
                                mask[[ty * p + py, tx * p + px]] = cls;
                            }
                        }
                    }
                }
                Prediction::Seg(mask)
            }
            TaskKind::Depth => {
                let tokens = self.depth_tokens(feats)?;
                let mut map = Array2::zeros((res, res));
                for ty in 0..g {
                    for tx in 0..g {
                        let v = tokens[ty * g + tx];
                        for py in 0..p {
                            for px in 0..p {
                                map[[ty * p + py, tx * p + px]] = v;
                            }
                        }
                    }
                }
                Prediction::Depth(map)
            }
            TaskKind::Retrieval => Prediction::Embed(feats.embed.clone()),
        })
    }
}

/// First index of the maximum (ties break to the lowest index).
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-token class histograms of a pixel mask: entry `(t, c)` counts pixels
/// of class `c` inside token `t`'s patch.
pub(crate) fn seg_token_counts(
    mask: &Array2<u8>,
    patch: usize,
    seg_classes: usize,
) -> Result<Array2<f64>> {
    let (h, w) = mask.dim();
    if h % patch != 0 || w % patch != 0 || h == 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("mask dims divisible by {patch}"),
            actual: format!("{:?}", mask.dim()),
        });
    }
    let gw = w / patch;
    let mut counts = Array2::zeros(((h / patch) * gw, seg_classes));
    for i in 0..h {
        for j in 0..w {
            let c = mask[[i, j]] as usize;
            if c >= seg_classes {
                return Err(Error::Domain(format!(
                    "mask class {c} out of range 0..{seg_classes}"
                )));
            }
            counts[[(i / patch) * gw + j / patch, c]] += 1.0;
        }
    }
    Ok(counts)
}

/// Pixel-level cross-entropy of token logits replicated over their patches,
/// computed from per-token class counts. Returns the loss (summed over
/// pixels, divided by `norm`) and the logit gradient.
pub(crate) fn seg_ce_from_logits(
    logits: &Array2<f64>,
    counts: &Array2<f64>,
    norm: f64,
) -> (f64, Array2<f64>) {
    let probs = nn::softmax_rows(logits);
    let mut loss = 0.0;
    let mut glogits = Array2::zeros(logits.dim());
    for t in 0..logits.nrows() {
        let pixels: f64 = counts.row(t).sum();
        for c in 0..logits.ncols() {
            let cnt = counts[[t, c]];
            if cnt > 0.0 {
                loss -= cnt * probs[[t, c]].max(1e-300).ln();
            }
            glogits[[t, c]] = (pixels * probs[[t, c]] - cnt) / norm;
        }
    }
    (loss / norm, glogits)
}

/// Mean ground-truth depth per token patch; the training target for the
/// depth head.
pub(crate) fn depth_token_means(map: &Array2<f64>, patch: usize) -> Array1<f64> {
    let (h, w) = map.dim();
    let gw = w / patch;
    let mut out = Array1::zeros((h / patch) * gw);
    for i in 0..h {
        for j in 0..w {
            out[(i / patch) * gw + j / patch] += map[[i, j]];
        }
    }
    out / (patch * patch) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{central_diff, random_direction, relative_error};
    use approx::assert_abs_diff_eq;

    fn bundle_and_sample() -> (ModelBundle, ToySample) {
        let cfg = DatasetConfig {
            n: 8,
            resolution: 32,
            ..DatasetConfig::default()
        };
        let data = generate_toy_dataset(&cfg).unwrap();
        let backbone = BackboneConfig::default();
        let bundle =
            ModelBundle::init(backbone, DenoiserConfig::default(), data.channel_means(), 3)
                .unwrap();
        (bundle, data.samples[0].clone())
    }

    #[test]
    fn every_task_loss_gradient_matches_finite_differences() {
        let (bundle, sample) = bundle_and_sample();
        let mut r = rng::seeded(11);
        for task in TaskKind::ALL {
            let target = bundle.attack_target(task, &sample).unwrap();
            // Perturb away from the sample so depth/retrieval references
            // do not sit exactly at their zero-gradient minimum.
            let mut image = sample.image.clone();
            image.mapv_inplace(|v| (v + 0.03).min(1.0));
            let (_, gx) = bundle.task_loss_grad(task, &image, &target).unwrap();
            let flat: Vec<f64> = image.iter().cloned().collect();
            for _ in 0..3 {
                let dir = random_direction(flat.len(), &mut r);
                let mut f = |p: &[f64]| {
                    let xi = Array3::from_shape_vec(image.dim(), p.to_vec()).unwrap();
                    bundle.task_loss_grad(task, &xi, &target).unwrap().0
                };
                let num = central_diff(&mut f, &flat, &dir, 1e-5);
                let ana: f64 = gx.iter().zip(&dir).map(|(g, d)| g * d).sum();
                assert!(
                    relative_error(num, ana) <= 1e-5,
                    "{} loss grad: {num} vs {ana}",
                    task.as_str()
                );
            }
        }
    }

    #[test]
    fn losses_at_clean_image_hit_their_reference_points() {
        let (bundle, sample) = bundle_and_sample();
        let dt = bundle.attack_target(TaskKind::Depth, &sample).unwrap();
        let (loss_d, _) = bundle
            .task_loss_grad(TaskKind::Depth, &sample.image, &dt)
            .unwrap();
        assert_eq!(loss_d, 0.0);
        let rt = bundle.attack_target(TaskKind::Retrieval, &sample).unwrap();
        let (loss_r, _) = bundle
            .task_loss_grad(TaskKind::Retrieval, &sample.image, &rt)
            .unwrap();
        assert_abs_diff_eq!(loss_r, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn mismatched_target_is_rejected() {
        let (bundle, sample) = bundle_and_sample();
        let target = TaskTarget::Class(0);
        assert!(bundle
            .task_loss_grad(TaskKind::Depth, &sample.image, &target)
            .is_err());
    }

    #[test]
    fn predictions_have_task_shapes_and_valid_ranges() {
        let (bundle, sample) = bundle_and_sample();
        let res = bundle.resolution();
        match bundle
            .predict(TaskKind::Classification, &sample.image)
            .unwrap()
        {
            Prediction::Class(c) => assert!(c < bundle.backbone.config.num_classes),
            other => panic!("unexpected {other:?}"),
        }
        match bundle
            .predict(TaskKind::Segmentation, &sample.image)
            .unwrap()
        {
            Prediction::Seg(m) => {
                assert_eq!(m.dim(), (res, res));
                assert!(m
                    .iter()
                    .all(|&c| (c as usize) < bundle.backbone.config.seg_classes));
            }
            other => panic!("unexpected {other:?}"),
        }
        match bundle.predict(TaskKind::Depth, &sample.image).unwrap() {
            Prediction::Depth(m) => {
                assert_eq!(m.dim(), (res, res));
                assert!(m.iter().all(|&v| v > 0.0 && v.is_finite()));
            }
            other => panic!("unexpected {other:?}"),
        }
        match bundle.predict(TaskKind::Retrieval, &sample.image).unwrap() {
            Prediction::Embed(e) => assert_eq!(e.len(), bundle.backbone.config.embed_dim),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn seg_counts_cover_every_pixel_once() {
        let (bundle, sample) = bundle_and_sample();
        let counts = seg_token_counts(
            &sample.seg_mask,
            bundle.backbone.config.patch,
            bundle.backbone.config.seg_classes,
        )
        .unwrap();
        assert_abs_diff_eq!(counts.sum(), (sample.seg_mask.len()) as f64, epsilon = 0.0);
        let p2 = (bundle.backbone.config.patch * bundle.backbone.config.patch) as f64;
        for row in counts.rows() {
            assert_abs_diff_eq!(row.sum(), p2, epsilon = 0.0);
        }
    }

    #[test]
    fn depth_token_means_average_constant_patches_exactly() {
        let map = Array2::from_elem((16, 16), 2.5);
        let means = depth_token_means(&map, 8);
        assert_eq!(means.len(), 4);
        for &v in means.iter() {
            assert_abs_diff_eq!(v, 2.5, epsilon = 1e-15);
        }
    }
}
