//! Procedural toy dataset: flat-shaded geometric shapes over textured
//! backgrounds, with aligned labels for all four tasks.
//!
//! Samples come in retrieval groups: each group shares a scene template
//! (shape kind, layout, palette) and members differ by small jitters, so
//! group membership is the retrieval ground truth. The main shape's kind is
//! the class label, its footprint dominates the segmentation mask, and depth
//! is consistent with draw order (nearer shapes occlude in image, mask, and
//! depth simultaneously).

use crate::error::{Error, Result};
use crate::rng;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// One generated sample with ground truth for every task.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    /// RGB image in `[0, 1]`, shape `(3, res, res)`.
    pub image: Array3<f64>,
    /// Class of the dominant shape, in `0..num_classes`.
    pub label: usize,
    /// Per-pixel class ids: 0 background, `k + 1` for shape kind `k`.
    pub seg_mask: Array2<u8>,
    /// Per-pixel depth; background lies in `[3, 4]`, shapes in `[0.9, 2.7]`.
    pub depth_map: Array2<f64>,
    /// Scene template id; members of a group are jittered variants.
    pub retrieval_group: u32,
}

/// Generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub resolution: usize,
    pub num_classes: usize,
    pub group_size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: 2500,
            resolution: 32,
            num_classes: 4,
            group_size: 5,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!(
                "dataset n must be >= 2, got {}",
                self.n
            )));
        }
        if self.resolution < 16 || self.resolution % 8 != 0 {
            return Err(Error::Config(format!(
                "resolution must be >= 16 and divisible by 8, got {}",
                self.resolution
            )));
        }
        if !(2..=4).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=4 (one per shape kind), got {}",
                self.num_classes
            )));
        }
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group_size must be >= 2, got {}",
                self.group_size
            )));
        }
        Ok(())
    }
}

/// A generated dataset plus the config that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub config: DatasetConfig,
    pub samples: Vec<ToySample>,
}

const KIND_COUNT: usize = 4;

/// Shape color pool. Colors are drawn independently of the shape kind, so
/// the class label is carried by geometry alone and color is a nuisance
/// variable.
const PALETTE: [[f64; 3]; KIND_COUNT] = [
    [0.78, 0.20, 0.18], // red
    [0.18, 0.68, 0.25], // green
    [0.20, 0.30, 0.78], // blue
    [0.78, 0.70, 0.16], // yellow
];

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: usize,
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
    depth: f64,
}

impl Shape {
    /// Hard-edged coverage test in pixel coordinates.
    fn covers(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.kind {
            0 => dx * dx + dy * dy <= self.r * self.r,
            1 => dx.abs().max(dy.abs()) <= self.r * 0.88,
            2 => {
                // Triangle with apex up: vertices (0, -r), (+-0.95r, 0.82r).
                let (ax, ay) = (0.0, -self.r);
                let (bx, by) = (-0.95 * self.r, 0.82 * self.r);
                let (cx2, cy2) = (0.95 * self.r, 0.82 * self.r);
                let side = |x1: f64, y1: f64, x2: f64, y2: f64| {
                    (dx - x1) * (y2 - y1) - (dy - y1) * (x2 - x1)
                };
                let d1 = side(ax, ay, bx, by);
                let d2 = side(bx, by, cx2, cy2);
                let d3 = side(cx2, cy2, ax, ay);
                (d1 <= 0.0 && d2 <= 0.0 && d3 <= 0.0) || (d1 >= 0.0 && d2 >= 0.0 && d3 >= 0.0)
            }
            _ => dx.abs() + dy.abs() <= self.r * 1.18,
        }
    }
}

#[derive(Clone, Debug)]
struct Scene {
    shapes: Vec<Shape>, // sorted far to near before painting
    bg_base: [f64; 3],
    bg_freq: (f64, f64),
    bg_phase: (f64, f64),
}

/// Depth assigned to a shape of normalized (32-scale) radius `r32`:
/// bigger shapes sit nearer the camera.
fn depth_for_radius(r32: f64) -> f64 {
    2.6 - 1.6 * (r32 - 3.0) / 9.5
}

/// Template parameters drawn once per retrieval group.
struct Template {
    main_kind: usize,
    main_c: (f64, f64),
    main_r32: f64,
    main_color: [f64; 3],
    distractors: Vec<(usize, (f64, f64), f64, [f64; 3])>,
    bg_base: [f64; 3],
    bg_freq: (f64, f64),
    bg_phase: (f64, f64),
}

fn draw_template(cfg: &DatasetConfig, group: usize, rng: &mut ChaCha8Rng) -> Template {
    let res = cfg.resolution as f64;
    let sc = res / 32.0;
    let main_kind = group % cfg.num_classes;
    let main_r32 = rng.gen_range(9.5..12.5);
    let r = main_r32 * sc;
    let lo = r + 1.5;
    let hi = res - 1.0 - r - 1.5;
    let main_c = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
    let mut main_color = PALETTE[rng.gen_range(0..KIND_COUNT)];
    for c in &mut main_color {
        *c += rng.gen_range(-0.04..0.04);
    }
    let n_distractors = rng.gen_range(0..=2);
    let mut distractors = Vec::new();
    for _ in 0..n_distractors {
        let kind = rng.gen_range(0..cfg.num_classes);
        let r32 = rng.gen_range(3.0..4.5);
        let rr = r32 * sc;
        let c = (
            rng.gen_range(rr..res - 1.0 - rr),
            rng.gen_range(rr..res - 1.0 - rr),
        );
        let mut color = PALETTE[rng.gen_range(0..KIND_COUNT)];
        for ch in &mut color {
            *ch += rng.gen_range(-0.04..0.04);
        }
        distractors.push((kind, c, r32, color));
    }
    let bg_base = [
        rng.gen_range(0.30..0.46),
        rng.gen_range(0.30..0.46),
        rng.gen_range(0.30..0.46),
    ];
    let bg_freq = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0));
    let bg_phase = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    Template {
        main_kind,
        main_c,
        main_r32,
        main_color,
        distractors,
        bg_base,
        bg_freq,
        bg_phase,
    }
}

/// Applies per-member jitter to a template and returns the painted scene.
fn jittered_scene(cfg: &DatasetConfig, tpl: &Template, rng: &mut ChaCha8Rng) -> Scene {
    let res = cfg.resolution as f64;
    let sc = res / 32.0;
    let jc = 2.0 * sc;
    let mut shapes = Vec::with_capacity(1 + tpl.distractors.len());

    let r32 = tpl.main_r32 * rng.gen_range(0.92..1.08);
    let r = r32 * sc;
    let cx = (tpl.main_c.0 + rng.gen_range(-jc..jc)).clamp(r + 0.5, res - 1.5 - r);
    let cy = (tpl.main_c.1 + rng.gen_range(-jc..jc)).clamp(r + 0.5, res - 1.5 - r);
    let mut color = tpl.main_color;
    for ch in &mut color {
        *ch = (*ch + rng.gen_range(-0.02..0.02)).clamp(0.02, 0.98);
    }
    shapes.push(Shape {
        kind: tpl.main_kind,
        cx,
        cy,
        r,
        color,
        depth: depth_for_radius(r32),
    });

    for (kind, c, r32t, col) in &tpl.distractors {
        let r32 = r32t * rng.gen_range(0.92..1.08);
        let r = r32 * sc;
        let cx = (c.0 + rng.gen_range(-jc..jc)).clamp(r + 0.5, res - 1.5 - r);
        let cy = (c.1 + rng.gen_range(-jc..jc)).clamp(r + 0.5, res - 1.5 - r);
        let mut color = *col;
        for ch in &mut color {
            *ch = (*ch + rng.gen_range(-0.02..0.02)).clamp(0.02, 0.98);
        }
        shapes.push(Shape {
            kind: *kind,
            cx,
            cy,
            r,
            color,
            depth: depth_for_radius(r32),
        });
    }
    // Far to near, so later paints win; the main shape is always nearest
    // because distractor radii are capped well below the main radius.
    shapes.sort_by(|a, b| {
        b.depth
            .partial_cmp(&a.depth)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let bg_phase = (
        tpl.bg_phase.0 + rng.gen_range(-0.08..0.08),
        tpl.bg_phase.1 + rng.gen_range(-0.08..0.08),
    );
    Scene {
        shapes,
        bg_base: tpl.bg_base,
        bg_freq: tpl.bg_freq,
        bg_phase,
    }
}

fn paint(cfg: &DatasetConfig, scene: &Scene, label: usize, group: u32) -> ToySample {
    let res = cfg.resolution;
    let resf = res as f64;
    let mut image = Array3::zeros((3, res, res));
    let mut seg = Array2::zeros((res, res));
    let mut depth = Array2::zeros((res, res));
    let tau = std::f64::consts::TAU;
    for y in 0..res {
        for x in 0..res {
            let (xf, yf) = (x as f64, y as f64);
            let wave = 0.06 * (tau * (scene.bg_freq.0 * xf / resf + scene.bg_phase.0)).sin()
                + 0.04 * (tau * (scene.bg_freq.1 * yf / resf + scene.bg_phase.1)).cos();
            for ch in 0..3 {
                image[[ch, y, x]] = (scene.bg_base[ch] + wave).clamp(0.0, 1.0);
            }
            depth[[y, x]] = 4.0 - yf / (resf - 1.0);
            for s in &scene.shapes {
                if s.covers(xf, yf) {
                    let d2 = ((xf - s.cx).powi(2) + (yf - s.cy).powi(2)) / (s.r * s.r);
                    let shade = 1.0 - 0.22 * d2.min(1.6);
                    for ch in 0..3 {
                        image[[ch, y, x]] = (s.color[ch] * shade).clamp(0.0, 1.0);
                    }
                    seg[[y, x]] = (s.kind + 1) as u8;
                    depth[[y, x]] = s.depth;
                }
            }
        }
    }
    ToySample {
        image,
        label,
        seg_mask: seg,
        depth_map: depth,
        retrieval_group: group,
    }
}

/// Number of groups for `n` samples; a trailing singleton folds into the
/// previous group so every group has at least two members.
fn group_of(i: usize, n: usize, group_size: usize) -> usize {
    let g = i / group_size;
    if n % group_size == 1 && i == n - 1 && g > 0 {
        g - 1
    } else {
        g
    }
}

/// Generates the full dataset deterministically from `cfg.seed`.
pub fn generate_toy_dataset(cfg: &DatasetConfig) -> Result<ToyDataset> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.n);
    let mut current_group = usize::MAX;
    let mut template = None;
    for i in 0..cfg.n {
        let g = group_of(i, cfg.n, cfg.group_size);
        if g != current_group {
            let mut trng = rng::stream(cfg.seed, "toy-template", g as u64);
            template = Some(draw_template(cfg, g, &mut trng));
            current_group = g;
        }
        let tpl = template.as_ref().expect("template drawn above");
        let mut mrng = rng::stream(cfg.seed, "toy-member", i as u64);
        let scene = jittered_scene(cfg, tpl, &mut mrng);
        samples.push(paint(cfg, &scene, tpl.main_kind, g as u32));
    }
    Ok(ToyDataset {
        config: cfg.clone(),
        samples,
    })
}

impl ToyDataset {
    /// Deterministic train/val split on group boundaries: every k-th group
    /// is validation, where `k = round(1 / val_fraction)`.
    pub fn split_indices(&self, val_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..1.0).contains(&val_fraction) || val_fraction <= 0.0 {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {val_fraction}"
            )));
        }
        let k = (1.0 / val_fraction).round().max(2.0) as usize;
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            if (s.retrieval_group as usize) % k == 0 {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config(format!(
                "split produced an empty side (n={}, val_fraction={val_fraction})",
                self.samples.len()
            )));
        }
        Ok((train, val))
    }

    /// Mean pixel value per channel over the whole dataset.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        let mut count = 0usize;
        for s in &self.samples {
            for ch in 0..3 {
                acc[ch] += s.image.index_axis(ndarray::Axis(0), ch).sum();
            }
            count += s.image.len() / 3;
        }
        [
            acc[0] / count as f64,
            acc[1] / count as f64,
            acc[2] / count as f64,
        ]
    }

    /// Number of segmentation classes including background.
    pub fn seg_classes(&self) -> usize {
        self.config.num_classes + 1
    }

    /// Writes `meta.json` and `samples.bin` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::json!({
            "format": "ddsmooth-toy-dataset",
            "version": 1,
            "config": self.config,
            "count": self.samples.len(),
        });
        let meta_path = dir.join("meta.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;

        let bin_path = dir.join("samples.bin");
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"DDSD");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.config.resolution as u32).to_le_bytes());
        for s in &self.samples {
            buf.extend_from_slice(&(s.label as u32).to_le_bytes());
            buf.extend_from_slice(&s.retrieval_group.to_le_bytes());
            for v in s.image.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(s.seg_mask.as_slice().expect("standard layout"));
            for v in s.depth_map.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&bin_path, e))?;
        Ok(())
    }

    /// Loads a dataset written by [`ToyDataset::save_dir`].
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta_text =
            std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: serde_json::Value = serde_json::from_str(&meta_text)?;
        if meta["format"] != "ddsmooth-toy-dataset" || meta["version"] != 1 {
            return Err(Error::Config(format!(
                "unrecognized dataset meta at {}",
                meta_path.display()
            )));
        }
        let config: DatasetConfig = serde_json::from_value(meta["config"].clone())?;
        config.validate()?;
        let count = meta["count"]
            .as_u64()
            .ok_or_else(|| Error::Config("dataset meta missing count".into()))?
            as usize;

        let bin_path = dir.join("samples.bin");
        let mut bytes = Vec::new();
        std::fs::File::open(&bin_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&bin_path, e))?;
        let mut off = 0usize;
        let take = |bytes: &[u8], off: &mut usize, n: usize| -> Result<Vec<u8>> {
            if *off + n > bytes.len() {
                return Err(Error::Contract(format!(
                    "dataset blob truncated at byte {} (wanted {n} more)",
                    *off
                )));
            }
            let out = bytes[*off..*off + n].to_vec();
            *off += n;
            Ok(out)
        };
        if take(&bytes, &mut off, 4)? != b"DDSD" {
            return Err(Error::Contract("dataset blob has wrong magic".into()));
        }
        let ver = u32::from_le_bytes(take(&bytes, &mut off, 4)?.try_into().unwrap());
        if ver != 1 {
            return Err(Error::Contract(format!(
                "dataset blob version {ver} unsupported"
            )));
        }
        let n = u64::from_le_bytes(take(&bytes, &mut off, 8)?.try_into().unwrap()) as usize;
        let res = u32::from_le_bytes(take(&bytes, &mut off, 4)?.try_into().unwrap()) as usize;
        if n != count || res != config.resolution {
            return Err(Error::Contract(format!(
                "dataset blob header (n={n}, res={res}) disagrees with meta"
            )));
        }
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let label = u32::from_le_bytes(take(&bytes, &mut off, 4)?.try_into().unwrap()) as usize;
            let group = u32::from_le_bytes(take(&bytes, &mut off, 4)?.try_into().unwrap());
            let img_bytes = take(&bytes, &mut off, 3 * res * res * 8)?;
            let image = Array3::from_shape_vec(
                (3, res, res),
                img_bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
            .expect("shape matches byte count");
            let mask_bytes = take(&bytes, &mut off, res * res)?;
            let seg_mask =
                Array2::from_shape_vec((res, res), mask_bytes).expect("shape matches byte count");
            let depth_bytes = take(&bytes, &mut off, res * res * 8)?;
            let depth_map = Array2::from_shape_vec(
                (res, res),
                depth_bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
            .expect("shape matches byte count");
            samples.push(ToySample {
                image,
                label,
                seg_mask,
                depth_map,
                retrieval_group: group,
            });
        }
        if off != bytes.len() {
            return Err(Error::Contract(format!(
                "dataset blob has {} trailing bytes",
                bytes.len() - off
            )));
        }
        Ok(ToyDataset { config, samples })
    }
}
