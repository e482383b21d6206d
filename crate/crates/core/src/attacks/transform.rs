//! Structure-preserving random input transforms applied inside the attack
//! loop.
//!
//! The image is cut into a `grid x grid` block partition; each block
//! independently receives one of eight transforms drawn uniformly: circular
//! vertical/horizontal shift, vertical/horizontal flip, 180-degree
//! rotation, center zoom (bilinear), additive Gaussian noise, or pixel
//! dropout. The sampled instance is a linear (or affine) map in the image,
//! so its exact vector-Jacobian product is available for crafting
//! gradients. The assembled output is clipped to `[0, 1]`; gradients do
//! not flow through clipped pixels.

use crate::error::{Error, Result};
use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Block-transform parameters; the defaults match the attack suite's
/// standard settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiaParams {
    /// Blocks per image side.
    pub grid: usize,
    /// Max circular shift as a fraction of the block side.
    pub max_shift_frac: f64,
    pub zoom_min: f64,
    pub zoom_max: f64,
    pub noise_std: f64,
    /// Probability that a pixel (all channels) is zeroed under dropout.
    pub dropout: f64,
}

impl Default for SiaParams {
    fn default() -> Self {
        SiaParams {
            grid: 3,
            max_shift_frac: 0.2,
            zoom_min: 0.7,
            zoom_max: 1.3,
            noise_std: 0.05,
            dropout: 0.1,
        }
    }
}

impl SiaParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::Config("sia grid must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_shift_frac) {
            return Err(Error::Config(format!(
                "max_shift_frac must lie in [0, 1], got {}",
                self.max_shift_frac
            )));
        }
        if !(self.zoom_min > 0.0 && self.zoom_min <= self.zoom_max && self.zoom_max.is_finite()) {
            return Err(Error::Config(format!(
                "zoom range [{}, {}] must satisfy 0 < min <= max",
                self.zoom_min, self.zoom_max
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Same parameters with a one-block grid (whole-image mode).
    pub fn whole_image(&self) -> SiaParams {
        SiaParams {
            grid: 1,
            ..self.clone()
        }
    }
}

/// The eight block transform kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockOpKind {
    VShift,
    HShift,
    VFlip,
    HFlip,
    Rot180,
    Zoom,
    Noise,
    Dropout,
}

pub const BLOCK_OP_COUNT: usize = 8;

const KINDS: [BlockOpKind; BLOCK_OP_COUNT] = [
    BlockOpKind::VShift,
    BlockOpKind::HShift,
    BlockOpKind::VFlip,
    BlockOpKind::HFlip,
    BlockOpKind::Rot180,
    BlockOpKind::Zoom,
    BlockOpKind::Noise,
    BlockOpKind::Dropout,
];

/// Bilinear resampling plan: per output pixel, the four source corners and
/// interpolation weights.
struct ZoomPlan {
    /// `(y0, y1, x0, x1, wy, wx)` per output pixel, row-major.
    taps: Vec<(usize, usize, usize, usize, f64, f64)>,
}

enum BlockOp {
    VShift(isize),
    HShift(isize),
    VFlip,
    HFlip,
    Rot180,
    Zoom(ZoomPlan),
    Noise(Array3<f64>),
    /// Keep mask over `(h, w)`; zeroed pixels drop all channels.
    Dropout(Array2<f64>),
}

struct Region {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
}

/// One sampled transform instance: applies to exactly one image shape and
/// provides the matching vector-Jacobian product.
pub struct SiaInstance {
    shape: (usize, usize, usize),
    blocks: Vec<(Region, BlockOp, BlockOpKind)>,
    /// Pass-through mask from the final `[0, 1]` clip, set by `apply`.
    clip_pass: Array3<f64>,
}

fn zoom_plan(bh: usize, bw: usize, factor: f64) -> ZoomPlan {
    let cy = (bh as f64 - 1.0) / 2.0;
    let cx = (bw as f64 - 1.0) / 2.0;
    let mut taps = Vec::with_capacity(bh * bw);
    for i in 0..bh {
        for j in 0..bw {
            let sy = (cy + (i as f64 - cy) / factor).clamp(0.0, bh as f64 - 1.0);
            let sx = (cx + (j as f64 - cx) / factor).clamp(0.0, bw as f64 - 1.0);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(bh - 1);
            let x1 = (x0 + 1).min(bw - 1);
            taps.push((y0, y1, x0, x1, sy - y0 as f64, sx - x0 as f64));
        }
    }
    ZoomPlan { taps }
}

/// Samples one transform instance for images of shape `(c, h, w)`.
pub fn sample_sia(
    shape: (usize, usize, usize),
    params: &SiaParams,
    rng: &mut ChaCha8Rng,
) -> Result<SiaInstance> {
    params.validate()?;
    let (ch, h, w) = shape;
    if ch == 0 || h < params.grid || w < params.grid {
        return Err(Error::ShapeMismatch {
            expected: format!("at least ({}, {}, {})", 1, params.grid, params.grid),
            actual: format!("{shape:?}"),
        });
    }
    let g = params.grid;
    let edge = |n: usize, i: usize| i * n / g;
    let mut blocks = Vec::with_capacity(g * g);
    for bi in 0..g {
        for bj in 0..g {
            let region = Region {
                r0: edge(h, bi),
                r1: edge(h, bi + 1),
                c0: edge(w, bj),
                c1: edge(w, bj + 1),
            };
            let bh = region.r1 - region.r0;
            let bw = region.c1 - region.c0;
            let kind = KINDS[rng.gen_range(0..BLOCK_OP_COUNT)];
            let op = match kind {
                BlockOpKind::VShift => {
                    let m = (bh as f64 * params.max_shift_frac).floor() as isize;
                    BlockOp::VShift(rng.gen_range(-m..=m))
                }
                BlockOpKind::HShift => {
                    let m = (bw as f64 * params.max_shift_frac).floor() as isize;
                    BlockOp::HShift(rng.gen_range(-m..=m))
                }
                BlockOpKind::VFlip => BlockOp::VFlip,
                BlockOpKind::HFlip => BlockOp::HFlip,
                BlockOpKind::Rot180 => BlockOp::Rot180,
                BlockOpKind::Zoom => {
                    let f = rng.gen_range(params.zoom_min..=params.zoom_max);
                    BlockOp::Zoom(zoom_plan(bh, bw, f))
                }
                BlockOpKind::Noise => {
                    let mut n = Array3::zeros((ch, bh, bw));
                    for v in n.iter_mut() {
                        *v = params.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
                    }
                    BlockOp::Noise(n)
                }
                BlockOpKind::Dropout => {
                    let mut mask = Array2::zeros((bh, bw));
                    for v in mask.iter_mut() {
                        *v = if rng.gen::<f64>() < params.dropout {
                            0.0
                        } else {
                            1.0
                        };
                    }
                    BlockOp::Dropout(mask)
                }
            };
            blocks.push((region, op, kind));
        }
    }
    Ok(SiaInstance {
        shape,
        blocks,
        clip_pass: Array3::zeros(shape),
    })
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

impl SiaInstance {
    /// The sampled kind of every block, row-major.
    pub fn kinds(&self) -> Vec<BlockOpKind> {
        self.blocks.iter().map(|(_, _, k)| *k).collect()
    }

    /// Applies the instance. Must be called before [`Self::vjp`], which
    /// uses the clip mask recorded here.
    pub fn apply(&mut self, x: &Array3<f64>) -> Result<Array3<f64>> {
        if x.dim() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape),
                actual: format!("{:?}", x.dim()),
            });
        }
        let ch = self.shape.0;
        let mut y = x.clone();
        for (region, op, _) in &self.blocks {
            let bh = region.r1 - region.r0;
            let bw = region.c1 - region.c0;
            let xb = x
                .slice(s![.., region.r0..region.r1, region.c0..region.c1])
                .to_owned();
            let mut yb = y.slice_mut(s![.., region.r0..region.r1, region.c0..region.c1]);
            match op {
                BlockOp::VShift(shift) => {
                    for c in 0..ch {
                        for i in 0..bh {
                            let src = wrap(i as isize - shift, bh);
                            for j in 0..bw {
                                yb[[c, i, j]] = xb[[c, src, j]];
                            }
                        }
                    }
                }
                BlockOp::HShift(shift) => {
                    for c in 0..ch {
                        for i in 0..bh {
                            for j in 0..bw {
                                yb[[c, i, j]] = xb[[c, i, wrap(j as isize - shift, bw)]];
                            }
                        }
                    }
                }
                BlockOp::VFlip => {
                    for c in 0..ch {
                        for i in 0..bh {
                            for j in 0..bw {
                                yb[[c, i, j]] = xb[[c, bh - 1 - i, j]];
                            }
                        }
                    }
                }
                BlockOp::HFlip => {
                    for c in 0..ch {
                        for i in 0..bh {
                            for j in 0..bw {
                                yb[[c, i, j]] = xb[[c, i, bw - 1 - j]];
                            }
                        }
                    }
                }
                BlockOp::Rot180 => {
                    for c in 0..ch {
                        for i in 0..bh {
                            for j in 0..bw {
                                yb[[c, i, j]] = xb[[c, bh - 1 - i, bw - 1 - j]];
                            }
                        }
                    }
                }
                BlockOp::Zoom(plan) => {
                    for c in 0..ch {
                        for (k, &(y0, y1, x0, x1, wy, wx)) in plan.taps.iter().enumerate() {
                            let (i, j) = (k / bw, k % bw);
                            yb[[c, i, j]] = (1.0 - wy) * (1.0 - wx) * xb[[c, y0, x0]]
                                + (1.0 - wy) * wx * xb[[c, y0, x1]]
                                + wy * (1.0 - wx) * xb[[c, y1, x0]]
                                + wy * wx * xb[[c, y1, x1]];
                        }
                    }
                }
                BlockOp::Noise(n) => {
                    for c in 0..ch {
                        for i in 0..bh {
                            for j in 0..bw {
                                yb[[c, i, j]] = xb[[c, i, j]] + n[[c, i, j]];
                            }
                        }
                    }
                }
                BlockOp::Dropout(mask) => {
                    for c in 0..ch {
                        for i in 0..bh {
                            for j in 0..bw {
                                yb[[c, i, j]] = xb[[c, i, j]] * mask[[i, j]];
                            }
                        }
                    }
                }
            }
        }
        for (pass, v) in self.clip_pass.iter_mut().zip(y.iter_mut()) {
            *pass = if (0.0..=1.0).contains(v) { 1.0 } else { 0.0 };
            *v = v.clamp(0.0, 1.0);
        }
        Ok(y)
    }

    /// Exact vector-Jacobian product of the applied instance.
    pub fn vjp(&self, gy: &Array3<f64>) -> Result<Array3<f64>> {
        if gy.dim() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape),
                actual: format!("{:?}", gy.dim()),
            });
        }
        let ch = self.shape.0;
        let mut gy = gy * &self.clip_pass;
        let mut gx = Array3::zeros(self.shape);
        for (region, op, _) in &self.blocks {
            let bh = region.r1 - region.r0;
            let bw = region.c1 - region.c0;
            let gb = gy
                .slice_mut(s![.., region.r0..region.r1, region.c0..region.c1])
                .to_owned();
            let mut gxb = gx.slice_mut(s![.., region.r0..region.r1, region.c0..region.c1]);
            match op {
                BlockOp::VShift(shift) => {
                    for c in 0..ch {
                        for i in 0..bh {
                            let src = wrap(i as isize - shift, bh);
                            for j in 0..bw {
                                gxb[[c, src, j]] += gb[[c, i, j]];
                            }
                        }
                    }
                }
                BlockOp::HShift(shift) => {
                    for c in 0..ch {
                        for i in 0..bh {
                            for j in 0..bw {
                                gxb[[c, i, wrap(j as isize - shift, bw)]] += gb[[c, i, j]];
                            }
                        }
                    }
                }
                BlockOp::VFlip => {
                    for c in 0..ch {
                        for i in 0..bh {
                            for j in 0..bw {
                                gxb[[c, bh - 1 - i, j]] += gb[[c, i, j]];
                            }
                        }
                    }
                }
                BlockOp::HFlip => {
                    for c in 0..ch {
                        for i in 0..bh {
                            for j in 0..bw {
                                gxb[[c, i, bw - 1 - j]] += gb[[c, i, j]];
                            }
                        }
                    }
                }
                BlockOp::Rot180 => {
                    for c in 0..ch {
                        for i in 0..bh {
                            for j in 0..bw {
                                gxb[[c, bh - 1 - i, bw - 1 - j]] += gb[[c, i, j]];
                            }
                        }
                    }
                }
                BlockOp::Zoom(plan) => {
                    for c in 0..ch {
                        for (k, &(y0, y1, x0, x1, wy, wx)) in plan.taps.iter().enumerate() {
                            let (i, j) = (k / bw, k % bw);
                            let g = gb[[c, i, j]];
                            gxb[[c, y0, x0]] += (1.0 - wy) * (1.0 - wx) * g;
                            gxb[[c, y0, x1]] += (1.0 - wy) * wx * g;
                            gxb[[c, y1, x0]] += wy * (1.0 - wx) * g;
                            gxb[[c, y1, x1]] += wy * wx * g;
                        }
                    }
                }
                BlockOp::Noise(_) => {
                    for c in 0..ch {
                        for i in 0..bh {
                            for j in 0..bw {
                                gxb[[c, i, j]] += gb[[c, i, j]];
                            }
                        }
                    }
                }
                BlockOp::Dropout(mask) => {
                    for c in 0..ch {
                        for i in 0..bh {
                            for j in 0..bw {
                                gxb[[c, i, j]] += gb[[c, i, j]] * mask[[i, j]];
                            }
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

/// Samples and applies one transform in a single call.
pub fn sia_transform(
    x: &Array3<f64>,
    params: &SiaParams,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f64>> {
    let mut inst = sample_sia(x.dim(), params, rng)?;
    inst.apply(x)
}
