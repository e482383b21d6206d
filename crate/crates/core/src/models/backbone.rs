//! Token-mixer backbone and per-task heads.
//!
//! Images are cut into non-overlapping patches, embedded, and passed through
//! mixer blocks that alternate token mixing (dense over the token axis) and
//! channel mixing (dense over features), all SiLU-activated with residual
//! connections. The pooled token mean is the embedding used for
//! classification and retrieval; segmentation and depth read the per-token
//! features.

use crate::error::{Error, Result};
use crate::nn::{self, Linear, LinearGrad};
use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture parameters for [`ToyBackbone`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub resolution: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub num_classes: usize,
    /// Segmentation classes including background.
    pub seg_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            resolution: 32,
            patch: 8,
            embed_dim: 32,
            hidden_dim: 64,
            blocks: 2,
            num_classes: 4,
            seg_classes: 5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.resolution % self.patch != 0 {
            return Err(Error::Config(format!(
                "resolution {} must be divisible by patch {}",
                self.resolution, self.patch
            )));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.blocks == 0 {
            return Err(Error::Config("backbone dims must be positive".into()));
        }
        if self.num_classes < 2 || self.seg_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    /// Tokens per side.
    pub fn grid(&self) -> usize {
        self.resolution / self.patch
    }

    /// Total token count.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch length.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }
}

/// One mixer block: token mixing then channel mixing, each residual.
#[derive(Clone, Debug)]
pub struct MixerBlock {
    /// Token-mix weights, both `(tokens, tokens)`.
    pub a1: Array2<f64>,
    pub a2: Array2<f64>,
    /// Channel MLP `(hidden, embed)` and `(embed, hidden)`.
    pub b1: Linear,
    pub b2: Linear,
}

#[derive(Clone, Debug)]
pub struct MixerBlockGrad {
    pub a1: Array2<f64>,
    pub a2: Array2<f64>,
    pub b1: LinearGrad,
    pub b2: LinearGrad,
}

struct BlockCache {
    z_in: Array2<f64>,
    u: Array2<f64>,
    s: Array2<f64>,
    z_mid: Array2<f64>,
    v: Array2<f64>,
    g: Array2<f64>,
}

/// Patch-mixer backbone producing per-token features and a pooled embedding.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    pub config: BackboneConfig,
    pub embed: Linear,
    pub blocks: Vec<MixerBlock>,
}

/// Forward activations needed by [`ToyBackbone::backward`].
pub struct BackboneCache {
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
}

/// Per-token features plus the pooled embedding.
#[derive(Clone, Debug)]
pub struct Features {
    pub tokens: Array2<f64>,
    pub embed: Array1<f64>,
}

/// Gradients for every backbone parameter, mirroring the struct layout.
#[derive(Clone, Debug)]
pub struct BackboneGrads {
    pub embed: LinearGrad,
    pub blocks: Vec<MixerBlockGrad>,
}

fn silu_mat(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * nn::sigmoid(v))
}

fn silu_mat_backward(pre: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let mut g = gy.clone();
    g.zip_mut_with(pre, |gv, &p| *gv *= nn::silu_deriv(p));
    g
}

impl ToyBackbone {
    pub fn init(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let t = config.tokens();
        let embed = Linear::init(config.embed_dim, config.patch_dim(), rng);
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            // Token-mix weights start small so early training is stable.
            let scale = (1.0 / t as f64).sqrt();
            let a1 = Array2::from_shape_fn((t, t), |_| {
                let u: f64 = rand::Rng::sample(rng, rand_distr::StandardNormal);
                u * scale
            });
            let a2 = Array2::from_shape_fn((t, t), |_| {
                let u: f64 = rand::Rng::sample(rng, rand_distr::StandardNormal);
                u * scale * 0.5
            });
            let b1 = Linear::init(config.hidden_dim, config.embed_dim, rng);
            let mut b2 = Linear::init(config.embed_dim, config.hidden_dim, rng);
            b2.w *= 0.5;
            blocks.push(MixerBlock { a1, a2, b1, b2 });
        }
        Ok(ToyBackbone {
            config,
            embed,
            blocks,
        })
    }

    /// Cuts `(3, res, res)` into rows of flattened patches `(tokens, patch_dim)`.
    pub fn patchify(&self, x: &Array3<f64>) -> Result<Array2<f64>> {
        let res = self.config.resolution;
        if x.dim() != (3, res, res) {
            return Err(Error::ShapeMismatch {
                expected: format!("(3, {res}, {res})"),
                actual: format!("{:?}", x.dim()),
            });
        }
        let p = self.config.patch;
        let g = self.config.grid();
        let mut out = Array2::zeros((self.config.tokens(), self.config.patch_dim()));
        for ty in 0..g {
            for tx in 0..g {
                let row = ty * g + tx;
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            out[[row, c * p * p + py * p + px]] = x[[c, ty * p + py, tx * p + px]];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`ToyBackbone::patchify`].
    fn unpatchify_grad(&self, gp: &Array2<f64>) -> Array3<f64> {
        let res = self.config.resolution;
        let p = self.config.patch;
        let g = self.config.grid();
        let mut out = Array3::zeros((3, res, res));
        for ty in 0..g {
            for tx in 0..g {
                let row = ty * g + tx;
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            out[[c, ty * p + py, tx * p + px]] = gp[[row, c * p * p + py * p + px]];
                        }
                    }
                }
            }
        }
        out
    }

    /// Forward pass returning features and the cache for [`Self::backward`].
    pub fn forward_cached(&self, x: &Array3<f64>) -> Result<(Features, BackboneCache)> {
        let patches = self.patchify(x)?;
        let mut z = self.embed.forward(&patches)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let z_in = z.clone();
            let u = blk.a1.dot(&z_in);
            let s = silu_mat(&u);
            let z_mid = &z_in + &blk.a2.dot(&s);
            let v = blk.b1.forward(&z_mid)?;
            let g = silu_mat(&v);
            let c = blk.b2.forward(&g)?;
            z = &z_mid + &c;
            caches.push(BlockCache {
                z_in,
                u,
                s,
                z_mid,
                v,
                g,
            });
        }
        let t = self.config.tokens() as f64;
        let embed = z.sum_axis(Axis(0)) / t;
        Ok((
            Features { tokens: z, embed },
            BackboneCache {
                patches,
                blocks: caches,
            },
        ))
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<Features> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Backward pass from cotangents of the token features and the pooled
    /// embedding. Returns the image gradient and parameter gradients when
    /// requested.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        g_tokens: Option<&Array2<f64>>,
        g_embed: Option<&Array1<f64>>,
        want_params: bool,
    ) -> (Array3<f64>, Option<BackboneGrads>) {
        let t = self.config.tokens();
        let d = self.config.embed_dim;
        let mut gz: Array2<f64> = match g_tokens {
            Some(g) => g.clone(),
            None => Array2::zeros((t, d)),
        };
        if let Some(ge) = g_embed {
            let scale = 1.0 / t as f64;
            for mut row in gz.rows_mut() {
                for (rv, &gv) in row.iter_mut().zip(ge.iter()) {
                    *rv += gv * scale;
                }
            }
        }
        let mut block_grads: Vec<MixerBlockGrad> = Vec::new();
        for (blk, bc) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            // Channel mix: z = z_mid + b2(silu(b1(z_mid))).
            let (gg, g_b2) = blk.b2.backward(&bc.g, &gz, want_params);
            let gv = silu_mat_backward(&bc.v, &gg);
            let (gz_from_mlp, g_b1) = blk.b1.backward(&bc.z_mid, &gv, want_params);
            let gz_mid = &gz + &gz_from_mlp;
            // Token mix: z_mid = z_in + a2 . silu(a1 . z_in).
            let gm = &gz_mid;
            let gs = blk.a2.t().dot(gm);
            let gu = silu_mat_backward(&bc.u, &gs);
            let gz_in = &gz_mid + &blk.a1.t().dot(&gu);
            if want_params {
                block_grads.push(MixerBlockGrad {
                    a1: gu.dot(&bc.z_in.t()),
                    a2: gm.dot(&bc.s.t()),
                    b1: g_b1.expect("requested"),
                    b2: g_b2.expect("requested"),
                });
            }
            gz = gz_in;
        }
        block_grads.reverse();
        let (gp, g_embed_layer) = self.embed.backward(&cache.patches, &gz, want_params);
        let gx = self.unpatchify_grad(&gp);
        let grads = want_params.then(|| BackboneGrads {
            embed: g_embed_layer.expect("requested"),
            blocks: block_grads,
        });
        (gx, grads)
    }

    /// Parameter slices in a fixed, documented order (embed, then each
    /// block's a1, a2, b1, b2 with weights before biases).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.embed.w.as_slice_mut().expect("standard layout"));
        out.push(self.embed.b.as_slice_mut().expect("standard layout"));
        for blk in &mut self.blocks {
            out.push(blk.a1.as_slice_mut().expect("standard layout"));
            out.push(blk.a2.as_slice_mut().expect("standard layout"));
            out.push(blk.b1.w.as_slice_mut().expect("standard layout"));
            out.push(blk.b1.b.as_slice_mut().expect("standard layout"));
            out.push(blk.b2.w.as_slice_mut().expect("standard layout"));
            out.push(blk.b2.b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Named tensors in the same order as [`Self::param_slices_mut`].
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let push2 = |out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, name: &str, a: &Array2<f64>| {
            out.push((
                name.to_string(),
                a.shape().to_vec(),
                a.iter().cloned().collect(),
            ));
        };
        let push1 = |out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, name: &str, a: &Array1<f64>| {
            out.push((name.to_string(), a.shape().to_vec(), a.to_vec()));
        };
        push2(&mut out, "embed.w", &self.embed.w);
        push1(&mut out, "embed.b", &self.embed.b);
        for (i, blk) in self.blocks.iter().enumerate() {
            push2(&mut out, &format!("block{i}.a1"), &blk.a1);
            push2(&mut out, &format!("block{i}.a2"), &blk.a2);
            push2(&mut out, &format!("block{i}.b1.w"), &blk.b1.w);
            push1(&mut out, &format!("block{i}.b1.b"), &blk.b1.b);
            push2(&mut out, &format!("block{i}.b2.w"), &blk.b2.w);
            push1(&mut out, &format!("block{i}.b2.b"), &blk.b2.b);
        }
        out
    }
}

impl BackboneGrads {
    /// Gradient slices aligned with [`ToyBackbone::param_slices_mut`].
    pub fn grad_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        out.push(self.embed.w.as_slice().expect("standard layout"));
        out.push(self.embed.b.as_slice().expect("standard layout"));
        for blk in &self.blocks {
            out.push(blk.a1.as_slice().expect("standard layout"));
            out.push(blk.a2.as_slice().expect("standard layout"));
            out.push(blk.b1.w.as_slice().expect("standard layout"));
            out.push(blk.b1.b.as_slice().expect("standard layout"));
            out.push(blk.b2.w.as_slice().expect("standard layout"));
            out.push(blk.b2.b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn zeros_like(bb: &ToyBackbone) -> Self {
        let z = |l: &Linear| LinearGrad {
            w: Array2::zeros(l.w.dim()),
            b: Array1::zeros(l.b.len()),
        };
        BackboneGrads {
            embed: z(&bb.embed),
            blocks: bb
                .blocks
                .iter()
                .map(|blk| MixerBlockGrad {
                    a1: Array2::zeros(blk.a1.dim()),
                    a2: Array2::zeros(blk.a2.dim()),
                    b1: z(&blk.b1),
                    b2: z(&blk.b2),
                })
                .collect(),
        }
    }

    pub fn scaled_add(&mut self, other: &BackboneGrads, w: f64) {
        self.embed.w.scaled_add(w, &other.embed.w);
        self.embed.b.scaled_add(w, &other.embed.b);
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.a1.scaled_add(w, &b.a1);
            a.a2.scaled_add(w, &b.a2);
            a.b1.w.scaled_add(w, &b.b1.w);
            a.b1.b.scaled_add(w, &b.b1.b);
            a.b2.w.scaled_add(w, &b.b2.w);
            a.b2.b.scaled_add(w, &b.b2.b);
        }
    }
}

/// Linear heads decoding the backbone features for each task.
#[derive(Clone, Debug)]
pub struct TaskHeads {
    /// Classifies the pooled embedding.
    pub cls: Linear,
    /// Per-token segmentation logits, upsampled to pixels by nearest.
    pub seg: Linear,
    /// Per-token depth (softplus), upsampled bilinearly to pixels.
    pub depth: Linear,
}

#[derive(Clone, Debug)]
pub struct TaskHeadGrads {
    pub cls: LinearGrad,
    pub seg: LinearGrad,
    pub depth: LinearGrad,
}

impl TaskHeads {
    pub fn init(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        TaskHeads {
            cls: Linear::init(cfg.num_classes, cfg.embed_dim, rng),
            seg: Linear::init(cfg.seg_classes, cfg.embed_dim, rng),
            depth: Linear::init(1, cfg.embed_dim, rng),
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.cls.w.as_slice_mut().expect("standard layout"),
            self.cls.b.as_slice_mut().expect("standard layout"),
            self.seg.w.as_slice_mut().expect("standard layout"),
            self.seg.b.as_slice_mut().expect("standard layout"),
            self.depth.w.as_slice_mut().expect("standard layout"),
            self.depth.b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        vec![
            (
                "head.cls.w".into(),
                self.cls.w.shape().to_vec(),
                self.cls.w.iter().cloned().collect(),
            ),
            (
                "head.cls.b".into(),
                self.cls.b.shape().to_vec(),
                self.cls.b.to_vec(),
            ),
            (
                "head.seg.w".into(),
                self.seg.w.shape().to_vec(),
                self.seg.w.iter().cloned().collect(),
            ),
            (
                "head.seg.b".into(),
                self.seg.b.shape().to_vec(),
                self.seg.b.to_vec(),
            ),
            (
                "head.depth.w".into(),
                self.depth.w.shape().to_vec(),
                self.depth.w.iter().cloned().collect(),
            ),
            (
                "head.depth.b".into(),
                self.depth.b.shape().to_vec(),
                self.depth.b.to_vec(),
            ),
        ]
    }
}

impl TaskHeadGrads {
    pub fn grad_slices(&self) -> Vec<&[f64]> {
        vec![
            self.cls.w.as_slice().expect("standard layout"),
            self.cls.b.as_slice().expect("standard layout"),
            self.seg.w.as_slice().expect("standard layout"),
            self.seg.b.as_slice().expect("standard layout"),
            self.depth.w.as_slice().expect("standard layout"),
            self.depth.b.as_slice().expect("standard layout"),
        ]
    }

    pub fn zeros_like(heads: &TaskHeads) -> Self {
        let z = |l: &Linear| LinearGrad {
            w: Array2::zeros(l.w.dim()),
            b: Array1::zeros(l.b.len()),
        };
        TaskHeadGrads {
            cls: z(&heads.cls),
            seg: z(&heads.seg),
            depth: z(&heads.depth),
        }
    }

    pub fn scaled_add(&mut self, other: &TaskHeadGrads, w: f64) {
        for (a, b) in [
            (&mut self.cls, &other.cls),
            (&mut self.seg, &other.seg),
            (&mut self.depth, &other.depth),
        ] {
            a.w.scaled_add(w, &b.w);
            a.b.scaled_add(w, &b.b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            resolution: 16,
            patch: 8,
            embed_dim: 6,
            hidden_dim: 10,
            blocks: 2,
            num_classes: 4,
            seg_classes: 5,
        }
    }

    #[test]
    fn patchify_round_trips_through_adjoint() {
        let mut r = crate::rng::seeded(2);
        let bb = ToyBackbone::init(cfg(), &mut r).unwrap();
        let x = Array3::from_shape_fn((3, 16, 16), |_| r.gen::<f64>());
        let p = bb.patchify(&x).unwrap();
        assert_eq!(p.dim(), (4, 192));
        // The adjoint of a permutation is its inverse.
        let back = bb.unpatchify_grad(&p);
        assert_eq!(x, back);
        let bad = Array3::zeros((3, 8, 8));
        assert!(bb.patchify(&bad).is_err());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut r = crate::rng::seeded(3);
        let bb = ToyBackbone::init(cfg(), &mut r).unwrap();
        let x = Array3::from_shape_fn((3, 16, 16), |_| r.gen::<f64>());
        let f1 = bb.forward(&x).unwrap();
        let f2 = bb.forward(&x).unwrap();
        assert_eq!(f1.tokens, f2.tokens);
        assert_eq!(f1.tokens.dim(), (4, 6));
        assert_eq!(f1.embed.len(), 6);
        assert!(f1.tokens.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = crate::rng::seeded(5);
        let bb = ToyBackbone::init(cfg(), &mut r).unwrap();
        let x = Array3::from_shape_fn((3, 16, 16), |_| r.gen::<f64>());
        // Scalar loss: random projections of tokens and embedding.
        let pt = Array2::from_shape_fn((4, 6), |_| r.gen::<f64>() - 0.5);
        let pe = Array1::from_shape_fn(6, |_| r.gen::<f64>() - 0.5);
        let (_, cache) = bb.forward_cached(&x).unwrap();
        let (gx, _) = bb.backward(&cache, Some(&pt), Some(&pe), false);
        let flat: Vec<f64> = x.iter().cloned().collect();
        for _ in 0..3 {
            let dir = nn::random_direction(flat.len(), &mut r);
            let mut f = |p: &[f64]| {
                let xi = Array3::from_shape_vec((3, 16, 16), p.to_vec()).unwrap();
                let feats = bb.forward(&xi).unwrap();
                let a: f64 = feats.tokens.iter().zip(pt.iter()).map(|(x, y)| x * y).sum();
                let b: f64 = feats.embed.iter().zip(pe.iter()).map(|(x, y)| x * y).sum();
                a + b
            };
            let num = nn::central_diff(&mut f, &flat, &dir, 1e-5);
            let ana: f64 = gx.iter().zip(&dir).map(|(g, d)| g * d).sum();
            assert!(
                nn::relative_error(num, ana) <= 1e-6,
                "backbone input grad: {num} vs {ana}"
            );
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut r = crate::rng::seeded(8);
        let bb = ToyBackbone::init(cfg(), &mut r).unwrap();
        let x = Array3::from_shape_fn((3, 16, 16), |_| r.gen::<f64>());
        let pt = Array2::from_shape_fn((4, 6), |_| r.gen::<f64>() - 0.5);
        let (_, cache) = bb.forward_cached(&x).unwrap();
        let (_, grads) = bb.backward(&cache, Some(&pt), None, true);
        let grads = grads.unwrap();
        let gslices = grads.grad_slices();
        // Check one direction in each parameter tensor.
        let mut bb_probe = bb.clone();
        let n_tensors = bb_probe.param_slices_mut().len();
        for ti in 0..n_tensors {
            let flat: Vec<f64> = {
                let mut m = bb.clone();
                m.param_slices_mut()[ti].to_vec()
            };
            let dir = nn::random_direction(flat.len(), &mut r);
            let mut f = |p: &[f64]| {
                let mut m = bb.clone();
                m.param_slices_mut()[ti].copy_from_slice(p);
                let feats = m.forward(&x).unwrap();
                feats.tokens.iter().zip(pt.iter()).map(|(x, y)| x * y).sum()
            };
            let num = nn::central_diff(&mut f, &flat, &dir, 1e-5);
            let ana: f64 = gslices[ti].iter().zip(&dir).map(|(g, d)| g * d).sum();
            assert!(
                nn::relative_error(num, ana) <= 1e-6 || (num.abs() < 1e-9 && ana.abs() < 1e-9),
                "param tensor {ti}: {num} vs {ana}"
            );
        }
    }

    #[test]
    fn named_tensors_align_with_param_slices() {
        let mut r = crate::rng::seeded(4);
        let mut bb = ToyBackbone::init(cfg(), &mut r).unwrap();
        let named = bb.named_tensors();
        let slices = bb.param_slices_mut();
        assert_eq!(named.len(), slices.len());
        for ((name, shape, data), slice) in named.iter().zip(slices.iter()) {
            assert_eq!(
                shape.iter().product::<usize>(),
                slice.len(),
                "tensor {name} shape mismatch"
            );
            assert_eq!(&data[..], &slice[..], "tensor {name} data mismatch");
        }
    }
}
