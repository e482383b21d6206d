//! One-shot denoisers: a small learned conv net and a closed-form
//! Gaussian-prior baseline.
//!
//! Both take a noised image `x_t = sqrt(alpha_bar) * (x + sigma * eps)` and
//! estimate the clean image in one call. The learned net first rescales
//! `x_t` back to signal scale (`xbar = x_t / sqrt(alpha_bar)`), shrinks it
//! toward the dataset channel means with the Wiener factor
//! `v / (v + sigma^2)` for a typical per-pixel signal variance `v`, then
//! adds a learned correction produced by a two-scale conv stack (a pooled
//! context path upsampled and fused with a full-resolution path). The noise
//! scale enters as an extra input channel `sigma / (1 + sigma)` so one net
//! serves every timestep.

use crate::error::{Error, Result};
use crate::nn::{self, Conv3x3, Conv3x3Grad};
use crate::schedule::{sigma_from_alpha, NoiseSchedule};
use ndarray::{s, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Typical per-pixel variance of the toy images about the mean image; sets
/// the skip-path Wiener coefficient `v / (v + sigma^2)`.
const PIXEL_PRIOR_VAR: f64 = 0.04;

/// Architecture parameters for [`ToyDenoiser`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub low_channels: usize,
    pub high_channels: usize,
    pub pool: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            low_channels: 24,
            high_channels: 12,
            pool: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.low_channels == 0 || self.high_channels == 0 || self.pool == 0 {
            return Err(Error::Config("denoiser dims must be positive".into()));
        }
        Ok(())
    }
}

/// Learned one-shot denoiser.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    pub config: DenoiserConfig,
    /// Channel means of the training images; shrinkage target.
    pub data_mean: [f64; 3],
    pub conv_l1: Conv3x3,
    pub conv_l2: Conv3x3,
    pub conv_l3: Conv3x3,
    pub conv_h1: Conv3x3,
    pub conv_h2: Conv3x3,
}

/// Gradients for every denoiser parameter.
#[derive(Clone, Debug)]
pub struct DenoiserGrads {
    pub conv_l1: Conv3x3Grad,
    pub conv_l2: Conv3x3Grad,
    pub conv_l3: Conv3x3Grad,
    pub conv_h1: Conv3x3Grad,
    pub conv_h2: Conv3x3Grad,
}

/// Forward activations needed by [`ToyDenoiser::backward`].
pub struct DenoiserCache {
    sqrt_ab: f64,
    shrink: f64,
    pre_l1: Array3<f64>,
    patches_l1: ndarray::Array2<f64>,
    pre_l2: Array3<f64>,
    patches_l2: ndarray::Array2<f64>,
    patches_l3: ndarray::Array2<f64>,
    pre_h1: Array3<f64>,
    patches_h1: ndarray::Array2<f64>,
    patches_h2: ndarray::Array2<f64>,
}

fn silu3(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v * nn::sigmoid(v))
}

fn silu3_backward(pre: &Array3<f64>, gy: &Array3<f64>) -> Array3<f64> {
    let mut g = gy.clone();
    g.zip_mut_with(pre, |gv, &p| *gv *= nn::silu_deriv(p));
    g
}

impl ToyDenoiser {
    pub fn init(config: DenoiserConfig, data_mean: [f64; 3], rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config.low_channels;
        let h = config.high_channels;
        let mut conv_h2 = Conv3x3::init(3, h, rng);
        let mut conv_l3 = Conv3x3::init(3, c, rng);
        // The output convs start near zero so the untrained net is close to
        // the plain shrinkage estimate.
        conv_h2.w *= 0.1;
        conv_l3.w *= 0.1;
        Ok(ToyDenoiser {
            config,
            data_mean,
            conv_l1: Conv3x3::init(c, 4, rng),
            conv_l2: Conv3x3::init(c, c, rng),
            conv_l3,
            conv_h1: Conv3x3::init(h, 7, rng),
            conv_h2,
        })
    }

    fn check_input(&self, x_t: &Array3<f64>) -> Result<()> {
        let (c, h, w) = x_t.dim();
        let p = self.config.pool;
        if c != 3 || h % p != 0 || w % p != 0 || h == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("(3, multiple of {p}, multiple of {p})"),
                actual: format!("{:?}", x_t.dim()),
            });
        }
        Ok(())
    }

    /// Denoises and keeps the activation cache for [`Self::backward`].
    pub fn denoise_cached(
        &self,
        x_t: &Array3<f64>,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<(Array3<f64>, DenoiserCache)> {
        self.check_input(x_t)?;
        let (_, h, w) = x_t.dim();
        let p = self.config.pool;
        let ab = schedule.alpha_bar(t)?;
        let sigma = sigma_from_alpha(ab)?;
        let sqrt_ab = ab.sqrt();
        // Wiener coefficient for the skip path. Using the images' actual
        // per-pixel variance (rather than 1) keeps the skip near identity at
        // small sigma but lets almost no raw noise through at large sigma,
        // where the conv paths supply the estimate instead.
        let shrink = PIXEL_PRIOR_VAR / (PIXEL_PRIOR_VAR + sigma * sigma);
        let s_feat = sigma / (1.0 + sigma);

        let xbar = x_t.mapv(|v| v / sqrt_ab);
        let pooled = nn::avg_pool(&xbar, p)?;
        let mut low_in = Array3::zeros((4, h / p, w / p));
        low_in.slice_mut(s![0..3, .., ..]).assign(&pooled);
        low_in.slice_mut(s![3, .., ..]).fill(s_feat);
        let (pre_l1, patches_l1) = self.conv_l1.forward_cached(&low_in)?;
        let a1 = silu3(&pre_l1);
        let (pre_l2, patches_l2) = self.conv_l2.forward_cached(&a1)?;
        let a2 = silu3(&pre_l2);
        let (l3, patches_l3) = self.conv_l3.forward_cached(&a2)?;
        let up = nn::upsample_bilinear(&l3, p);

        let mut hi_in = Array3::zeros((7, h, w));
        hi_in.slice_mut(s![0..3, .., ..]).assign(&xbar);
        hi_in.slice_mut(s![3..6, .., ..]).assign(&up);
        hi_in.slice_mut(s![6, .., ..]).fill(s_feat);
        let (pre_h1, patches_h1) = self.conv_h1.forward_cached(&hi_in)?;
        let ah = silu3(&pre_h1);
        let (residual, patches_h2) = self.conv_h2.forward_cached(&ah)?;

        let mut out = Array3::zeros((3, h, w));
        for c in 0..3 {
            let m = self.data_mean[c];
            for i in 0..h {
                for j in 0..w {
                    out[[c, i, j]] = m + shrink * (xbar[[c, i, j]] - m) + residual[[c, i, j]];
                }
            }
        }
        Ok((
            out,
            DenoiserCache {
                sqrt_ab,
                shrink,
                pre_l1,
                patches_l1,
                pre_l2,
                patches_l2,
                patches_l3,
                pre_h1,
                patches_h1,
                patches_h2,
            },
        ))
    }

    pub fn denoise(
        &self,
        x_t: &Array3<f64>,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Array3<f64>> {
        Ok(self.denoise_cached(x_t, t, schedule)?.0)
    }

    /// Backward from the output cotangent to the noised input, with
    /// parameter gradients on request.
    pub fn backward(
        &self,
        cache: &DenoiserCache,
        gy: &Array3<f64>,
        want_params: bool,
    ) -> (Array3<f64>, Option<DenoiserGrads>) {
        let p = self.config.pool;
        // High-resolution path.
        let (g_ah, g_h2) = self.conv_h2.backward(&cache.patches_h2, gy, want_params);
        let g_pre_h1 = silu3_backward(&cache.pre_h1, &g_ah);
        let (g_hi_in, g_h1) = self
            .conv_h1
            .backward(&cache.patches_h1, &g_pre_h1, want_params);
        let g_xbar_direct = g_hi_in.slice(s![0..3, .., ..]).to_owned();
        let g_up = g_hi_in.slice(s![3..6, .., ..]).to_owned();
        // Low-resolution path.
        let g_l3 = nn::upsample_bilinear_backward(&g_up, p);
        let (g_a2, g_l3p) = self.conv_l3.backward(&cache.patches_l3, &g_l3, want_params);
        let g_pre_l2 = silu3_backward(&cache.pre_l2, &g_a2);
        let (g_a1, g_l2p) = self
            .conv_l2
            .backward(&cache.patches_l2, &g_pre_l2, want_params);
        let g_pre_l1 = silu3_backward(&cache.pre_l1, &g_a1);
        let (g_low_in, g_l1p) = self
            .conv_l1
            .backward(&cache.patches_l1, &g_pre_l1, want_params);
        let g_pooled = g_low_in.slice(s![0..3, .., ..]).to_owned();
        let g_xbar_pooled = nn::avg_pool_backward(&g_pooled, p);
        // Combine the three routes into xbar: shrinkage, high path, pool path.
        let mut g_xbar = g_xbar_direct + g_xbar_pooled;
        g_xbar.scaled_add(cache.shrink, gy);
        let g_x_t = g_xbar.mapv(|v| v / cache.sqrt_ab);
        let grads = want_params.then(|| DenoiserGrads {
            conv_l1: g_l1p.expect("requested"),
            conv_l2: g_l2p.expect("requested"),
            conv_l3: g_l3p.expect("requested"),
            conv_h1: g_h1.expect("requested"),
            conv_h2: g_h2.expect("requested"),
        });
        (g_x_t, grads)
    }

    /// Parameter slices in fixed order (low path then high path, weights
    /// before biases).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for conv in [
            &mut self.conv_l1,
            &mut self.conv_l2,
            &mut self.conv_l3,
            &mut self.conv_h1,
            &mut self.conv_h2,
        ] {
            out.push(conv.w.as_slice_mut().expect("standard layout"));
            out.push(conv.b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Named tensors aligned with [`Self::param_slices_mut`].
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (name, conv) in [
            ("den.l1", &self.conv_l1),
            ("den.l2", &self.conv_l2),
            ("den.l3", &self.conv_l3),
            ("den.h1", &self.conv_h1),
            ("den.h2", &self.conv_h2),
        ] {
            out.push((
                format!("{name}.w"),
                conv.w.shape().to_vec(),
                conv.w.iter().cloned().collect(),
            ));
            out.push((
                format!("{name}.b"),
                conv.b.shape().to_vec(),
                conv.b.to_vec(),
            ));
        }
        out
    }
}

impl DenoiserGrads {
    pub fn zeros_like(den: &ToyDenoiser) -> Self {
        let z = |c: &Conv3x3| Conv3x3Grad {
            w: ndarray::Array2::zeros(c.w.dim()),
            b: ndarray::Array1::zeros(c.b.len()),
        };
        DenoiserGrads {
            conv_l1: z(&den.conv_l1),
            conv_l2: z(&den.conv_l2),
            conv_l3: z(&den.conv_l3),
            conv_h1: z(&den.conv_h1),
            conv_h2: z(&den.conv_h2),
        }
    }

    pub fn grad_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for g in [
            &self.conv_l1,
            &self.conv_l2,
            &self.conv_l3,
            &self.conv_h1,
            &self.conv_h2,
        ] {
            out.push(g.w.as_slice().expect("standard layout"));
            out.push(g.b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn scaled_add(&mut self, other: &DenoiserGrads, w: f64) {
        for (a, b) in [
            (&mut self.conv_l1, &other.conv_l1),
            (&mut self.conv_l2, &other.conv_l2),
            (&mut self.conv_l3, &other.conv_l3),
            (&mut self.conv_h1, &other.conv_h1),
            (&mut self.conv_h2, &other.conv_h2),
        ] {
            a.w.scaled_add(w, &b.w);
            a.b.scaled_add(w, &b.b);
        }
    }
}

/// Closed-form posterior mean under an iid Gaussian pixel prior
/// `x ~ N(mu, rho^2)`: rescales to signal scale and shrinks toward `mu` by
/// `rho^2 / (rho^2 + sigma^2)`.
pub fn analytic_denoise(
    x_t: &Array3<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    mu: f64,
    rho: f64,
) -> Result<Array3<f64>> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::Domain(format!(
            "prior rho must be positive, got {rho}"
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let sigma = sigma_from_alpha(ab)?;
    let sqrt_ab = ab.sqrt();
    let k = rho * rho / (rho * rho + sigma * sigma);
    Ok(x_t.mapv(|v| mu + k * (v / sqrt_ab - mu)))
}
