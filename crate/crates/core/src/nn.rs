//! Small f64 neural-net primitives with explicit forward and backward passes.
//!
//! Everything here is CPU-only and allocation-simple: layers are plain
//! structs, forward passes return caches where the backward pass needs them,
//! and backward passes optionally produce parameter gradients (attack loops
//! skip them, training wants them). All math is deterministic given input
//! order; no layer touches an RNG.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU activation `x * sigmoid(x)`, elementwise over a slice.
pub fn silu_slice(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * sigmoid(v);
    }
}

/// Derivative of SiLU at `x`.
pub fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Stable softplus `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Dense layer computing `y = x . w^T + b` with `w: (out, in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Parameter gradients for [`Linear`].
#[derive(Clone, Debug)]
pub struct LinearGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// He-style init scaled for SiLU-ish activations.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (2.0 / in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| {
            let u: f64 = rng.sample(rand_distr::StandardNormal);
            u * scale
        });
        Linear {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Forward over rows of `x: (n, in)`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("(_, {})", self.in_dim()),
                actual: format!("{:?}", x.dim()),
            });
        }
        Ok(x.dot(&self.w.t()) + &self.b)
    }

    /// Backward: returns gradient w.r.t. `x`, and parameter gradients when
    /// `want_params` is set. `x` must be the forward input, `gy` the output
    /// cotangent of shape `(n, out)`.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        gy: &Array2<f64>,
        want_params: bool,
    ) -> (Array2<f64>, Option<LinearGrad>) {
        let gx = gy.dot(&self.w);
        let grads = want_params.then(|| LinearGrad {
            w: gy.t().dot(x),
            b: gy.sum_axis(ndarray::Axis(0)),
        });
        (gx, grads)
    }
}

/// 3x3 same-padding convolution over `(c, h, w)` images, implemented with
/// im2col so the inner loop is one matmul. Weights are stored pre-flattened
/// as `(out, in * 9)`.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub in_ch: usize,
    pub out_ch: usize,
}

/// Parameter gradients for [`Conv3x3`].
#[derive(Clone, Debug)]
pub struct Conv3x3Grad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Conv3x3 {
    pub fn init(out_ch: usize, in_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_ch * 9) as f64;
        let scale = (2.0 / fan_in).sqrt();
        let w = Array2::from_shape_fn((out_ch, in_ch * 9), |_| {
            let u: f64 = rng.sample(rand_distr::StandardNormal);
            u * scale
        });
        Conv3x3 {
            w,
            b: Array1::zeros(out_ch),
            in_ch,
            out_ch,
        }
    }

    /// Unfolds `x` into a `(h * w, in_ch * 9)` patch matrix (zero padding).
    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let mut patches = Array2::zeros((h * w, c * 9));
        for ci in 0..c {
            for di in 0..3usize {
                for dj in 0..3usize {
                    let col = ci * 9 + di * 3 + dj;
                    for i in 0..h {
                        let si = i as isize + di as isize - 1;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + dj as isize - 1;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            patches[[i * w + j, col]] = x[[ci, si as usize, sj as usize]];
                        }
                    }
                }
            }
        }
        patches
    }

    /// Forward pass returning the output and the patch cache for backward.
    pub fn forward_cached(&self, x: &Array3<f64>) -> Result<(Array3<f64>, Array2<f64>)> {
        let (c, h, w) = x.dim();
        if c != self.in_ch {
            return Err(Error::ShapeMismatch {
                expected: format!("({}, _, _)", self.in_ch),
                actual: format!("{:?}", x.dim()),
            });
        }
        let patches = self.im2col(x);
        let y_mat = patches.dot(&self.w.t()) + &self.b;
        let mut y = Array3::zeros((self.out_ch, h, w));
        for o in 0..self.out_ch {
            for i in 0..h {
                for j in 0..w {
                    y[[o, i, j]] = y_mat[[i * w + j, o]];
                }
            }
        }
        Ok((y, patches))
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Backward from output cotangent `gy: (out, h, w)` using the cached
    /// patch matrix. Returns the input gradient and, when requested, the
    /// parameter gradients.
    pub fn backward(
        &self,
        patches: &Array2<f64>,
        gy: &Array3<f64>,
        want_params: bool,
    ) -> (Array3<f64>, Option<Conv3x3Grad>) {
        let (oc, h, w) = gy.dim();
        debug_assert_eq!(oc, self.out_ch);
        let mut gy_mat = Array2::zeros((h * w, oc));
        for o in 0..oc {
            for i in 0..h {
                for j in 0..w {
                    gy_mat[[i * w + j, o]] = gy[[o, i, j]];
                }
            }
        }
        let g_patches = gy_mat.dot(&self.w);
        let mut gx = Array3::zeros((self.in_ch, h, w));
        for ci in 0..self.in_ch {
            for di in 0..3usize {
                for dj in 0..3usize {
                    let col = ci * 9 + di * 3 + dj;
                    for i in 0..h {
                        let si = i as isize + di as isize - 1;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + dj as isize - 1;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            gx[[ci, si as usize, sj as usize]] += g_patches[[i * w + j, col]];
                        }
                    }
                }
            }
        }
        let grads = want_params.then(|| Conv3x3Grad {
            w: gy_mat.t().dot(patches),
            b: gy_mat.sum_axis(ndarray::Axis(0)),
        });
        (gx, grads)
    }
}

/// Average pooling with a square window `k`; spatial dims must divide by `k`.
pub fn avg_pool(x: &Array3<f64>, k: usize) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("spatial dims divisible by {k}"),
            actual: format!("{:?}", x.dim()),
        });
    }
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut y = Array3::zeros((c, oh, ow));
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for di in 0..k {
                    for dj in 0..k {
                        acc += x[[ci, i * k + di, j * k + dj]];
                    }
                }
                y[[ci, i, j]] = acc * inv;
            }
        }
    }
    Ok(y)
}

/// Backward of [`avg_pool`]: spreads each output cotangent evenly.
pub fn avg_pool_backward(gy: &Array3<f64>, k: usize) -> Array3<f64> {
    let (c, oh, ow) = gy.dim();
    let inv = 1.0 / (k * k) as f64;
    let mut gx = Array3::zeros((c, oh * k, ow * k));
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let v = gy[[ci, i, j]] * inv;
                for di in 0..k {
                    for dj in 0..k {
                        gx[[ci, i * k + di, j * k + dj]] = v;
                    }
                }
            }
        }
    }
    gx
}

/// Nearest-neighbour upsampling by integer factor `k`.
pub fn upsample_nearest(x: &Array3<f64>, k: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, h * k, w * k));
    for ci in 0..c {
        for i in 0..h * k {
            for j in 0..w * k {
                y[[ci, i, j]] = x[[ci, i / k, j / k]];
            }
        }
    }
    y
}

/// Backward of [`upsample_nearest`]: sums cotangents over each block.
pub fn upsample_nearest_backward(gy: &Array3<f64>, k: usize) -> Array3<f64> {
    let (c, oh, ow) = gy.dim();
    debug_assert!(oh % k == 0 && ow % k == 0);
    let mut gx = Array3::zeros((c, oh / k, ow / k));
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                gx[[ci, i / k, j / k]] += gy[[ci, i, j]];
            }
        }
    }
    gx
}

/// Axis resampling plan: for each output index, two source indices and the
/// interpolation weight of the second one.
fn bilinear_axis_plan(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let dst = src * factor;
    let f = factor as f64;
    (0..dst)
        .map(|o| {
            let s = (o as f64 + 0.5) / f - 0.5;
            let s0 = s.floor();
            let w1 = s - s0;
            let i0 = (s0.max(0.0) as usize).min(src - 1);
            let i1 = ((s0 + 1.0).max(0.0) as usize).min(src - 1);
            (i0, i1, w1)
        })
        .collect()
}

/// Bilinear upsampling by integer factor `k` (half-pixel centers, edges
/// clamped).
pub fn upsample_bilinear(x: &Array3<f64>, k: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let rows = bilinear_axis_plan(h, k);
    let cols = bilinear_axis_plan(w, k);
    let mut y = Array3::zeros((c, h * k, w * k));
    for ci in 0..c {
        for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                y[[ci, oy, ox]] = (1.0 - wy) * (1.0 - wx) * x[[ci, y0, x0]]
                    + (1.0 - wy) * wx * x[[ci, y0, x1]]
                    + wy * (1.0 - wx) * x[[ci, y1, x0]]
                    + wy * wx * x[[ci, y1, x1]];
            }
        }
    }
    y
}

/// Backward of [`upsample_bilinear`]: transpose scatter with the same
/// weights.
pub fn upsample_bilinear_backward(gy: &Array3<f64>, k: usize) -> Array3<f64> {
    let (c, oh, ow) = gy.dim();
    debug_assert!(oh % k == 0 && ow % k == 0);
    let (h, w) = (oh / k, ow / k);
    let rows = bilinear_axis_plan(h, k);
    let cols = bilinear_axis_plan(w, k);
    let mut gx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                let g = gy[[ci, oy, ox]];
                gx[[ci, y0, x0]] += (1.0 - wy) * (1.0 - wx) * g;
                gx[[ci, y0, x1]] += (1.0 - wy) * wx * g;
                gx[[ci, y1, x0]] += wy * (1.0 - wx) * g;
                gx[[ci, y1, x1]] += wy * wx * g;
            }
        }
    }
    gx
}

/// Row-wise stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Mean cross entropy of integer targets under row logits; returns the loss
/// and its gradient w.r.t. the logits.
pub fn cross_entropy_mean(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if n == 0 {
        return Err(Error::EmptyInput(
            "cross_entropy_mean needs at least one row",
        ));
    }
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} targets"),
            actual: format!("{}", targets.len()),
        });
    }
    let k = logits.ncols();
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (r, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::Domain(format!(
                "target class {t} out of range 0..{k}"
            )));
        }
        loss -= probs[[r, t]].max(1e-300).ln();
        grad[[r, t]] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    Ok((loss * inv, grad * inv))
}

/// Adam optimizer over an ordered list of parameter slices. The slice
/// ordering must stay fixed across calls; moment buffers are created on
/// first use.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. `params[i]` and `grads[i]` must be the same length.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "adam got {} param slices but {} grad slices",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract("adam param group count changed".into()));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Contract("adam slice length changed".into()));
            }
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / b1t;
                let vh = v[i] / b2t;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Central-difference directional derivative of `f` at `x0` along `dir`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], dir: &[f64], h: f64) -> f64 {
    let mut plus = x0.to_vec();
    let mut minus = x0.to_vec();
    for i in 0..x0.len() {
        plus[i] += h * dir[i];
        minus[i] -= h * dir[i];
    }
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error with an absolute floor, for gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Unit-norm random direction.
pub fn random_direction(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut d: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in &mut d {
        *v /= norm;
    }
    d
}
