//! Mapping loss over rendered depth, color and semantics.
//!
//! Per masked pixel:
//! `l1 |D - D*| + l2 (a sum_ch |C - C*| + (1 - a)(1 - SSIM(p))) + l3 conf^2 |S - S*|_1`
//! where `SSIM(p)` is the channel mean of the local structural similarity on
//! an 11x11 Gaussian window (sigma 1.5, zero padding).

use serde::{Deserialize, Serialize};

use super::render::{PixelGrads, RenderedFrame};
use crate::error::{Error, Result};
use crate::perception::{SemanticObservation, NUM_CLASSES};

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.1,
            alpha: 0.8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Pixels that enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Every pixel with a valid depth return in mapping range.
    ValidDepth,
    /// Valid depth and rendered silhouette above the threshold.
    WellObserved,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub depth: f64,
    pub color_l1: f64,
    pub ssim: f64,
    pub semantic: f64,
}

fn gaussian_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter with zero padding.
fn blur(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let mut acc = 0.0;
            for xx in lo..=hi {
                acc += k[xx + r - x] * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut acc = 0.0;
            for yy in lo..=hi {
                acc += k[yy + r - y] * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

struct SsimParts {
    value: Vec<f64>,
    d_mu: Vec<f64>,
    d_var: Vec<f64>,
    d_cov: Vec<f64>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
}

fn ssim_parts(x: &[f64], y: &[f64], w: usize, h: usize) -> SsimParts {
    let k = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = blur(x, w, h, &k);
    let mu_y = blur(y, w, h, &k);
    let e_xx = blur(&xx, w, h, &k);
    let e_yy = blur(&yy, w, h, &k);
    let e_xy = blur(&xy, w, h, &k);
    let n = w * h;
    let mut parts = SsimParts {
        value: vec![0.0; n],
        d_mu: vec![0.0; n],
        d_var: vec![0.0; n],
        d_cov: vec![0.0; n],
        mu_x: Vec::new(),
        mu_y: Vec::new(),
    };
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cxy = e_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * cxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        parts.value[i] = s;
        parts.d_mu[i] = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
        parts.d_var[i] = -s / b2;
        parts.d_cov[i] = 2.0 * a1 / (b1 * b2);
    }
    parts.mu_x = mu_x;
    parts.mu_y = mu_y;
    parts
}

/// Per-pixel SSIM of two single-channel images.
pub fn ssim_map(x: &[f64], y: &[f64], w: usize, h: usize) -> Vec<f64> {
    ssim_parts(x, y, w, h).value
}

/// Gradient of `sum_p q(p) SSIM(p)` with respect to `x`.
fn ssim_backward(parts: &SsimParts, x: &[f64], y: &[f64], q: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let n = w * h;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut c = vec![0.0; n];
    for i in 0..n {
        a[i] = q[i] * (parts.d_mu[i] - 2.0 * parts.mu_x[i] * parts.d_var[i] - parts.mu_y[i] * parts.d_cov[i]);
        b[i] = q[i] * parts.d_var[i];
        c[i] = q[i] * parts.d_cov[i];
    }
    let ga = blur(&a, w, h, &k);
    let gb = blur(&b, w, h, &k);
    let gc = blur(&c, w, h, &k);
    (0..n).map(|i| ga[i] + 2.0 * x[i] * gb[i] + y[i] * gc[i]).collect()
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss value and its derivative with respect to every rendered channel.
/// `mask` selects contributing pixels and is treated as a constant.
pub fn mapping_loss(
    rendered: &RenderedFrame,
    obs: &SemanticObservation,
    w: &LossWeights,
    mask: &[bool],
) -> Result<(LossBreakdown, PixelGrads)> {
    let (width, height) = (rendered.width, rendered.height);
    let n = width * height;
    if obs.camera.width != width
        || obs.camera.height != height
        || obs.depth.len() != n
        || obs.color.len() != n
        || obs.labels.len() != n
        || obs.confidence.len() != n
        || mask.len() != n
    {
        return Err(Error::argument("rendered frame, observation and mask shapes differ"));
    }
    let mut grads = PixelGrads::zeros(n);
    let mut out = LossBreakdown::default();
    let l_ssim = w.lambda2 * (1.0 - w.alpha);

    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let dd = rendered.depth[i] - obs.depth[i];
        out.depth += w.lambda1 * dd.abs();
        grads.depth[i] = w.lambda1 * sign(dd);

        for c in 0..3 {
            let dc = rendered.color[i][c] - obs.color[i][c];
            out.color_l1 += w.lambda2 * w.alpha * dc.abs();
            grads.color[i][c] = w.lambda2 * w.alpha * sign(dc);
        }

        let conf2 = obs.confidence[i] * obs.confidence[i];
        let label = obs.labels[i] as usize;
        for c in 0..NUM_CLASSES {
            let target = if c == label { 1.0 } else { 0.0 };
            let ds = rendered.semantic[i][c] - target;
            out.semantic += w.lambda3 * conf2 * ds.abs();
            grads.semantic[i][c] = w.lambda3 * conf2 * sign(ds);
        }
    }

    if l_ssim > 0.0 {
        let q: Vec<f64> = mask
            .iter()
            .map(|&m| if m { -l_ssim / 3.0 } else { 0.0 })
            .collect();
        for c in 0..3 {
            let x: Vec<f64> = rendered.color.iter().map(|p| p[c]).collect();
            let y: Vec<f64> = obs.color.iter().map(|p| p[c]).collect();
            let parts = ssim_parts(&x, &y, width, height);
            for i in 0..n {
                if mask[i] {
                    out.ssim += l_ssim * (1.0 - parts.value[i]) / 3.0;
                }
            }
            let gx = ssim_backward(&parts, &x, &y, &q, width, height);
            for i in 0..n {
                grads.color[i][c] += gx[i];
            }
        }
    }
    out.total = out.depth + out.color_l1 + out.ssim + out.semantic;
    Ok((out, grads))
}
