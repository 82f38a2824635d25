//! Forward compositing and its reverse-mode derivative.
//!
//! Splats are projected to isotropic screen-space Gaussians, sorted front to
//! back by camera-space depth of their centers and alpha-composited per pixel:
//! `w_i = f_i * prod_{j<i} (1 - f_j)`, with every channel the `w`-weighted sum
//! of the per-splat value (color, depth, semantic probabilities, or 1 for the
//! silhouette).

use std::cmp::Ordering;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::{Gaussian3D, ParamGrad, PARAMS_PER_SPLAT, P_COLOR, P_LOG_RADIUS, P_MU, P_OPACITY, P_SEMANTIC};
use crate::geometry::{CameraModel, CameraPose};
use crate::perception::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    /// Footprint radius in screen-space sigmas; `None` touches every pixel.
    pub footprint_sigmas: Option<f64>,
    /// Compositing stops once transmittance falls below this value.
    pub min_transmittance: f64,
    /// Upper clamp on per-pixel splat alpha.
    pub max_alpha: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            footprint_sigmas: Some(3.0),
            min_transmittance: 1e-4,
            max_alpha: 0.9999,
        }
    }
}

impl RenderOptions {
    /// Exhaustive settings without truncation; used for derivative checks.
    pub fn exact() -> Self {
        Self {
            footprint_sigmas: None,
            min_transmittance: 0.0,
            max_alpha: 0.9999,
        }
    }
}

/// Screen-space footprint of one splat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    /// Index of the source splat in the input slice.
    pub index: usize,
    pub center: (f64, f64),
    pub sigma: f64,
    /// Camera-space position of the mean.
    pub cam: Point3<f64>,
    /// Footprint radius in pixels; infinite when untruncated.
    pub footprint: f64,
}

impl Splat2D {
    #[inline]
    pub fn depth(&self) -> f64 {
        self.cam.z
    }
}

/// Projects a splat; `None` when its mean is behind the near plane or its
/// footprint misses the image.
pub fn project_gaussian(
    g: &Gaussian3D,
    cam: &CameraModel,
    pose: &CameraPose,
    opts: &RenderOptions,
) -> Option<Splat2D> {
    let pc = pose.inverse_transform_point(&g.mu);
    let (u, v) = cam.project(&pc)?;
    let sigma = g.radius() * cam.fx / pc.z;
    let footprint = match opts.footprint_sigmas {
        Some(k) => k * sigma,
        None => f64::INFINITY,
    };
    if footprint.is_finite()
        && (u + footprint < 0.0
            || v + footprint < 0.0
            || u - footprint > (cam.width - 1) as f64
            || v - footprint > (cam.height - 1) as f64)
    {
        return None;
    }
    Some(Splat2D {
        index: usize::MAX,
        center: (u, v),
        sigma,
        cam: pc,
        footprint,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub semantic: Vec<[f64; NUM_CLASSES]>,
    pub silhouette: Vec<f64>,
}

impl RenderedFrame {
    fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            color: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            semantic: vec![[0.0; NUM_CLASSES]; n],
            silhouette: vec![0.0; n],
        }
    }

    /// Silhouette-normalized depth, 0 where nothing was rendered.
    pub fn normalized_depth(&self, idx: usize) -> f64 {
        let s = self.silhouette[idx];
        if s > 1e-9 {
            self.depth[idx] / s
        } else {
            0.0
        }
    }
}

/// Sorted splats and per-pixel splat lists reused by [`backward`].
#[derive(Debug, Clone, Default)]
pub struct RenderState {
    pub splats: Vec<Splat2D>,
    /// CSR offsets into `entries`, one slot per pixel plus one.
    offsets: Vec<u32>,
    /// Positions into `splats`, front to back within each pixel.
    entries: Vec<u32>,
}

impl RenderState {
    pub fn pixel_splats(&self, idx: usize) -> &[u32] {
        &self.entries[self.offsets[idx] as usize..self.offsets[idx + 1] as usize]
    }

    /// Source indices of splats whose footprint touches the image.
    pub fn visible(&self) -> impl Iterator<Item = usize> + '_ {
        self.splats.iter().map(|s| s.index)
    }
}

fn depth_order(a: &(Splat2D, ParamGrad), b: &(Splat2D, ParamGrad)) -> Ordering {
    a.0.cam
        .z
        .total_cmp(&b.0.cam.z)
        .then_with(|| {
            a.1.iter()
                .zip(b.1.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Pixel rectangle `[u0, u1) x [v0, v1)` covered by a footprint.
fn footprint_box(s: &Splat2D, cam: &CameraModel) -> (usize, usize, usize, usize) {
    if !s.footprint.is_finite() {
        return (0, cam.width, 0, cam.height);
    }
    let clampi = |x: f64, hi: usize| x.max(0.0).min(hi as f64) as usize;
    (
        clampi((s.center.0 - s.footprint).ceil(), cam.width),
        clampi((s.center.0 + s.footprint).floor() + 1.0, cam.width),
        clampi((s.center.1 - s.footprint).ceil(), cam.height),
        clampi((s.center.1 + s.footprint).floor() + 1.0, cam.height),
    )
}

pub fn render(gaussians: &[Gaussian3D], cam: &CameraModel, pose: &CameraPose, opts: &RenderOptions) -> RenderedFrame {
    render_with_state(gaussians, cam, pose, opts).0
}

/// Alpha of splat `s` at pixel `(pu, pv)` before clamping, plus its Gaussian factor.
#[inline]
fn raw_alpha(s: &Splat2D, opacity: f64, pu: f64, pv: f64) -> (f64, f64) {
    let du = pu - s.center.0;
    let dv = pv - s.center.1;
    let d2 = du * du + dv * dv;
    if d2 > s.footprint * s.footprint {
        return (0.0, 0.0);
    }
    let e = (-d2 / (2.0 * s.sigma * s.sigma)).exp();
    (opacity * e, e)
}

pub fn render_with_state(
    gaussians: &[Gaussian3D],
    cam: &CameraModel,
    pose: &CameraPose,
    opts: &RenderOptions,
) -> (RenderedFrame, RenderState) {
    let mut projected: Vec<(Splat2D, ParamGrad)> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            project_gaussian(g, cam, pose, opts).map(|mut s| {
                s.index = i;
                (s, g.params())
            })
        })
        .collect();
    projected.sort_by(depth_order);
    let splats: Vec<Splat2D> = projected.into_iter().map(|(s, _)| s).collect();

    let n_pix = cam.pixel_count();
    let mut counts = vec![0u32; n_pix + 1];
    for s in &splats {
        let (u0, u1, v0, v1) = footprint_box(s, cam);
        for v in v0..v1 {
            for u in u0..u1 {
                counts[v * cam.width + u + 1] += 1;
            }
        }
    }
    for i in 0..n_pix {
        counts[i + 1] += counts[i];
    }
    let offsets = counts.clone();
    let mut cursor = counts;
    let mut entries = vec![0u32; offsets[n_pix] as usize];
    for (k, s) in splats.iter().enumerate() {
        let (u0, u1, v0, v1) = footprint_box(s, cam);
        for v in v0..v1 {
            for u in u0..u1 {
                let idx = v * cam.width + u;
                entries[cursor[idx] as usize] = k as u32;
                cursor[idx] += 1;
            }
        }
    }
    let state = RenderState {
        splats,
        offsets,
        entries,
    };

    let opacity: Vec<f64> = state.splats.iter().map(|s| gaussians[s.index].opacity()).collect();
    let semantic: Vec<[f64; NUM_CLASSES]> = state.splats.iter().map(|s| gaussians[s.index].semantic()).collect();
    let mut out = RenderedFrame::zeros(cam.width, cam.height);
    for v in 0..cam.height {
        for u in 0..cam.width {
            let idx = v * cam.width + u;
            let mut t = 1.0;
            let mut color = [0.0; 3];
            let mut depth = 0.0;
            let mut sem = [0.0; NUM_CLASSES];
            for &k in state.pixel_splats(idx) {
                if t < opts.min_transmittance {
                    break;
                }
                let k = k as usize;
                let s = &state.splats[k];
                let g = &gaussians[s.index];
                let (a, _) = raw_alpha(s, opacity[k], u as f64, v as f64);
                let f = a.min(opts.max_alpha);
                if f <= 0.0 {
                    continue;
                }
                let w = t * f;
                let p = &semantic[k];
                for c in 0..3 {
                    color[c] += w * g.color[c];
                }
                depth += w * s.cam.z;
                for c in 0..NUM_CLASSES {
                    sem[c] += w * p[c];
                }
                t *= 1.0 - f;
            }
            out.color[idx] = color;
            out.depth[idx] = depth;
            out.semantic[idx] = sem;
            out.silhouette[idx] = 1.0 - t;
        }
    }
    (out, state)
}

/// Upstream derivatives of a scalar loss with respect to every rendered channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrads {
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub semantic: Vec<[f64; NUM_CLASSES]>,
    pub silhouette: Vec<f64>,
}

impl PixelGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            color: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            semantic: vec![[0.0; NUM_CLASSES]; n],
            silhouette: vec![0.0; n],
        }
    }
}

const CHANNELS: usize = 3 + 1 + NUM_CLASSES + 1;

/// Propagates per-pixel channel derivatives to splat parameters. Returns one
/// gradient row per input splat (zero for splats that were not visible).
pub fn backward(
    gaussians: &[Gaussian3D],
    cam: &CameraModel,
    pose: &CameraPose,
    state: &RenderState,
    upstream: &PixelGrads,
    opts: &RenderOptions,
) -> Vec<ParamGrad> {
    let n_vis = state.splats.len();
    // derivatives w.r.t. splat-level quantities, indexed by sorted position
    let mut d_value = vec![[0.0f64; CHANNELS]; n_vis];
    let mut d_opacity = vec![0.0f64; n_vis];
    let mut d_center = vec![(0.0f64, 0.0f64); n_vis];
    let mut d_sigma = vec![0.0f64; n_vis];

    let values: Vec<[f64; CHANNELS]> = state
        .splats
        .iter()
        .map(|s| {
            let g = &gaussians[s.index];
            let p = g.semantic();
            let mut val = [0.0; CHANNELS];
            val[..3].copy_from_slice(&g.color);
            val[3] = s.cam.z;
            val[4..4 + NUM_CLASSES].copy_from_slice(&p);
            val[CHANNELS - 1] = 1.0;
            val
        })
        .collect();
    let opacities: Vec<f64> = state.splats.iter().map(|s| gaussians[s.index].opacity()).collect();

    struct Hit {
        k: usize,
        t: f64,
        f: f64,
        e: f64,
        clamped: bool,
    }
    let mut hits: Vec<Hit> = Vec::new();
    for v in 0..cam.height {
        for u in 0..cam.width {
            let idx = v * cam.width + u;
            let mut g_pix = [0.0; CHANNELS];
            g_pix[..3].copy_from_slice(&upstream.color[idx]);
            g_pix[3] = upstream.depth[idx];
            g_pix[4..4 + NUM_CLASSES].copy_from_slice(&upstream.semantic[idx]);
            g_pix[CHANNELS - 1] = upstream.silhouette[idx];
            if g_pix.iter().all(|&x| x == 0.0) {
                continue;
            }
            hits.clear();
            let mut t = 1.0;
            for &k in state.pixel_splats(idx) {
                if t < opts.min_transmittance {
                    break;
                }
                let k = k as usize;
                let (a, e) = raw_alpha(&state.splats[k], opacities[k], u as f64, v as f64);
                let clamped = a > opts.max_alpha;
                let f = a.min(opts.max_alpha);
                if f <= 0.0 {
                    continue;
                }
                hits.push(Hit { k, t, f, e, clamped });
                t *= 1.0 - f;
            }
            // tail = sum over later splats of w_j * (g . v_j)
            let mut tail = 0.0;
            for h in hits.iter().rev() {
                let gv: f64 = g_pix.iter().zip(&values[h.k]).map(|(a, b)| a * b).sum();
                let w = h.t * h.f;
                for c in 0..CHANNELS {
                    d_value[h.k][c] += g_pix[c] * w;
                }
                let d_f = h.t * gv - tail / (1.0 - h.f);
                tail += w * gv;
                if h.clamped {
                    continue;
                }
                let s = &state.splats[h.k];
                let du = u as f64 - s.center.0;
                let dv = v as f64 - s.center.1;
                let s2 = s.sigma * s.sigma;
                // f = o * exp(-d^2 / (2 sigma^2))
                d_opacity[h.k] += d_f * h.e;
                d_center[h.k].0 += d_f * h.f * du / s2;
                d_center[h.k].1 += d_f * h.f * dv / s2;
                d_sigma[h.k] += d_f * h.f * (du * du + dv * dv) / (s2 * s.sigma);
            }
        }
    }

    let rot = pose.rotation;
    let mut grads = vec![[0.0; PARAMS_PER_SPLAT]; gaussians.len()];
    for (k, s) in state.splats.iter().enumerate() {
        let g = &gaussians[s.index];
        let out = &mut grads[s.index];
        let (x, y, z) = (s.cam.x, s.cam.y, s.cam.z);
        let r = g.radius();
        // sigma = r fx / z ; u = fx x / z + cx ; v = fy y / z + cy
        let (gu, gv) = d_center[k];
        let d_x = gu * cam.fx / z;
        let d_y = gv * cam.fy / z;
        let d_z = -gu * cam.fx * x / (z * z) - gv * cam.fy * y / (z * z) - d_sigma[k] * s.sigma / z + d_value[k][3];
        let d_world = rot * Vector3::new(d_x, d_y, d_z);
        out[P_MU] = d_world.x;
        out[P_MU + 1] = d_world.y;
        out[P_MU + 2] = d_world.z;
        out[P_LOG_RADIUS] = d_sigma[k] * cam.fx / z * r;
        out[P_COLOR..P_COLOR + 3].copy_from_slice(&d_value[k][..3]);
        let o = opacities[k];
        out[P_OPACITY] = d_opacity[k] * o * (1.0 - o);
        let p = &values[k][4..4 + NUM_CLASSES];
        let gs = &d_value[k][4..4 + NUM_CLASSES];
        let dot: f64 = p.iter().zip(gs).map(|(a, b)| a * b).sum();
        for c in 0..NUM_CLASSES {
            out[P_SEMANTIC + c] = p[c] * (gs[c] - dot);
        }
    }
    grads
}
