//! Per-observation optimization and densification of the splat map.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{mapping_loss, LossMask, LossWeights};
use super::render::{backward, render, render_with_state, RenderOptions, RenderedFrame};
use super::{Gaussian3D, GaussianMap, PARAMS_PER_SPLAT, P_COLOR, P_LOG_RADIUS, P_MU, P_OPACITY, P_SEMANTIC};
use crate::error::{Error, Result};
use crate::geometry::camera_center;
use crate::perception::{SemanticClass, SemanticObservation, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub lr_mean: f64,
    pub lr_color: f64,
    pub lr_semantic: f64,
    pub lr_opacity: f64,
    pub lr_log_radius: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub mask: LossMask,
    /// Silhouette threshold of the well-observed mask.
    pub silhouette_threshold: f64,
    /// Pixels deeper than this are ignored.
    pub max_depth: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 60,
            lr_mean: 1e-5,
            lr_color: 2.5e-3,
            lr_semantic: 5e-2,
            lr_opacity: 5e-2,
            lr_log_radius: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-4,
            mask: LossMask::ValidDepth,
            silhouette_threshold: 0.9,
            max_depth: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_mean, self.lr_color, self.lr_semantic, self.lr_opacity, self.lr_log_radius];
        if lrs.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::config("learning rates must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    fn learning_rates(&self) -> [f64; PARAMS_PER_SPLAT] {
        let mut lr = [0.0; PARAMS_PER_SPLAT];
        lr[P_MU..P_MU + 3].fill(self.lr_mean);
        lr[P_LOG_RADIUS] = self.lr_log_radius;
        lr[P_COLOR..P_COLOR + 3].fill(self.lr_color);
        lr[P_OPACITY] = self.lr_opacity;
        lr[P_SEMANTIC..P_SEMANTIC + NUM_CLASSES].fill(self.lr_semantic);
        lr
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizeReport {
    /// Loss before each iteration, followed by the loss after the last one.
    pub losses: Vec<f64>,
    pub visible: usize,
}

fn loss_mask(rendered: &RenderedFrame, obs: &SemanticObservation, cfg: &OptimizerConfig) -> Vec<bool> {
    (0..obs.depth.len())
        .map(|i| {
            let valid = obs.depth_valid(i) && obs.depth[i] <= cfg.max_depth;
            match cfg.mask {
                LossMask::ValidDepth => valid,
                LossMask::WellObserved => valid && rendered.silhouette[i] > cfg.silhouette_threshold,
            }
        })
        .collect()
}

/// Runs `cfg.iterations` Adam steps against one observation. Moments start
/// from zero on every call.
pub fn optimize(
    map: &mut GaussianMap,
    obs: &SemanticObservation,
    weights: &LossWeights,
    cfg: &OptimizerConfig,
    opts: &RenderOptions,
) -> Result<OptimizeReport> {
    let mut report = OptimizeReport::default();
    if cfg.iterations == 0 || map.is_empty() {
        return Ok(report);
    }
    let lr = cfg.learning_rates();
    let n = map.len();
    let mut m1 = vec![[0.0; PARAMS_PER_SPLAT]; n];
    let mut m2 = vec![[0.0; PARAMS_PER_SPLAT]; n];
    let mut touched = vec![false; n];
    for it in 0..cfg.iterations {
        let (rendered, state) = render_with_state(&map.gaussians, &obs.camera, &obs.pose, opts);
        let mask = loss_mask(&rendered, obs, cfg);
        let (loss, upstream) = mapping_loss(&rendered, obs, weights, &mask)?;
        report.losses.push(loss.total);
        let grads = backward(&map.gaussians, &obs.camera, &obs.pose, &state, &upstream, opts);
        let t = (it + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for idx in state.visible() {
            touched[idx] = true;
        }
        for (i, g) in grads.iter().enumerate() {
            if !touched[i] {
                continue;
            }
            let mut p = map.gaussians[i].params();
            for k in 0..PARAMS_PER_SPLAT {
                m1[i][k] = cfg.beta1 * m1[i][k] + (1.0 - cfg.beta1) * g[k];
                m2[i][k] = cfg.beta2 * m2[i][k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let mh = m1[i][k] / bc1;
                let vh = m2[i][k] / bc2;
                p[k] -= lr[k] * mh / (vh.sqrt() + cfg.epsilon);
            }
            for c in P_COLOR..P_COLOR + 3 {
                p[c] = p[c].clamp(0.0, 1.0);
            }
            map.gaussians[i].set_params(&p);
        }
    }
    let rendered = render(&map.gaussians, &obs.camera, &obs.pose, opts);
    let mask = loss_mask(&rendered, obs, cfg);
    report.losses.push(mapping_loss(&rendered, obs, weights, &mask)?.0.total);
    report.visible = touched.iter().filter(|&&t| t).count();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub silhouette_threshold: f64,
    pub nontarget_keep_fraction: f64,
    /// Pixels whose rendered surface lies this far behind the observed one
    /// are densified even when covered.
    pub depth_error_threshold: f64,
    pub target_class: SemanticClass,
    pub max_depth: f64,
    pub initial_opacity: f64,
    /// Probability mass spread over the other classes at initialization.
    pub semantic_smoothing: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            silhouette_threshold: 0.9,
            nontarget_keep_fraction: 0.1,
            depth_error_threshold: 0.05,
            target_class: SemanticClass::Fruit,
            max_depth: 1.0,
            initial_opacity: 0.5,
            semantic_smoothing: 0.1,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("silhouette_threshold", self.silhouette_threshold),
            ("nontarget_keep_fraction", self.nontarget_keep_fraction),
            ("semantic_smoothing", self.semantic_smoothing),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.initial_opacity > 0.0 && self.initial_opacity < 1.0) {
            return Err(Error::config("initial_opacity must lie in (0, 1)"));
        }
        if !(self.depth_error_threshold > 0.0) {
            return Err(Error::config("depth_error_threshold must be positive"));
        }
        Ok(())
    }
}

/// Adds splats where the map does not yet explain the observation. Returns
/// the number of splats added.
pub fn densify(
    map: &mut GaussianMap,
    obs: &SemanticObservation,
    cfg: &DensifyConfig,
    opts: &RenderOptions,
    seed: u64,
) -> usize {
    let cam = &obs.camera;
    let rendered = render(&map.gaussians, cam, &obs.pose, opts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = camera_center(&obs.pose);
    let mut added = 0;
    for v in 0..cam.height {
        for u in 0..cam.width {
            let idx = v * cam.width + u;
            if !obs.depth_valid(idx) || obs.depth[idx] > cfg.max_depth {
                continue;
            }
            let d = obs.depth[idx];
            let uncovered = rendered.silhouette[idx] < cfg.silhouette_threshold;
            let behind = rendered.silhouette[idx] > 0.0
                && rendered.normalized_depth(idx) - d > cfg.depth_error_threshold;
            if !(uncovered || behind) {
                continue;
            }
            let label = obs.labels[idx] as usize;
            if label != cfg.target_class.index() && rng.gen::<f64>() >= cfg.nontarget_keep_fraction {
                continue;
            }
            let p = obs.pose * cam.back_project(u as f64, v as f64, d);
            debug_assert!((p - origin).norm() > 0.0);
            let mut sem = [cfg.semantic_smoothing / (NUM_CLASSES - 1) as f64; NUM_CLASSES];
            sem[label.min(NUM_CLASSES - 1)] = 1.0 - cfg.semantic_smoothing;
            map.gaussians.push(Gaussian3D::new(
                p,
                d / cam.fx,
                obs.color[idx],
                cfg.initial_opacity,
                sem,
            ));
            added += 1;
        }
    }
    added
}
