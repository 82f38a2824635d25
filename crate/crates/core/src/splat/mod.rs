//! Isotropic semantic Gaussian splat map.
//!
//! Each splat is stored in unconstrained form: log radius, opacity logit and
//! semantic logits. Color is stored directly and projected back to `[0, 1]`
//! after every optimizer step.

mod loss;
mod optim;
mod render;

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{logit, sigmoid};
use crate::octomap::softmax;
use crate::perception::{SemanticClass, NUM_CLASSES};
use crate::ply::{PlyCloud, PlyScalar};

pub use loss::{mapping_loss, ssim_map, LossBreakdown, LossMask, LossWeights};
pub use optim::{densify, optimize, DensifyConfig, OptimizeReport, OptimizerConfig};
pub use render::{
    backward, project_gaussian, render, render_with_state, PixelGrads, RenderOptions, RenderState,
    RenderedFrame, Splat2D,
};

/// Number of scalar parameters per splat.
pub const PARAMS_PER_SPLAT: usize = 11;
pub const P_MU: usize = 0;
pub const P_LOG_RADIUS: usize = 3;
pub const P_COLOR: usize = 4;
pub const P_OPACITY: usize = 7;
pub const P_SEMANTIC: usize = 8;

pub type ParamGrad = [f64; PARAMS_PER_SPLAT];

const CHECKPOINT_MAGIC: &[u8; 4] = b"GSPL";
const CHECKPOINT_VERSION: u32 = 1;
/// f32 fields per checkpoint record: mu(3), radius, color(3), opacity, semantic(3).
const CHECKPOINT_FIELDS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub mu: Point3<f64>,
    pub log_radius: f64,
    pub color: [f64; 3],
    pub opacity_logit: f64,
    pub semantic_logits: [f64; NUM_CLASSES],
}

impl Gaussian3D {
    /// Builds a splat from constrained values. `semantic` must be a
    /// probability vector with positive entries.
    pub fn new(mu: Point3<f64>, radius: f64, color: [f64; 3], opacity: f64, semantic: [f64; NUM_CLASSES]) -> Self {
        Self {
            mu,
            log_radius: radius.ln(),
            color,
            opacity_logit: logit(opacity.clamp(1e-12, 1.0 - 1e-12)),
            semantic_logits: semantic.map(|p| p.max(1e-12).ln()),
        }
    }

    #[inline]
    pub fn radius(&self) -> f64 {
        self.log_radius.exp()
    }

    #[inline]
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    #[inline]
    pub fn semantic(&self) -> [f64; NUM_CLASSES] {
        softmax(&self.semantic_logits)
    }

    /// Most likely class; ties resolve to the lowest class id.
    pub fn argmax_class(&self) -> SemanticClass {
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if self.semantic_logits[c] > self.semantic_logits[best] {
                best = c;
            }
        }
        SemanticClass::ALL[best]
    }

    pub fn params(&self) -> ParamGrad {
        let mut p = [0.0; PARAMS_PER_SPLAT];
        p[P_MU..P_MU + 3].copy_from_slice(self.mu.coords.as_slice());
        p[P_LOG_RADIUS] = self.log_radius;
        p[P_COLOR..P_COLOR + 3].copy_from_slice(&self.color);
        p[P_OPACITY] = self.opacity_logit;
        p[P_SEMANTIC..P_SEMANTIC + NUM_CLASSES].copy_from_slice(&self.semantic_logits);
        p
    }

    pub fn set_params(&mut self, p: &ParamGrad) {
        self.mu = Point3::new(p[P_MU], p[P_MU + 1], p[P_MU + 2]);
        self.log_radius = p[P_LOG_RADIUS];
        self.color.copy_from_slice(&p[P_COLOR..P_COLOR + 3]);
        self.opacity_logit = p[P_OPACITY];
        self.semantic_logits
            .copy_from_slice(&p[P_SEMANTIC..P_SEMANTIC + NUM_CLASSES]);
    }
}

/// `o * exp(-|x - mu|^2 / (2 r^2))`.
pub fn eval_gaussian(g: &Gaussian3D, x: &Point3<f64>) -> f64 {
    let r = g.radius();
    g.opacity() * (-(x - g.mu).norm_squared() / (2.0 * r * r)).exp()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianMap {
    pub gaussians: Vec<Gaussian3D>,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Removes splats with opacity below `min_opacity` or radius above `max_radius`.
    pub fn prune(&mut self, min_opacity: f64, max_radius: f64) -> usize {
        let before = self.gaussians.len();
        self.gaussians
            .retain(|g| g.opacity() >= min_opacity && g.radius() <= max_radius);
        before - self.gaussians.len()
    }

    /// Centers of splats whose most likely class is `class` and whose opacity
    /// is at least `min_opacity`.
    pub fn class_points(&self, class: SemanticClass, min_opacity: f64) -> Vec<Point3<f64>> {
        self.gaussians
            .iter()
            .filter(|g| g.argmax_class() == class && g.opacity() >= min_opacity)
            .map(|g| g.mu)
            .collect()
    }

    /// Versioned binary checkpoint of f32 records.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(CHECKPOINT_FIELDS as u32).to_le_bytes())?;
        w.write_all(&(self.gaussians.len() as u64).to_le_bytes())?;
        for g in &self.gaussians {
            let s = g.semantic();
            let rec: [f64; CHECKPOINT_FIELDS] = [
                g.mu.x,
                g.mu.y,
                g.mu.z,
                g.radius(),
                g.color[0],
                g.color[1],
                g.color[2],
                g.opacity(),
                s[0],
                s[1],
                s[2],
            ];
            for v in rec {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let bad = |reason: String| Error::format("splat checkpoint", reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        r.read_exact(&mut b4)?;
        let fields = u32::from_le_bytes(b4) as usize;
        if fields != CHECKPOINT_FIELDS {
            return Err(bad(format!("expected {CHECKPOINT_FIELDS} fields, found {fields}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut gaussians = Vec::with_capacity(n);
        let mut rec = [0f64; CHECKPOINT_FIELDS];
        for _ in 0..n {
            for v in rec.iter_mut() {
                r.read_exact(&mut b4)?;
                *v = f32::from_le_bytes(b4) as f64;
            }
            gaussians.push(Gaussian3D::new(
                Point3::new(rec[0], rec[1], rec[2]),
                rec[3],
                [rec[4], rec[5], rec[6]],
                rec[7],
                [rec[8], rec[9], rec[10]],
            ));
        }
        Ok(Self { gaussians })
    }

    /// Size in bytes of the checkpoint for the current map.
    pub fn checkpoint_size(&self) -> usize {
        4 + 4 + 4 + 8 + self.gaussians.len() * CHECKPOINT_FIELDS * 4
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.checkpoint_size());
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::fs::read(path)?.as_slice())
    }

    /// Splat means colored by their most likely class.
    pub fn to_ply(&self) -> PlyCloud {
        let palette = [[230.0, 40.0, 30.0], [40.0, 160.0, 40.0], [120.0, 100.0, 80.0]];
        let classes: Vec<usize> = self.gaussians.iter().map(|g| g.argmax_class().index()).collect();
        let channel = |c: usize| classes.iter().map(|&k| palette[k][c]).collect::<Vec<f64>>();
        PlyCloud::new(self.gaussians.iter().map(|g| g.mu).collect())
            .with_property("red", PlyScalar::UChar, channel(0))
            .with_property("green", PlyScalar::UChar, channel(1))
            .with_property("blue", PlyScalar::UChar, channel(2))
            .with_property(
                "class",
                PlyScalar::UChar,
                classes.iter().map(|&k| k as f64).collect(),
            )
    }
}
