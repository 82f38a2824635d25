//! Serial revolute arm, its discretized reachable workspace, and projection
//! of camera poses into that workspace.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{camera_center, optical_axis, CameraPose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    /// Rotation axis in the frame of the previous link.
    pub axis: Vector3<f64>,
    /// Link translation applied after the joint rotation.
    pub offset: Vector3<f64>,
    pub limits: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmModel {
    pub joints: Vec<Joint>,
    pub steps_per_joint: usize,
    /// Largest workspace the discretization may produce.
    pub max_workspace: usize,
}

impl Default for ArmModel {
    /// Six revolute joints with 0.5 m of links in the base frame, where +x
    /// points toward the crop row and +z up.
    fn default() -> Self {
        use std::f64::consts::FRAC_PI_2;
        let j = |axis: Vector3<f64>, offset: [f64; 3], limits: (f64, f64)| Joint {
            axis,
            offset: Vector3::from(offset),
            limits,
        };
        Self {
            joints: vec![
                j(Vector3::z(), [0.0, 0.0, 0.05], (-FRAC_PI_2, FRAC_PI_2)),
                j(Vector3::y(), [0.0, 0.0, 0.17], (-FRAC_PI_2, FRAC_PI_2)),
                j(Vector3::y(), [0.0, 0.0, 0.15], (-2.4, 0.6)),
                j(Vector3::z(), [0.0, 0.0, 0.06], (-FRAC_PI_2, FRAC_PI_2)),
                j(Vector3::y(), [0.0, 0.0, 0.05], (-FRAC_PI_2, FRAC_PI_2)),
                j(Vector3::x(), [0.0, 0.0, 0.02], (-FRAC_PI_2, FRAC_PI_2)),
            ],
            steps_per_joint: 5,
            max_workspace: 20_000,
        }
    }
}

impl ArmModel {
    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::config("arm needs at least one joint"));
        }
        if self.joints.iter().any(|j| !(j.limits.0 < j.limits.1)) {
            return Err(Error::config("joint limits must satisfy low < high"));
        }
        if self.joints.iter().any(|j| j.axis.norm() == 0.0) {
            return Err(Error::config("joint axes must be nonzero"));
        }
        if self.steps_per_joint < 2 {
            return Err(Error::config("joint discretization needs at least 2 steps"));
        }
        Ok(())
    }

    pub fn reach(&self) -> f64 {
        self.joints.iter().map(|j| j.offset.norm()).sum()
    }

    /// Tip pose in the arm base frame.
    pub fn forward_kinematics(&self, q: &[f64]) -> Isometry3<f64> {
        let mut t = Isometry3::identity();
        for (joint, &angle) in self.joints.iter().zip(q) {
            let rot = UnitQuaternion::from_scaled_axis(joint.axis.normalize() * angle);
            t = t * Isometry3::from_parts(Translation3::identity(), rot) * Translation3::from(joint.offset);
        }
        t
    }

    /// Joint values of the discretization grid for one joint.
    pub fn joint_samples(&self, j: usize) -> Vec<f64> {
        let (lo, hi) = self.joints[j].limits;
        let n = self.steps_per_joint;
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }
}

/// Forward kinematics of the full joint grid, indexed by tip position.
pub struct Workspace {
    /// World pose of the arm base.
    pub base: Isometry3<f64>,
    pub configs: Vec<Vec<f64>>,
    pub positions: Vec<Point3<f64>>,
    /// Configuration index of each indexed position.
    slots: Vec<usize>,
    tree: ImmutableKdTree<f64, 3>,
}

impl std::fmt::Debug for Workspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workspace")
            .field("base", &self.base)
            .field("poses", &self.configs.len())
            .finish()
    }
}

pub fn reachable_workspace(arm: &ArmModel, base: Isometry3<f64>) -> Result<Workspace> {
    arm.validate()?;
    let total = (arm.steps_per_joint as u128).checked_pow(arm.joints.len() as u32);
    match total {
        Some(t) if t <= arm.max_workspace as u128 => {}
        _ => {
            return Err(Error::config(format!(
                "workspace of {} joints x {} steps exceeds the cap of {}",
                arm.joints.len(),
                arm.steps_per_joint,
                arm.max_workspace
            )))
        }
    }
    let samples: Vec<Vec<f64>> = (0..arm.joints.len()).map(|j| arm.joint_samples(j)).collect();
    let mut configs = Vec::new();
    let mut q = vec![0usize; arm.joints.len()];
    loop {
        configs.push(q.iter().enumerate().map(|(j, &i)| samples[j][i]).collect::<Vec<f64>>());
        // odometer increment, last joint fastest
        let mut j = arm.joints.len();
        loop {
            if j == 0 {
                break;
            }
            j -= 1;
            q[j] += 1;
            if q[j] < arm.steps_per_joint {
                break;
            }
            q[j] = 0;
            if j == 0 {
                j = usize::MAX;
                break;
            }
        }
        if j == usize::MAX {
            break;
        }
    }
    let positions: Vec<Point3<f64>> = configs
        .iter()
        .map(|c| base * Point3::from(arm.forward_kinematics(c).translation.vector))
        .collect();
    // many configurations share a tip position; index each position once,
    // keeping the first configuration that reaches it
    let mut seen: FxHashSet<[i64; 3]> = FxHashSet::default();
    let mut flat = Vec::new();
    let mut slots = Vec::new();
    for (i, p) in positions.iter().enumerate() {
        let key = [p.x, p.y, p.z].map(|c| (c * 1e9).round() as i64);
        if seen.insert(key) {
            flat.push([p.x, p.y, p.z]);
            slots.push(i);
        }
    }
    let tree = ImmutableKdTree::new_from_slice(&flat);
    Ok(Workspace {
        base,
        configs,
        positions,
        slots,
        tree,
    })
}

impl Workspace {
    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// Nearest workspace pose by tip position: `(index, distance)`.
    pub fn nearest(&self, p: &Point3<f64>) -> (usize, f64) {
        let nn = self.tree.nearest_one::<SquaredEuclidean>(&[p.x, p.y, p.z]);
        (self.slots[nn.item as usize], nn.distance.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub max_slide: f64,
    pub slide_step: f64,
    pub tolerance: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            max_slide: 0.25,
            slide_step: 0.01,
            tolerance: 0.04,
        }
    }
}

/// Slides `pose` along its optical axis, trying offsets in order of
/// increasing magnitude (backward before forward at equal magnitude), until
/// some workspace tip lies within `tolerance`. Returns the slid pose, the
/// matching joint configuration and the signed slide.
pub fn project_to_reachable(
    pose: &CameraPose,
    ws: &Workspace,
    cfg: &ProjectionConfig,
) -> Option<(CameraPose, Vec<f64>, f64)> {
    let axis = optical_axis(pose);
    let center = camera_center(pose);
    let steps = (cfg.max_slide / cfg.slide_step + 1e-9).floor() as i64;
    for k in 0..=steps {
        for sign in [-1.0, 1.0] {
            if k == 0 && sign > 0.0 {
                continue;
            }
            let s = sign * k as f64 * cfg.slide_step;
            let p = center + axis * s;
            let (idx, d) = ws.nearest(&p);
            if d <= cfg.tolerance {
                let mut slid = *pose;
                slid.translation.vector = p.coords;
                return Some((slid, ws.configs[idx].clone(), s));
            }
        }
    }
    None
}

/// Euclidean distance between two joint vectors.
pub fn joint_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
