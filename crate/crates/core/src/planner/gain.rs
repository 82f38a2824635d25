//! Information gain of candidate viewpoints, evaluated by casting a strided
//! pixel bundle through the semantic octree.

use nalgebra::Point3;
use rustc_hash::{FxHashMap, FxHashSet};

use crate::geometry::{camera_center, CameraModel, CameraPose};
use crate::octomap::{SemanticOctomap, VoxelKey, VoxelState, VoxelWalk};
use crate::perception::SemanticClass;

/// Unit world-space directions of every `stride`-th pixel, starting at the
/// middle of the first stride cell.
pub fn ray_bundle(camera: &CameraModel, pose: &CameraPose, stride: usize) -> Vec<nalgebra::Vector3<f64>> {
    let stride = stride.max(1);
    let first = stride / 2;
    let mut out = Vec::new();
    for v in (first..camera.height).step_by(stride) {
        for u in (first..camera.width).step_by(stride) {
            let d = pose.rotation * camera.pixel_ray(u as f64, v as f64);
            out.push(d.normalize());
        }
    }
    out
}

/// Walks every bundle ray up to `max_range` and collects distinct voxels.
/// `keep(state)` decides whether a traversed voxel is collected; each ray
/// stops at the first occupied voxel, which is passed to `keep` too.
fn frustum_voxels(
    map: &SemanticOctomap,
    camera: &CameraModel,
    pose: &CameraPose,
    stride: usize,
    keep: impl Fn(VoxelState) -> bool,
) -> FxHashSet<VoxelKey> {
    let origin = camera_center(pose);
    let res = map.resolution();
    let range = map.config().max_range;
    let mut seen = FxHashSet::default();
    for dir in ray_bundle(camera, pose, stride) {
        for key in VoxelWalk::new(&origin, &dir, Some(range), res) {
            let state = map.state_of_key(&key);
            if keep(state) {
                seen.insert(key);
            }
            if state == VoxelState::Occupied {
                break;
            }
        }
    }
    seen
}

/// Number of distinct unknown voxels seen before each ray's first occupied voxel.
pub fn uvc_gain(map: &SemanticOctomap, camera: &CameraModel, pose: &CameraPose, stride: usize) -> f64 {
    frustum_voxels(map, camera, pose, stride, |s| s == VoxelState::Unknown).len() as f64
}

/// Counts, for every voxel key, the occupied target-class voxels whose
/// centers lie within `radius` of that key's center.
#[derive(Debug, Clone, Default)]
pub struct ProximityMap {
    counts: FxHashMap<VoxelKey, u32>,
}

impl ProximityMap {
    pub fn new(map: &SemanticOctomap, target: SemanticClass, radius: f64) -> Self {
        let res = map.resolution();
        let reach = (radius / res).floor() as i32;
        let r2 = (radius / res).powi(2) + 1e-9;
        let mut offsets = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if ((dx * dx + dy * dy + dz * dz) as f64) <= r2 {
                        offsets.push([dx, dy, dz]);
                    }
                }
            }
        }
        let mut counts: FxHashMap<VoxelKey, u32> = FxHashMap::default();
        for k in map.occupied_keys_of_class(target) {
            for o in &offsets {
                *counts.entry([k[0] + o[0], k[1] + o[1], k[2] + o[2]]).or_default() += 1;
            }
        }
        Self { counts }
    }

    pub fn count(&self, key: &VoxelKey) -> u32 {
        self.counts.get(key).copied().unwrap_or(0)
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Semantic entropy gain: over the distinct unknown voxels in the frustum and
/// the occupied voxel terminating each ray, sums class entropy weighted by
/// one plus the number of nearby target-class voxels.
pub fn osamcep_gain(
    map: &SemanticOctomap,
    proximity: &ProximityMap,
    camera: &CameraModel,
    pose: &CameraPose,
    stride: usize,
) -> f64 {
    let mut keys: Vec<VoxelKey> = frustum_voxels(map, camera, pose, stride, |s| s != VoxelState::Free)
        .into_iter()
        .collect();
    // fixed summation order keeps the result independent of hashing
    keys.sort_unstable();
    keys.iter()
        .map(|k| entropy(&map.class_distribution_of_key(k)) * (1.0 + proximity.count(k) as f64))
        .sum()
}

/// Center of the voxel at which a ray from `pose` through pixel `(u, v)`
/// first meets an occupied voxel, if any.
pub fn first_occupied(
    map: &SemanticOctomap,
    camera: &CameraModel,
    pose: &CameraPose,
    u: f64,
    v: f64,
) -> Option<Point3<f64>> {
    let dir = (pose.rotation * camera.pixel_ray(u, v)).normalize();
    let hit = map.ray_cast(&camera_center(pose), &dir, map.config().max_range).ok()?.hit?;
    Some(map.center(&hit))
}
