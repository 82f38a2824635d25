//! Probabilistic semantic voxel map used for planning.
//!
//! Voxels live in a flat hash map addressed by integer keys
//! `floor(p / resolution)`. Each voxel stores an occupancy log-odds value and
//! per-class log weights that are normalized on read.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{camera_center, logit, point_segment_distance, sigmoid};
use crate::perception::{SemanticClass, SemanticObservation, NUM_CLASSES};
use crate::ply::{PlyCloud, PlyScalar};

pub type VoxelKey = [i32; 3];

const DUMP_MAGIC: &[u8; 4] = b"SOCT";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OctomapConfig {
    pub resolution: f64,
    pub max_range: f64,
    pub p_hit: f64,
    pub p_miss: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub occ_threshold: f64,
    /// Likelihood of the observed label under the voxel's true class.
    pub label_hit_likelihood: f64,
    /// Likelihood of the observed label under each other class.
    pub label_miss_likelihood: f64,
    /// Largest allowed gap between the best and any other class log weight;
    /// `None` leaves the weights unbounded.
    pub class_log_spread: Option<f64>,
    /// Pixels without a depth return clear free space up to `max_range`.
    pub clear_no_return: bool,
    /// Treat unknown voxels as obstacles in [`SemanticOctomap::collision_free`].
    pub unknown_is_occupied: bool,
}

impl Default for OctomapConfig {
    fn default() -> Self {
        Self {
            resolution: 0.05,
            max_range: 1.0,
            p_hit: 0.7,
            p_miss: 0.4,
            l_min: -2.0,
            l_max: 3.5,
            occ_threshold: 0.5,
            label_hit_likelihood: 0.8,
            label_miss_likelihood: 0.1,
            class_log_spread: None,
            clear_no_return: true,
            unknown_is_occupied: false,
        }
    }
}

impl OctomapConfig {
    pub fn with_resolution(resolution: f64) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) {
            return Err(Error::config("octree resolution must be positive"));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::config("max_range must be positive"));
        }
        if !(self.p_hit > 0.5 && self.p_hit < 1.0) {
            return Err(Error::config("p_hit must lie in (0.5, 1)"));
        }
        if !(self.p_miss > 0.0 && self.p_miss < 0.5) {
            return Err(Error::config("p_miss must lie in (0, 0.5)"));
        }
        if !(self.l_min < 0.0 && self.l_max > 0.0) {
            return Err(Error::config("log-odds clamps must satisfy l_min < 0 < l_max"));
        }
        if !(self.occ_threshold > 0.0 && self.occ_threshold < 1.0) {
            return Err(Error::config("occ_threshold must lie in (0, 1)"));
        }
        if !(self.label_hit_likelihood > 0.0 && self.label_miss_likelihood > 0.0) {
            return Err(Error::config("label likelihoods must be positive"));
        }
        if self.class_log_spread.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::config("class_log_spread must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticVoxel {
    pub log_odds: f64,
    pub class_log_weights: [f64; NUM_CLASSES],
}

impl Default for SemanticVoxel {
    fn default() -> Self {
        Self {
            log_odds: 0.0,
            class_log_weights: [0.0; NUM_CLASSES],
        }
    }
}

impl SemanticVoxel {
    pub fn occupancy(&self) -> f64 {
        sigmoid(self.log_odds)
    }

    pub fn class_distribution(&self) -> [f64; NUM_CLASSES] {
        softmax(&self.class_log_weights)
    }

    /// Most likely class; ties resolve to the lowest class id.
    pub fn argmax_class(&self) -> SemanticClass {
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if self.class_log_weights[c] > self.class_log_weights[best] {
                best = c;
            }
        }
        SemanticClass::ALL[best]
    }
}

pub fn softmax(w: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = w.map(|x| (x - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|x| x / s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelState {
    Unknown,
    Free,
    Occupied,
}

/// Result of casting one ray through the map.
#[derive(Debug, Clone, PartialEq)]
pub struct RayCast {
    pub traversed: Vec<VoxelKey>,
    pub hit: Option<VoxelKey>,
}

#[derive(Debug, Clone)]
pub struct SemanticOctomap {
    config: OctomapConfig,
    voxels: FxHashMap<VoxelKey, SemanticVoxel>,
    hit_delta: f64,
    miss_delta: f64,
    occ_log_odds: f64,
}

/// Key of the voxel containing `p`; a coordinate exactly on a face belongs to
/// the voxel on the side `dir` points into.
pub fn key_along(p: &Point3<f64>, dir: &Vector3<f64>, resolution: f64) -> VoxelKey {
    let mut key = [0i32; 3];
    for a in 0..3 {
        let c = p[a] / resolution;
        let f = c.floor();
        key[a] = if dir[a] < 0.0 && c == f { f as i32 - 1 } else { f as i32 };
    }
    key
}

pub fn key_of(p: &Point3<f64>, resolution: f64) -> VoxelKey {
    key_along(p, &Vector3::zeros(), resolution)
}

pub fn key_center(key: &VoxelKey, resolution: f64) -> Point3<f64> {
    Point3::new(
        (key[0] as f64 + 0.5) * resolution,
        (key[1] as f64 + 0.5) * resolution,
        (key[2] as f64 + 0.5) * resolution,
    )
}

/// Amanatides–Woo traversal of the voxels met by a ray, in order.
///
/// With `length = Some(l)` the walk ends with the voxel containing
/// `origin + l * dir`; otherwise it is unbounded.
#[derive(Debug, Clone)]
pub struct VoxelWalk {
    key: VoxelKey,
    step: [i32; 3],
    t_max: [f64; 3],
    t_delta: [f64; 3],
    end: Option<(VoxelKey, f64)>,
    done: bool,
}

impl VoxelWalk {
    /// `dir` must be a unit vector.
    pub fn new(origin: &Point3<f64>, dir: &Vector3<f64>, length: Option<f64>, resolution: f64) -> Self {
        let key = key_along(origin, dir, resolution);
        let mut step = [0; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            if dir[a] > 0.0 {
                step[a] = 1;
                t_max[a] = ((key[a] + 1) as f64 * resolution - origin[a]) / dir[a];
                t_delta[a] = resolution / dir[a];
            } else if dir[a] < 0.0 {
                step[a] = -1;
                t_max[a] = (key[a] as f64 * resolution - origin[a]) / dir[a];
                t_delta[a] = -resolution / dir[a];
            }
        }
        let end = length.map(|l| (key_along(&(origin + dir * l), dir, resolution), l));
        Self {
            key,
            step,
            t_max,
            t_delta,
            end,
            done: false,
        }
    }
}

impl Iterator for VoxelWalk {
    type Item = VoxelKey;

    fn next(&mut self) -> Option<VoxelKey> {
        if self.done {
            return None;
        }
        let current = self.key;
        let axis = if self.t_max[0] <= self.t_max[1] && self.t_max[0] <= self.t_max[2] {
            0
        } else if self.t_max[1] <= self.t_max[2] {
            1
        } else {
            2
        };
        match self.end {
            Some((end_key, length)) => {
                if current == end_key || self.t_max[axis] > length + 1e-12 {
                    self.done = true;
                }
            }
            None => {
                if !self.t_max[axis].is_finite() {
                    self.done = true;
                }
            }
        }
        if !self.done {
            self.key[axis] += self.step[axis];
            self.t_max[axis] += self.t_delta[axis];
        }
        Some(current)
    }
}

impl SemanticOctomap {
    pub fn new(config: OctomapConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            hit_delta: logit(config.p_hit),
            miss_delta: logit(config.p_miss),
            occ_log_odds: logit(config.occ_threshold),
            config,
            voxels: FxHashMap::default(),
        })
    }

    pub fn config(&self) -> &OctomapConfig {
        &self.config
    }

    pub fn resolution(&self) -> f64 {
        self.config.resolution
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn key(&self, p: &Point3<f64>) -> VoxelKey {
        key_of(p, self.config.resolution)
    }

    pub fn center(&self, key: &VoxelKey) -> Point3<f64> {
        key_center(key, self.config.resolution)
    }

    pub fn voxel(&self, key: &VoxelKey) -> Option<&SemanticVoxel> {
        self.voxels.get(key)
    }

    /// Iterates voxels in key order.
    pub fn voxels_sorted(&self) -> Vec<(VoxelKey, SemanticVoxel)> {
        let mut all: Vec<_> = self.voxels.iter().map(|(k, v)| (*k, *v)).collect();
        all.sort_unstable_by_key(|(k, _)| *k);
        all
    }

    pub fn state_of_key(&self, key: &VoxelKey) -> VoxelState {
        match self.voxels.get(key) {
            None => VoxelState::Unknown,
            Some(v) if v.log_odds >= self.occ_log_odds => VoxelState::Occupied,
            Some(_) => VoxelState::Free,
        }
    }

    pub fn voxel_state(&self, p: &Point3<f64>) -> VoxelState {
        self.state_of_key(&self.key(p))
    }

    pub fn class_distribution_of_key(&self, key: &VoxelKey) -> [f64; NUM_CLASSES] {
        self.voxels
            .get(key)
            .map(SemanticVoxel::class_distribution)
            .unwrap_or([1.0 / NUM_CLASSES as f64; NUM_CLASSES])
    }

    pub fn class_distribution(&self, p: &Point3<f64>) -> [f64; NUM_CLASSES] {
        self.class_distribution_of_key(&self.key(p))
    }

    /// Occupancy probability at `p`; 0.5 when unknown.
    pub fn occupancy(&self, p: &Point3<f64>) -> f64 {
        self.voxels.get(&self.key(p)).map_or(0.5, SemanticVoxel::occupancy)
    }

    pub fn occupied_keys(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<VoxelKey> = self
            .voxels
            .iter()
            .filter(|(_, v)| v.log_odds >= self.occ_log_odds)
            .map(|(k, _)| *k)
            .collect();
        keys.sort_unstable();
        keys
    }

    /// Occupied voxels whose most likely class is `class`.
    pub fn occupied_keys_of_class(&self, class: SemanticClass) -> Vec<VoxelKey> {
        let mut keys: Vec<VoxelKey> = self
            .voxels
            .iter()
            .filter(|(_, v)| v.log_odds >= self.occ_log_odds && v.argmax_class() == class)
            .map(|(k, _)| *k)
            .collect();
        keys.sort_unstable();
        keys
    }

    fn apply_occupancy(&mut self, key: VoxelKey, delta: f64) {
        let (lo, hi) = (self.config.l_min, self.config.l_max);
        let v = self.voxels.entry(key).or_default();
        v.log_odds = (v.log_odds + delta).clamp(lo, hi);
    }

    fn apply_label(&mut self, key: VoxelKey, label: usize) {
        let hit = self.config.label_hit_likelihood.ln();
        let miss = self.config.label_miss_likelihood.ln();
        let spread = self.config.class_log_spread.unwrap_or(f64::INFINITY);
        let v = self.voxels.entry(key).or_default();
        for (c, w) in v.class_log_weights.iter_mut().enumerate() {
            *w += if c == label { hit } else { miss };
        }
        // shift so the best class sits at zero; keeps weights bounded
        let m = v.class_log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for w in v.class_log_weights.iter_mut() {
            *w = (*w - m).max(-spread);
        }
    }

    /// Fuses one posed frame. Each voxel receives at most one occupancy update
    /// per frame, with hits taking precedence over misses; every hit pixel
    /// contributes one label observation to its endpoint voxel.
    pub fn insert_observation(&mut self, obs: &SemanticObservation) {
        let res = self.config.resolution;
        let max_range = self.config.max_range;
        let cam = &obs.camera;
        let origin = camera_center(&obs.pose);
        let mut hits: FxHashSet<VoxelKey> = FxHashSet::default();
        let mut misses: FxHashSet<VoxelKey> = FxHashSet::default();
        let mut labels: Vec<(VoxelKey, usize)> = Vec::new();
        for v in 0..cam.height {
            for u in 0..cam.width {
                let idx = v * cam.width + u;
                let ray = obs.pose.rotation * cam.pixel_ray(u as f64, v as f64);
                let dir = ray.normalize();
                let valid = obs.depth_valid(idx);
                let (length, hit) = if valid {
                    let range = obs.depth[idx] * ray.norm();
                    if range <= max_range {
                        (range, true)
                    } else {
                        (max_range, false)
                    }
                } else if self.config.clear_no_return && obs.depth[idx] >= cam.far {
                    (max_range, false)
                } else {
                    continue;
                };
                let end_key = key_along(&(origin + dir * length), &dir, res);
                for key in VoxelWalk::new(&origin, &dir, Some(length), res) {
                    if hit && key == end_key {
                        break;
                    }
                    misses.insert(key);
                }
                if hit {
                    hits.insert(end_key);
                    labels.push((end_key, obs.labels[idx] as usize));
                }
            }
        }
        let mut hit_keys: Vec<_> = hits.iter().copied().collect();
        hit_keys.sort_unstable();
        let mut miss_keys: Vec<_> = misses.into_iter().filter(|k| !hits.contains(k)).collect();
        miss_keys.sort_unstable();
        for key in miss_keys {
            self.apply_occupancy(key, self.miss_delta);
        }
        for key in hit_keys {
            self.apply_occupancy(key, self.hit_delta);
        }
        for (key, label) in labels {
            if label < NUM_CLASSES {
                self.apply_label(key, label);
            }
        }
    }

    /// Walks from `origin` along `direction` until the first occupied voxel
    /// (included) or `max_range`.
    pub fn ray_cast(&self, origin: &Point3<f64>, direction: &Vector3<f64>, max_range: f64) -> Result<RayCast> {
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::argument("ray direction must be nonzero"));
        }
        let dir = direction / n;
        let mut traversed = Vec::new();
        for key in VoxelWalk::new(origin, &dir, Some(max_range), self.config.resolution) {
            traversed.push(key);
            if self.state_of_key(&key) == VoxelState::Occupied {
                return Ok(RayCast {
                    traversed,
                    hit: Some(key),
                });
            }
        }
        Ok(RayCast { traversed, hit: None })
    }

    /// True when no occupied voxel (or unknown one, if so configured) comes
    /// within `robot_radius` of the segment. Voxels are treated as balls
    /// enclosing the cube, which errs on the side of reporting collisions.
    pub fn collision_free(&self, a: &Point3<f64>, b: &Point3<f64>, robot_radius: f64) -> bool {
        let res = self.config.resolution;
        let reach = robot_radius.max(0.0) + res * 3f64.sqrt() / 2.0;
        let blocked = |key: &VoxelKey| match self.state_of_key(key) {
            VoxelState::Occupied => true,
            VoxelState::Unknown => self.config.unknown_is_occupied,
            VoxelState::Free => false,
        };
        let lo = self.key(&Point3::from(a.coords.inf(&b.coords).add_scalar(-reach)));
        let hi = self.key(&Point3::from(a.coords.sup(&b.coords).add_scalar(reach)));
        let box_cells: i64 = (0..3).map(|i| (hi[i] - lo[i] + 1) as i64).product();
        if !self.config.unknown_is_occupied && box_cells > self.voxels.len() as i64 {
            return !self.voxels.keys().any(|k| {
                blocked(k) && point_segment_distance(&self.center(k), a, b) <= reach
            });
        }
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let k = [x, y, z];
                    if blocked(&k) && point_segment_distance(&self.center(&k), a, b) <= reach {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Directly sets a voxel; used by tools and tests.
    pub fn set_voxel(&mut self, key: VoxelKey, voxel: SemanticVoxel) {
        let mut v = voxel;
        v.log_odds = v.log_odds.clamp(self.config.l_min, self.config.l_max);
        self.voxels.insert(key, v);
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.config)?;
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let voxels = self.voxels_sorted();
        w.write_all(&(voxels.len() as u64).to_le_bytes())?;
        for (k, v) in voxels {
            for c in k {
                w.write_all(&c.to_le_bytes())?;
            }
            w.write_all(&v.log_odds.to_le_bytes())?;
            for c in v.class_log_weights {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::format("octree dump", "bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != DUMP_VERSION {
            return Err(Error::format("octree dump", format!("unsupported version {version}")));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let config: OctomapConfig = serde_json::from_slice(&header)?;
        let mut map = SemanticOctomap::new(config)?;
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let n = u64::from_le_bytes(buf8);
        for _ in 0..n {
            let mut key = [0i32; 3];
            for c in key.iter_mut() {
                *c = read_u32(&mut r)? as i32;
            }
            let log_odds = read_f64(&mut r)?;
            let mut w = [0.0; NUM_CLASSES];
            for c in w.iter_mut() {
                *c = read_f64(&mut r)?;
            }
            map.voxels.insert(
                key,
                SemanticVoxel {
                    log_odds,
                    class_log_weights: w,
                },
            );
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::read(path)?.as_slice())
    }

    /// Occupied voxel centers with their most likely class id.
    pub fn occupied_ply(&self) -> PlyCloud {
        let keys = self.occupied_keys();
        let classes = keys
            .iter()
            .map(|k| self.voxels[k].argmax_class().id() as f64)
            .collect();
        PlyCloud::new(keys.iter().map(|k| self.center(k)).collect()).with_property(
            "class",
            PlyScalar::UChar,
            classes,
        )
    }
}

impl PartialEq for SemanticOctomap {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.voxels == other.voxels
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
