//! Next-best-view planning: candidate sampling, reachability, gain-based
//! selection and best-first path search over a joint-space graph.

pub mod arm;
pub mod gain;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{Point3, Vector3};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle_between, camera_center, look_along, look_at, CameraPose};
use crate::scene::RowGeometry;

pub use arm::{joint_distance, project_to_reachable, reachable_workspace, ArmModel, Joint, ProjectionConfig, Workspace};
pub use gain::{entropy, osamcep_gain, ray_bundle, uvc_gain, ProximityMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewpointKind {
    Exploitation,
    Exploration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewpointStatus {
    Candidate,
    Feasible,
    Infeasible,
    Executed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub id: usize,
    pub kind: ViewpointKind,
    pub status: ViewpointStatus,
    pub pose: CameraPose,
    pub joints: Option<Vec<f64>>,
    /// Raw gain before per-subset normalization.
    pub raw_gain: f64,
    pub gain: f64,
}

impl Viewpoint {
    pub fn new(id: usize, kind: ViewpointKind, pose: CameraPose) -> Self {
        Self {
            id,
            kind,
            status: ViewpointStatus::Candidate,
            pose,
            joints: None,
            raw_gain: 0.0,
            gain: 0.0,
        }
    }

    pub fn position(&self) -> Point3<f64> {
        camera_center(&self.pose)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Radius of the viewing sphere around each target cluster.
    pub sphere_radius: f64,
    pub n_azimuth: usize,
    pub n_elevation: usize,
    /// Elevation band in radians, measured from the horizontal plane.
    pub elevation_range: (f64, f64),
    /// Distance of the exploration plane from the row line.
    pub row_plane_offset: f64,
    /// Exploration grid columns (along the row) and rows (vertical).
    pub exploration_grid: (usize, usize),
    /// Vertical span of the exploration grid as fractions of plant height.
    pub exploration_height: (f64, f64),
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            sphere_radius: 0.4,
            n_azimuth: 10,
            n_elevation: 5,
            elevation_range: (-0.5, 0.9),
            row_plane_offset: 0.4,
            exploration_grid: (4, 3),
            exploration_height: (0.2, 0.9),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sphere_radius > 0.0) {
            return Err(Error::config("sphere_radius must be positive"));
        }
        if self.n_azimuth == 0 || self.n_elevation == 0 {
            return Err(Error::config("angular sampling counts must be positive"));
        }
        let (lo, hi) = self.elevation_range;
        let half_pi = std::f64::consts::FRAC_PI_2;
        if !(lo <= hi && lo > -half_pi && hi < half_pi) {
            return Err(Error::config("elevation band must lie inside (-pi/2, pi/2)"));
        }
        if !(self.row_plane_offset > 0.0) {
            return Err(Error::config("row_plane_offset must be positive"));
        }
        if self.exploration_grid.0 == 0 || self.exploration_grid.1 == 0 {
            return Err(Error::config("exploration grid must be nonempty"));
        }
        Ok(())
    }
}

/// Poses on a sphere around each cluster centroid, looking at the centroid.
/// Azimuths cover [0, 2pi) evenly; elevations take cell midpoints of the band.
pub fn sample_exploitation(centroids: &[Point3<f64>], cfg: &SamplingConfig, first_id: usize) -> Vec<Viewpoint> {
    let (lo, hi) = cfg.elevation_range;
    let mut out = Vec::new();
    for c in centroids {
        for i in 0..cfg.n_azimuth {
            let phi = std::f64::consts::TAU * i as f64 / cfg.n_azimuth as f64;
            for j in 0..cfg.n_elevation {
                let theta = lo + (hi - lo) * (j as f64 + 0.5) / cfg.n_elevation as f64;
                let dir = Vector3::new(theta.cos() * phi.cos(), theta.cos() * phi.sin(), theta.sin());
                let eye = c + dir * cfg.sphere_radius;
                out.push(Viewpoint::new(first_id + out.len(), ViewpointKind::Exploitation, look_at(eye, *c)));
            }
        }
    }
    out
}

/// Grid of poses on a vertical plane parallel to the row, on `side`, looking
/// perpendicularly at the row. `span` is the covered interval as fractions
/// of the row length.
pub fn sample_exploration(
    row: &RowGeometry,
    side: f64,
    span: (f64, f64),
    cfg: &SamplingConfig,
    first_id: usize,
) -> Vec<Viewpoint> {
    let normal = row.side_normal(side);
    let (nx, nz) = cfg.exploration_grid;
    let (h0, h1) = cfg.exploration_height;
    let (z_lo, z_hi) = row.height_extent;
    let mut out = Vec::new();
    for k in 0..nz {
        let z = z_lo + (z_hi - z_lo) * (h0 + (h1 - h0) * (k as f64 + 0.5) / nz as f64);
        for i in 0..nx {
            let s = span.0 + (span.1 - span.0) * (i as f64 + 0.5) / nx as f64;
            let mut eye = row.point_at(s) + normal * cfg.row_plane_offset;
            eye.z = z;
            out.push(Viewpoint::new(first_id + out.len(), ViewpointKind::Exploration, look_along(eye, -normal)));
        }
    }
    out
}

/// Projects every candidate into the workspace, marking it feasible (with
/// joints and a possibly slid pose) or infeasible.
pub fn make_reachable(candidates: &mut [Viewpoint], ws: &Workspace, cfg: &ProjectionConfig) {
    for vp in candidates.iter_mut() {
        match project_to_reachable(&vp.pose, ws, cfg) {
            Some((pose, joints, _)) => {
                vp.pose = pose;
                vp.joints = Some(joints);
                vp.status = ViewpointStatus::Feasible;
            }
            None => vp.status = ViewpointStatus::Infeasible,
        }
    }
}

/// True when `pose` repeats an executed pose within the given position and
/// viewing-direction tolerances.
pub fn is_duplicate(pose: &CameraPose, executed: &[CameraPose], max_distance: f64, max_angle: f64) -> bool {
    executed.iter().any(|e| {
        (camera_center(e) - camera_center(pose)).norm() <= max_distance && axis_angle_between(e, pose) <= max_angle
    })
}

/// Divides each subset's gains by that subset's maximum, merges them and
/// keeps the `top_k` best. Ties keep the lower id first.
pub fn normalize_and_select(exploit: &[Viewpoint], explore: &[Viewpoint], top_k: usize) -> Vec<Viewpoint> {
    let mut merged = Vec::with_capacity(exploit.len() + explore.len());
    for subset in [exploit, explore] {
        let max = subset.iter().map(|v| v.raw_gain).fold(0.0, f64::max);
        for v in subset {
            let mut v = v.clone();
            v.gain = if max > 0.0 { v.raw_gain / max } else { 0.0 };
            merged.push(v);
        }
    }
    merged.sort_by(|a, b| b.gain.total_cmp(&a.gain).then(a.id.cmp(&b.id)));
    merged.truncate(top_k);
    merged
}

/// Undirected graph over joint configurations. Node 0 is the start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanGraph {
    pub joints: Vec<Vec<f64>>,
    pub gains: Vec<f64>,
    /// Sorted neighbor lists.
    pub adjacency: Vec<Vec<usize>>,
}

impl PlanGraph {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn cost(&self, a: usize, b: usize) -> f64 {
        joint_distance(&self.joints[a], &self.joints[b])
    }
}

/// Connects each node to its `n_near` nearest nodes in joint space (ties by
/// index), then symmetrizes. The start node carries no gain.
pub fn build_graph(start_joints: &[f64], viewpoints: &[Viewpoint], n_near: usize) -> Result<PlanGraph> {
    let mut joints = vec![start_joints.to_vec()];
    let mut gains = vec![0.0];
    for v in viewpoints {
        let q = v
            .joints
            .as_ref()
            .ok_or_else(|| Error::argument(format!("viewpoint {} has no joint configuration", v.id)))?;
        if q.len() != start_joints.len() {
            return Err(Error::argument("joint vectors differ in length"));
        }
        joints.push(q.clone());
        gains.push(v.gain);
    }
    let n = joints.len();
    let mut adjacency = vec![Vec::new(); n];
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (joint_distance(&joints[i], &joints[j]), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(n_near) {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
        list.dedup();
    }
    Ok(PlanGraph { joints, gains, adjacency })
}

/// Outcome of the path search. `path` starts with the start node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub path: Vec<usize>,
    pub utility: f64,
    pub expansions: usize,
    /// False when the expansion budget ran out before optimality was proven.
    pub exhaustive: bool,
}

struct Partial {
    bound: f64,
    utility: f64,
    seq: usize,
    path: Vec<usize>,
    visited: u128,
}

impl PartialEq for Partial {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Partial {}

impl PartialOrd for Partial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Partial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound
            .total_cmp(&other.bound)
            .then(self.utility.total_cmp(&other.utility))
            .then(other.seq.cmp(&self.seq))
    }
}

/// Largest graph the path search accepts.
pub const MAX_PLAN_NODES: usize = 128;

/// Best-first search over simple paths from node 0. Extending a path ending
/// at `i` to a neighbor `j` off the path adds `gain[j] - beta * cost(i, j)`;
/// the start contributes nothing. Returns the path of maximum accumulated
/// utility among paths with at least one step, found by expanding partial
/// paths in order of an admissible upper bound. If `max_expansions` is hit
/// the best path found so far is returned.
pub fn best_first_plan(graph: &PlanGraph, beta: f64, max_expansions: usize) -> Result<PlanResult> {
    let n = graph.len();
    if n == 0 {
        return Err(Error::argument("plan graph is empty"));
    }
    if n > MAX_PLAN_NODES {
        return Err(Error::argument(format!("plan graph exceeds {MAX_PLAN_NODES} nodes")));
    }
    if !(beta >= 0.0) {
        return Err(Error::argument("cost weight must be nonnegative"));
    }
    // most a node can still add: its gain minus the cheapest way in
    let potential: Vec<f64> = (0..n)
        .map(|j| {
            let cheapest = graph.adjacency[j]
                .iter()
                .map(|&i| graph.cost(i, j))
                .fold(f64::INFINITY, f64::min);
            if cheapest.is_finite() {
                (graph.gains[j] - beta * cheapest).max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = potential[1..].iter().sum();

    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;
    heap.push(Partial {
        bound: total,
        utility: 0.0,
        seq,
        path: vec![0],
        visited: 1,
    });
    // best utility seen for each (end node, visited set)
    let mut dominance: FxHashMap<(usize, u128), f64> = FxHashMap::default();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut expansions = 0usize;
    let mut exhaustive = true;
    while let Some(p) = heap.pop() {
        if let Some((u, _)) = &best {
            if p.bound <= *u {
                break;
            }
        }
        if expansions >= max_expansions {
            exhaustive = false;
            break;
        }
        expansions += 1;
        let last = *p.path.last().unwrap();
        let remaining: f64 = p.bound - p.utility;
        for &j in &graph.adjacency[last] {
            if p.visited & (1u128 << j) != 0 {
                continue;
            }
            let utility = p.utility + graph.gains[j] - beta * graph.cost(last, j);
            let visited = p.visited | (1u128 << j);
            match dominance.get(&(j, visited)) {
                Some(&u) if u >= utility => continue,
                _ => {
                    dominance.insert((j, visited), utility);
                }
            }
            let mut path = p.path.clone();
            path.push(j);
            if best.as_ref().map_or(true, |(u, _)| utility > *u) {
                best = Some((utility, path.clone()));
            }
            seq += 1;
            heap.push(Partial {
                bound: utility + (remaining - potential[j]).max(0.0),
                utility,
                seq,
                path,
                visited,
            });
        }
    }
    let (utility, path) = best.unwrap_or((0.0, vec![0]));
    Ok(PlanResult {
        path,
        utility,
        expansions,
        exhaustive,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub sampling: SamplingConfig,
    pub projection: ProjectionConfig,
    pub top_k: usize,
    pub n_near: usize,
    /// Viewpoints executed per planning round.
    pub k_exec: usize,
    /// Weight of joint-space travel against gain.
    pub beta: f64,
    pub gain_stride: usize,
    /// Proximity radius for the semantic gain; `None` uses twice the octree
    /// resolution.
    pub proximity_radius: Option<f64>,
    pub dedup_distance: f64,
    pub dedup_angle: f64,
    pub max_expansions: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            projection: ProjectionConfig::default(),
            top_k: 20,
            n_near: 4,
            k_exec: 4,
            beta: 0.05,
            gain_stride: 4,
            proximity_radius: None,
            dedup_distance: 0.05,
            dedup_angle: 0.2,
            max_expansions: 20_000,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        if !(self.projection.slide_step > 0.0 && self.projection.max_slide >= 0.0 && self.projection.tolerance > 0.0) {
            return Err(Error::config("projection step, range and tolerance must be positive"));
        }
        if self.top_k == 0 || self.k_exec == 0 || self.n_near == 0 {
            return Err(Error::config("top_k, k_exec and n_near must be positive"));
        }
        if self.top_k + 1 > MAX_PLAN_NODES {
            return Err(Error::config(format!("top_k must be below {MAX_PLAN_NODES}")));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("beta must be nonnegative"));
        }
        if self.gain_stride == 0 {
            return Err(Error::config("gain_stride must be positive"));
        }
        if self.max_expansions == 0 {
            return Err(Error::config("max_expansions must be positive"));
        }
        Ok(())
    }
}
