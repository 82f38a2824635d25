//! Active-mapping loop and experiment orchestration.
//!
//! A run visits a fixed sequence of base waypoints along one row (first side
//! front to back, then the other side back to front). At each waypoint it
//! observes from a canonical pose, then alternates planning rounds and
//! viewpoint execution until the viewpoint budget is spent or the planner has
//! nothing executable left.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{baseline_fruit_cloud, BaselineConfig};
use crate::error::{Error, Result};
use crate::eval::{runtime_report, EvalConfig, MetricsReport, RuntimeBreakdown, TimingCategory, TimingLog};
use crate::geometry::{camera_center, look_along, CameraModel, CameraPose};
use crate::octomap::{OctomapConfig, SemanticOctomap};
use crate::perception::{corrupt_labels, mix_seed, NoiseConfig, SemanticClass, SemanticObservation};
use crate::planner::{
    build_graph, best_first_plan, is_duplicate, make_reachable, normalize_and_select, osamcep_gain,
    reachable_workspace, sample_exploitation, sample_exploration, uvc_gain, ArmModel, PlannerConfig,
    ProximityMap, Viewpoint, ViewpointStatus, Workspace,
};
use crate::ply::PlyCloud;
use crate::scene::{generate_scene, render_ground_truth, row_fruit_cloud, RowGeometry, Scene, SceneConfig};
use crate::splat::{densify, optimize, DensifyConfig, GaussianMap, LossWeights, OptimizerConfig, RenderOptions};
use crate::target::{analyze_points, cluster_volume, extract_target_points, ClusterConfig, FruitReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Hybrid,
    /// Octree-only baseline at the given voxel size.
    Octomap(f64),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Hybrid => write!(f, "hybrid"),
            Method::Octomap(res) => write!(f, "octomap-{res}"),
        }
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "hybrid" {
            return Ok(Method::Hybrid);
        }
        if let Some(res) = s.strip_prefix("octomap-") {
            if let Ok(r) = res.parse::<f64>() {
                if r > 0.0 {
                    return Ok(Method::Octomap(r));
                }
            }
        }
        Err(Error::config(format!("unknown method `{s}` (expected hybrid or octomap-<resolution>)")))
    }
}

/// Switches that remove one part of the pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Treat every segmentation confidence as one in the mapping loss.
    pub no_confidence: bool,
    /// Drop target-centered candidates; only row-plane candidates remain.
    pub exploration_only: bool,
    /// Keep every non-target densification candidate.
    pub no_downsample: bool,
}

impl Ablation {
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.no_confidence {
            parts.push("no-confidence");
        }
        if self.exploration_only {
            parts.push("exploration-only");
        }
        if self.no_downsample {
            parts.push("no-downsample");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Every frame is fused into the splat map before the next planning round.
    #[default]
    Serial,
    /// Splat optimization of the latest frames runs concurrently with
    /// planning, which reads the map as of the previous round.
    Pipelined,
}

/// Everything one row run needs. All randomness derives from
/// `scene.rng_seed` and `noise.rng_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub camera: CameraModel,
    pub noise: NoiseConfig,
    pub method: Method,
    pub ablation: Ablation,
    pub mode: ExecutionMode,
    pub waypoints_per_side: usize,
    pub max_viewpoints_per_waypoint: usize,
    /// Horizontal distance from the row line to the robot base.
    pub standoff: f64,
    /// Height of the arm base above the ground.
    pub mount_height: f64,
    /// Distance from the row line and height of the canonical camera pose.
    pub canonical_offset: f64,
    pub canonical_height: f64,
    pub max_rounds_per_waypoint: usize,
    pub robot_radius: f64,
    /// Planning octree of the hybrid pipeline.
    pub octree: OctomapConfig,
    pub baseline: BaselineConfig,
    pub planner: PlannerConfig,
    pub arm: ArmModel,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub densify: DensifyConfig,
    pub render: RenderOptions,
    pub cluster: ClusterConfig,
    pub eval: EvalConfig,
    /// Splats below this opacity are ignored when extracting fruit points.
    pub extract_min_opacity: f64,
    pub prune_min_opacity: f64,
    pub prune_max_radius: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            camera: CameraModel::default(),
            noise: NoiseConfig::noise_free(),
            method: Method::Hybrid,
            ablation: Ablation::default(),
            mode: ExecutionMode::Serial,
            waypoints_per_side: 4,
            max_viewpoints_per_waypoint: 10,
            standoff: 0.5,
            mount_height: 0.2,
            canonical_offset: 0.4,
            canonical_height: 0.35,
            max_rounds_per_waypoint: 10,
            robot_radius: 0.05,
            octree: OctomapConfig::default(),
            baseline: BaselineConfig::default(),
            planner: PlannerConfig::default(),
            arm: ArmModel::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            densify: DensifyConfig::default(),
            render: RenderOptions::default(),
            cluster: ClusterConfig::default(),
            eval: EvalConfig::default(),
            extract_min_opacity: 0.1,
            prune_min_opacity: 0.005,
            prune_max_radius: 0.05,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.camera.validate()?;
        self.noise.validate()?;
        self.octree.validate()?;
        self.baseline.validate()?;
        self.planner.validate()?;
        self.arm.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.densify.validate()?;
        self.cluster.validate()?;
        self.eval.validate()?;
        if let Method::Octomap(res) = self.method {
            if !(res > 0.0) {
                return Err(Error::config("baseline resolution must be positive"));
            }
        }
        if self.waypoints_per_side == 0 {
            return Err(Error::config("waypoints_per_side must be positive"));
        }
        if !(self.standoff > 0.0 && self.canonical_offset > 0.0) {
            return Err(Error::config("standoff and canonical_offset must be positive"));
        }
        if !(self.robot_radius >= 0.0) {
            return Err(Error::config("robot_radius must be nonnegative"));
        }
        Ok(())
    }

    /// Config with every ablation switch applied to the component configs.
    fn effective(&self) -> Self {
        let mut cfg = self.clone();
        if cfg.ablation.no_downsample {
            cfg.densify.nontarget_keep_fraction = 1.0;
        }
        cfg
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// One base waypoint: where the robot parks and which side it faces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub index: usize,
    /// +1 or -1, selecting the row side.
    pub side: f64,
    pub fraction: f64,
    pub base: Isometry3<f64>,
    pub canonical: CameraPose,
}

/// Waypoints at evenly spaced fractions of the row, first along the +side
/// in increasing fraction, then along the -side in decreasing fraction.
pub fn waypoints(row: &RowGeometry, cfg: &RunConfig) -> Vec<Waypoint> {
    let n = cfg.waypoints_per_side;
    let fractions: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let mut out = Vec::new();
    for side in [1.0, -1.0] {
        let order: Vec<f64> = if side > 0.0 {
            fractions.clone()
        } else {
            fractions.iter().rev().copied().collect()
        };
        for f in order {
            let normal = row.side_normal(side);
            let on_row = row.point_at(f);
            let mut base_pos = on_row + normal * cfg.standoff;
            base_pos.z = cfg.mount_height;
            let x = -normal;
            let z = Vector3::z();
            let y = z.cross(&x);
            let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
            let base = Isometry3::from_parts(
                Translation3::from(base_pos.coords),
                UnitQuaternion::from_rotation_matrix(&rot),
            );
            let mut eye = on_row + normal * cfg.canonical_offset;
            eye.z = cfg.canonical_height;
            out.push(Waypoint {
                index: out.len(),
                side,
                fraction: f,
                base,
                canonical: look_along(eye, -normal),
            });
        }
    }
    out
}

/// Noise-corrupted observation of the scene from `pose`.
pub fn observe(scene: &Scene, pose: &CameraPose, cfg: &RunConfig, stream_key: u64) -> SemanticObservation {
    let frame = render_ground_truth(scene, pose, &cfg.camera);
    corrupt_labels(&frame, &cfg.noise.for_frame(stream_key))
}

fn stream_key(waypoint: usize, frame: usize) -> u64 {
    ((waypoint as u64) << 32) | frame as u64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub frames: usize,
    pub executed_viewpoints: usize,
    pub planning_rounds: usize,
    pub skipped_waypoints: usize,
    pub infeasible_candidates: usize,
    pub collision_rejections: usize,
    pub peak_splats: usize,
    pub final_splats: usize,
    pub checkpoint_bytes: usize,
    pub octree_voxels: usize,
}

/// Everything a row run produces.
#[derive(Debug, Clone)]
pub struct RowOutcome {
    pub metrics: MetricsReport,
    pub fruits: FruitReport,
    pub stats: RunStats,
    pub timings: TimingLog,
    pub splats: Option<GaussianMap>,
    pub octree: SemanticOctomap,
    pub recon: Vec<Point3<f64>>,
    pub ground_truth: Vec<Point3<f64>>,
    /// Executed camera poses in order, canonical poses included.
    pub trajectory: Vec<CameraPose>,
}

struct SplatState {
    map: GaussianMap,
    pending: Vec<(SemanticObservation, u64)>,
    peak: usize,
}

impl SplatState {
    fn integrate(&mut self, cfg: &RunConfig) -> Result<()> {
        for (obs, seed) in self.pending.drain(..) {
            let obs = if cfg.ablation.no_confidence {
                obs.with_unit_confidence()
            } else {
                obs
            };
            densify(&mut self.map, &obs, &cfg.densify, &cfg.render, seed);
            self.peak = self.peak.max(self.map.len());
            optimize(&mut self.map, &obs, &cfg.loss, &cfg.optimizer, &cfg.render)?;
            self.map.prune(cfg.prune_min_opacity, cfg.prune_max_radius);
        }
        Ok(())
    }
}

/// Fruit points and clusters of the current map state.
fn fruit_analysis(cfg: &RunConfig, splats: Option<&GaussianMap>, octree: &SemanticOctomap) -> (Vec<Point3<f64>>, FruitReport) {
    match (cfg.method, splats) {
        (Method::Hybrid, Some(map)) => {
            let pts = extract_target_points(map, SemanticClass::Fruit, cfg.extract_min_opacity);
            let report = analyze_points(&pts, &cfg.cluster);
            (pts, report)
        }
        _ => {
            let pts = baseline_fruit_cloud(octree);
            let report = analyze_points(&pts, &cfg.baseline.cluster_config(&cfg.cluster));
            (pts, report)
        }
    }
}

/// Samples, scores and orders the next viewpoints to execute.
fn plan_round(
    cfg: &RunConfig,
    octree: &SemanticOctomap,
    ws: &Workspace,
    row: &RowGeometry,
    wp: &Waypoint,
    centroids: &[Point3<f64>],
    start_joints: &[f64],
    executed: &[CameraPose],
    stats: &mut RunStats,
) -> Result<Vec<Viewpoint>> {
    let pc = &cfg.planner;
    let mount = Point3::from(wp.base.translation.vector);
    let max_reach = cfg.arm.reach() + pc.sampling.sphere_radius + pc.projection.max_slide + pc.projection.tolerance;
    let mut exploit = Vec::new();
    if !cfg.ablation.exploration_only {
        // clusters out of reach cannot produce feasible candidates
        let near: Vec<Point3<f64>> = centroids
            .iter()
            .filter(|c| (*c - mount).norm() <= max_reach)
            .copied()
            .collect();
        exploit = sample_exploitation(&near, &pc.sampling, 0);
    }
    let half = 0.5 / cfg.waypoints_per_side as f64;
    let span = ((wp.fraction - half).max(0.0), (wp.fraction + half).min(1.0));
    let mut explore = sample_exploration(row, wp.side, span, &pc.sampling, exploit.len());

    let dedup = |v: &Vec<Viewpoint>| -> Vec<Viewpoint> {
        v.iter()
            .filter(|vp| !is_duplicate(&vp.pose, executed, pc.dedup_distance, pc.dedup_angle))
            .cloned()
            .collect()
    };
    exploit = dedup(&exploit);
    explore = dedup(&explore);
    make_reachable(&mut exploit, ws, &pc.projection);
    make_reachable(&mut explore, ws, &pc.projection);
    let keep = |v: Vec<Viewpoint>, stats: &mut RunStats| -> Vec<Viewpoint> {
        let (ok, bad): (Vec<_>, Vec<_>) = v.into_iter().partition(|vp| vp.status == ViewpointStatus::Feasible);
        stats.infeasible_candidates += bad.len();
        // sliding can land a candidate on an executed pose
        ok.into_iter()
            .filter(|vp| !is_duplicate(&vp.pose, executed, pc.dedup_distance, pc.dedup_angle))
            .collect()
    };
    let mut exploit = keep(exploit, stats);
    let mut explore = keep(explore, stats);

    let radius = pc.proximity_radius.unwrap_or(2.0 * octree.resolution());
    let proximity = ProximityMap::new(octree, SemanticClass::Fruit, radius);
    for vp in &mut exploit {
        vp.raw_gain = osamcep_gain(octree, &proximity, &cfg.camera, &vp.pose, pc.gain_stride);
    }
    for vp in &mut explore {
        vp.raw_gain = uvc_gain(octree, &cfg.camera, &vp.pose, pc.gain_stride);
    }
    let selected = normalize_and_select(&exploit, &explore, pc.top_k);
    if selected.is_empty() {
        return Ok(Vec::new());
    }
    let graph = build_graph(start_joints, &selected, pc.n_near)?;
    let plan = best_first_plan(&graph, pc.beta, pc.max_expansions)?;
    Ok(plan
        .path
        .iter()
        .skip(1)
        .take(pc.k_exec)
        .map(|&i| selected[i - 1].clone())
        .collect())
}

/// Runs the active-mapping loop along one row and evaluates the result.
pub fn run_row(scene: &Scene, row_id: usize, cfg: &RunConfig) -> Result<RowOutcome> {
    cfg.validate()?;
    let cfg = &cfg.effective();
    let row = scene
        .rows
        .iter()
        .find(|r| r.row_id == row_id)
        .ok_or_else(|| Error::argument(format!("scene has no row {row_id}")))?
        .clone();
    let octree_cfg = match cfg.method {
        Method::Hybrid => cfg.octree,
        Method::Octomap(res) => BaselineConfig {
            resolution: res,
            ..cfg.baseline
        }
        .octree_config(),
    };
    let mut octree = SemanticOctomap::new(octree_cfg)?;
    let mut splats = (cfg.method == Method::Hybrid).then(|| SplatState {
        map: GaussianMap::new(),
        pending: Vec::new(),
        peak: 0,
    });
    let mut timings = TimingLog::default();
    let mut stats = RunStats::default();
    let mut trajectory: Vec<CameraPose> = Vec::new();
    // clusters visible to the planner
    let mut centroids: Vec<Point3<f64>> = Vec::new();

    for wp in waypoints(&row, cfg) {
        let ws = reachable_workspace(&cfg.arm, wp.base)?;
        let Some((canonical, joints, _)) = crate::planner::project_to_reachable(&wp.canonical, &ws, &cfg.planner.projection)
        else {
            warn!("waypoint {}: canonical pose unreachable, skipped", wp.index);
            stats.skipped_waypoints += 1;
            continue;
        };
        let eye = camera_center(&canonical);
        if !octree.collision_free(&eye, &eye, cfg.robot_radius) {
            warn!("waypoint {}: canonical pose in collision, skipped", wp.index);
            stats.skipped_waypoints += 1;
            continue;
        }
        let mut frame_idx = 0usize;
        let mut take_frame = |pose: &CameraPose,
                              octree: &mut SemanticOctomap,
                              splats: &mut Option<SplatState>,
                              timings: &mut TimingLog,
                              stats: &mut RunStats| {
            let key = stream_key(wp.index, frame_idx);
            frame_idx += 1;
            let obs = timings.time(TimingCategory::Execution, || observe(scene, pose, cfg, key));
            timings.time(TimingCategory::OctomapMapping, || octree.insert_observation(&obs));
            if let Some(s) = splats.as_mut() {
                s.pending.push((obs, mix_seed(cfg.scene.rng_seed ^ 0x5EED_0F5A, key)));
            }
            stats.frames += 1;
        };
        take_frame(&canonical, &mut octree, &mut splats, &mut timings, &mut stats);
        trajectory.push(canonical);
        let mut current_joints = joints;
        let mut current_pose = canonical;
        let mut executed_here = 0usize;

        for _round in 0..cfg.max_rounds_per_waypoint {
            if executed_here >= cfg.max_viewpoints_per_waypoint {
                break;
            }
            let plan = match (cfg.mode, splats.as_mut()) {
                (ExecutionMode::Pipelined, Some(s)) => {
                    // plan against the previous snapshot while the new frames are fused
                    let snapshot = centroids.clone();
                    let (gs, plan) = std::thread::scope(|scope| {
                        let handle = scope.spawn(|| {
                            let t = std::time::Instant::now();
                            let r = s.integrate(cfg);
                            (r, t.elapsed().as_secs_f64())
                        });
                        let t = std::time::Instant::now();
                        let plan = plan_round(
                            cfg, &octree, &ws, &row, &wp, &snapshot, &current_joints, &trajectory, &mut stats,
                        );
                        let planning = t.elapsed().as_secs_f64();
                        let (r, gs) = handle.join().expect("splat worker panicked");
                        ((r, gs, planning), plan)
                    });
                    let (r, gs_secs, plan_secs) = gs;
                    r?;
                    timings.record(TimingCategory::GsMapping, gs_secs);
                    timings.record(TimingCategory::Planning, plan_secs);
                    timings.gs_overlapped += gs_secs.min(plan_secs);
                    centroids = timings
                        .time(TimingCategory::GsMapping, || fruit_analysis(cfg, Some(&s.map), &octree))
                        .1
                        .centroids();
                    plan?
                }
                _ => {
                    if let Some(s) = splats.as_mut() {
                        timings.time(TimingCategory::GsMapping, || s.integrate(cfg))?;
                    }
                    centroids = timings
                        .time(TimingCategory::Planning, || {
                            fruit_analysis(cfg, splats.as_ref().map(|s| &s.map), &octree)
                        })
                        .1
                        .centroids();
                    timings.time(TimingCategory::Planning, || {
                        plan_round(cfg, &octree, &ws, &row, &wp, &centroids, &current_joints, &trajectory, &mut stats)
                    })?
                }
            };
            stats.planning_rounds += 1;
            let mut progressed = false;
            for vp in plan {
                if executed_here >= cfg.max_viewpoints_per_waypoint {
                    break;
                }
                let from = camera_center(&current_pose);
                let to = vp.position();
                if !octree.collision_free(&from, &to, cfg.robot_radius) {
                    stats.collision_rejections += 1;
                    continue;
                }
                take_frame(&vp.pose, &mut octree, &mut splats, &mut timings, &mut stats);
                trajectory.push(vp.pose);
                current_pose = vp.pose;
                current_joints = vp.joints.clone().expect("feasible viewpoints carry joints");
                executed_here += 1;
                stats.executed_viewpoints += 1;
                progressed = true;
            }
            if !progressed {
                break;
            }
        }
        info!(
            "waypoint {} done: {} viewpoints, {} frames so far",
            wp.index, executed_here, stats.frames
        );
    }
    if let Some(s) = splats.as_mut() {
        timings.time(TimingCategory::GsMapping, || s.integrate(cfg))?;
    }

    let (recon, fruits) = fruit_analysis(cfg, splats.as_ref().map(|s| &s.map), &octree);
    let gt = row_fruit_cloud(scene, row_id, cfg.eval.gt_surface_density);
    let gt_hull: f64 = gt
        .volumes
        .iter()
        .map(|(id, _)| {
            let pts: Vec<Point3<f64>> = gt
                .points
                .iter()
                .zip(&gt.point_instances)
                .filter(|(_, i)| *i == id)
                .map(|(p, _)| *p)
                .collect();
            cluster_volume(&pts).volume
        })
        .sum();
    let metrics = MetricsReport::compute(
        &recon,
        &gt.points,
        fruits.count,
        gt.count,
        fruits.total_volume,
        gt.total_volume(),
        gt_hull,
        cfg.eval.tau,
    );
    stats.octree_voxels = octree.len();
    let splat_map = splats.map(|s| {
        stats.peak_splats = s.peak;
        stats.final_splats = s.map.len();
        stats.checkpoint_bytes = s.map.checkpoint_size();
        s.map
    });
    Ok(RowOutcome {
        metrics,
        fruits,
        stats,
        timings,
        splats: splat_map,
        octree,
        recon,
        ground_truth: gt.points,
        trajectory,
    })
}

/// One cell of an experiment: metrics of one row under one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub method: String,
    pub variant: String,
    pub p_correct: f64,
    pub row_id: usize,
    pub metrics: Option<MetricsReport>,
    pub stats: Option<RunStats>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Template for every cell; seeds, method, noise level and ablation are
    /// overwritten per cell.
    pub run: RunConfig,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub p_correct: Vec<f64>,
    pub ablations: Vec<Ablation>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            seeds: vec![1],
            methods: vec![Method::Hybrid],
            p_correct: vec![1.0],
            ablations: vec![Ablation::default()],
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if self.seeds.is_empty() || self.methods.is_empty() || self.p_correct.is_empty() || self.ablations.is_empty() {
            return Err(Error::config("seeds, methods, p_correct and ablations must be nonempty"));
        }
        Ok(())
    }

    /// Loads TOML or JSON, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Run config of one cell.
    pub fn cell(&self, seed: u64, method: Method, p_correct: f64, ablation: Ablation) -> RunConfig {
        let mut run = self.run.clone();
        run.scene.rng_seed = seed;
        run.noise.rng_seed = seed;
        run.noise.p_correct = p_correct;
        run.method = method;
        // ablations only change the splat pipeline
        run.ablation = if method == Method::Hybrid { ablation } else { Ablation::default() };
        run
    }
}

/// Artifacts of one run written by [`export_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedFiles {
    pub metrics_json: PathBuf,
    pub timings_json: PathBuf,
    pub recon_ply: PathBuf,
    pub gt_ply: PathBuf,
    pub octree_ply: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    config_hash: &'a str,
    seed: u64,
    method: String,
    variant: String,
    p_correct: f64,
    row_id: usize,
    metrics: &'a MetricsReport,
    fruits: &'a FruitReport,
    stats: &'a RunStats,
}

/// Deterministic metrics JSON of one run; timings are excluded.
pub fn metrics_json(cfg: &RunConfig, row_id: usize, outcome: &RowOutcome) -> Result<String> {
    let hash = cfg.hash();
    let file = MetricsFile {
        config_hash: &hash,
        seed: cfg.scene.rng_seed,
        method: cfg.method.to_string(),
        variant: cfg.ablation.name(),
        p_correct: cfg.noise.p_correct,
        row_id,
        metrics: &outcome.metrics,
        fruits: &outcome.fruits,
        stats: &outcome.stats,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

fn points_ply(points: &[Point3<f64>]) -> PlyCloud {
    PlyCloud::new(points.to_vec())
}

/// Writes every artifact of a run under `dir`, named by config hash and row.
pub fn export_run(dir: &Path, cfg: &RunConfig, row_id: usize, outcome: &RowOutcome) -> Result<ExportedFiles> {
    fs::create_dir_all(dir)?;
    let stem = format!("{}_row{}", &cfg.hash()[..16], row_id);
    let path = |suffix: &str| dir.join(format!("{stem}_{suffix}"));
    let files = ExportedFiles {
        metrics_json: path("metrics.json"),
        timings_json: path("timings.json"),
        recon_ply: path("recon.ply"),
        gt_ply: path("gt.ply"),
        octree_ply: path("octree.ply"),
        checkpoint: outcome.splats.as_ref().map(|_| path("splats.gspl")),
    };
    fs::write(&files.metrics_json, metrics_json(cfg, row_id, outcome)?)?;
    #[derive(Serialize)]
    struct Timings<'a> {
        breakdown: RuntimeBreakdown,
        log: &'a TimingLog,
    }
    let timings = Timings {
        breakdown: runtime_report(&outcome.timings),
        log: &outcome.timings,
    };
    fs::write(&files.timings_json, serde_json::to_string_pretty(&timings)?)?;
    points_ply(&outcome.recon).save(&files.recon_ply)?;
    points_ply(&outcome.ground_truth).save(&files.gt_ply)?;
    outcome.octree.occupied_ply().save(&files.octree_ply)?;
    if let (Some(map), Some(p)) = (&outcome.splats, &files.checkpoint) {
        map.save_checkpoint(p)?;
        map.to_ply().save(&path("splats.ply"))?;
    }
    fs::write(path("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(files)
}

/// Runs every cell of the experiment. Failed cells are recorded and the
/// remaining cells still run. With an output directory, per-run artifacts
/// and the result tables are written there.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
    }
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        for &method in &cfg.methods {
            for &p in &cfg.p_correct {
                let ablations: Vec<Ablation> = if method == Method::Hybrid {
                    cfg.ablations.clone()
                } else {
                    vec![Ablation::default()]
                };
                for ablation in ablations {
                    let run = cfg.cell(seed, method, p, ablation);
                    results.extend(run_cell(&run, cfg.output_dir.as_deref()));
                }
            }
        }
    }
    if let Some(dir) = &cfg.output_dir {
        write_results(dir, &results)?;
    }
    Ok(results)
}

fn run_cell(run: &RunConfig, out: Option<&Path>) -> Vec<CellResult> {
    let blank = |row_id: usize| CellResult {
        seed: run.scene.rng_seed,
        method: run.method.to_string(),
        variant: run.ablation.name(),
        p_correct: run.noise.p_correct,
        row_id,
        metrics: None,
        stats: None,
        error: None,
    };
    let scene = match generate_scene(&run.scene) {
        Ok(s) => s,
        Err(e) => {
            return vec![CellResult {
                error: Some(e.to_string()),
                ..blank(0)
            }]
        }
    };
    let mut cells = Vec::new();
    for row in &scene.rows {
        info!("cell seed={} method={} variant={} p={} row={}", run.scene.rng_seed, run.method, run.ablation.name(), run.noise.p_correct, row.row_id);
        let mut cell = blank(row.row_id);
        match run_row(&scene, row.row_id, run) {
            Ok(outcome) => {
                if let Some(dir) = out {
                    if let Err(e) = export_run(dir, run, row.row_id, &outcome) {
                        cell.error = Some(e.to_string());
                    }
                }
                cell.metrics = Some(outcome.metrics);
                cell.stats = Some(outcome.stats);
            }
            Err(e) => {
                warn!("cell failed: {e}");
                cell.error = Some(e.to_string());
            }
        }
        cells.push(cell);
    }
    cells
}

/// Flat CSV row of one cell. Undefined metrics are empty fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub seed: u64,
    pub method: String,
    pub variant: String,
    pub p_correct: f64,
    pub row_id: usize,
    pub chamfer: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub volume_accuracy_pct: Option<f64>,
    pub volume_accuracy_hull_pct: Option<f64>,
    pub count_accuracy_pct: Option<f64>,
    pub n_clusters: Option<usize>,
    pub n_fruits_gt: Option<usize>,
    pub error: Option<String>,
}

impl From<&CellResult> for CsvRow {
    fn from(c: &CellResult) -> Self {
        let m = c.metrics.as_ref();
        Self {
            seed: c.seed,
            method: c.method.clone(),
            variant: c.variant.clone(),
            p_correct: c.p_correct,
            row_id: c.row_id,
            chamfer: m.and_then(|m| m.chamfer),
            precision: m.and_then(|m| m.precision),
            recall: m.and_then(|m| m.recall),
            f1: m.and_then(|m| m.f1),
            volume_accuracy_pct: m.and_then(|m| m.volume_accuracy_pct),
            volume_accuracy_hull_pct: m.and_then(|m| m.volume_accuracy_hull_pct),
            count_accuracy_pct: m.and_then(|m| m.count_accuracy_pct),
            n_clusters: m.map(|m| m.n_clusters),
            n_fruits_gt: m.map(|m| m.n_fruits_gt),
            error: c.error.clone(),
        }
    }
}

/// Writes `results.json` and `results.csv`.
pub fn write_results(dir: &Path, results: &[CellResult]) -> Result<()> {
    fs::write(dir.join("results.json"), serde_json::to_string_pretty(results)?)?;
    let mut w = csv::Writer::from_path(dir.join("results.csv")).map_err(csv_error)?;
    for r in results {
        w.serialize(CsvRow::from(r)).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::format("results CSV", e.to_string())
}

/// Mean and sample standard deviation of a metric over cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Some(MeanStd { mean, std, n })
}

/// Aggregated metrics of one (method, variant, noise level) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub variant: String,
    pub p_correct: f64,
    pub cells: usize,
    pub failed: usize,
    pub chamfer: Option<MeanStd>,
    pub precision: Option<MeanStd>,
    pub recall: Option<MeanStd>,
    pub f1: Option<MeanStd>,
    pub volume_accuracy_pct: Option<MeanStd>,
    pub count_accuracy_pct: Option<MeanStd>,
}

/// Groups cells by method, variant and noise level in first-seen order.
pub fn summarize(results: &[CellResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, f64)> = Vec::new();
    for r in results {
        let k = (r.method.clone(), r.variant.clone(), r.p_correct);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, variant, p)| {
            let group: Vec<&CellResult> = results
                .iter()
                .filter(|r| r.method == method && r.variant == variant && r.p_correct == p)
                .collect();
            let collect = |f: fn(&MetricsReport) -> Option<f64>| {
                let v: Vec<f64> = group.iter().filter_map(|r| r.metrics.as_ref().and_then(f)).collect();
                mean_std(&v)
            };
            SummaryRow {
                cells: group.len(),
                failed: group.iter().filter(|r| r.error.is_some()).count(),
                chamfer: collect(|m| m.chamfer),
                precision: collect(|m| m.precision),
                recall: collect(|m| m.recall),
                f1: collect(|m| m.f1),
                volume_accuracy_pct: collect(|m| m.volume_accuracy_pct),
                count_accuracy_pct: collect(|m| m.count_accuracy_pct),
                method,
                variant,
                p_correct: p,
            }
        })
        .collect()
}
