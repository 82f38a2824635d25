//! Reconstruction and phenotyping metrics, plus the runtime breakdown.

use std::time::Instant;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tau: f64,
    pub gt_surface_density: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 0.015,
            gt_surface_density: 1e5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("tau must be positive"));
        }
        if !(self.gt_surface_density > 0.0) {
            return Err(Error::config("gt_surface_density must be positive"));
        }
        Ok(())
    }
}

/// Below this size nearest-neighbor queries scan the cloud directly.
const BRUTE_FORCE_LIMIT: usize = 64;

/// Exact nearest-neighbor distances from query points to a reference cloud.
pub struct NearestIndex {
    points: Vec<[f64; 3]>,
    tree: Option<ImmutableKdTree<f64, 3>>,
}

impl NearestIndex {
    pub fn new(cloud: &[Point3<f64>]) -> Self {
        let mut points: Vec<[f64; 3]> = cloud.iter().map(|p| [p.x, p.y, p.z]).collect();
        // duplicates carry no information for distance queries
        points.sort_by(|a, b| {
            a[0].total_cmp(&b[0])
                .then(a[1].total_cmp(&b[1]))
                .then(a[2].total_cmp(&b[2]))
        });
        points.dedup();
        let tree = (points.len() > BRUTE_FORCE_LIMIT).then(|| ImmutableKdTree::new_from_slice(&points));
        Self { points, tree }
    }

    pub fn distance(&self, q: &Point3<f64>) -> f64 {
        let query = [q.x, q.y, q.z];
        match &self.tree {
            Some(tree) => tree.nearest_one::<SquaredEuclidean>(&query).distance.sqrt(),
            None => self
                .points
                .iter()
                .map(|p| (p[0] - q.x).powi(2) + (p[1] - q.y).powi(2) + (p[2] - q.z).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt(),
        }
    }
}

fn nonempty(p: &[Point3<f64>], q: &[Point3<f64>]) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::undefined("point cloud is empty"));
    }
    Ok(())
}

fn nn_distances(from: &[Point3<f64>], to: &[Point3<f64>]) -> Vec<f64> {
    let index = NearestIndex::new(to);
    from.iter().map(|p| index.distance(p)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean nearest-neighbor distance from P to Q plus from Q to P.
pub fn chamfer_distance(p: &[Point3<f64>], q: &[Point3<f64>]) -> Result<f64> {
    nonempty(p, q)?;
    Ok(mean(&nn_distances(p, q)) + mean(&nn_distances(q, p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Fraction of P within `tau` of Q (precision), of Q within `tau` of P
/// (recall), and their harmonic mean.
pub fn precision_recall_f1(p: &[Point3<f64>], q: &[Point3<f64>], tau: f64) -> Result<PrecisionRecall> {
    nonempty(p, q)?;
    let frac = |d: Vec<f64>| d.iter().filter(|&&x| x < tau).count() as f64 / d.len() as f64;
    let precision = frac(nn_distances(p, q));
    let recall = frac(nn_distances(q, p));
    Ok(PrecisionRecall {
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

pub fn volume_accuracy(v_est: f64, v_gt: f64) -> Result<f64> {
    if !(v_gt > 0.0) {
        return Err(Error::undefined("ground-truth volume is zero"));
    }
    Ok(100.0 * v_est / v_gt)
}

pub fn count_accuracy(n_est: usize, n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::undefined("ground-truth fruit count is zero"));
    }
    Ok(100.0 * n_est as f64 / n_gt as f64)
}

/// Reconstruction metrics of one row. Undefined metrics are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub chamfer: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub volume_accuracy_pct: Option<f64>,
    /// Volume accuracy against the hull of the sampled ground-truth surface.
    pub volume_accuracy_hull_pct: Option<f64>,
    pub count_accuracy_pct: Option<f64>,
    pub n_clusters: usize,
    pub n_fruits_gt: usize,
    pub volume_est: f64,
    pub volume_gt: f64,
    pub volume_gt_hull: f64,
    pub recon_points: usize,
}

impl MetricsReport {
    pub fn compute(
        recon: &[Point3<f64>],
        gt: &[Point3<f64>],
        n_clusters: usize,
        n_gt: usize,
        volume_est: f64,
        volume_gt: f64,
        volume_gt_hull: f64,
        tau: f64,
    ) -> Self {
        let pr = precision_recall_f1(recon, gt, tau).ok();
        Self {
            chamfer: chamfer_distance(recon, gt).ok(),
            precision: pr.map(|x| x.precision),
            recall: pr.map(|x| x.recall),
            f1: pr.map(|x| x.f1),
            volume_accuracy_pct: volume_accuracy(volume_est, volume_gt).ok(),
            volume_accuracy_hull_pct: volume_accuracy(volume_est, volume_gt_hull).ok(),
            count_accuracy_pct: count_accuracy(n_clusters, n_gt).ok(),
            n_clusters,
            n_fruits_gt: n_gt,
            volume_est,
            volume_gt,
            volume_gt_hull,
            recon_points: recon.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingCategory {
    OctomapMapping,
    GsMapping,
    Planning,
    Execution,
}

/// Wall-clock spans recorded during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingLog {
    pub spans: Vec<(TimingCategory, f64)>,
    /// Splat mapping seconds hidden behind other work when run concurrently.
    pub gs_overlapped: f64,
}

impl TimingLog {
    pub fn record(&mut self, category: TimingCategory, seconds: f64) {
        self.spans.push((category, seconds));
    }

    /// Runs `f` and records its duration.
    pub fn time<T>(&mut self, category: TimingCategory, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(category, start.elapsed().as_secs_f64());
        out
    }

    pub fn merge(&mut self, other: &TimingLog) {
        self.spans.extend_from_slice(&other.spans);
        self.gs_overlapped += other.gs_overlapped;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeBreakdown {
    pub octomap_mapping: f64,
    pub gs_mapping: f64,
    /// Splat mapping time that extends the critical path.
    pub gs_mapping_critical: f64,
    pub planning: f64,
    pub execution: f64,
    pub total: f64,
}

pub fn runtime_report(log: &TimingLog) -> RuntimeBreakdown {
    let mut out = RuntimeBreakdown::default();
    for &(cat, s) in &log.spans {
        match cat {
            TimingCategory::OctomapMapping => out.octomap_mapping += s,
            TimingCategory::GsMapping => out.gs_mapping += s,
            TimingCategory::Planning => out.planning += s,
            TimingCategory::Execution => out.execution += s,
        }
    }
    out.gs_mapping_critical = (out.gs_mapping - log.gs_overlapped).max(0.0);
    out.total = out.octomap_mapping + out.gs_mapping + out.planning + out.execution;
    out
}
