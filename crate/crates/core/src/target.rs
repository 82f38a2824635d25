//! Fruit extraction from point sets: density clustering and convex-hull volumes.

use std::collections::VecDeque;

use nalgebra::{Point3, Vector3};
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception::SemanticClass;
use crate::splat::GaussianMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub eps: f64,
    pub min_samples: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            eps: 0.02,
            min_samples: 10,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::config("cluster eps must be positive"));
        }
        if self.min_samples == 0 {
            return Err(Error::config("min_samples must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dbscan {
    /// Cluster id per input point, `None` for noise.
    pub labels: Vec<Option<usize>>,
    /// Member indices per cluster, ascending.
    pub clusters: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
}

/// Input indices sorted by `(x, y, z, index)`.
pub fn canonical_order(points: &[Point3<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&points[a], &points[b]);
        p.x.total_cmp(&q.x)
            .then(p.y.total_cmp(&q.y))
            .then(p.z.total_cmp(&q.z))
            .then(a.cmp(&b))
    });
    order
}

/// Density-based clustering with the Euclidean metric. Points are visited in
/// canonical order and neighborhoods are expanded in canonical order, so the
/// result does not depend on the input permutation beyond index labels.
pub fn dbscan(points: &[Point3<f64>], cfg: &ClusterConfig) -> Dbscan {
    let n = points.len();
    let order = canonical_order(points);
    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let eps2 = cfg.eps * cfg.eps;
    let cell = |p: &Point3<f64>| {
        [
            (p.x / cfg.eps).floor() as i64,
            (p.y / cfg.eps).floor() as i64,
            (p.z / cfg.eps).floor() as i64,
        ]
    };
    let mut grid: FxHashMap<[i64; 3], Vec<usize>> = FxHashMap::default();
    for &i in &order {
        grid.entry(cell(&points[i])).or_default().push(i);
    }
    let neighbors = |i: usize| -> Vec<usize> {
        let c = cell(&points[i]);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        out.extend(
                            list.iter()
                                .copied()
                                .filter(|&j| (points[j] - points[i]).norm_squared() <= eps2),
                        );
                    }
                }
            }
        }
        out.sort_unstable_by_key(|&j| rank[j]);
        out
    };

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut n_clusters = 0;
    for &i in &order {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let nb = neighbors(i);
        if nb.len() < cfg.min_samples {
            continue;
        }
        let id = n_clusters;
        n_clusters += 1;
        labels[i] = Some(id);
        let mut queue: VecDeque<usize> = nb.into_iter().collect();
        while let Some(j) = queue.pop_front() {
            if labels[j].is_none() {
                labels[j] = Some(id);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nb_j = neighbors(j);
            if nb_j.len() >= cfg.min_samples {
                queue.extend(nb_j);
            }
        }
    }
    let mut clusters = vec![Vec::new(); n_clusters];
    let mut noise = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            Some(c) => clusters[*c].push(i),
            None => noise.push(i),
        }
    }
    Dbscan {
        labels,
        clusters,
        noise,
    }
}

/// Convex hull volume and whether the input was degenerate (fewer than four
/// distinct points, or all within `1e-9` m of a common plane).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HullVolume {
    pub volume: f64,
    pub degenerate: bool,
}

const COPLANAR_TOL: f64 = 1e-9;

fn orient(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>, p: &Point3<f64>) -> f64 {
    (b - a).cross(&(c - a)).dot(&(p - a))
}

/// Triangles of the convex hull, oriented outward, as indices into `points`.
/// `None` when the set is degenerate.
pub fn convex_hull(points: &[Point3<f64>]) -> Option<Vec<[usize; 3]>> {
    let order = canonical_order(points);
    let mut idx: Vec<usize> = Vec::with_capacity(order.len());
    for &i in &order {
        if idx.last().map_or(true, |&j| points[j] != points[i]) {
            idx.push(i);
        }
    }
    if idx.len() < 4 {
        return None;
    }
    let p0 = idx[0];
    let far = |from: &dyn Fn(usize) -> f64| -> usize {
        let mut best = idx[0];
        let mut best_d = f64::NEG_INFINITY;
        for &i in &idx {
            let d = from(i);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };
    let p1 = far(&|i| (points[i] - points[p0]).norm_squared());
    let axis = (points[p1] - points[p0]).normalize();
    let p2 = far(&|i| {
        let d = points[i] - points[p0];
        (d - axis * d.dot(&axis)).norm_squared()
    });
    let normal = (points[p1] - points[p0]).cross(&(points[p2] - points[p0]));
    if normal.norm() == 0.0 {
        return None;
    }
    let unit_n = normal.normalize();
    let p3 = far(&|i| (points[i] - points[p0]).dot(&unit_n).abs());
    if (points[p3] - points[p0]).dot(&unit_n).abs() <= COPLANAR_TOL {
        return None;
    }

    let extent = (points[p1] - points[p0]).norm();
    let vis_tol = 1e-12 * extent.max(1e-300).powi(2);
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let tet = [p0, p1, p2, p3];
    for k in 0..4 {
        let mut f = [tet[(k + 1) % 4], tet[(k + 2) % 4], tet[(k + 3) % 4]];
        let opposite = &points[tet[k]];
        if orient(&points[f[0]], &points[f[1]], &points[f[2]], opposite) > 0.0 {
            f.swap(1, 2);
        }
        faces.push(f);
    }
    let used: FxHashSet<usize> = tet.into_iter().collect();
    for &p in &idx {
        if used.contains(&p) {
            continue;
        }
        let pt = &points[p];
        let visible: Vec<bool> = faces
            .iter()
            .map(|f| orient(&points[f[0]], &points[f[1]], &points[f[2]], pt) > vis_tol)
            .collect();
        if !visible.iter().any(|&v| v) {
            continue;
        }
        let mut edges: FxHashSet<(usize, usize)> = FxHashSet::default();
        for (f, _) in faces.iter().zip(&visible).filter(|(_, &v)| v) {
            for e in 0..3 {
                edges.insert((f[e], f[(e + 1) % 3]));
            }
        }
        let mut horizon: Vec<(usize, usize)> = edges
            .iter()
            .copied()
            .filter(|&(a, b)| !edges.contains(&(b, a)))
            .collect();
        horizon.sort_unstable();
        let mut next: Vec<[usize; 3]> = faces
            .iter()
            .zip(&visible)
            .filter(|(_, &v)| !v)
            .map(|(f, _)| *f)
            .collect();
        for (a, b) in horizon {
            next.push([a, b, p]);
        }
        faces = next;
    }
    Some(faces)
}

pub fn cluster_volume(points: &[Point3<f64>]) -> HullVolume {
    match convex_hull(points) {
        None => HullVolume {
            volume: 0.0,
            degenerate: true,
        },
        Some(faces) => {
            let c = faces
                .iter()
                .flat_map(|f| f.iter())
                .fold(Vector3::zeros(), |acc, &i| acc + points[i].coords)
                / (faces.len() * 3) as f64;
            let c = Point3::from(c);
            let six_v: f64 = faces
                .iter()
                .map(|f| orient(&points[f[0]], &points[f[1]], &points[f[2]], &c))
                .sum();
            HullVolume {
                volume: (-six_v / 6.0).max(0.0),
                degenerate: false,
            }
        }
    }
}

/// Centers of splats whose most likely class is `class` and whose opacity
/// reaches `min_opacity`.
pub fn extract_target_points(map: &GaussianMap, class: SemanticClass, min_opacity: f64) -> Vec<Point3<f64>> {
    map.class_points(class, min_opacity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FruitCluster {
    pub indices: Vec<usize>,
    pub centroid: Point3<f64>,
    pub hull_volume: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FruitReport {
    pub count: usize,
    pub total_volume: f64,
    pub clusters: Vec<FruitCluster>,
}

impl FruitReport {
    pub fn volumes(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.hull_volume).collect()
    }

    pub fn centroids(&self) -> Vec<Point3<f64>> {
        self.clusters.iter().map(|c| c.centroid).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Clusters a target point set and measures each cluster.
pub fn analyze_points(points: &[Point3<f64>], cfg: &ClusterConfig) -> FruitReport {
    let db = dbscan(points, cfg);
    let clusters: Vec<FruitCluster> = db
        .clusters
        .into_iter()
        .map(|indices| {
            let members: Vec<Point3<f64>> = indices.iter().map(|&i| points[i]).collect();
            let centroid = Point3::from(
                members.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / members.len() as f64,
            );
            let hull = cluster_volume(&members);
            FruitCluster {
                indices,
                centroid,
                hull_volume: hull.volume,
                degenerate: hull.degenerate,
            }
        })
        .collect();
    FruitReport {
        count: clusters.len(),
        total_volume: clusters.iter().map(|c| c.hull_volume).sum(),
        clusters,
    }
}

pub fn fruit_report(map: &GaussianMap, cfg: &ClusterConfig, min_opacity: f64) -> FruitReport {
    analyze_points(&extract_target_points(map, SemanticClass::Fruit, min_opacity), cfg)
}
