//! Brute-force references for traversal, clustering, planning, metrics and
//! compositing.

use std::collections::BTreeSet;

use agrisplat::geometry::{CameraModel, CameraPose};
use agrisplat::octomap::{key_of, VoxelKey, VoxelWalk};
use agrisplat::planner::{best_first_plan, build_graph, PlanGraph, Viewpoint, ViewpointKind, ViewpointStatus};
use agrisplat::splat::Gaussian3D;
use agrisplat::target::Dbscan;
use nalgebra::{Isometry3, Point3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const SAMPLE_STEP: f64 = 1e-3;

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Keys hit by points sampled every millimeter along the segment, in order of
/// first appearance.
pub fn dense_keys(origin: &Point3<f64>, dir: &Vector3<f64>, length: f64, res: f64) -> Vec<VoxelKey> {
    let n = (length / SAMPLE_STEP).floor() as usize;
    let mut out: Vec<VoxelKey> = Vec::new();
    for i in 0..=n + 1 {
        let t = (i as f64 * SAMPLE_STEP).min(length);
        let k = key_of(&(origin + dir * t), res);
        if out.last() != Some(&k) {
            out.push(k);
        }
    }
    out
}

/// Length of the segment inside the voxel, by slab clipping.
pub fn overlap(origin: &Point3<f64>, dir: &Vector3<f64>, length: f64, key: &VoxelKey, res: f64) -> f64 {
    let (mut t0, mut t1) = (0.0f64, length);
    for a in 0..3 {
        let lo = key[a] as f64 * res;
        let hi = lo + res;
        if dir[a] == 0.0 {
            if origin[a] < lo || origin[a] > hi {
                return 0.0;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 - t0).max(0.0)
}

/// Compares the voxel walk with dense sampling: same first and last voxel,
/// face-connected steps, every sampled voxel visited in order, and any extra
/// voxel clipped over less than one sampling step.
pub fn compare_traversal(origin: &Point3<f64>, dir: &Vector3<f64>, length: f64, res: f64) -> Result<(), String> {
    let walk: Vec<VoxelKey> = VoxelWalk::new(origin, dir, Some(length), res).collect();
    let dense = dense_keys(origin, dir, length, res);
    for w in walk.windows(2) {
        let d: i32 = (0..3).map(|a| (w[0][a] - w[1][a]).abs()).sum();
        if d != 1 {
            return Err(format!("walk jumps from {:?} to {:?}", w[0], w[1]));
        }
    }
    if walk.first() != dense.first() || walk.last() != dense.last() {
        return Err(format!("endpoints differ: walk {:?}..{:?}, samples {:?}..{:?}", walk.first(), walk.last(), dense.first(), dense.last()));
    }
    let dense_set: BTreeSet<VoxelKey> = dense.iter().copied().collect();
    let common: Vec<VoxelKey> = walk.iter().copied().filter(|k| dense_set.contains(k)).collect();
    if common != dense {
        return Err("sampled voxels missing from the walk or out of order".into());
    }
    for k in walk.iter().filter(|k| !dense_set.contains(*k)) {
        let o = overlap(origin, dir, length, k, res);
        if o >= SAMPLE_STEP {
            return Err(format!("walk voxel {k:?} spans {o} m but was never sampled"));
        }
    }
    Ok(())
}

/// Blobs plus uniform clutter, some points duplicated.
pub fn cluster_instance(rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
    let n = rng.gen_range(1..=300);
    let blobs: Vec<Point3<f64>> = (0..rng.gen_range(1..5))
        .map(|_| Point3::new(rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)))
        .collect();
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let p = if rng.gen_bool(0.75) {
            let c = blobs[rng.gen_range(0..blobs.len())];
            c + Vector3::new(rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03))
        } else {
            Point3::new(rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3))
        };
        pts.push(p);
        if rng.gen_bool(0.05) && pts.len() < n {
            pts.push(p);
        }
    }
    pts
}

/// Checks a clustering against the O(n^2) definition: clusters are the
/// connected components of core points, noise is exactly the points with no
/// core point within eps, and border points join a neighboring core's cluster.
pub fn compare_dbscan(points: &[Point3<f64>], eps: f64, min_samples: usize, got: &Dbscan) -> Result<(), String> {
    let n = points.len();
    let nb: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| (points[j] - points[i]).norm_squared() <= eps * eps).collect())
        .collect();
    let core: Vec<bool> = nb.iter().map(|v| v.len() >= min_samples).collect();
    let mut comp = vec![usize::MAX; n];
    let mut components: BTreeSet<BTreeSet<usize>> = BTreeSet::new();
    for s in 0..n {
        if !core[s] || comp[s] != usize::MAX {
            continue;
        }
        let mut set = BTreeSet::new();
        let mut stack = vec![s];
        comp[s] = s;
        while let Some(i) = stack.pop() {
            set.insert(i);
            for &j in &nb[i] {
                if core[j] && comp[j] == usize::MAX {
                    comp[j] = s;
                    stack.push(j);
                }
            }
        }
        components.insert(set);
    }
    if got.clusters.len() != components.len() {
        return Err(format!("{} clusters, reference has {}", got.clusters.len(), components.len()));
    }
    let got_cores: BTreeSet<BTreeSet<usize>> = got
        .clusters
        .iter()
        .map(|c| c.iter().copied().filter(|&i| core[i]).collect())
        .collect();
    if got_cores != components {
        return Err("core partitions differ".into());
    }
    for i in 0..n {
        let reachable: Vec<usize> = nb[i].iter().copied().filter(|&j| core[j]).collect();
        match got.labels[i] {
            None if !reachable.is_empty() => return Err(format!("point {i} is density-reachable but noise")),
            Some(_) if reachable.is_empty() => return Err(format!("point {i} should be noise")),
            Some(c) if !reachable.iter().any(|&j| got.labels[j] == Some(c)) => {
                return Err(format!("border point {i} joined a cluster with no core neighbor"))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Depth-first enumeration of every simple path from node 0 with at least one
/// step, accumulating utility in path order.
pub fn exhaustive_plan(graph: &PlanGraph, beta: f64) -> Option<(f64, Vec<usize>)> {
    fn go(g: &PlanGraph, beta: f64, path: &mut Vec<usize>, utility: f64, best: &mut Option<(f64, Vec<usize>)>) {
        let last = *path.last().unwrap();
        for &j in &g.adjacency[last] {
            if path.contains(&j) {
                continue;
            }
            let u = utility + g.gains[j] - beta * g.cost(last, j);
            path.push(j);
            if best.as_ref().map_or(true, |(b, _)| u > *b) {
                *best = Some((u, path.clone()));
            }
            go(g, beta, path, u, best);
            path.pop();
        }
    }
    let mut best = None;
    go(graph, beta, &mut vec![0], 0.0, &mut best);
    best
}

/// Runs the best-first planner without an expansion cap and compares it with
/// exhaustive enumeration. Paths that visit the same nodes in another order
/// may tie up to summation rounding, so utilities agree to 1e-12 and exactly
/// when the paths coincide.
pub fn compare_plan(graph: &PlanGraph, beta: f64) -> Result<(), String> {
    let got = best_first_plan(graph, beta, usize::MAX).map_err(|e| e.to_string())?;
    if !got.exhaustive {
        return Err("search stopped early".into());
    }
    match exhaustive_plan(graph, beta) {
        None => {
            if got.path != vec![0] || got.utility != 0.0 {
                return Err(format!("no path exists but planner returned {:?}", got.path));
            }
        }
        Some((u, path)) => {
            if (got.utility - u).abs() > 1e-12 || (got.path == path && got.utility != u) {
                return Err(format!("utility {} via {:?}, enumeration {} via {:?}", got.utility, got.path, u, path));
            }
            if got.utility != path_utility(graph, &got.path, beta) {
                return Err("reported utility differs from its path".into());
            }
            let mut seen = got.path.clone();
            seen.sort_unstable();
            seen.dedup();
            if got.path[0] != 0 || seen.len() != got.path.len() {
                return Err(format!("{:?} is not a simple path from the start", got.path));
            }
            if got.path.windows(2).any(|w| !graph.adjacency[w[0]].contains(&w[1])) {
                return Err(format!("{:?} uses a missing edge", got.path));
            }
        }
    }
    Ok(())
}

pub fn path_utility(graph: &PlanGraph, path: &[usize], beta: f64) -> f64 {
    path.windows(2)
        .fold(0.0, |u, w| u + graph.gains[w[1]] - beta * graph.cost(w[0], w[1]))
}

/// Random graph on up to 8 nodes with gains in [0, 1): either a kNN graph over
/// random joint vectors or a random symmetric edge set.
pub fn random_plan_graph(rng: &mut ChaCha8Rng) -> PlanGraph {
    let n = rng.gen_range(1..=8);
    let dof = rng.gen_range(2..=6);
    let joints: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dof).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .collect();
    if rng.gen_bool(0.5) {
        let viewpoints: Vec<Viewpoint> = joints[1..]
            .iter()
            .enumerate()
            .map(|(i, q)| Viewpoint {
                id: i + 1,
                kind: ViewpointKind::Exploration,
                status: ViewpointStatus::Feasible,
                pose: Isometry3::identity(),
                joints: Some(q.clone()),
                raw_gain: 0.0,
                gain: rng.gen_range(0.0..1.0),
            })
            .collect();
        return build_graph(&joints[0], &viewpoints, rng.gen_range(1..=4)).unwrap();
    }
    let mut adjacency = vec![Vec::new(); n];
    let p = rng.gen_range(0.2..0.9);
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                adjacency[i].push(j);
                adjacency[j].push(i);
            }
        }
    }
    let mut gains: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    gains[0] = 0.0;
    PlanGraph { joints, gains, adjacency }
}

pub fn brute_nn(q: &Point3<f64>, cloud: &[Point3<f64>]) -> f64 {
    cloud.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min)
}

/// Chamfer distance, precision, recall and F1 by exhaustive search.
pub fn brute_metrics(p: &[Point3<f64>], q: &[Point3<f64>], tau: f64) -> (f64, f64, f64, f64) {
    let d_pq: Vec<f64> = p.iter().map(|x| brute_nn(x, q)).collect();
    let d_qp: Vec<f64> = q.iter().map(|x| brute_nn(x, p)).collect();
    let cd = d_pq.iter().sum::<f64>() / p.len() as f64 + d_qp.iter().sum::<f64>() / q.len() as f64;
    let prec = d_pq.iter().filter(|&&d| d < tau).count() as f64 / p.len() as f64;
    let rec = d_qp.iter().filter(|&&d| d < tau).count() as f64 / q.len() as f64;
    let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
    (cd, prec, rec, f1)
}

/// Random cloud with some points snapped to a lattice, creating exact ties
/// and duplicates.
pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| {
            let mut p = Point3::new(rng.gen_range(0.0..spread), rng.gen_range(0.0..spread), rng.gen_range(0.0..spread));
            if rng.gen_bool(0.3) {
                p = p.map(|c| (c * 50.0).round() / 50.0);
            }
            p
        })
        .collect()
}

pub struct ReferenceFrame {
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub silhouette: Vec<f64>,
    pub weight_sum: Vec<f64>,
}

/// Per-pixel front-to-back compositing over every splat, without truncation.
pub fn reference_render(gs: &[Gaussian3D], cam: &CameraModel, pose: &CameraPose, max_alpha: f64) -> ReferenceFrame {
    let mut projected: Vec<(f64, f64, f64, f64, &Gaussian3D)> = gs
        .iter()
        .filter_map(|g| {
            let pc = pose.inverse_transform_point(&g.mu);
            if pc.z < cam.near {
                return None;
            }
            let u = cam.fx * pc.x / pc.z + cam.cx;
            let v = cam.fy * pc.y / pc.z + cam.cy;
            Some((pc.z, u, v, g.radius() * cam.fx / pc.z, g))
        })
        .collect();
    projected.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = cam.pixel_count();
    let mut out = ReferenceFrame {
        color: vec![[0.0; 3]; n],
        depth: vec![0.0; n],
        silhouette: vec![0.0; n],
        weight_sum: vec![0.0; n],
    };
    for py in 0..cam.height {
        for px in 0..cam.width {
            let idx = py * cam.width + px;
            let mut t = 1.0;
            for &(z, u, v, sigma, g) in &projected {
                let d2 = (px as f64 - u).powi(2) + (py as f64 - v).powi(2);
                let a = (g.opacity() * (-d2 / (2.0 * sigma * sigma)).exp()).min(max_alpha);
                let w = t * a;
                for c in 0..3 {
                    out.color[idx][c] += w * g.color[c];
                }
                out.depth[idx] += w * z;
                out.weight_sum[idx] += w;
                t *= 1.0 - a;
            }
            out.silhouette[idx] = 1.0 - t;
        }
    }
    out
}
