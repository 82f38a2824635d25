//! Procedural crop-row scenes built from analytic primitives, plus an exact
//! ray-casting RGB-D + label sensor used as ground truth.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Point3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, CameraPose, PointCloud};
use crate::perception::SemanticClass;

pub const SCENE_FORMAT_VERSION: u32 = 1;

const STEM_RADIUS: f64 = 0.008;
const MIN_FRUIT_GAP: f64 = 0.03;
const GROUND_RADIUS: f64 = 50.0;

pub const SKY_COLOR: [f64; 3] = [0.65, 0.78, 0.92];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_rows: usize,
    pub plants_per_row: usize,
    pub row_spacing: f64,
    pub plant_spacing: f64,
    pub fruit_radius_range: (f64, f64),
    pub fruits_per_plant_range: (usize, usize),
    pub leaf_count_range: (usize, usize),
    pub plant_height_range: (f64, f64),
    pub rng_seed: u64,
    /// Class assigned to stems; the semantic set has no stem class.
    pub stem_class: SemanticClass,
    /// Adds a background-class ground disc at z = 0.
    pub ground: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_rows: 1,
            plants_per_row: 5,
            row_spacing: 1.2,
            plant_spacing: 0.35,
            fruit_radius_range: (0.025, 0.04),
            fruits_per_plant_range: (1, 3),
            leaf_count_range: (6, 10),
            plant_height_range: (0.5, 0.7),
            rng_seed: 1,
            stem_class: SemanticClass::Leaf,
            ground: true,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.plants_per_row == 0 {
            return Err(Error::config("scene needs at least one row and one plant per row"));
        }
        if !(self.row_spacing > 0.0 && self.plant_spacing > 0.0) {
            return Err(Error::config("row and plant spacing must be positive"));
        }
        let real_ranges = [
            ("fruit_radius_range", self.fruit_radius_range),
            ("plant_height_range", self.plant_height_range),
        ];
        for (name, (lo, hi)) in real_ranges {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::config(format!("{name} must satisfy 0 < low <= high")));
            }
        }
        let count_ranges = [
            ("fruits_per_plant_range", self.fruits_per_plant_range),
            ("leaf_count_range", self.leaf_count_range),
        ];
        for (name, (lo, hi)) in count_ranges {
            if lo > hi {
                return Err(Error::config(format!("{name} must satisfy low <= high")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    Sphere {
        center: Point3<f64>,
        radius: f64,
    },
    /// Axis radii expressed in the frame given by `rotation`.
    Ellipsoid {
        center: Point3<f64>,
        radii: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
    },
    /// Capped cylinder from `base` along the unit `axis`.
    Cylinder {
        base: Point3<f64>,
        axis: Vector3<f64>,
        height: f64,
        radius: f64,
    },
    Disc {
        center: Point3<f64>,
        normal: Vector3<f64>,
        radius: f64,
    },
}

impl Shape {
    /// Smallest ray parameter in `(t_min, t_max)` where `origin + t * dir` meets
    /// the surface. `dir` need not be normalized.
    pub fn intersect(
        &self,
        origin: &Point3<f64>,
        dir: &Vector3<f64>,
        t_min: f64,
        t_max: f64,
    ) -> Option<f64> {
        let accept = |t: f64| (t > t_min && t < t_max).then_some(t);
        match self {
            Shape::Sphere { center, radius } => {
                ray_unit_sphere(&((origin - center) / *radius), &(dir / *radius))
                    .and_then(|(t0, t1)| accept(t0).or_else(|| accept(t1)))
            }
            Shape::Ellipsoid {
                center,
                radii,
                rotation,
            } => {
                let o = rotation.inverse_transform_vector(&(origin - center)).component_div(radii);
                let d = rotation.inverse_transform_vector(dir).component_div(radii);
                ray_unit_sphere(&o, &d).and_then(|(t0, t1)| accept(t0).or_else(|| accept(t1)))
            }
            Shape::Cylinder {
                base,
                axis,
                height,
                radius,
            } => {
                let rel = origin - base;
                let o_perp = rel - axis * rel.dot(axis);
                let d_perp = dir - axis * dir.dot(axis);
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if let Some(t) = accept(t) {
                        if best.map_or(true, |b| t < b) {
                            best = Some(t);
                        }
                    }
                };
                let a = d_perp.norm_squared();
                if a > 0.0 {
                    let b = o_perp.dot(&d_perp);
                    let c = o_perp.norm_squared() - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            let h = (rel + dir * t).dot(axis);
                            if (0.0..=*height).contains(&h) {
                                consider(t);
                            }
                        }
                    }
                }
                let dn = dir.dot(axis);
                if dn != 0.0 {
                    for cap in [0.0, *height] {
                        let t = (cap - rel.dot(axis)) / dn;
                        let p = rel + dir * t;
                        let radial = p - axis * p.dot(axis);
                        if radial.norm_squared() <= radius * radius {
                            consider(t);
                        }
                    }
                }
                best
            }
            Shape::Disc {
                center,
                normal,
                radius,
            } => {
                let dn = dir.dot(normal);
                if dn == 0.0 {
                    return None;
                }
                let t = (center - origin).dot(normal) / dn;
                let p = origin + dir * t;
                if (p - center).norm_squared() <= radius * radius {
                    accept(t)
                } else {
                    None
                }
            }
        }
    }

    /// Distance-like residual of `p` from the surface; zero on the surface.
    pub fn surface_residual(&self, p: &Point3<f64>) -> f64 {
        match self {
            Shape::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Shape::Ellipsoid {
                center,
                radii,
                rotation,
            } => {
                let local = rotation.inverse_transform_vector(&(p - center)).component_div(radii);
                (local.norm() - 1.0).abs() * radii.min()
            }
            Shape::Cylinder {
                base,
                axis,
                height,
                radius,
            } => {
                let rel = p - base;
                let h = rel.dot(axis);
                let radial = (rel - axis * h).norm();
                let mut best = f64::INFINITY;
                if (-1e-9..=height + 1e-9).contains(&h) {
                    best = best.min((radial - radius).abs());
                }
                if radial <= radius + 1e-9 {
                    best = best.min(h.abs()).min((h - height).abs());
                }
                best
            }
            Shape::Disc {
                center,
                normal,
                radius,
            } => {
                let rel = p - center;
                let off = rel.dot(normal);
                let radial = (rel - normal * off).norm();
                if radial <= radius + 1e-9 {
                    off.abs()
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Center and radius of a sphere enclosing the shape.
    pub fn bounding_sphere(&self) -> (Point3<f64>, f64) {
        match self {
            Shape::Sphere { center, radius } => (*center, *radius),
            Shape::Ellipsoid { center, radii, .. } => (*center, radii.max()),
            Shape::Cylinder {
                base,
                axis,
                height,
                radius,
            } => (base + axis * (height / 2.0), (height * height / 4.0 + radius * radius).sqrt()),
            Shape::Disc { center, radius, .. } => (*center, *radius),
        }
    }

    /// Lowest z coordinate reached by the shape.
    pub fn min_z(&self) -> f64 {
        match self {
            Shape::Sphere { center, radius } => center.z - radius,
            Shape::Ellipsoid {
                center,
                radii,
                rotation,
            } => {
                // support function of the ellipsoid along -z
                let m = rotation.to_rotation_matrix();
                let row = m.matrix().row(2);
                let ext = (0..3)
                    .map(|i| (row[i] * radii[i]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                center.z - ext
            }
            Shape::Cylinder {
                base,
                axis,
                height,
                radius,
            } => {
                let top = base + axis * *height;
                let cap_ext = radius * (1.0 - axis.z * axis.z).max(0.0).sqrt();
                base.z.min(top.z) - cap_ext
            }
            Shape::Disc {
                center,
                normal,
                radius,
            } => center.z - radius * (1.0 - normal.z * normal.z).max(0.0).sqrt(),
        }
    }
}

/// Roots of `|o + t d| = 1`, ascending.
fn ray_unit_sphere(o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
    let a = d.norm_squared();
    let b = o.dot(d);
    let c = o.norm_squared() - 1.0;
    let disc = b * b - a * c;
    if disc < 0.0 || a == 0.0 {
        return None;
    }
    let s = disc.sqrt();
    // numerically stable pair
    let q = if b >= 0.0 { -(b + s) } else { -(b - s) };
    let (r0, r1) = if q != 0.0 { (q / a, c / q) } else { (0.0, 0.0) };
    Some((r0.min(r1), r0.max(r1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub class: SemanticClass,
    /// Unique positive id for fruits, 0 for everything else.
    pub instance_id: u32,
    /// Owning plant index, `None` for scene-level geometry such as the ground.
    pub plant: Option<usize>,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowGeometry {
    pub row_id: usize,
    /// Row axis endpoints on the ground plane.
    pub start: Point3<f64>,
    pub end: Point3<f64>,
    pub height_extent: (f64, f64),
}

impl RowGeometry {
    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    pub fn direction(&self) -> Vector3<f64> {
        (self.end - self.start).normalize()
    }

    /// Horizontal unit normal of the vertical row plane pointing to `side` (+1 or -1).
    pub fn side_normal(&self, side: f64) -> Vector3<f64> {
        Vector3::z().cross(&self.direction()) * side
    }

    pub fn point_at(&self, fraction: f64) -> Point3<f64> {
        self.start + (self.end - self.start) * fraction
    }

    /// Signed horizontal distance from the row plane.
    pub fn lateral_offset(&self, p: &Point3<f64>) -> f64 {
        (p - self.start).dot(&self.side_normal(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantInfo {
    pub row_id: usize,
    pub position: Point3<f64>,
    pub height: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub version: u32,
    pub config: SceneConfig,
    pub primitives: Vec<Primitive>,
    pub rows: Vec<RowGeometry>,
    pub plants: Vec<PlantInfo>,
}

impl Scene {
    pub fn empty() -> Self {
        Self {
            version: SCENE_FORMAT_VERSION,
            config: SceneConfig::default(),
            primitives: Vec::new(),
            rows: Vec::new(),
            plants: Vec::new(),
        }
    }

    pub fn fruits(&self) -> impl Iterator<Item = &Primitive> {
        self.primitives
            .iter()
            .filter(|p| p.class == SemanticClass::Fruit && p.instance_id > 0)
    }

    /// Fruit primitives growing on plants of `row_id`.
    pub fn row_fruits(&self, row_id: usize) -> impl Iterator<Item = &Primitive> {
        self.fruits().filter(move |p| {
            p.plant
                .map(|idx| self.plants[idx].row_id == row_id)
                .unwrap_or(false)
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        if scene.version != SCENE_FORMAT_VERSION {
            return Err(Error::format(
                "scene",
                format!("unsupported version {}", scene.version),
            ));
        }
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn jitter_color(base: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let k: f64 = rng.gen_range(0.9..=1.1);
    base.map(|c| (c * k).clamp(0.0, 1.0))
}

fn palette(class: SemanticClass, variant: usize) -> [f64; 3] {
    match class {
        SemanticClass::Fruit => match variant % 3 {
            0 => [0.78, 0.12, 0.10],
            1 => [0.90, 0.55, 0.08],
            _ => [0.85, 0.20, 0.15],
        },
        SemanticClass::Leaf => [0.20, 0.52, 0.16],
        SemanticClass::Background => [0.42, 0.33, 0.24],
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn sample_count(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

/// Distance from a point to a flat disc.
fn point_disc_distance(p: &Point3<f64>, center: &Point3<f64>, normal: &Vector3<f64>, radius: f64) -> f64 {
    let rel = p - center;
    let off = rel.dot(normal);
    let planar = rel - normal * off;
    let r = planar.norm();
    if r <= radius {
        off.abs()
    } else {
        let edge = center + planar * (radius / r);
        (p - edge).norm()
    }
}

/// Builds a deterministic scene for `config`.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut primitives = Vec::new();
    let mut rows = Vec::new();
    let mut plants = Vec::new();
    let mut next_instance = 1u32;

    if config.ground {
        primitives.push(Primitive {
            shape: Shape::Disc {
                center: Point3::new(0.0, 0.0, 0.0),
                normal: Vector3::z(),
                radius: GROUND_RADIUS,
            },
            class: SemanticClass::Background,
            instance_id: 0,
            plant: None,
            color: palette(SemanticClass::Background, 0),
        });
    }

    let row_length = config.plants_per_row as f64 * config.plant_spacing;
    for row_id in 0..config.n_rows {
        let y = row_id as f64 * config.row_spacing;
        let mut max_height: f64 = 0.0;
        for j in 0..config.plants_per_row {
            let position = Point3::new((j as f64 + 0.5) * config.plant_spacing, y, 0.0);
            let height = sample_range(&mut rng, config.plant_height_range);
            let yaw = rng.gen_range(0.0..2.0 * PI);
            max_height = max_height.max(height);
            let plant_idx = plants.len();
            plants.push(PlantInfo {
                row_id,
                position,
                height,
                yaw,
            });
            let variant = (row_id + j) % 3;
            primitives.push(Primitive {
                shape: Shape::Cylinder {
                    base: position,
                    axis: Vector3::z(),
                    height,
                    radius: STEM_RADIUS,
                },
                class: config.stem_class,
                instance_id: 0,
                plant: Some(plant_idx),
                color: jitter_color([0.30, 0.45, 0.20], &mut rng),
            });

            // fruits first so leaves can be placed around them
            let mut fruits: Vec<(Point3<f64>, f64)> = Vec::new();
            let n_fruits = sample_count(&mut rng, config.fruits_per_plant_range);
            for _ in 0..n_fruits {
                for _attempt in 0..200 {
                    let radius = sample_range(&mut rng, config.fruit_radius_range);
                    let z = rng.gen_range(0.3 * height..0.85 * height);
                    let az = yaw + rng.gen_range(0.0..2.0 * PI);
                    let gap = rng.gen_range(0.005..0.02);
                    let off = STEM_RADIUS + radius + gap;
                    let center = Point3::new(position.x + off * az.cos(), position.y + off * az.sin(), z);
                    if center.z - radius < 0.02 {
                        continue;
                    }
                    let clear = fruits
                        .iter()
                        .all(|(c, r)| (c - center).norm() - r - radius >= MIN_FRUIT_GAP);
                    let clear_others = primitives.iter().all(|p| match (&p.shape, p.class) {
                        (Shape::Sphere { center: c, radius: r }, SemanticClass::Fruit) => {
                            (c - center).norm() - r - radius >= MIN_FRUIT_GAP
                        }
                        _ => true,
                    });
                    if clear && clear_others {
                        fruits.push((center, radius));
                        break;
                    }
                }
            }
            for &(center, radius) in &fruits {
                primitives.push(Primitive {
                    shape: Shape::Sphere { center, radius },
                    class: SemanticClass::Fruit,
                    instance_id: next_instance,
                    plant: Some(plant_idx),
                    color: jitter_color(palette(SemanticClass::Fruit, variant), &mut rng),
                });
                next_instance += 1;
            }

            let n_leaves = sample_count(&mut rng, config.leaf_count_range);
            for _ in 0..n_leaves {
                for _attempt in 0..100 {
                    let leaf_r = rng.gen_range(0.035..0.06);
                    let z = rng.gen_range(0.15 * height..0.95 * height);
                    let az = yaw + rng.gen_range(0.0..2.0 * PI);
                    let outward = Vector3::new(az.cos(), az.sin(), 0.0);
                    let center = position + outward * (STEM_RADIUS + 0.9 * leaf_r) + Vector3::z() * z;
                    let tilt = rng.gen_range(20f64.to_radians()..60f64.to_radians());
                    let normal = (Vector3::z() * tilt.cos() + outward * tilt.sin()).normalize();
                    let clear = fruits
                        .iter()
                        .all(|(c, r)| point_disc_distance(c, &center, &normal, leaf_r) > r + 0.006);
                    if !clear || center.z - leaf_r < 0.0 {
                        continue;
                    }
                    let shape = if rng.gen_bool(0.3) {
                        let rotation = UnitQuaternion::rotation_between(&Vector3::z(), &normal)
                            .unwrap_or_else(UnitQuaternion::identity);
                        Shape::Ellipsoid {
                            center,
                            radii: Vector3::new(leaf_r, 0.7 * leaf_r, 0.004),
                            rotation,
                        }
                    } else {
                        Shape::Disc {
                            center,
                            normal,
                            radius: leaf_r,
                        }
                    };
                    if let Shape::Ellipsoid { .. } = shape {
                        // ellipsoid leaves are slightly thicker; keep them off the fruit too
                        let ok = fruits
                            .iter()
                            .all(|(c, r)| point_disc_distance(c, &center, &normal, leaf_r) > r + 0.01);
                        if !ok || shape.min_z() < 0.0 {
                            continue;
                        }
                    }
                    primitives.push(Primitive {
                        shape,
                        class: SemanticClass::Leaf,
                        instance_id: 0,
                        plant: Some(plant_idx),
                        color: jitter_color(palette(SemanticClass::Leaf, variant), &mut rng),
                    });
                    break;
                }
            }
        }
        rows.push(RowGeometry {
            row_id,
            start: Point3::new(0.0, y, 0.0),
            end: Point3::new(row_length, y, 0.0),
            height_extent: (0.0, max_height),
        });
    }

    Ok(Scene {
        version: SCENE_FORMAT_VERSION,
        config: config.clone(),
        primitives,
        rows,
        plants,
    })
}

/// Exact rendered sensor output.
#[derive(Debug, Clone)]
pub struct GroundTruthFrame {
    pub camera: CameraModel,
    /// Camera-to-world transform of the sensor.
    pub pose: CameraPose,
    pub color: Vec<[f64; 3]>,
    /// Camera z-depth; `camera.far` marks pixels without a return.
    pub depth: Vec<f64>,
    pub labels: Vec<u8>,
    pub instance_ids: Vec<u32>,
}

/// Ray casts every pixel against the scene and returns the nearest hit.
pub fn render_ground_truth(scene: &Scene, pose: &CameraPose, cam: &CameraModel) -> GroundTruthFrame {
    let n = cam.pixel_count();
    let mut frame = GroundTruthFrame {
        camera: *cam,
        pose: *pose,
        color: vec![SKY_COLOR; n],
        depth: vec![cam.far; n],
        labels: vec![SemanticClass::Background.id(); n],
        instance_ids: vec![0; n],
    };
    let origin = Point3::from(pose.translation.vector);

    // bounding spheres per plant, plus unowned primitives tested individually
    let mut groups: Vec<(Point3<f64>, f64, Vec<usize>)> = Vec::new();
    let mut plant_group = vec![usize::MAX; scene.plants.len()];
    let mut loose = Vec::new();
    for (i, prim) in scene.primitives.iter().enumerate() {
        match prim.plant {
            Some(p) if p < plant_group.len() => {
                if plant_group[p] == usize::MAX {
                    plant_group[p] = groups.len();
                    groups.push((Point3::origin(), 0.0, Vec::new()));
                }
                groups[plant_group[p]].2.push(i);
            }
            _ => loose.push(i),
        }
    }
    for g in &mut groups {
        let spheres: Vec<_> = g.2.iter().map(|&i| scene.primitives[i].shape.bounding_sphere()).collect();
        let c = spheres.iter().fold(Vector3::zeros(), |acc, (c, _)| acc + c.coords) / spheres.len() as f64;
        let c = Point3::from(c);
        let r = spheres
            .iter()
            .map(|(sc, sr)| (sc - c).norm() + sr)
            .fold(0.0, f64::max);
        g.0 = c;
        g.1 = r;
    }

    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir = pose.rotation * cam.pixel_ray(u as f64, v as f64);
            let mut best_t = cam.far;
            let mut best: Option<usize> = None;
            let test = |i: usize, best_t: &mut f64, best: &mut Option<usize>| {
                if let Some(t) = scene.primitives[i].shape.intersect(&origin, &dir, cam.near, *best_t) {
                    *best_t = t;
                    *best = Some(i);
                }
            };
            for &i in &loose {
                test(i, &mut best_t, &mut best);
            }
            for (c, r, members) in &groups {
                if !ray_hits_sphere(&origin, &dir, c, *r, cam.near, best_t) {
                    continue;
                }
                for &i in members {
                    test(i, &mut best_t, &mut best);
                }
            }
            if let Some(i) = best {
                let idx = v * cam.width + u;
                let prim = &scene.primitives[i];
                frame.depth[idx] = best_t;
                frame.color[idx] = prim.color;
                frame.labels[idx] = prim.class.id();
                frame.instance_ids[idx] = prim.instance_id;
            }
        }
    }
    frame
}

fn ray_hits_sphere(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    center: &Point3<f64>,
    radius: f64,
    t_min: f64,
    t_max: f64,
) -> bool {
    match ray_unit_sphere(&((origin - center) / radius), &(dir / radius)) {
        Some((t0, t1)) => t1 > t_min && t0 < t_max,
        None => false,
    }
}

/// Dense samples on the fruit surfaces of a scene (or one row of it).
#[derive(Debug, Clone, Default)]
pub struct FruitGroundTruth {
    pub points: PointCloud,
    pub point_instances: Vec<u32>,
    /// `(instance_id, analytic volume)` per fruit.
    pub volumes: Vec<(u32, f64)>,
    pub count: usize,
}

impl FruitGroundTruth {
    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().map(|(_, v)| v).sum()
    }
}

/// Samples every fruit surface at `surface_density` points per square meter.
pub fn ground_truth_fruit_cloud(scene: &Scene, surface_density: f64) -> FruitGroundTruth {
    fruit_cloud_from(scene.fruits(), surface_density)
}

/// Same as [`ground_truth_fruit_cloud`] restricted to one row.
pub fn row_fruit_cloud(scene: &Scene, row_id: usize, surface_density: f64) -> FruitGroundTruth {
    fruit_cloud_from(scene.row_fruits(row_id), surface_density)
}

fn fruit_cloud_from<'a>(fruits: impl Iterator<Item = &'a Primitive>, density: f64) -> FruitGroundTruth {
    let mut gt = FruitGroundTruth::default();
    for prim in fruits {
        if let Shape::Sphere { center, radius } = prim.shape {
            let area = 4.0 * PI * radius * radius;
            let n = ((area * density).ceil() as usize).max(1);
            for p in fibonacci_sphere(n) {
                gt.points.push(center + p * radius);
                gt.point_instances.push(prim.instance_id);
            }
            gt.volumes.push((prim.instance_id, 4.0 / 3.0 * PI * radius.powi(3)));
            gt.count += 1;
        }
    }
    gt
}

/// `n` nearly uniform unit vectors on the sphere (golden-angle spiral).
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at;
    use approx::assert_relative_eq;
    use nalgebra::Isometry3;

    fn sphere_scene(center: Point3<f64>, radius: f64) -> Scene {
        let mut scene = Scene::empty();
        scene.primitives.push(Primitive {
            shape: Shape::Sphere { center, radius },
            class: SemanticClass::Fruit,
            instance_id: 1,
            plant: None,
            color: [1.0, 0.0, 0.0],
        });
        scene
    }

    fn axis_camera() -> CameraModel {
        CameraModel {
            width: 41,
            height: 31,
            fx: 50.0,
            fy: 50.0,
            cx: 20.0,
            cy: 15.0,
            near: 0.05,
            far: 2.0,
        }
    }

    #[test]
    fn six_rows_of_five_give_thirty_plants() {
        let cfg = SceneConfig {
            n_rows: 6,
            plants_per_row: 5,
            rng_seed: 1,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        assert_eq!(scene.plants.len(), 30);
        assert_eq!(scene.rows.len(), 6);
        for plant in 0..30 {
            let stems = scene
                .primitives
                .iter()
                .filter(|p| p.plant == Some(plant) && matches!(p.shape, Shape::Cylinder { .. }))
                .count();
            assert_eq!(stems, 1);
        }
    }

    #[test]
    fn no_fruit_configuration() {
        let cfg = SceneConfig {
            n_rows: 1,
            plants_per_row: 1,
            fruits_per_plant_range: (0, 0),
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        assert_eq!(scene.fruits().count(), 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let other = generate_scene(&SceneConfig {
            rng_seed: 2,
            ..cfg
        })
        .unwrap();
        assert_ne!(a.primitives, other.primitives);
    }

    #[test]
    fn scene_invariants_hold() {
        for seed in 0..5 {
            let scene = generate_scene(&SceneConfig {
                n_rows: 2,
                rng_seed: seed,
                ..SceneConfig::default()
            })
            .unwrap();
            let mut ids: Vec<u32> = scene.fruits().map(|p| p.instance_id).collect();
            let n = ids.len();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), n, "fruit ids must be unique");
            for p in &scene.primitives {
                assert!(p.shape.min_z() >= -1e-12, "{:?} below ground", p.shape);
            }
            for plant in 0..scene.plants.len() {
                let n_fruit = scene
                    .fruits()
                    .filter(|p| p.plant == Some(plant))
                    .count();
                assert!(n_fruit <= 3);
            }
        }
    }

    #[test]
    fn invalid_spacing_rejected() {
        let cfg = SceneConfig {
            plant_spacing: 0.0,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn sphere_depth_on_optical_axis() {
        let scene = sphere_scene(Point3::new(0.0, 0.0, 0.5), 0.05);
        let cam = axis_camera();
        let frame = render_ground_truth(&scene, &Isometry3::identity(), &cam);
        let idx = 15 * cam.width + 20;
        assert_relative_eq!(frame.depth[idx], 0.45, epsilon = 1e-12);
        assert_eq!(frame.labels[idx], SemanticClass::Fruit.id());
        assert_eq!(frame.instance_ids[idx], 1);
    }

    #[test]
    fn empty_scene_renders_background() {
        let cam = axis_camera();
        let frame = render_ground_truth(&Scene::empty(), &Isometry3::identity(), &cam);
        assert!(frame.labels.iter().all(|&l| l == SemanticClass::Background.id()));
        assert!(frame.depth.iter().all(|&d| d == cam.far));
    }

    #[test]
    fn sphere_behind_camera_invisible() {
        let scene = sphere_scene(Point3::new(0.0, 0.0, -0.5), 0.05);
        let cam = axis_camera();
        let frame = render_ground_truth(&scene, &Isometry3::identity(), &cam);
        assert!(frame.depth.iter().all(|&d| d == cam.far));
    }

    #[test]
    fn back_projection_lands_on_hit_surface() {
        let scene = generate_scene(&SceneConfig::default()).unwrap();
        let cam = CameraModel::default().scaled(0.5);
        let pose = look_at(Point3::new(0.8, 0.45, 0.4), Point3::new(0.8, 0.0, 0.3));
        let frame = render_ground_truth(&scene, &pose, &cam);
        let fruit_ids: Vec<u32> = scene.fruits().map(|p| p.instance_id).collect();
        let mut hits = 0;
        for v in 0..cam.height {
            for u in 0..cam.width {
                let idx = v * cam.width + u;
                let d = frame.depth[idx];
                if d >= cam.far {
                    continue;
                }
                hits += 1;
                let p = pose * cam.back_project(u as f64, v as f64, d);
                let residual = scene
                    .primitives
                    .iter()
                    .map(|prim| prim.shape.surface_residual(&p))
                    .fold(f64::INFINITY, f64::min);
                assert!(residual < 1e-6, "pixel ({u},{v}) residual {residual}");
                let id = frame.instance_ids[idx];
                assert!(id == 0 || fruit_ids.contains(&id));
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn cylinder_and_disc_intersections() {
        let cyl = Shape::Cylinder {
            base: Point3::new(0.0, 0.0, 0.0),
            axis: Vector3::z(),
            height: 1.0,
            radius: 0.1,
        };
        let t = cyl
            .intersect(&Point3::new(-1.0, 0.0, 0.5), &Vector3::x(), 0.0, 10.0)
            .unwrap();
        assert_relative_eq!(t, 0.9, epsilon = 1e-12);
        // from above through the top cap
        let t = cyl
            .intersect(&Point3::new(0.0, 0.0, 2.0), &-Vector3::z(), 0.0, 10.0)
            .unwrap();
        assert_relative_eq!(t, 1.0, epsilon = 1e-12);
        let disc = Shape::Disc {
            center: Point3::new(0.0, 0.0, 1.0),
            normal: Vector3::z(),
            radius: 0.2,
        };
        assert!(disc
            .intersect(&Point3::new(0.3, 0.0, 0.0), &Vector3::z(), 0.0, 10.0)
            .is_none());
        assert_relative_eq!(
            disc.intersect(&Point3::new(0.1, 0.0, 0.0), &Vector3::z(), 0.0, 10.0).unwrap(),
            1.0
        );
    }

    #[test]
    fn ellipsoid_intersection_matches_scaled_sphere() {
        let e = Shape::Ellipsoid {
            center: Point3::new(0.0, 0.0, 1.0),
            radii: Vector3::new(0.2, 0.1, 0.05),
            rotation: UnitQuaternion::identity(),
        };
        let t = e.intersect(&Point3::origin(), &Vector3::z(), 0.0, 10.0).unwrap();
        assert_relative_eq!(t, 0.95, epsilon = 1e-12);
        let t = e
            .intersect(&Point3::new(-1.0, 0.0, 1.0), &Vector3::x(), 0.0, 10.0)
            .unwrap();
        assert_relative_eq!(t, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn fruit_volumes_are_analytic() {
        let scene = sphere_scene(Point3::new(0.0, 0.0, 0.5), 0.03);
        let gt = ground_truth_fruit_cloud(&scene, 1e5);
        assert_eq!(gt.count, 1);
        assert_relative_eq!(gt.total_volume(), 1.131e-4, max_relative = 1e-3);
        assert!(gt.points.iter().all(|p| ((p - Point3::new(0.0, 0.0, 0.5)).norm() - 0.03).abs() < 1e-12));

        let mut two = scene.clone();
        two.primitives.push(Primitive {
            shape: Shape::Sphere {
                center: Point3::new(0.5, 0.0, 0.5),
                radius: 0.03,
            },
            class: SemanticClass::Fruit,
            instance_id: 2,
            plant: None,
            color: [1.0, 0.0, 0.0],
        });
        let gt = ground_truth_fruit_cloud(&two, 1e5);
        assert_eq!(gt.count, 2);
        assert_relative_eq!(gt.total_volume(), 2.0 * 4.0 / 3.0 * PI * 0.03f64.powi(3), max_relative = 1e-12);
        assert_relative_eq!(gt.total_volume(), 2.262e-4, max_relative = 1e-3);

        let gt = ground_truth_fruit_cloud(&Scene::empty(), 1e5);
        assert!(gt.points.is_empty());
        assert_eq!(gt.count, 0);
    }

    #[test]
    fn scene_json_round_trip() {
        let scene = generate_scene(&SceneConfig::default()).unwrap();
        let back = Scene::from_json(&scene.to_json().unwrap()).unwrap();
        assert_eq!(scene, back);
        let bad = scene.to_json().unwrap().replacen("\"version\": 1", "\"version\": 99", 1);
        assert!(Scene::from_json(&bad).is_err());
    }
}
