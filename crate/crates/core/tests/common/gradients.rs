//! Finite-difference check of the mapping loss gradient on small random
//! fixtures.

use agrisplat::geometry::{look_at, CameraModel};
use agrisplat::perception::{SemanticObservation, NUM_CLASSES};
use agrisplat::splat::{
    backward, mapping_loss, render, render_with_state, Gaussian3D, LossWeights, RenderOptions,
    PARAMS_PER_SPLAT,
};
use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub gaussians: Vec<Gaussian3D>,
    pub obs: SemanticObservation,
    pub mask: Vec<bool>,
    pub weights: LossWeights,
}

/// Moves `target` away from `rendered` by at least `gap` so that absolute
/// value terms stay on one side of their kink under small perturbations.
fn nudge(rng: &mut ChaCha8Rng, rendered: f64, gap: f64, lo: f64, hi: f64) -> f64 {
    loop {
        let t: f64 = rng.gen_range(lo..hi);
        if (t - rendered).abs() >= gap {
            return t;
        }
    }
}

pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = CameraModel {
        width: 8,
        height: 8,
        fx: 8.0,
        fy: 8.0,
        cx: 3.5,
        cy: 3.5,
        near: 0.05,
        far: 5.0,
    };
    let eye = Point3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
    let dir = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0);
    let pose = look_at(eye, eye + dir);
    let n = rng.gen_range(1..=5);
    let mut gaussians = Vec::new();
    // distinct depths keep the sort order fixed under perturbation
    let mut depths: Vec<f64> = Vec::new();
    while gaussians.len() < n {
        let z: f64 = rng.gen_range(0.8..1.6);
        if depths.iter().any(|d| (d - z).abs() < 0.02) {
            continue;
        }
        depths.push(z);
        let pc = Point3::new(rng.gen_range(-0.4..0.4) * z, rng.gen_range(-0.4..0.4) * z, z);
        let mut g = Gaussian3D::new(
            pose * pc,
            rng.gen_range(0.06..0.2),
            [rng.gen(), rng.gen(), rng.gen()],
            rng.gen_range(0.1..0.9),
            [1.0 / 3.0; NUM_CLASSES],
        );
        for l in g.semantic_logits.iter_mut() {
            *l = rng.gen_range(-1.5..1.5);
        }
        gaussians.push(g);
    }
    let rendered = render(&gaussians, &camera, &pose, &RenderOptions::exact());
    let npix = camera.pixel_count();
    let mut color = Vec::with_capacity(npix);
    let mut depth = Vec::with_capacity(npix);
    let mut labels = Vec::with_capacity(npix);
    let mut confidence = Vec::with_capacity(npix);
    for i in 0..npix {
        color.push([0, 1, 2].map(|c| nudge(&mut rng, rendered.color[i][c], 0.02, 0.0, 1.0)));
        depth.push(nudge(&mut rng, rendered.depth[i], 0.02, 0.1, 2.0));
        labels.push(rng.gen_range(0..NUM_CLASSES as u8));
        confidence.push(rng.gen());
    }
    let mask = (0..npix).map(|_| rng.gen_bool(0.8)).collect();
    Fixture {
        gaussians,
        obs: SemanticObservation {
            camera,
            pose,
            color,
            depth,
            labels,
            confidence,
        },
        mask,
        weights: LossWeights::default(),
    }
}

pub fn loss_of(fx: &Fixture, gaussians: &[Gaussian3D]) -> f64 {
    let r = render(gaussians, &fx.obs.camera, &fx.obs.pose, &RenderOptions::exact());
    mapping_loss(&r, &fx.obs, &fx.weights, &fx.mask).unwrap().0.total
}

/// Worst violation of `|a - fd| <= max(rel * max(|a|, |fd|), abs)` over all
/// parameters, as `(violation, analytic, numeric)`; violation <= 0 passes.
pub fn check(fx: &Fixture, h: f64, rel: f64, abs: f64) -> (f64, f64, f64) {
    let opts = RenderOptions::exact();
    let (r, state) = render_with_state(&fx.gaussians, &fx.obs.camera, &fx.obs.pose, &opts);
    let (_, upstream) = mapping_loss(&r, &fx.obs, &fx.weights, &fx.mask).unwrap();
    let grads = backward(&fx.gaussians, &fx.obs.camera, &fx.obs.pose, &state, &upstream, &opts);
    let mut worst = (f64::NEG_INFINITY, 0.0, 0.0);
    for (i, g) in fx.gaussians.iter().enumerate() {
        for k in 0..PARAMS_PER_SPLAT {
            let mut plus = fx.gaussians.clone();
            let mut minus = fx.gaussians.clone();
            let mut p = g.params();
            p[k] += h;
            plus[i].set_params(&p);
            p[k] -= 2.0 * h;
            minus[i].set_params(&p);
            let fd = (loss_of(fx, &plus) - loss_of(fx, &minus)) / (2.0 * h);
            let a = grads[i][k];
            let violation = (a - fd).abs() - (rel * a.abs().max(fd.abs())).max(abs);
            if violation > worst.0 {
                worst = (violation, a, fd);
            }
        }
    }
    worst
}
