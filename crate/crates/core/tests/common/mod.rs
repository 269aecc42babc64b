//! Reference implementations shared by the integration tests. Nothing here
//! calls into the renderer or sampler it is used to check.
#![allow(dead_code)]

use rand::Rng;
use voxreloc::descriptors::{crop_patch, similarity, Keypoint};
use voxreloc::geometry::{project, CameraIntrinsics, Pose, Ray, Vec3};
use voxreloc::renderer::{render_patch_at, render_ray};
use voxreloc::trainer::{backward, compute_loss, ray_alphas, LossWeights};
use voxreloc::voxel::VoxelLandmark;

pub fn random_voxel<R: Rng>(rng: &mut R, r: usize, c: usize) -> VoxelLandmark {
    let nodes = r * r * r;
    VoxelLandmark {
        center: Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
        side: rng.gen_range(0.05..1.5),
        resolution: r,
        channels: c,
        desc_nodes: (0..nodes * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        density_nodes: (0..nodes).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        track_id: 0,
    }
}

/// A ray starting outside the cube and aimed at a random interior point.
pub fn random_hitting_ray<R: Rng>(rng: &mut R, v: &VoxelLandmark) -> Ray {
    let h = 0.45 * v.side;
    let aim = v.center + Vec3::new(rng.gen_range(-h..h), rng.gen_range(-h..h), rng.gen_range(-h..h));
    let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let dir = if dir.norm() < 1e-3 { Vec3::z() } else { dir.normalize() };
    let origin = aim - dir * rng.gen_range(2.0..6.0) * v.side;
    Ray::new(origin, aim - origin)
}

/// Sum over every lattice node of the product of 1D tent functions.
pub fn tent_trilinear(v: &VoxelLandmark, nodes: &[f64], width: usize, p: &Vec3) -> Vec<f64> {
    let r = v.resolution;
    let cells = (r - 1) as f64;
    let lo = v.center - Vec3::repeat(0.5 * v.side);
    let u = (p - lo) / v.side * cells;
    let mut out = vec![0.0; width];
    for c in 0..r {
        for b in 0..r {
            for a in 0..r {
                let w = (1.0 - (u.x - a as f64).abs()).max(0.0)
                    * (1.0 - (u.y - b as f64).abs()).max(0.0)
                    * (1.0 - (u.z - c as f64).abs()).max(0.0);
                if w == 0.0 {
                    continue;
                }
                let idx = a + r * (b + r * c);
                for (o, x) in out.iter_mut().zip(&nodes[idx * width..(idx + 1) * width]) {
                    *o += w * x;
                }
            }
        }
    }
    out
}

fn slab(ray: &Ray, center: &Vec3, side: f64) -> Option<(f64, f64)> {
    let d = ray.direction();
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let a = (center[k] - 0.5 * side - ray.origin[k]) / d[k];
        let b = (center[k] + 0.5 * side - ray.origin[k]) / d[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    t0 = t0.max(0.0);
    (t1 > t0).then_some((t0, t1))
}

/// Plain loop volume rendering: midpoint samples, softplus density per side,
/// transmittance as an explicit product.
pub fn naive_render(v: &VoxelLandmark, ray: &Ray, n: usize) -> Option<(Vec<f64>, f64)> {
    let (t0, t1) = slab(ray, &v.center, v.side)?;
    let delta = (t1 - t0) / n as f64;
    let d = ray.direction();
    let mut sigmas = Vec::new();
    let mut descs = Vec::new();
    for i in 0..n {
        let p = ray.origin + d * (t0 + (i as f64 + 0.5) * delta);
        let raw = tent_trilinear(v, &v.density_nodes, 1, &p)[0];
        sigmas.push((1.0 + raw.exp()).ln() / v.side);
        descs.push(tent_trilinear(v, &v.desc_nodes, v.channels, &p));
    }
    let mut out = vec![0.0; v.channels];
    let mut opacity = 0.0;
    for i in 0..n {
        let mut trans = 1.0;
        for s in &sigmas[..i] {
            trans *= (-s * delta).exp();
        }
        let w = trans * (1.0 - (-sigmas[i] * delta).exp());
        opacity += w;
        for (o, x) in out.iter_mut().zip(&descs[i]) {
            *o += w * x;
        }
    }
    Some((out, opacity))
}

pub fn loss_of(v: &VoxelLandmark, ray: &Ray, target: &[f64], w: &LossWeights, n: usize) -> f64 {
    let (r, _) = render_ray(v, ray, n).unwrap();
    let a = ray_alphas(v, ray, n).unwrap();
    compute_loss(&r, target, v, &a, w).unwrap().total
}

/// Worst relative error of `backward` against central differences over every
/// lattice parameter.
pub fn gradient_error(v: &VoxelLandmark, ray: &Ray, target: &[f64], w: &LossWeights, n: usize) -> f64 {
    let g = backward(v, ray, target, w, n).unwrap();
    let h = 1e-6;
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
    let mut worst: f64 = 0.0;
    for i in 0..v.desc_nodes.len() {
        let (mut p, mut m) = (v.clone(), v.clone());
        p.desc_nodes[i] += h;
        m.desc_nodes[i] -= h;
        let fd = (loss_of(&p, ray, target, w, n) - loss_of(&m, ray, target, w, n)) / (2.0 * h);
        worst = worst.max(rel(fd, g.desc[i]));
    }
    for i in 0..v.density_nodes.len() {
        let (mut p, mut m) = (v.clone(), v.clone());
        p.density_nodes[i] += h;
        m.density_nodes[i] -= h;
        let fd = (loss_of(&p, ray, target, w, n) - loss_of(&m, ray, target, w, n)) / (2.0 * h);
        worst = worst.max(rel(fd, g.density[i]));
    }
    worst
}

/// Mean cosine between the rendered patch and the patch cropped from a view
/// at the voxel center's projection, skipping elements that render to zero.
pub fn view_cosine(
    v: &VoxelLandmark,
    pose: &Pose,
    map: &voxreloc::descriptors::DescriptorMap,
    intr: &CameraIntrinsics,
    patch: usize,
    samples: usize,
) -> f64 {
    let px = project(pose, intr, &v.center).unwrap();
    let kp = Keypoint::new(px.x, px.y);
    let target = crop_patch(map, &kp, patch).unwrap();
    let rendered = render_patch_at(v, pose, intr, &kp, patch, samples).unwrap();
    let mut sum = 0.0;
    let mut count = 0;
    for row in 0..patch {
        for col in 0..patch {
            let a = rendered.element(row, col);
            if a.iter().all(|x| *x == 0.0) {
                continue;
            }
            if let Ok(s) = similarity(a, target.element(row, col)) {
                sum += s;
                count += 1;
            }
        }
    }
    sum / count.max(1) as f64
}
