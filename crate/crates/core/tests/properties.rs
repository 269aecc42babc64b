mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxreloc::descriptors::{crop_patch, DescriptorMap, Keypoint};
use voxreloc::geometry::{
    axis_angle, project, ray_box_intersect, ray_through_pixel, CameraIntrinsics, Pose, Ray, Vec2, Vec3,
};
use voxreloc::mapstore::{decode_map, encode_map};
use voxreloc::relocalizer::match_features;
use voxreloc::renderer::{activate, render_ray, sample_ray, RenderedFeature};
use voxreloc::tracking::match_consecutive;
use voxreloc::trainer::{compute_loss, ray_alphas, LossWeights};
use voxreloc::triangulation::{dlt_from_measurements, refine_measurements, Measurement, TriangulationConfig};
use voxreloc::voxel::{trilinear_sample, VoxelMap};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn intr() -> CameraIntrinsics {
    CameraIntrinsics::centered(300.0, 320, 240).unwrap()
}

fn random_pose(r: &mut ChaCha8Rng) -> Pose {
    let axis = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vec3::x() } else { axis };
    let t = Vec3::new(r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0));
    Pose::new(axis_angle(&axis, r.gen_range(-3.0..3.0)), t).unwrap()
}

fn random_map(r: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> DescriptorMap {
    let data = (0..w * h * c).map(|_| r.gen_range(-1.0f32..1.0)).collect();
    DescriptorMap::new(w, h, c, data).unwrap()
}

fn random_keypoints(r: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> Vec<Keypoint> {
    (0..n)
        .map(|_| Keypoint::new(r.gen_range(0.0..w as f64 - 1.0), r.gen_range(0.0..h as f64 - 1.0)))
        .collect()
}

/// Per-sample compositing weights rebuilt from the sampled raw densities.
fn weights(v: &voxreloc::voxel::VoxelLandmark, ray: &Ray, n: usize) -> Vec<f64> {
    let s = sample_ray(v, ray, n).unwrap();
    let mut trans = 1.0;
    s.raw_density
        .iter()
        .map(|&raw| {
            let tau = activate(raw, v.side) * s.delta;
            let w = trans * (1.0 - (-tau).exp());
            trans *= (-tau).exp();
            w
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_ray_round_trip(seed in any::<u64>(), x in -3.0..3.0f64, y in -3.0..3.0f64, z in 0.2..20.0f64) {
        let pose = random_pose(&mut rng(seed));
        let world = pose.transform_point(&Vec3::new(x, y, z));
        let px = project(&pose, &intr(), &world).unwrap();
        let ray = ray_through_pixel(&pose, &intr(), &px);
        prop_assert!(ray.distance_to(&world) < 1e-9 * world.norm().max(1.0));
    }

    #[test]
    fn box_hits_lie_on_surface(seed in any::<u64>()) {
        let mut r = rng(seed);
        let center = Vec3::new(r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        let side = r.gen_range(0.1..2.0);
        let origin = center + Vec3::new(r.gen_range(-4.0..4.0), r.gen_range(-4.0..4.0), r.gen_range(-4.0..4.0));
        let dir = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
        prop_assume!(dir.norm() > 1e-3);
        let ray = Ray::new(origin, dir);
        if let Some((t0, t1)) = ray_box_intersect(&ray, &center, side) {
            let on_surface = |p: Vec3| {
                let d = (p - center).abs();
                let m = d.max();
                (m - 0.5 * side).abs() < 1e-9 * side.max(1.0)
            };
            let inside = (origin - center).abs().max() < 0.5 * side;
            prop_assert!(t0 <= t1);
            let entry_ok = if inside { t0 == 0.0 } else { on_surface(ray.at(t0)) };
            prop_assert!(entry_ok);
            prop_assert!(on_surface(ray.at(t1)));
        }
    }

    #[test]
    fn pose_composition_laws(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b, c) = (random_pose(&mut r), random_pose(&mut r), random_pose(&mut r));
        let l = a.compose(&b).compose(&c);
        let rr = a.compose(&b.compose(&c));
        prop_assert!((l.rotation - rr.rotation).amax() < 1e-12);
        prop_assert!((l.translation - rr.translation).amax() < 1e-12 * 100.0);
        let id = a.compose(&a.inverse());
        prop_assert!((id.rotation - nalgebra::Matrix3::identity()).amax() < 1e-12);
        prop_assert!(id.translation.amax() < 1e-12 * 100.0);
    }

    #[test]
    fn crop_center_is_rounded_pixel(seed in any::<u64>(), u in 3.0..36.0f64, v in 3.0..26.0f64) {
        let map = random_map(&mut rng(seed), 40, 30, 4);
        let kp = Keypoint::new(u, v);
        let p = crop_patch(&map, &kp, 7).unwrap();
        let (x, y) = kp.pixel();
        let want: Vec<f64> = map.pixel(x as usize, y as usize).iter().map(|&f| f as f64).collect();
        prop_assert_eq!(p.center(), &want[..]);
    }

    #[test]
    fn tracking_symmetric_and_monotone(seed in any::<u64>(), lo in 0.0..0.9f64, step in 0.0..0.5f64) {
        let mut r = rng(seed);
        // Second frame is the first plus noise so there is real structure to match.
        let a = random_map(&mut r, 40, 30, 4);
        let data = a.data().iter().map(|x| x + r.gen_range(-0.3f32..0.3)).collect();
        let b = DescriptorMap::new(40, 30, 4, data).unwrap();
        let ka = random_keypoints(&mut r, 25, 40, 30);
        let kb: Vec<Keypoint> = ka
            .iter()
            .map(|k| Keypoint::new(
                (k.position.x + r.gen_range(-2.0..2.0)).clamp(0.0, 39.0),
                (k.position.y + r.gen_range(-2.0..2.0)).clamp(0.0, 29.0),
            ))
            .collect();
        let ab = match_consecutive((&ka, &a), (&kb, &b), 8.0, lo).unwrap();
        let mut ba: Vec<(usize, usize)> = match_consecutive((&kb, &b), (&ka, &a), 8.0, lo)
            .unwrap()
            .into_iter()
            .map(|(i, j)| (j, i))
            .collect();
        ba.sort_unstable();
        let mut ab_sorted = ab.clone();
        ab_sorted.sort_unstable();
        prop_assert_eq!(&ab_sorted, &ba);
        let hi = match_consecutive((&ka, &a), (&kb, &b), 8.0, lo + step).unwrap();
        prop_assert!(hi.len() <= ab.len());
    }

    #[test]
    fn triangulation_order_and_frame_invariance(seed in any::<u64>()) {
        let mut r = rng(seed);
        let k = intr();
        let p = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
        let mut obs: Vec<Measurement> = (0..6)
            .map(|i| {
                let a = -0.4 + 0.16 * i as f64;
                let eye = p + Vec3::new(4.0 * f64::sin(a), r.gen_range(-0.5..0.5), -4.0 * f64::cos(a));
                let pose = Pose::look_at(eye, p, Vec3::y());
                let pixel = project(&pose, &k, &p).unwrap() + Vec2::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
                Measurement { pose, pixel }
            })
            .collect();
        let cfg = TriangulationConfig::default();
        let solve = |o: &[Measurement]| {
            let init = dlt_from_measurements(o, &k).unwrap();
            refine_measurements(o, &init, &k, &cfg).unwrap().position
        };
        let base = solve(&obs);
        let g = random_pose(&mut r);
        let moved: Vec<Measurement> = obs
            .iter()
            .map(|m| Measurement { pose: g.compose(&m.pose), pixel: m.pixel })
            .collect();
        prop_assert!((solve(&moved) - g.transform_point(&base)).norm() < 1e-6);
        obs.reverse();
        // Reversal changes the anchor camera, so agreement is to solver precision.
        prop_assert!((solve(&obs) - base).norm() < 1e-6);
    }

    #[test]
    fn trilinear_exact_and_axis_affine(seed in any::<u64>()) {
        let mut r = rng(seed);
        let res = r.gen_range(2..6);
        let v = common::random_voxel(&mut r, res, 3);
        let (a, b, c) = (r.gen_range(0..res - 1), r.gen_range(0..res), r.gen_range(0..res));
        let f = |p: &Vec3| trilinear_sample(&v.desc_nodes, 3, res, &v.center, v.side, p).unwrap();
        let pa = v.node_position(a, b, c);
        let pb = v.node_position(a + 1, b, c);
        let (fa, fb, fm) = (f(&pa), f(&pb), f(&((pa + pb) * 0.5)));
        let idx = a + res * (b + res * c);
        prop_assert_eq!(&fa[..], &v.desc_nodes[idx * 3..idx * 3 + 3]);
        for k in 0..3 {
            prop_assert!((fm[k] - 0.5 * (fa[k] + fb[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn compositing_weights_and_convex_cone(seed in any::<u64>(), n in 1usize..24) {
        let mut r = rng(seed);
        let v = common::random_voxel(&mut r, 3, 4);
        let ray = common::random_hitting_ray(&mut r, &v);
        let w = weights(&v, &ray, n);
        let (out, opacity) = render_ray(&v, &ray, n).unwrap();
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        let total: f64 = w.iter().sum();
        prop_assert!(total <= 1.0 + 1e-12);
        prop_assert!((total - opacity).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&opacity));
        let s = sample_ray(&v, &ray, n).unwrap();
        for ch in 0..4 {
            let col = s.descriptors.iter().skip(ch).step_by(4);
            let lo = col.clone().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[ch] >= opacity * lo - 1e-12);
            prop_assert!(out[ch] <= opacity * hi + 1e-12);
        }
    }

    #[test]
    fn homogeneous_density_refinement(seed in any::<u64>(), raw in -2.0..2.0f64, n in 2usize..16) {
        let mut r = rng(seed);
        let mut v = common::random_voxel(&mut r, 3, 2);
        v.density_nodes = vec![raw; 27];
        let ray = common::random_hitting_ray(&mut r, &v);
        let render = |k: usize| render_ray(&v, &ray, k).unwrap();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        // Opacity of a homogeneous medium does not depend on the sample count.
        prop_assert!((render(n).1 - render(4 * n).1).abs() < 1e-12);
        // Midpoint error shrinks quadratically; kinks at cell faces make the
        // constant vary with n, hence the factor 4 slack and the n, n+1 pair.
        let reference = render(512 * n).0;
        let err = |k: usize| dist(&render(k).0, &reference);
        prop_assert!(err(8 * n) <= 0.25 * err(n).max(err(n + 1)) + 1e-12);

        let flat = voxreloc::voxel::VoxelLandmark {
            desc_nodes: (0..27).flat_map(|_| [0.3, -0.8]).collect(),
            ..v.clone()
        };
        let flat_render = |k: usize| render_ray(&flat, &ray, k).unwrap().0;
        let (r1, r2, r4) = (flat_render(n), flat_render(2 * n), flat_render(4 * n));
        prop_assert!(dist(&r1, &r4) <= dist(&r1, &r2) * (1.0 + 1e-6) + 1e-14);
        prop_assert!(dist(&r1, &r4) < 1e-14);
    }

    #[test]
    fn loss_total_is_weighted_sum(seed in any::<u64>()) {
        let mut r = rng(seed);
        let v = common::random_voxel(&mut r, 3, 5);
        let ray = common::random_hitting_ray(&mut r, &v);
        let target: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w = LossWeights { mse: r.gen_range(0.0..2.0), cosine: r.gen_range(0.0..2.0), tv: r.gen_range(0.0..1.0), entropy: r.gen_range(0.0..1.0) };
        let (out, _) = render_ray(&v, &ray, 8).unwrap();
        let l = compute_loss(&out, &target, &v, &ray_alphas(&v, &ray, 8).unwrap(), &w).unwrap();
        let sum = w.mse * l.mse + w.cosine * l.cosine + w.tv * l.tv + w.entropy * l.entropy;
        prop_assert!((l.total - sum).abs() <= 1e-12);
    }

    #[test]
    fn matching_injective_and_tau_monotone(seed in any::<u64>(), tau in -0.5..0.9f64, step in 0.0..0.5f64) {
        let mut r = rng(seed);
        let map = random_map(&mut r, 40, 30, 6);
        let kps = random_keypoints(&mut r, 30, 40, 30);
        let rendered: Vec<RenderedFeature> = (0..20)
            .map(|i| {
                // Half the features copy a query descriptor plus noise.
                let descriptor = if i % 2 == 0 {
                    map.sample_nearest(&kps[i].position).iter().map(|x| x + r.gen_range(-0.2..0.2)).collect()
                } else {
                    (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()
                };
                RenderedFeature {
                    landmark_id: i as u64,
                    world_point: Vec3::new(i as f64, 0.0, 5.0),
                    pixel: kps[i].position,
                    descriptor,
                    opacity: 0.5,
                }
            })
            .collect();
        let m = match_features(&rendered, &kps, &map, tau).unwrap();
        let mut ids: Vec<u64> = m.iter().map(|c| c.landmark_id).collect();
        let mut px: Vec<(u64, u64)> = m.iter().map(|c| (c.query_pixel.x.to_bits(), c.query_pixel.y.to_bits())).collect();
        ids.sort_unstable();
        ids.dedup();
        px.sort_unstable();
        px.dedup();
        prop_assert_eq!(ids.len(), m.len());
        prop_assert_eq!(px.len(), m.len());
        prop_assert!(m.iter().all(|c| c.similarity >= tau));
        prop_assert!(match_features(&rendered, &kps, &map, tau + step).unwrap().len() <= m.len());
    }

    #[test]
    fn save_load_save_is_identity(seed in any::<u64>(), count in 0usize..6, c in 1usize..9) {
        let mut r = rng(seed);
        let voxels = (0..count)
            .map(|i| {
                let mut v = common::random_voxel(&mut r, 3, c);
                v.track_id = i as u64 * 7;
                v
            })
            .collect();
        let map = VoxelMap::new(voxels, intr(), c, 3, 7, "synthetic").unwrap();
        let first = encode_map(&map);
        let back = decode_map(&first).unwrap();
        prop_assert_eq!(encode_map(&back), first);
        // Values that are already f32 survive unchanged.
        let again = decode_map(&encode_map(&back)).unwrap();
        prop_assert_eq!(again, back);
    }

    #[test]
    fn load_rejects_non_finite(seed in any::<u64>(), which in 0usize..27) {
        let mut r = rng(seed);
        let mut v = common::random_voxel(&mut r, 3, 2);
        v.density_nodes[which] = f64::NAN;
        let map = VoxelMap::new(vec![v], intr(), 2, 3, 7, "synthetic").unwrap();
        prop_assert!(decode_map(&encode_map(&map)).is_err());
    }
}
