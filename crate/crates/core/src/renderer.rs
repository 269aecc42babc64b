//! Volumetric descriptor rendering through voxel grids.
//!
//! Along a ray the cube is entered at `t_n` and left at `t_f`; `N` samples sit
//! at the midpoints of equal sub-segments of length `δ = (t_f − t_n) / N`.
//! With `α_t = 1 − exp(−σ_t δ)` and transmittance `T_t = Π_{l<t} (1 − α_l)`
//! the rendered descriptor is `Σ_t T_t α_t d_t` and the opacity `Σ_t T_t α_t`.
//!
//! Density is stored raw and activated after interpolation as
//! `σ = softplus(raw) / side`, i.e. in units of inverse voxel side, so the
//! same raw values give the same opacity at every voxel scale.

use rayon::prelude::*;

use crate::descriptors::{Keypoint, Patch};
use crate::error::{Error, Result};
use crate::geometry::{project, ray_box_intersect, ray_through_pixel, CameraIntrinsics, Pose, Ray, Vec2, Vec3};
use crate::voxel::{TrilinearStencil, VoxelLandmark, VoxelMap};

pub const DEFAULT_SAMPLES: usize = 8;
pub const DEFAULT_OPACITY_MIN: f64 = 0.1;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activated density for a raw (interpolated) value.
pub fn activate(raw: f64, side: f64) -> f64 {
    softplus(raw) / side
}

/// Raw density giving per-sample alpha `alpha` for an axis-parallel ray
/// through the full cube sampled `samples` times.
pub fn initial_raw_density(alpha: f64, samples: usize) -> f64 {
    let y = -(1.0 - alpha).ln() * samples as f64;
    y.exp_m1().ln()
}

/// Points and lattice values along one ray through a voxel.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub positions: Vec<Vec3>,
    pub delta: f64,
    pub raw_density: Vec<f64>,
    /// `N × C`, row per sample.
    pub descriptors: Vec<f64>,
    pub stencils: Vec<TrilinearStencil>,
}

/// Sample positions and trilinear stencils for `n` midpoint samples.
pub fn ray_stencils(voxel: &VoxelLandmark, ray: &Ray, n: usize) -> Result<(Vec<Vec3>, f64, Vec<TrilinearStencil>)> {
    let (t_near, t_far) = ray_box_intersect(ray, &voxel.center, voxel.side).ok_or(Error::NoIntersection)?;
    let n = n.max(1);
    let delta = (t_far - t_near) / n as f64;
    let positions: Vec<Vec3> = (0..n).map(|i| ray.at(t_near + (i as f64 + 0.5) * delta)).collect();
    let stencils = positions
        .iter()
        .map(|p| TrilinearStencil::new(&voxel.center, voxel.side, voxel.resolution, p))
        .collect::<Result<Vec<_>>>()?;
    Ok((positions, delta, stencils))
}

pub fn sample_ray(voxel: &VoxelLandmark, ray: &Ray, n: usize) -> Result<RaySamples> {
    let (positions, delta, stencils) = ray_stencils(voxel, ray, n)?;
    let c = voxel.channels;
    let mut descriptors = vec![0.0; stencils.len() * c];
    for (s, out) in stencils.iter().zip(descriptors.chunks_mut(c)) {
        s.apply(&voxel.desc_nodes, c, out);
    }
    let raw_density = stencils.iter().map(|s| s.apply_scalar(&voxel.density_nodes)).collect();
    Ok(RaySamples {
        positions,
        delta,
        raw_density,
        descriptors,
        stencils,
    })
}

/// Alpha compositing of per-sample optical depths `σ_t δ`.
///
/// Returns `(descriptor, opacity)`.
pub fn composite(optical_depths: &[f64], descriptors: &[f64], channels: usize) -> (Vec<f64>, f64) {
    let mut out = vec![0.0; channels];
    let mut transmittance = 1.0;
    let mut opacity = 0.0;
    for (t, &tau) in optical_depths.iter().enumerate() {
        let alpha = -(-tau).exp_m1();
        let w = transmittance * alpha;
        opacity += w;
        for (o, d) in out.iter_mut().zip(&descriptors[t * channels..(t + 1) * channels]) {
            *o += w * d;
        }
        transmittance *= 1.0 - alpha;
    }
    (out, opacity)
}

pub fn render_ray(voxel: &VoxelLandmark, ray: &Ray, n: usize) -> Result<(Vec<f64>, f64)> {
    let s = sample_ray(voxel, ray, n)?;
    let depths: Vec<f64> = s
        .raw_density
        .iter()
        .map(|&r| activate(r, voxel.side) * s.delta)
        .collect();
    Ok(composite(&depths, &s.descriptors, voxel.channels))
}

/// Renders the `S × S` window around the voxel center's projection, one ray
/// per pixel center. Elements whose ray misses the cube are zero.
pub fn render_patch(
    voxel: &VoxelLandmark,
    pose: &Pose,
    intr: &CameraIntrinsics,
    size: usize,
    n: usize,
) -> Result<Patch> {
    let px = project(pose, intr, &voxel.center).map_err(|_| Error::OutOfFrustum)?;
    render_patch_at(voxel, pose, intr, &Keypoint::new(px.x, px.y), size, n)
}

/// Like [`render_patch`], but centred on an explicit keypoint (the pixel grid
/// a training patch was cropped on).
pub fn render_patch_at(
    voxel: &VoxelLandmark,
    pose: &Pose,
    intr: &CameraIntrinsics,
    center: &Keypoint,
    size: usize,
    n: usize,
) -> Result<Patch> {
    if size % 2 == 0 {
        return Err(Error::EvenPatchSize(size));
    }
    let half = (size / 2) as i64;
    let (cu, cv) = center.pixel();
    if cu - half < 0 || cv - half < 0 || cu + half >= intr.width as i64 || cv + half >= intr.height as i64 {
        return Err(Error::OutOfFrustum);
    }
    let c = voxel.channels;
    let mut data = vec![0.0; size * size * c];
    for row in 0..size {
        for col in 0..size {
            let pixel = Vec2::new((cu - half + col as i64) as f64, (cv - half + row as i64) as f64);
            let ray = ray_through_pixel(pose, intr, &pixel);
            match render_ray(voxel, &ray, n) {
                Ok((d, _)) => data[(row * size + col) * c..(row * size + col + 1) * c].copy_from_slice(&d),
                Err(Error::NoIntersection) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(Patch {
        size,
        channels: c,
        data,
        center_keypoint: *center,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFeature {
    pub landmark_id: u64,
    pub world_point: Vec3,
    pub pixel: Vec2,
    pub descriptor: Vec<f64>,
    pub opacity: f64,
}

/// Renders every voxel whose center projects into the image, along the ray
/// from the camera center to the voxel center. Occlusion is not modelled.
pub fn render_visible(map: &VoxelMap, pose: &Pose, n: usize, opacity_min: f64) -> Vec<RenderedFeature> {
    let intr = &map.intrinsics;
    map.voxels
        .par_iter()
        .filter_map(|v| {
            let pixel = project(pose, intr, &v.center).ok()?;
            if !intr.contains(&pixel) {
                return None;
            }
            let ray = Ray::new(pose.center(), v.center - pose.center());
            let (descriptor, opacity) = render_ray(v, &ray, n).ok()?;
            (opacity >= opacity_min).then(|| RenderedFeature {
                landmark_id: v.track_id,
                world_point: v.center,
                pixel,
                descriptor,
                opacity,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::VoxelMap;
    use std::f64::consts::LN_2;

    fn voxel(raw: f64, c: usize) -> VoxelLandmark {
        VoxelLandmark {
            center: Vec3::new(0.0, 0.0, 5.0),
            side: 0.2,
            resolution: 3,
            channels: c,
            desc_nodes: (0..27 * c).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect(),
            density_nodes: vec![raw; 27],
            track_id: 3,
        }
    }

    #[test]
    fn transparent_medium() {
        let (d, o) = composite(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2);
        assert_eq!(d, vec![0.0, 0.0]);
        assert_eq!(o, 0.0);
    }

    #[test]
    fn closed_form_single_and_double() {
        let (d, o) = composite(&[LN_2], &[2.0, -4.0], 2);
        assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] + 2.0).abs() < 1e-12);
        assert!((o - 0.5).abs() < 1e-12);
        let (d, o) = composite(&[LN_2, LN_2], &[1.0, 0.0, 0.0, 1.0], 2);
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.25).abs() < 1e-12);
        assert!((o - 0.75).abs() < 1e-12);
    }

    #[test]
    fn render_ray_closed_form_through_voxel() {
        // Constant raw density chosen so σδ = ln 2 for one sample over the full side.
        let side = 0.2;
        let raw = (LN_2).exp_m1().ln();
        let mut v = voxel(raw, 2);
        v.side = side;
        v.desc_nodes = [0.8, -0.2].repeat(27);
        let ray = Ray::new(Vec3::new(0.0, 0.0, 0.0), Vec3::z());
        let (d, o) = render_ray(&v, &ray, 1).unwrap();
        assert!((o - 0.5).abs() < 1e-12);
        assert!((d[0] - 0.4).abs() < 1e-12 && (d[1] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn miss_is_error() {
        let v = voxel(0.0, 2);
        let ray = Ray::new(Vec3::new(1.0, 0.0, 0.0), Vec3::z());
        assert!(matches!(render_ray(&v, &ray, 8), Err(Error::NoIntersection)));
    }

    #[test]
    fn initial_alpha() {
        let raw = initial_raw_density(0.01, 8);
        let v = voxel(raw, 1);
        let ray = Ray::new(Vec3::zeros(), Vec3::z());
        let s = sample_ray(&v, &ray, 8).unwrap();
        let alpha = 1.0 - (-activate(s.raw_density[0], v.side) * s.delta).exp();
        assert!((alpha - 0.01).abs() < 1e-12);
    }

    #[test]
    fn homogeneous_refinement_converges() {
        let v = VoxelLandmark {
            desc_nodes: vec![1.0; 27],
            ..voxel(0.5, 1)
        };
        let ray = Ray::new(Vec3::new(0.01, -0.02, 4.0), Vec3::new(0.02, 0.01, 1.0));
        let r = |n| render_ray(&v, &ray, n).unwrap().0[0];
        let (r1, r2, r4) = (r(4), r(8), r(16));
        assert!((r1 - r4).abs() <= (r1 - r2).abs() * (1.0 + 1e-6) + 1e-15);
    }

    #[test]
    fn patch_degenerate_and_misses() {
        let intr = CameraIntrinsics::centered(100.0, 101, 101).unwrap();
        let v = voxel(2.0, 4);
        let pose = Pose::identity();
        let p = render_patch(&v, &pose, &intr, 1, 8).unwrap();
        let ray = ray_through_pixel(&pose, &intr, &Vec2::new(51.0, 51.0));
        let (d, _) = render_ray(&v, &ray, 8).unwrap();
        assert_eq!(p.data, d);
        // 0.2 m at 5 m is 4 px wide: the outer ring of a 9×9 patch misses.
        let p = render_patch(&v, &pose, &intr, 9, 8).unwrap();
        assert!(p.element(0, 0).iter().all(|x| *x == 0.0));
        assert!(p.element(4, 4).iter().any(|x| *x != 0.0));
        let far = Pose::from_parts(nalgebra::Rotation3::identity(), Vec3::new(3.0, 0.0, 0.0));
        assert!(matches!(render_patch(&v, &far, &intr, 7, 8), Err(Error::OutOfFrustum)));
    }

    #[test]
    fn visible_set() {
        let intr = CameraIntrinsics::centered(100.0, 101, 101).unwrap();
        let map = VoxelMap::new(vec![voxel(3.0, 4)], intr, 4, 3, 7, "synthetic").unwrap();
        let f = render_visible(&map, &Pose::identity(), 8, 0.1);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].pixel, Vec2::new(50.5, 50.5));
        assert_eq!(f[0].landmark_id, 3);
        let away = Pose::look_at(Vec3::zeros(), Vec3::new(0.0, 0.0, -1.0), Vec3::y());
        assert!(render_visible(&map, &away, 8, 0.1).is_empty());
        let faint = VoxelMap::new(vec![voxel(-10.0, 4)], intr, 4, 3, 7, "synthetic").unwrap();
        assert!(render_visible(&faint, &Pose::identity(), 8, 0.1).is_empty());
    }
}
