//! Pinhole camera, rigid poses and rays.
//!
//! Poses are camera-to-world throughout: `rotation` maps camera-frame vectors
//! into the world frame and `translation` is the camera center in world
//! coordinates. World-to-camera transforms are derived at use sites.

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Isotropic focal length with the principal point at the image center.
    pub fn centered(f: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics)
        }
    }

    /// Mean focal length, used where a single `f` is needed.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= self.width as f64
            && pixel.y <= self.height as f64
    }

    /// Normalized image coordinates `(x/z, y/z)` of a pixel.
    pub fn normalize(&self, pixel: &Vec2) -> Vec2 {
        Vec2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose, re-orthonormalizing nothing; fails when `rotation` is not
    /// a proper rotation within 1e-9.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 || !translation.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidPose);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_parts(rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    /// Camera at `eye` looking at `target`, image `y` axis roughly along `down`.
    pub fn look_at(eye: Vec3, target: Vec3, down: Vec3) -> Self {
        let z = (target - eye).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        Self {
            rotation: Mat3::from_columns(&[x, y, z]),
            translation: eye,
        }
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Rotation angle (degrees) and center distance between two poses.
    pub fn error_to(&self, other: &Pose) -> (f64, f64) {
        let rel = self.rotation.transpose() * other.rotation;
        let cos = (rel.trace() - 1.0) * 0.5;
        let sin = 0.5
            * Vec3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]).norm();
        let t = (self.translation - other.translation).norm();
        (sin.atan2(cos).to_degrees(), t)
    }

    /// Row-major `[R | t]`, the layout used by `poses.txt`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let rotation = Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::new(rotation, Vec3::new(v[3], v[7], v[11]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    direction: Unit<Vec3>,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: Unit::new_normalize(direction),
        }
    }

    pub fn direction(&self) -> &Vec3 {
        self.direction.as_ref()
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction.as_ref() * t
    }

    pub fn distance_to(&self, p: &Vec3) -> f64 {
        let d = p - self.origin;
        (d - self.direction.as_ref() * d.dot(&self.direction)).norm()
    }
}

pub fn project(pose: &Pose, intr: &CameraIntrinsics, point: &Vec3) -> Result<Vec2> {
    let pc = pose.world_to_camera(point);
    if pc.z <= 0.0 {
        return Err(Error::NonPositiveDepth);
    }
    Ok(Vec2::new(
        intr.fx * pc.x / pc.z + intr.cx,
        intr.fy * pc.y / pc.z + intr.cy,
    ))
}

pub fn ray_through_pixel(pose: &Pose, intr: &CameraIntrinsics, pixel: &Vec2) -> Ray {
    let n = intr.normalize(pixel);
    Ray::new(pose.translation, pose.rotation * Vec3::new(n.x, n.y, 1.0))
}

/// Slab test against the axis-aligned cube `center ± side/2`.
///
/// Returns `(t_near, t_far)` with `t_near` clamped to zero when the origin is
/// inside the cube.
pub fn ray_box_intersect(ray: &Ray, center: &Vec3, side: f64) -> Option<(f64, f64)> {
    let half = 0.5 * side;
    let dir = ray.direction();
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        let lo = center[axis] - half - ray.origin[axis];
        let hi = center[axis] + half - ray.origin[axis];
        if dir[axis] == 0.0 {
            if lo > 0.0 || hi < 0.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[axis];
        let (t0, t1) = if inv >= 0.0 {
            (lo * inv, hi * inv)
        } else {
            (hi * inv, lo * inv)
        };
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
    }
    if t_far <= t_near.max(0.0) {
        return None;
    }
    Some((t_near.max(0.0), t_far))
}

/// Rotation by `angle` radians about `axis`.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    *Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).matrix()
}
