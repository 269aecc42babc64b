//! Landmark triangulation: linear DLT initialization followed by robust
//! Levenberg-Marquardt refinement in inverse-depth coordinates.
//!
//! The landmark is parameterized in the first observing camera (the anchor)
//! as `p_anchor = (a, b, 1) / rho`. Projections into camera `i` are computed
//! from the homogeneous form `R_iᵀ R_a (a, b, 1) + rho · R_iᵀ (t_a − t_i)`,
//! which stays well conditioned as `rho → 0`.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Vec2, Vec3};
use crate::tracking::Track;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriangulationConfig {
    /// Geman-McClure scale in pixels.
    pub robust_scale: f64,
    pub max_iters: usize,
    /// Residuals above this many pixels are excluded from the reported mean.
    pub inlier_threshold: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            robust_scale: 2.0,
            max_iters: 100,
            inlier_threshold: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub position: Vec3,
    pub track_id: u64,
    /// Mean reprojection error over inlier observations, pixels.
    pub mean_reprojection_error: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseDepthParam {
    pub anchor_frame: usize,
    /// Normalized bearing `(x/z, y/z)` in the anchor camera.
    pub bearing: Vec2,
    pub rho: f64,
}

/// One posed pixel measurement.
#[derive(Debug, Clone, Copy)]
pub struct Measurement {
    pub pose: Pose,
    pub pixel: Vec2,
}

pub fn measurements(track: &Track) -> Vec<Measurement> {
    track
        .observations
        .iter()
        .map(|o| Measurement {
            pose: o.pose,
            pixel: o.keypoint.position,
        })
        .collect()
}

pub fn dlt_triangulate(track: &Track, intr: &CameraIntrinsics) -> Result<Vec3> {
    dlt_from_measurements(&measurements(track), intr)
}

pub fn dlt_from_measurements(obs: &[Measurement], intr: &CameraIntrinsics) -> Result<Vec3> {
    if obs.len() < 2 {
        return Err(Error::DegenerateGeometry("fewer than two observations"));
    }
    let baseline = obs
        .iter()
        .flat_map(|a| obs.iter().map(move |b| (a.pose.center() - b.pose.center()).norm()))
        .fold(0.0, f64::max);
    if baseline < 1e-6 {
        return Err(Error::DegenerateGeometry("baseline below 1e-6 m"));
    }
    // Rows in normalized coordinates: x·P₃ − P₁ and y·P₃ − P₂ with P = [Rᵀ | −Rᵀt].
    let mut a = DMatrix::<f64>::zeros(2 * obs.len(), 4);
    for (k, m) in obs.iter().enumerate() {
        let rt = m.pose.rotation.transpose();
        let t = -(rt * m.pose.translation);
        let n = intr.normalize(&m.pixel);
        for c in 0..3 {
            a[(2 * k, c)] = n.x * rt[(2, c)] - rt[(0, c)];
            a[(2 * k + 1, c)] = n.y * rt[(2, c)] - rt[(1, c)];
        }
        a[(2 * k, 3)] = n.x * t.z - t.x;
        a[(2 * k + 1, 3)] = n.y * t.z - t.y;
    }
    // Row scaling keeps each constraint unit-weighted.
    for mut row in a.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::DegenerateGeometry("svd failed"))?;
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = |k: usize| svd.singular_values[order[k]];
    if (s(2) - s(3)).abs() <= 1e-9 * s(0) {
        return Err(Error::DegenerateGeometry("null space is not one-dimensional"));
    }
    let h = v_t.row(order[3]);
    if h[3].abs() < 1e-12 * h.norm() {
        return Err(Error::DegenerateGeometry("point at infinity"));
    }
    Ok(Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Geman-McClure cost of a squared residual norm.
pub fn geman_mcclure(sq: f64, scale: f64) -> f64 {
    sq / (1.0 + sq / (scale * scale))
}

// Derivative of `geman_mcclure` with respect to the squared norm.
fn geman_mcclure_weight(sq: f64, scale: f64) -> f64 {
    let d = 1.0 + sq / (scale * scale);
    1.0 / (d * d)
}

/// Inverse-depth residual model for one landmark.
pub struct InverseDepthProblem<'a> {
    obs: &'a [Measurement],
    intr: &'a CameraIntrinsics,
    // Per observation: R_iᵀ R_a and R_iᵀ (t_a − t_i).
    rel_rot: Vec<Matrix3<f64>>,
    rel_trans: Vec<Vector3<f64>>,
}

impl<'a> InverseDepthProblem<'a> {
    pub fn new(obs: &'a [Measurement], intr: &'a CameraIntrinsics) -> Self {
        let anchor = obs[0].pose;
        let rel_rot = obs
            .iter()
            .map(|m| m.pose.rotation.transpose() * anchor.rotation)
            .collect();
        let rel_trans = obs
            .iter()
            .map(|m| m.pose.rotation.transpose() * (anchor.translation - m.pose.translation))
            .collect();
        Self {
            obs,
            intr,
            rel_rot,
            rel_trans,
        }
    }

    pub fn to_param(&self, world: &Vec3) -> Result<InverseDepthParam> {
        let pc = self.obs[0].pose.world_to_camera(world);
        if pc.z <= 0.0 {
            return Err(Error::NonPositiveDepth);
        }
        Ok(InverseDepthParam {
            anchor_frame: 0,
            bearing: Vec2::new(pc.x / pc.z, pc.y / pc.z),
            rho: 1.0 / pc.z,
        })
    }

    pub fn to_world(&self, p: &InverseDepthParam) -> Vec3 {
        let anchor = &self.obs[0].pose;
        anchor.transform_point(&(Vec3::new(p.bearing.x, p.bearing.y, 1.0) / p.rho))
    }

    fn homogeneous(&self, i: usize, x: &Vector3<f64>) -> Vector3<f64> {
        self.rel_rot[i] * Vector3::new(x[0], x[1], 1.0) + self.rel_trans[i] * x[2]
    }

    /// Pixel residual (projection − measurement) for observation `i`, state
    /// `x = (a, b, rho)`.
    pub fn residual(&self, i: usize, x: &Vector3<f64>) -> Option<Vec2> {
        let h = self.homogeneous(i, x);
        if h.z <= 0.0 {
            return None;
        }
        let u = self.intr.fx * h.x / h.z + self.intr.cx;
        let v = self.intr.fy * h.y / h.z + self.intr.cy;
        Some(Vec2::new(u, v) - self.obs[i].pixel)
    }

    pub fn jacobian(&self, i: usize, x: &Vector3<f64>) -> Matrix2x3<f64> {
        let h = self.homogeneous(i, x);
        let iz = 1.0 / h.z;
        let dproj = Matrix2x3::new(
            self.intr.fx * iz,
            0.0,
            -self.intr.fx * h.x * iz * iz,
            0.0,
            self.intr.fy * iz,
            -self.intr.fy * h.y * iz * iz,
        );
        let r = &self.rel_rot[i];
        let dh = Matrix3::from_columns(&[r.column(0).into_owned(), r.column(1).into_owned(), self.rel_trans[i]]);
        dproj * dh
    }

    pub fn robust_cost(&self, x: &Vector3<f64>, scale: f64) -> f64 {
        (0..self.obs.len())
            .map(|i| match self.residual(i, x) {
                Some(r) => geman_mcclure(r.norm_squared(), scale),
                None => f64::INFINITY,
            })
            .sum()
    }
}

pub fn refine_landmark(track: &Track, init: &Vec3, intr: &CameraIntrinsics, cfg: &TriangulationConfig) -> Result<Landmark> {
    let obs = measurements(track);
    let mut lm = refine_measurements(&obs, init, intr, cfg)?;
    lm.track_id = track.id;
    Ok(lm)
}

pub fn refine_measurements(
    obs: &[Measurement],
    init: &Vec3,
    intr: &CameraIntrinsics,
    cfg: &TriangulationConfig,
) -> Result<Landmark> {
    if obs.is_empty() {
        return Err(Error::DegenerateGeometry("empty track"));
    }
    let problem = InverseDepthProblem::new(obs, intr);
    let p0 = problem.to_param(init)?;
    let mut x = Vector3::new(p0.bearing.x, p0.bearing.y, p0.rho);
    let c = cfg.robust_scale;
    let mut cost = problem.robust_cost(&x, c);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iters {
        iterations += 1;
        // Gauss-Newton on the iteratively reweighted normal equations.
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for i in 0..obs.len() {
            let Some(r) = problem.residual(i, &x) else {
                continue;
            };
            let w = geman_mcclure_weight(r.norm_squared(), c);
            let j = problem.jacobian(i, &x);
            jtj += j.transpose() * j * w;
            jtr += j.transpose() * r * w;
        }
        let mut accepted = false;
        let mut step_norm = 0.0;
        while lambda < 1e16 {
            let mut damped = jtj;
            for k in 0..3 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = x + step;
            let new_cost = problem.robust_cost(&candidate, c);
            if new_cost <= cost {
                step_norm = step.norm();
                let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                x = candidate;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if step_norm < 1e-10 || rel < 1e-12 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || converged || step_norm < 1e-10 {
            // No descent direction left: the current state is a minimum.
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(cfg.max_iters));
    }
    if x[2] <= 1e-8 {
        return Err(Error::NegativeDepth(x[2]));
    }
    let position = problem.to_world(&InverseDepthParam {
        anchor_frame: 0,
        bearing: Vec2::new(x[0], x[1]),
        rho: x[2],
    });
    let inliers: Vec<f64> = (0..obs.len())
        .filter_map(|i| problem.residual(i, &x).map(|r| r.norm()))
        .filter(|&e| e <= cfg.inlier_threshold)
        .collect();
    let mean_reprojection_error = if inliers.is_empty() {
        f64::INFINITY
    } else {
        inliers.iter().sum::<f64>() / inliers.len() as f64
    };
    Ok(Landmark {
        position,
        track_id: 0,
        mean_reprojection_error,
        iterations,
    })
}

/// DLT followed by robust refinement.
pub fn triangulate(track: &Track, intr: &CameraIntrinsics, cfg: &TriangulationConfig) -> Result<Landmark> {
    let init = dlt_triangulate(track, intr)?;
    refine_landmark(track, &init, intr, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::centered(500.0, 640, 480).unwrap()
    }

    fn views(point: &Vec3, eyes: &[Vec3]) -> Vec<Measurement> {
        eyes.iter()
            .map(|e| {
                let pose = Pose::look_at(*e, *point + Vec3::new(0.1, -0.05, 0.0), Vec3::y());
                Measurement {
                    pose,
                    pixel: project(&pose, &intr(), point).unwrap(),
                }
            })
            .collect()
    }

    fn ring(n: usize, radius: f64) -> Vec<Vec3> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * 0.8 - 0.4;
                Vec3::new(radius * a.sin(), 0.2 * (i % 3) as f64, -radius * a.cos() + 5.0 - radius)
            })
            .collect()
    }

    #[test]
    fn dlt_two_views() {
        let p = Vec3::new(1.0, 2.0, 5.0);
        let obs = views(&p, &[Vec3::zeros(), Vec3::new(0.5, 0.0, 0.0)]);
        let est = dlt_from_measurements(&obs, &intr()).unwrap();
        assert!((est - p).norm() < 1e-6);
    }

    #[test]
    fn dlt_zero_baseline() {
        let p = Vec3::new(1.0, 2.0, 5.0);
        let obs = views(&p, &[Vec3::zeros(), Vec3::zeros()]);
        assert!(matches!(
            dlt_from_measurements(&obs, &intr()),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn dlt_ten_views_order_invariant() {
        let p = Vec3::new(-0.3, 0.4, 4.0);
        let mut obs = views(&p, &ring(10, 2.0));
        let a = dlt_from_measurements(&obs, &intr()).unwrap();
        assert!((a - p).norm() < 1e-6);
        obs.reverse();
        obs.swap(2, 7);
        let b = dlt_from_measurements(&obs, &intr()).unwrap();
        assert!((b - p).norm() < 1e-6);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = intr();
        let mut checked = 0;
        while checked < 100 {
            let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(3.0..8.0));
            let obs = views(&p, &ring(4, rng.gen_range(0.5..2.0)));
            let prob = InverseDepthProblem::new(&obs, &k);
            let x = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(0.1..0.5));
            for i in 0..obs.len() {
                if prob.residual(i, &x).is_none() {
                    continue;
                }
                let j = prob.jacobian(i, &x);
                for c in 0..3 {
                    let h = 1e-6;
                    let mut xp = x;
                    xp[c] += h;
                    let mut xm = x;
                    xm[c] -= h;
                    let fd = (prob.residual(i, &xp).unwrap() - prob.residual(i, &xm).unwrap()) / (2.0 * h);
                    for r in 0..2 {
                        let denom = j.row(r).amax().max(1e-3);
                        assert!((fd[r] - j[(r, c)]).abs() / denom < 1e-5, "{} vs {}", fd[r], j[(r, c)]);
                    }
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn noiseless_refinement_recovers_point() {
        let p = Vec3::new(0.3, -0.2, 5.0);
        let obs = views(&p, &ring(6, 1.5));
        let init = p * 1.05;
        let lm = refine_measurements(&obs, &init, &intr(), &TriangulationConfig::default()).unwrap();
        assert!((lm.position - p).norm() < 1e-8);
        assert!(lm.mean_reprojection_error < 1e-8);
    }

    #[test]
    fn optimal_init_is_a_fixed_point() {
        let p = Vec3::new(0.3, -0.2, 5.0);
        let obs = views(&p, &ring(6, 1.5));
        let lm = refine_measurements(&obs, &p, &intr(), &TriangulationConfig::default()).unwrap();
        assert!(lm.iterations <= 2);
        assert!((lm.position - p).norm() < 1e-10);
    }

    #[test]
    fn cost_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..50 {
            let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(3.0..8.0));
            let mut obs = views(&p, &ring(6, 1.0));
            for m in obs.iter_mut() {
                m.pixel += Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            let init = p + Vec3::new(0.05, -0.05, 0.2);
            let k = intr();
            let prob = InverseDepthProblem::new(&obs, &k);
            let x0 = prob.to_param(&init).unwrap();
            let c0 = prob.robust_cost(&Vector3::new(x0.bearing.x, x0.bearing.y, x0.rho), 2.0);
            let lm = refine_measurements(&obs, &init, &intr(), &TriangulationConfig::default()).unwrap();
            let x1 = prob.to_param(&lm.position).unwrap();
            let c1 = prob.robust_cost(&Vector3::new(x1.bearing.x, x1.bearing.y, x1.rho), 2.0);
            assert!(c1 <= c0 + 1e-12);
        }
    }

    #[test]
    fn rigid_world_transform_equivariance() {
        let p = Vec3::new(0.4, 0.1, 6.0);
        let obs = views(&p, &ring(5, 1.2));
        let lm = refine_measurements(&obs, &(p * 1.03), &intr(), &TriangulationConfig::default()).unwrap();
        let g = Pose::from_parts(
            nalgebra::Rotation3::from_euler_angles(0.3, -0.7, 1.1),
            Vec3::new(2.0, -1.0, 0.5),
        );
        let moved: Vec<Measurement> = obs
            .iter()
            .map(|m| Measurement {
                pose: g.compose(&m.pose),
                pixel: m.pixel,
            })
            .collect();
        let lm2 = refine_measurements(
            &moved,
            &g.transform_point(&(p * 1.03)),
            &intr(),
            &TriangulationConfig::default(),
        )
        .unwrap();
        assert!((lm2.position - g.transform_point(&lm.position)).norm() < 1e-9);
    }

    #[test]
    fn behind_anchor_init_rejected() {
        let p = Vec3::new(0.0, 0.0, 5.0);
        let obs = views(&p, &ring(3, 1.0));
        let behind = obs[0].pose.transform_point(&Vec3::new(0.0, 0.0, -2.0));
        assert!(refine_measurements(&obs, &behind, &intr(), &TriangulationConfig::default()).is_err());
    }
}
