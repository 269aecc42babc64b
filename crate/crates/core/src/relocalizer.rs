//! Camera relocalization against a voxel map: rendered-to-query descriptor
//! matching, P3P inside RANSAC with local optimization, and the iterative
//! render-match-solve loop.

use nalgebra::{DMatrix, Matrix3, Matrix6, Rotation3, SVD, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptors::{DescriptorMap, Keypoint};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Vec2, Vec3};
use crate::renderer::{render_visible, RenderedFeature, DEFAULT_OPACITY_MIN, DEFAULT_SAMPLES};
use crate::seed::mix;
use crate::voxel::VoxelMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub landmark_id: u64,
    pub world_point: Vec3,
    pub query_pixel: Vec2,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub inliers: usize,
    pub median_residual: f64,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inlier_count: usize,
    /// Landmark ids of the inlier correspondences, ascending.
    pub inlier_ids: Vec<u64>,
    /// RANSAC hypotheses for a single solve; localization rounds for the
    /// iterative loop.
    pub iterations_run: usize,
    pub per_iteration: Vec<IterationStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub lo_rounds: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 3.0,
            max_iters: 1000,
            confidence: 0.999,
            lo_rounds: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    pub tau: f64,
    pub iterations: usize,
    pub samples_per_ray: usize,
    pub opacity_min: f64,
    pub ransac: RansacConfig,
    pub seed: u64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            iterations: 3,
            samples_per_ray: DEFAULT_SAMPLES,
            opacity_min: DEFAULT_OPACITY_MIN,
            ransac: RansacConfig::default(),
            seed: 0,
        }
    }
}

/// Mutual-best matching of rendered features to query keypoints.
///
/// Query descriptors are read from `query_map` at each keypoint's pixel.
/// A pair is kept when it is the maximum of both its row and its column
/// (first index on ties) and its cosine similarity is at least `tau`.
pub fn match_features(
    rendered: &[RenderedFeature],
    keypoints: &[Keypoint],
    query_map: &DescriptorMap,
    tau: f64,
) -> Result<Vec<Correspondence>> {
    let c = query_map.channels();
    if let Some(f) = rendered.iter().find(|f| f.descriptor.len() != c) {
        return Err(Error::ChannelMismatch(f.descriptor.len(), c));
    }
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (n >= 1e-12).then(|| v.into_iter().map(|x| x / n).collect::<Vec<f64>>())
    };
    let rows: Vec<Option<Vec<f64>>> = rendered.iter().map(|f| unit(f.descriptor.clone())).collect();
    let cols: Vec<Option<Vec<f64>>> = keypoints
        .iter()
        .map(|k| unit(query_map.sample_nearest(&k.position)))
        .collect();

    let mut sim = vec![f64::NEG_INFINITY; rows.len() * cols.len()];
    for (i, r) in rows.iter().enumerate() {
        let Some(r) = r else { continue };
        for (j, q) in cols.iter().enumerate() {
            if let Some(q) = q {
                sim[i * cols.len() + j] = r.iter().zip(q).map(|(a, b)| a * b).sum();
            }
        }
    }
    let argmax = |it: &mut dyn Iterator<Item = (usize, f64)>| {
        let mut best: Option<(usize, f64)> = None;
        for (k, s) in it {
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        best
    };
    let col_best: Vec<Option<(usize, f64)>> = (0..cols.len())
        .map(|j| argmax(&mut (0..rows.len()).map(|i| (i, sim[i * cols.len() + j]))))
        .collect();

    let mut out = Vec::new();
    for i in 0..rows.len() {
        let Some((j, s)) = argmax(&mut (0..cols.len()).map(|j| (j, sim[i * cols.len() + j]))) else {
            continue;
        };
        if s >= tau && col_best[j].map(|(bi, _)| bi) == Some(i) {
            out.push(Correspondence {
                landmark_id: rendered[i].landmark_id,
                world_point: rendered[i].world_point,
                query_pixel: keypoints[j].position,
                similarity: s,
            });
        }
    }
    Ok(out)
}

/// Real roots of a polynomial with coefficients in ascending degree order,
/// from the eigenvalues of its companion matrix, polished by Newton steps.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = coeffs.len() - 1;
    while deg > 0 && coeffs[deg].abs() <= 1e-14 * scale {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = coeffs[deg];
    let mut comp = DMatrix::<f64>::zeros(deg, deg);
    for k in 0..deg {
        comp[(0, k)] = -coeffs[deg - 1 - k] / lead;
    }
    for k in 1..deg {
        comp[(k, k - 1)] = 1.0;
    }
    let eval = |x: f64| {
        let mut p = 0.0;
        let mut dp = 0.0;
        for &c in coeffs[..=deg].iter().rev() {
            dp = dp * x + p;
            p = p * x + c;
        }
        (p, dp)
    };
    let mut roots: Vec<f64> = comp
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..3 {
                let (p, dp) = eval(x);
                if dp.abs() < 1e-300 {
                    break;
                }
                x -= p / dp;
            }
            x
        })
        .collect();
    roots.sort_by(|a, b| a.total_cmp(b));
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-10);
    roots
}

/// Rigid transform `world = R·cam + t` from three or more point pairs.
fn align(cam: &[Vec3], world: &[Vec3]) -> Option<Pose> {
    let n = cam.len() as f64;
    let cc = cam.iter().sum::<Vec3>() / n;
    let cw = world.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in cam.iter().zip(world) {
        h += (a - cc) * (b - cw).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    let t = cw - r * cc;
    r.iter().chain(t.iter()).all(|x| x.is_finite()).then_some(Pose {
        rotation: r,
        translation: t,
    })
}

fn reprojection_error(pose_cw: &(Matrix3<f64>, Vec3), intr: &CameraIntrinsics, c: &Correspondence) -> f64 {
    let p = pose_cw.0 * c.world_point + pose_cw.1;
    if p.z <= 0.0 {
        return f64::INFINITY;
    }
    let u = intr.fx * p.x / p.z + intr.cx;
    let v = intr.fy * p.y / p.z + intr.cy;
    (Vec2::new(u, v) - c.query_pixel).norm()
}

fn world_to_camera_parts(pose: &Pose) -> (Matrix3<f64>, Vec3) {
    let rt = pose.rotation.transpose();
    (rt, -(rt * pose.translation))
}

/// Minimal absolute pose from three correspondences (up to four solutions),
/// or from four, in which case the fourth selects the solution with the
/// smallest reprojection error.
pub fn pnp_minimal(corrs: &[Correspondence], intr: &CameraIntrinsics) -> Result<Vec<Pose>> {
    if corrs.len() != 3 && corrs.len() != 4 {
        return Err(Error::InsufficientCorrespondences {
            needed: 3,
            got: corrs.len(),
        });
    }
    let w: Vec<Vec3> = corrs[..3].iter().map(|c| c.world_point).collect();
    let ab = w[1] - w[0];
    let ac = w[2] - w[0];
    if ab.cross(&ac).norm() <= 1e-9 * ab.norm() * ac.norm() {
        return Err(Error::DegenerateConfiguration);
    }
    let f: Vec<Vec3> = corrs[..3]
        .iter()
        .map(|c| {
            let n = intr.normalize(&c.query_pixel);
            Vec3::new(n.x, n.y, 1.0).normalize()
        })
        .collect();

    // Side lengths opposite each point and cosines of the bearing angles.
    let a2 = (w[1] - w[2]).norm_squared();
    let b2 = (w[0] - w[2]).norm_squared();
    let c2 = (w[0] - w[1]).norm_squared();
    let cos_a = f[1].dot(&f[2]);
    let cos_b = f[0].dot(&f[2]);
    let cos_g = f[0].dot(&f[1]);

    // Distances s = (x, u·x, v·x); v = n(u)/d(u) and a quartic in u.
    let d = (b2 - a2) / c2;
    let e = b2 / c2;
    let n = [1.0 - d, 2.0 * d * cos_g, -(1.0 + d)];
    let dd = [2.0 * cos_b, -2.0 * cos_a];
    let ee = [1.0 - e, 2.0 * e * cos_g, -e];
    let mut quartic = [0.0; 5];
    for i in 0..3 {
        for j in 0..3 {
            quartic[i + j] += n[i] * n[j];
        }
        for j in 0..2 {
            quartic[i + j] -= 2.0 * cos_b * n[i] * dd[j];
        }
    }
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..2 {
                quartic[i + j + k] += ee[i] * dd[j] * dd[k];
            }
        }
    }

    let mut poses = Vec::new();
    for u in real_roots(&quartic) {
        let den = dd[0] + dd[1] * u;
        let k = 1.0 + u * u - 2.0 * u * cos_g;
        if den.abs() < 1e-12 || k <= 1e-12 {
            continue;
        }
        let v = (n[0] + n[1] * u + n[2] * u * u) / den;
        let x = (c2 / k).sqrt();
        let (y, z) = (u * x, v * x);
        if x <= 0.0 || y <= 0.0 || z <= 0.0 {
            continue;
        }
        let cam = [f[0] * x, f[1] * y, f[2] * z];
        if let Some(p) = align(&cam, &w) {
            poses.push(p);
        }
    }

    if corrs.len() == 4 && !poses.is_empty() {
        let best = poses
            .iter()
            .map(|p| reprojection_error(&world_to_camera_parts(p), intr, &corrs[3]))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        poses = vec![poses[best]];
    }
    Ok(poses)
}

fn inliers(pose: &Pose, corrs: &[Correspondence], intr: &CameraIntrinsics, threshold: f64) -> (Vec<usize>, Vec<f64>) {
    let parts = world_to_camera_parts(pose);
    let mut idx = Vec::new();
    let mut errs = Vec::new();
    for (i, c) in corrs.iter().enumerate() {
        let e = reprojection_error(&parts, intr, c);
        if e <= threshold {
            idx.push(i);
            errs.push(e);
        }
    }
    (idx, errs)
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Levenberg-Marquardt reprojection refinement over all given correspondences.
pub fn refine_pose(pose: &Pose, corrs: &[Correspondence], intr: &CameraIntrinsics) -> Pose {
    let (mut r, mut t) = world_to_camera_parts(pose);
    let cost = |r: &Matrix3<f64>, t: &Vec3| -> f64 {
        corrs
            .iter()
            .map(|c| reprojection_error(&(*r, *t), intr, c).powi(2))
            .sum()
    };
    let mut current = cost(&r, &t);
    let mut lambda = 1e-3;
    for _ in 0..50 {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in corrs {
            let p = r * c.world_point + t;
            if p.z <= 0.0 {
                continue;
            }
            let iz = 1.0 / p.z;
            let res = Vec2::new(intr.fx * p.x * iz + intr.cx, intr.fy * p.y * iz + intr.cy) - c.query_pixel;
            let dproj = nalgebra::Matrix2x3::new(
                intr.fx * iz,
                0.0,
                -intr.fx * p.x * iz * iz,
                0.0,
                intr.fy * iz,
                -intr.fy * p.y * iz * iz,
            );
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * -skew(&p)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for k in 0..6 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vec3::new(step[0], step[1], step[2]);
            let dr = *Rotation3::new(omega).matrix();
            let (nr, nt) = (dr * r, dr * t + Vec3::new(step[3], step[4], step[5]));
            let c = cost(&nr, &nt);
            if c <= current {
                let small = step.norm() < 1e-12;
                let rel = (current - c) / current.max(1e-300);
                r = nr;
                t = nt;
                current = c;
                lambda = (lambda * 0.1).max(1e-12);
                improved = !(small || rel < 1e-14);
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let r = Rotation3::from_matrix(&r);
    let rt = r.transpose();
    Pose::from_parts(rt, -(rt * t))
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Hypothesize-and-verify pose estimation with P3P on random 4-point samples,
/// reprojection inliers and a local LM optimization of the best model.
pub fn ransac_pose(corrs: &[Correspondence], intr: &CameraIntrinsics, cfg: &RansacConfig, seed: u64) -> Result<PoseEstimate> {
    if corrs.len() < 4 {
        return Err(Error::InsufficientCorrespondences {
            needed: 4,
            got: corrs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = corrs.len();
    let mut best: Option<(Pose, usize, f64)> = None;
    let mut needed = cfg.max_iters;
    let mut hypotheses = 0;
    while hypotheses < needed.min(cfg.max_iters) {
        hypotheses += 1;
        let pick: Vec<Correspondence> = sample(&mut rng, n, 4).iter().map(|i| corrs[i]).collect();
        let Ok(poses) = pnp_minimal(&pick, intr) else { continue };
        for pose in poses {
            let (idx, errs) = inliers(&pose, corrs, intr, cfg.threshold_px);
            let err_sum: f64 = errs.iter().sum();
            let better = match best {
                None => true,
                Some((_, count, sum)) => idx.len() > count || (idx.len() == count && err_sum < sum),
            };
            if better {
                best = Some((pose, idx.len(), err_sum));
                let w = idx.len() as f64 / n as f64;
                needed = if w >= 1.0 {
                    0
                } else {
                    let denom = (1.0 - w.powi(4)).ln();
                    if denom < 0.0 {
                        ((1.0 - cfg.confidence).ln() / denom).ceil().max(0.0) as usize
                    } else {
                        cfg.max_iters
                    }
                };
            }
        }
    }

    let Some((mut pose, mut count, _)) = best else {
        return Err(Error::NoModelFound);
    };
    if count < 4 {
        return Err(Error::NoModelFound);
    }
    for _ in 0..cfg.lo_rounds {
        let (idx, _) = inliers(&pose, corrs, intr, cfg.threshold_px);
        let subset: Vec<Correspondence> = idx.iter().map(|&i| corrs[i]).collect();
        let refined = refine_pose(&pose, &subset, intr);
        let (ridx, _) = inliers(&refined, corrs, intr, cfg.threshold_px);
        if ridx.len() < count {
            break;
        }
        let same = ridx == idx;
        pose = refined;
        count = ridx.len();
        if same {
            break;
        }
    }
    let (idx, mut errs) = inliers(&pose, corrs, intr, cfg.threshold_px);
    if idx.len() < 4 {
        return Err(Error::NoModelFound);
    }
    let mut inlier_ids: Vec<u64> = idx.iter().map(|&i| corrs[i].landmark_id).collect();
    inlier_ids.sort_unstable();
    let stats = IterationStats {
        inliers: idx.len(),
        median_residual: median(&mut errs),
        pose,
    };
    Ok(PoseEstimate {
        pose,
        inlier_count: idx.len(),
        inlier_ids,
        iterations_run: hypotheses,
        per_iteration: vec![stats],
    })
}

/// Render at the current estimate, match, solve; repeated `cfg.iterations`
/// times starting from `prior`.
pub fn iterative_localize(
    map: &VoxelMap,
    keypoints: &[Keypoint],
    query_map: &DescriptorMap,
    prior: &Pose,
    cfg: &LocalizeConfig,
) -> Result<PoseEstimate> {
    if cfg.iterations == 0 {
        return Err(Error::Config("localization needs at least one iteration".into()));
    }
    let mut current: Option<PoseEstimate> = None;
    let mut estimate = *prior;
    let mut per_iteration = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let rendered = render_visible(map, &estimate, cfg.samples_per_ray, cfg.opacity_min);
        let corrs = match_features(&rendered, keypoints, query_map, cfg.tau)?;
        match ransac_pose(&corrs, &map.intrinsics, &cfg.ransac, mix(cfg.seed, k as u64)) {
            Ok(est) => {
                estimate = est.pose;
                per_iteration.push(est.per_iteration[0]);
                current = Some(est);
            }
            Err(Error::NoModelFound | Error::InsufficientCorrespondences { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    let mut est = current.ok_or(Error::LocalizationFailed)?;
    est.iterations_run = per_iteration.len();
    est.per_iteration = per_iteration;
    Ok(est)
}
