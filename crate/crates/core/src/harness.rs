//! Synthetic scenes, the map-building pipeline and end-to-end evaluation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::{similarity, synth_render_view, DescriptorMap, Keypoint, SyntheticScene};
use crate::error::{Error, Result};
use crate::geometry::{axis_angle, project, CameraIntrinsics, Pose, Ray, Vec3};
use crate::relocalizer::{iterative_localize, LocalizeConfig};
use crate::renderer::render_ray;
use crate::seed::mix;
use crate::tracking::{build_tracks, filter_tracks, Frame, Track, TrackingConfig};
use crate::trainer::{train_voxel, LossBreakdown, TrainConfig};
use crate::triangulation::{triangulate, Landmark, TriangulationConfig};
use crate::voxel::{create_voxel, VoxelInit, VoxelMap};

pub const SYNTHETIC_EXTRACTOR: &str = "synthetic";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub landmark_count: usize,
    /// Side of the cube landmarks are drawn from, meters.
    pub extent: f64,
    pub orbit_radius: f64,
    pub orbit_degrees: f64,
    pub frame_count: usize,
    pub query_count: usize,
    /// Queries alternate between ± this elevation.
    pub query_elevation_degrees: f64,
    pub channels: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub falloff_sigma: f64,
    pub view_dependence: f64,
    /// Gaussian keypoint jitter, pixels.
    pub pixel_sigma: f64,
    /// Distractor keypoints per frame as a fraction of true keypoints.
    pub outlier_rate: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            landmark_count: 120,
            extent: 3.0,
            orbit_radius: 6.0,
            orbit_degrees: 60.0,
            frame_count: 20,
            query_count: 10,
            query_elevation_degrees: 6.0,
            channels: 32,
            width: 320,
            height: 240,
            focal: 220.0,
            falloff_sigma: 2.5,
            view_dependence: 0.1,
            pixel_sigma: 0.3,
            outlier_rate: 0.1,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 2 {
            return Err(Error::Config("frame_count must be at least 2".into()));
        }
        if !(self.extent > 0.0) || !(self.orbit_radius > self.extent) {
            return Err(Error::Config("extent must be positive and inside the orbit".into()));
        }
        if !(self.pixel_sigma >= 0.0) || !(self.outlier_rate >= 0.0) {
            return Err(Error::Config("noise knobs must be non-negative".into()));
        }
        self.intrinsics().map(|_| ())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::centered(self.focal, self.width, self.height)
    }

    /// Cube diagonal.
    pub fn diameter(&self) -> f64 {
        self.extent * 3f64.sqrt()
    }

    /// Camera on the orbit around the origin, looking at it. Azimuth 0 looks
    /// along +z; positive elevation raises the camera (−y is up).
    pub fn orbit_pose(&self, azimuth_deg: f64, elevation_deg: f64) -> Pose {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = self.orbit_radius * Vec3::new(-az.sin() * el.cos(), -el.sin(), -az.cos() * el.cos());
        Pose::look_at(eye, Vec3::zeros(), Vec3::y())
    }

    pub fn training_azimuths(&self) -> Vec<f64> {
        let n = self.frame_count;
        (0..n)
            .map(|i| -0.5 * self.orbit_degrees + self.orbit_degrees * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// Query azimuths sit halfway between training azimuths, elevations
    /// alternate in sign.
    pub fn query_angles(&self) -> Vec<(f64, f64)> {
        let train = self.training_azimuths();
        let step = self.orbit_degrees / (self.frame_count - 1) as f64;
        (0..self.query_count)
            .map(|q| {
                let slot = (q * (train.len() - 1)) / self.query_count.max(1);
                let el = if q % 2 == 0 { 1.0 } else { -1.0 } * self.query_elevation_degrees;
                (train[slot] + 0.5 * step, el)
            })
            .collect()
    }
}

/// A posed synthetic frame with its detections.
#[derive(Debug, Clone)]
pub struct View {
    pub pose: Pose,
    pub map: DescriptorMap,
    pub keypoints: Vec<Keypoint>,
    /// Ground-truth landmark per keypoint; `None` for distractors.
    pub landmark_ids: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub spec: SceneSpec,
    pub scene: SyntheticScene,
    pub intrinsics: CameraIntrinsics,
    pub training: Vec<View>,
    pub queries: Vec<View>,
}

pub fn landmark_positions(spec: &SceneSpec) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 1));
    let h = 0.5 * spec.extent;
    (0..spec.landmark_count)
        .map(|_| Vec3::new(rng.gen_range(-h..h), rng.gen_range(-h..h), rng.gen_range(-h..h)))
        .collect()
}

/// Renders `pose` and perturbs its detections with the scene's noise settings.
pub fn synth_view(spec: &SceneSpec, scene: &SyntheticScene, intr: &CameraIntrinsics, pose: Pose, key: u64) -> View {
    let sv = synth_render_view(scene, &pose, intr);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, key));
    let jitter = Normal::new(0.0, spec.pixel_sigma.max(1e-300)).unwrap();
    let (w, h) = (intr.width as f64, intr.height as f64);
    let mut keypoints = Vec::with_capacity(sv.keypoints.len());
    let mut landmark_ids = Vec::with_capacity(sv.keypoints.len());
    for (kp, id) in sv.keypoints.iter().zip(&sv.landmark_ids) {
        let mut p = kp.position;
        if spec.pixel_sigma > 0.0 {
            p.x = (p.x + jitter.sample(&mut rng)).clamp(0.0, w - 1.0);
            p.y = (p.y + jitter.sample(&mut rng)).clamp(0.0, h - 1.0);
        }
        keypoints.push(Keypoint::new(p.x, p.y));
        landmark_ids.push(Some(*id));
    }
    let distractors = (spec.outlier_rate * sv.keypoints.len() as f64).round() as usize;
    for _ in 0..distractors {
        keypoints.push(Keypoint::new(rng.gen_range(0.0..w - 1.0), rng.gen_range(0.0..h - 1.0)));
        landmark_ids.push(None);
    }
    View {
        pose,
        map: sv.map,
        keypoints,
        landmark_ids,
    }
}

pub fn gen_scene(spec: &SceneSpec) -> Result<GeneratedScene> {
    spec.validate()?;
    let intr = spec.intrinsics()?;
    let scene = SyntheticScene::new(
        &landmark_positions(spec),
        spec.channels,
        spec.seed,
        spec.view_dependence,
        spec.falloff_sigma,
    )?;
    let training = spec
        .training_azimuths()
        .par_iter()
        .enumerate()
        .map(|(i, &az)| synth_view(spec, &scene, &intr, spec.orbit_pose(az, 0.0), 100 + i as u64))
        .collect();
    let queries = spec
        .query_angles()
        .par_iter()
        .enumerate()
        .map(|(i, &(az, el))| synth_view(spec, &scene, &intr, spec.orbit_pose(az, el), 10_000 + i as u64))
        .collect();
    Ok(GeneratedScene {
        spec: *spec,
        scene,
        intrinsics: intr,
        training,
        queries,
    })
}

/// Prior for query `index`: the true camera swung `degrees` about the scene
/// center's vertical axis (alternating direction), so it still faces the
/// scene, then shifted sideways by `fraction` of the scene diameter.
pub fn perturbed_prior(spec: &SceneSpec, truth: &Pose, index: usize, degrees: f64, fraction: f64) -> Pose {
    let sign = if index % 2 == 0 { 1.0 } else { -1.0 };
    let r = axis_angle(&Vec3::y(), sign * degrees.to_radians());
    let rotation = r * truth.rotation;
    let right = rotation.column(0).into_owned();
    Pose {
        rotation,
        translation: r * truth.translation + sign * fraction * spec.diameter() * right,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub patch_size: usize,
    pub resolution: usize,
    pub tracking: TrackingConfig,
    pub triangulation: TriangulationConfig,
    pub init: VoxelInit,
    pub train: TrainConfig,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch_size: 7,
            resolution: 3,
            tracking: TrackingConfig::default(),
            triangulation: TriangulationConfig::default(),
            init: VoxelInit::default(),
            train: TrainConfig::default(),
            workers: 0,
        }
    }
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

pub fn frames_of(views: &[View]) -> Vec<Frame> {
    views
        .iter()
        .map(|v| Frame {
            pose: v.pose,
            keypoints: v.keypoints.clone(),
            map: v.map.clone(),
        })
        .collect()
}

/// Tracks long enough to become voxels.
pub fn track_views(views: &[View], cfg: &PipelineConfig) -> Result<Vec<Track>> {
    let t = &cfg.tracking;
    let tracks = build_tracks(&frames_of(views), cfg.patch_size, t.radius, t.min_sim)?;
    Ok(filter_tracks(tracks, t.min_length))
}

/// Triangulates every track; tracks that fail or whose mean reprojection
/// error exceeds the inlier threshold are dropped.
pub fn triangulate_tracks(tracks: &[Track], intr: &CameraIntrinsics, cfg: &TriangulationConfig) -> Vec<(usize, Landmark)> {
    tracks
        .par_iter()
        .enumerate()
        .filter_map(|(i, t)| {
            let lm = triangulate(t, intr, cfg).ok()?;
            (lm.mean_reprojection_error <= cfg.inlier_threshold).then_some((i, lm))
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct BuildStats {
    pub tracks: usize,
    pub triangulated: usize,
    pub trained: usize,
    pub training_failures: usize,
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub map: VoxelMap,
    pub tracks: Vec<Track>,
    pub landmarks: Vec<Landmark>,
    pub histories: Vec<Vec<LossBreakdown>>,
    pub stats: BuildStats,
}

/// Tracking, triangulation, voxel creation and per-voxel training. Lattices
/// are rounded to `f32` so the map survives a save/load unchanged.
pub fn build_map(views: &[View], intr: &CameraIntrinsics, cfg: &PipelineConfig) -> Result<BuildOutput> {
    cfg.train.validate()?;
    let pool = thread_pool(cfg.workers)?;
    pool.install(|| {
        let tracks = track_views(views, cfg)?;
        let landmarks = triangulate_tracks(&tracks, intr, &cfg.triangulation);
        let trained: Vec<_> = landmarks
            .par_iter()
            .map(|(i, lm)| {
                let track = &tracks[*i];
                let voxel = create_voxel(track, &lm.position, cfg.patch_size, intr, cfg.resolution, &cfg.init)?;
                train_voxel(voxel, track, intr, &cfg.train)
            })
            .collect();
        let mut stats = BuildStats {
            tracks: tracks.len(),
            triangulated: landmarks.len(),
            ..BuildStats::default()
        };
        let mut voxels = Vec::new();
        let mut histories = Vec::new();
        let mut kept_landmarks = Vec::new();
        for (out, (_, lm)) in trained.into_iter().zip(&landmarks) {
            match out {
                Ok(mut o) => {
                    o.voxel.quantize();
                    voxels.push(o.voxel);
                    histories.push(o.history);
                    kept_landmarks.push(*lm);
                }
                Err(_) => stats.training_failures += 1,
            }
        }
        stats.trained = voxels.len();
        let channels = views.first().map_or(0, |v| v.map.channels());
        let map = VoxelMap::new(voxels, *intr, channels, cfg.resolution, cfg.patch_size, SYNTHETIC_EXTRACTOR)?;
        Ok(BuildOutput {
            map,
            tracks,
            landmarks: kept_landmarks,
            histories,
            stats,
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub index: usize,
    pub localized: bool,
    pub translation_error: f64,
    pub rotation_error_deg: f64,
    /// Inliers after each localization round.
    pub inliers: Vec<usize>,
    /// (translation m, rotation deg) after each round.
    pub iteration_errors: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub queries: Vec<QueryResult>,
    pub median_translation: f64,
    pub median_rotation_deg: f64,
    pub successes: usize,
    pub failures: usize,
    /// Fraction of queries within (1% of extent, 0.5°) and (5% of extent, 5°).
    pub fine_rate: f64,
    pub coarse_rate: f64,
    /// Mean inliers at each round over localized queries that ran it.
    pub mean_inliers_per_iteration: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Localizes every query from its prior and aggregates errors against the
/// query's true pose.
pub fn run_eval(
    map: &VoxelMap,
    queries: &[View],
    priors: &[Pose],
    cfg: &LocalizeConfig,
    extent: f64,
    workers: usize,
) -> Result<EvalReport> {
    if queries.len() != priors.len() {
        return Err(Error::Config("queries and priors differ in length".into()));
    }
    let pool = thread_pool(workers)?;
    let results: Vec<QueryResult> = pool.install(|| {
        queries
            .par_iter()
            .zip(priors)
            .enumerate()
            .map(|(index, (q, prior))| {
                let qcfg = LocalizeConfig {
                    seed: mix(cfg.seed, index as u64),
                    ..*cfg
                };
                match iterative_localize(map, &q.keypoints, &q.map, prior, &qcfg) {
                    Ok(est) => {
                        let (deg, m) = est.pose.error_to(&q.pose);
                        QueryResult {
                            index,
                            localized: true,
                            translation_error: m,
                            rotation_error_deg: deg,
                            inliers: est.per_iteration.iter().map(|s| s.inliers).collect(),
                            iteration_errors: est
                                .per_iteration
                                .iter()
                                .map(|s| {
                                    let (d, t) = s.pose.error_to(&q.pose);
                                    (t, d)
                                })
                                .collect(),
                        }
                    }
                    Err(_) => QueryResult {
                        index,
                        localized: false,
                        translation_error: f64::NAN,
                        rotation_error_deg: f64::NAN,
                        inliers: Vec::new(),
                        iteration_errors: Vec::new(),
                    },
                }
            })
            .collect()
    });
    Ok(aggregate(results, cfg.iterations, extent))
}

pub fn aggregate(queries: Vec<QueryResult>, iterations: usize, extent: f64) -> EvalReport {
    let ok: Vec<&QueryResult> = queries.iter().filter(|q| q.localized).collect();
    let t: Vec<f64> = ok.iter().map(|q| q.translation_error).collect();
    let r: Vec<f64> = ok.iter().map(|q| q.rotation_error_deg).collect();
    let n = queries.len().max(1) as f64;
    let rate = |tm: f64, deg: f64| {
        ok.iter()
            .filter(|q| q.translation_error <= tm && q.rotation_error_deg <= deg)
            .count() as f64
            / n
    };
    let mean_inliers = (0..iterations)
        .map(|k| {
            let v: Vec<f64> = ok.iter().filter_map(|q| q.inliers.get(k).map(|&x| x as f64)).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect();
    EvalReport {
        median_translation: median(&t),
        median_rotation_deg: median(&r),
        successes: ok.len(),
        failures: queries.len() - ok.len(),
        fine_rate: rate(0.01 * extent, 0.5),
        coarse_rate: rate(0.05 * extent, 5.0),
        mean_inliers_per_iteration: mean_inliers,
        queries,
    }
}

/// Structured-text report: a summary block, then one row per query.
pub fn write_report<W: Write>(report: &EvalReport, mut w: W) -> Result<()> {
    writeln!(w, "# summary")?;
    writeln!(w, "queries {}", report.queries.len())?;
    writeln!(w, "successes {}", report.successes)?;
    writeln!(w, "failures {}", report.failures)?;
    writeln!(w, "median_translation_m {}", report.median_translation)?;
    writeln!(w, "median_rotation_deg {}", report.median_rotation_deg)?;
    writeln!(w, "fine_rate {}", report.fine_rate)?;
    writeln!(w, "coarse_rate {}", report.coarse_rate)?;
    let mi: Vec<String> = report.mean_inliers_per_iteration.iter().map(|v| v.to_string()).collect();
    writeln!(w, "mean_inliers_per_iteration {}", mi.join(" "))?;
    writeln!(w, "# query localized translation_m rotation_deg inliers_per_iteration...")?;
    for q in &report.queries {
        write!(w, "{} {} {} {}", q.index, q.localized as u8, q.translation_error, q.rotation_error_deg)?;
        for i in &q.inliers {
            write!(w, " {i}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Per-iteration inlier table for plotting: `iteration mean_inliers`.
pub fn write_inlier_trend<W: Write>(report: &EvalReport, mut w: W) -> Result<()> {
    writeln!(w, "# iteration mean_inliers")?;
    for (k, v) in report.mean_inliers_per_iteration.iter().enumerate() {
        writeln!(w, "{} {}", k + 1, v)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub angle_deg: f64,
    /// Median cosine of descriptors rendered at the true pose against the
    /// view's own descriptor map.
    pub rendered: f64,
    /// Median cosine of descriptors from the 0° view against this view.
    pub raw: f64,
}

/// Rotates the camera around the orbit from azimuth 0 and compares, for every
/// landmark the map knows, the rendered and the 0°-extracted descriptor with
/// the descriptor found at the landmark's projection in each view.
pub fn view_sweep(gen: &GeneratedScene, map: &VoxelMap, angles_deg: &[f64], samples: usize) -> Vec<SweepRow> {
    let spec = &gen.spec;
    let intr = &gen.intrinsics;
    let view_at = |az: f64| {
        let pose = spec.orbit_pose(az, 0.0);
        (pose, synth_render_view(&gen.scene, &pose, intr).map)
    };
    let (pose0, map0) = view_at(0.0);
    // Voxels matched to their nearest scene landmark.
    let pairs: Vec<(usize, usize)> = map
        .voxels
        .iter()
        .enumerate()
        .filter_map(|(vi, v)| {
            let (li, d) = gen
                .scene
                .landmarks
                .iter()
                .enumerate()
                .map(|(li, l)| (li, (l.position - v.center).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))?;
            (d < 0.5 * v.side.max(1e-3)).then_some((vi, li))
        })
        .collect();
    let descriptor_at = |pose: &Pose, dmap: &DescriptorMap, p: &Vec3| {
        let px = project(pose, intr, p).ok().filter(|px| intr.contains(px))?;
        Some(dmap.sample_nearest(&px))
    };
    angles_deg
        .par_iter()
        .map(|&az| {
            let (pose, dmap) = view_at(az);
            let mut rendered = Vec::new();
            let mut raw = Vec::new();
            for &(vi, li) in &pairs {
                let lp = gen.scene.landmarks[li].position;
                let Some(target) = descriptor_at(&pose, &dmap, &lp) else { continue };
                let v = &map.voxels[vi];
                let ray = Ray::new(pose.center(), v.center - pose.center());
                if let Ok((d, _)) = render_ray(v, &ray, samples) {
                    rendered.push(similarity(&d, &target).unwrap_or(0.0));
                }
                if let Some(reference) = descriptor_at(&pose0, &map0, &lp) {
                    raw.push(similarity(&reference, &target).unwrap_or(0.0));
                }
            }
            SweepRow {
                angle_deg: az,
                rendered: median(&rendered),
                raw: median(&raw),
            }
        })
        .collect()
}

pub fn write_sweep<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(w, "# angle_deg rendered_similarity raw_similarity")?;
    for r in rows {
        writeln!(w, "{} {} {}", r.angle_deg, r.rendered, r.raw)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec {
            landmark_count: 20,
            channels: 8,
            frame_count: 6,
            query_count: 3,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_scene(&small()).unwrap();
        let b = gen_scene(&small()).unwrap();
        for (x, y) in a.training.iter().chain(&a.queries).zip(b.training.iter().chain(&b.queries)) {
            assert_eq!(x.pose, y.pose);
            assert_eq!(x.map, y.map);
            assert_eq!(x.keypoints, y.keypoints);
        }
    }

    #[test]
    fn orbit_spacing() {
        let spec = SceneSpec::default();
        let az = spec.training_azimuths();
        assert_eq!(az.len(), 20);
        for w in az.windows(2) {
            assert!((w[1] - w[0] - 60.0 / 19.0).abs() < 1e-12);
        }
        let poses: Vec<Pose> = az.iter().map(|&a| spec.orbit_pose(a, 0.0)).collect();
        for w in poses.windows(2) {
            let (deg, _) = w[0].error_to(&w[1]);
            assert!((deg - 60.0 / 19.0).abs() < 1e-9);
        }
    }

    #[test]
    fn queries_are_offset() {
        let spec = SceneSpec::default();
        let train: Vec<Pose> = spec.training_azimuths().iter().map(|&a| spec.orbit_pose(a, 0.0)).collect();
        for (az, el) in spec.query_angles() {
            let q = spec.orbit_pose(az, el);
            let nearest = train.iter().map(|t| t.error_to(&q).0).fold(f64::INFINITY, f64::min);
            assert!(nearest >= 5.0, "{nearest}");
        }
    }

    #[test]
    fn orbit_looks_at_center() {
        let spec = SceneSpec::default();
        let k = spec.intrinsics().unwrap();
        let p = project(&spec.orbit_pose(17.0, -6.0), &k, &Vec3::zeros()).unwrap();
        assert!((p.x - k.cx).abs() < 1e-9 && (p.y - k.cy).abs() < 1e-9);
    }

    #[test]
    fn prior_offset_magnitude() {
        let spec = SceneSpec::default();
        let truth = spec.orbit_pose(5.0, 6.0);
        let prior = perturbed_prior(&spec, &truth, 0, 30.0, 0.25);
        let (deg, _) = prior.error_to(&truth);
        assert!((deg - 30.0).abs() < 1e-9);
        let swung = axis_angle(&Vec3::y(), 30f64.to_radians()) * truth.translation;
        assert!(((prior.translation - swung).norm() - 0.25 * spec.diameter()).abs() < 1e-12);
    }

    #[test]
    fn report_accounting() {
        let q = |i, ok: bool| QueryResult {
            index: i,
            localized: ok,
            translation_error: if ok { 0.01 * i as f64 } else { f64::NAN },
            rotation_error_deg: if ok { 0.1 } else { f64::NAN },
            inliers: if ok { vec![10, 12, 12] } else { vec![] },
            iteration_errors: vec![],
        };
        let r = aggregate(vec![q(0, true), q(1, false), q(2, true), q(3, true)], 3, 3.0);
        assert_eq!(r.successes + r.failures, 4);
        assert_eq!(r.failures, 1);
        assert!((r.median_translation - 0.02).abs() < 1e-15);
        assert_eq!(r.mean_inliers_per_iteration, vec![10.0, 12.0, 12.0]);
    }
}
