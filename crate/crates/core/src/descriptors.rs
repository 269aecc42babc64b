//! Dense descriptor maps, keypoints, patches and the synthetic descriptor
//! source used in place of a learned feature extractor.
//!
//! The synthetic source renders every visible landmark as a Gaussian blob of
//! its descriptor centered on the landmark's projection. Each landmark's
//! descriptor is rotated in descriptor space as a smooth function of the
//! viewing direction, with strength `view_dependence`; the background carries
//! low-norm seeded noise.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{project, CameraIntrinsics, Pose, Vec2, Vec3};
use crate::seed::mix;

pub const FVDM_MAGIC: &[u8; 4] = b"FVDM";
pub const FVDM_VERSION: u32 = 1;

/// Gain from viewing angle (radians) to descriptor rotation angle, per unit
/// of `view_dependence`.
pub const VIEW_GAIN: f64 = 4.0;
/// Norm of the background noise vectors.
pub const BACKGROUND_NORM: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl DescriptorMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidMap("zero dimension".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidMap(format!(
                "expected {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidMap("non-finite value".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: &[f32]) -> Self {
        let data = value
            .iter()
            .copied()
            .cycle()
            .take(width * height * value.len())
            .collect();
        Self {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Descriptor at the pixel nearest to `position`, clamped to the image.
    pub fn sample_nearest(&self, position: &Vec2) -> Vec<f64> {
        let x = (position.x.round().max(0.0) as usize).min(self.width - 1);
        let y = (position.y.round().max(0.0) as usize).min(self.height - 1);
        self.pixel(x, y).iter().map(|&v| v as f64).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FVDM_MAGIC)?;
        for v in [FVDM_VERSION, self.height as u32, self.width as u32, self.channels as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 4 || &bytes[..4] != FVDM_MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 20 {
            return Err(Error::CorruptPayload("truncated header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != FVDM_VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let payload = &bytes[20..];
        if payload.len() != h * w * c * 4 {
            return Err(Error::CorruptPayload(format!(
                "expected {} payload bytes, found {}",
                h * w * c * 4,
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(w, h, c, data).map_err(|e| Error::CorruptPayload(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub position: Vec2,
    pub score: f64,
}

impl Keypoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self {
            position: Vec2::new(u, v),
            score: 1.0,
        }
    }

    /// Integer pixel nearest to the keypoint.
    pub fn pixel(&self) -> (i64, i64) {
        (self.position.x.round() as i64, self.position.y.round() as i64)
    }
}

/// `S × S × C` window of a descriptor map, row-major over `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub center_keypoint: Keypoint,
}

impl Patch {
    pub fn element(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.size + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn center(&self) -> &[f64] {
        self.element(self.size / 2, self.size / 2)
    }

    /// Image pixel of element `(row, col)`.
    pub fn element_pixel(&self, row: usize, col: usize) -> Vec2 {
        let (cu, cv) = self.center_keypoint.pixel();
        let half = (self.size / 2) as i64;
        Vec2::new(
            (cu - half + col as i64) as f64,
            (cv - half + row as i64) as f64,
        )
    }
}

pub fn crop_patch(map: &DescriptorMap, kp: &Keypoint, size: usize) -> Result<Patch> {
    if size % 2 == 0 {
        return Err(Error::EvenPatchSize(size));
    }
    let half = (size / 2) as i64;
    let (cu, cv) = kp.pixel();
    let border = Error::BorderViolation {
        u: kp.position.x,
        v: kp.position.y,
        size,
    };
    if !kp.position.x.is_finite()
        || !kp.position.y.is_finite()
        || cu - half < 0
        || cv - half < 0
        || cu + half >= map.width as i64
        || cv + half >= map.height as i64
    {
        return Err(border);
    }
    let mut data = Vec::with_capacity(size * size * map.channels);
    for row in 0..size as i64 {
        for col in 0..size as i64 {
            let px = map.pixel((cu - half + col) as usize, (cv - half + row) as usize);
            data.extend(px.iter().map(|&v| v as f64));
        }
    }
    Ok(Patch {
        size,
        channels: map.channels,
        data,
        center_keypoint: *kp,
    })
}

/// Cosine similarity.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ChannelMismatch(a.len(), b.len()));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::ZeroVector);
    }
    Ok((ab / (na * nb)).clamp(-1.0, 1.0))
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLandmark {
    pub position: Vec3,
    /// Unit-norm descriptor seen head-on.
    pub descriptor: Vec<f64>,
    // Orthonormal complement directions the descriptor rotates toward.
    tangent_u: Vec<f64>,
    tangent_w: Vec<f64>,
}

impl SyntheticLandmark {
    /// Descriptor as seen along unit viewing direction `view` (camera to
    /// landmark), for a given view-dependence strength.
    pub fn descriptor_from(&self, view: &Vec3, view_dependence: f64) -> Vec<f64> {
        if view_dependence == 0.0 {
            return self.descriptor.clone();
        }
        let a = VIEW_GAIN * view_dependence * view.x.clamp(-1.0, 1.0).asin();
        let b = VIEW_GAIN * view_dependence * view.y.clamp(-1.0, 1.0).asin();
        let (ca, sa) = (a.cos(), a.sin());
        let (cb, sb) = (b.cos(), b.sin());
        (0..self.descriptor.len())
            .map(|k| ca * cb * self.descriptor[k] + sa * self.tangent_u[k] + ca * sb * self.tangent_w[k])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub landmarks: Vec<SyntheticLandmark>,
    pub seed: u64,
    pub view_dependence: f64,
    pub falloff_sigma: f64,
    pub channels: usize,
}

fn gaussian_unit(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
    normalized(&v)
}

fn orthogonalize(v: &mut [f64], against: &[f64]) {
    let d: f64 = v.iter().zip(against).map(|(a, b)| a * b).sum();
    for (x, y) in v.iter_mut().zip(against) {
        *x -= d * y;
    }
}

impl SyntheticScene {
    /// Landmarks at `positions` with seeded random unit descriptors.
    pub fn new(
        positions: &[Vec3],
        channels: usize,
        seed: u64,
        view_dependence: f64,
        falloff_sigma: f64,
    ) -> Result<Self> {
        if channels < 3 {
            return Err(Error::Config("synthetic scenes need at least 3 channels".into()));
        }
        if !(0.0..1.0).contains(&view_dependence) || falloff_sigma <= 0.0 {
            return Err(Error::Config(
                "view_dependence must be in [0, 1) and falloff_sigma > 0".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5ce7e));
        let landmarks = positions
            .iter()
            .map(|&position| {
                let descriptor = gaussian_unit(&mut rng, channels);
                let mut tangent_u = gaussian_unit(&mut rng, channels);
                orthogonalize(&mut tangent_u, &descriptor);
                let tangent_u = normalized(&tangent_u);
                let mut tangent_w = gaussian_unit(&mut rng, channels);
                orthogonalize(&mut tangent_w, &descriptor);
                orthogonalize(&mut tangent_w, &tangent_u);
                let tangent_w = normalized(&tangent_w);
                SyntheticLandmark {
                    position,
                    descriptor,
                    tangent_u,
                    tangent_w,
                }
            })
            .collect();
        Ok(Self {
            landmarks,
            seed,
            view_dependence,
            falloff_sigma,
            channels,
        })
    }

    /// Oracle descriptor of landmark `index` seen from a camera at `eye`.
    pub fn landmark_descriptor(&self, index: usize, eye: &Vec3) -> Vec<f64> {
        let lm = &self.landmarks[index];
        let view = (lm.position - eye).normalize();
        lm.descriptor_from(&view, self.view_dependence)
    }
}

/// One rendered frame of the synthetic source.
#[derive(Debug, Clone)]
pub struct SyntheticView {
    pub map: DescriptorMap,
    pub keypoints: Vec<Keypoint>,
    /// Index into `scene.landmarks` for every keypoint.
    pub landmark_ids: Vec<usize>,
}

fn pose_hash(pose: &Pose) -> u64 {
    pose.to_row_major()
        .iter()
        .fold(0x9e37_79b9_7f4a_7c15, |h, v| mix(h, v.to_bits()))
}

pub fn synth_render_view(scene: &SyntheticScene, pose: &Pose, intr: &CameraIntrinsics) -> SyntheticView {
    let (w, h, c) = (intr.width as usize, intr.height as usize, scene.channels);
    let sigma = scene.falloff_sigma;
    let radius = (4.0 * sigma).ceil() as i64;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);

    let mut blob = vec![0.0f64; w * h * c];
    let mut weight = vec![0.0f64; w * h];
    let mut keypoints = Vec::new();
    let mut landmark_ids = Vec::new();
    let eye = pose.center();

    for (j, lm) in scene.landmarks.iter().enumerate() {
        let Ok(px) = project(pose, intr, &lm.position) else {
            continue;
        };
        if !(px.x >= 0.0 && px.y >= 0.0 && px.x < w as f64 && px.y < h as f64) {
            continue;
        }
        keypoints.push(Keypoint::new(px.x, px.y));
        landmark_ids.push(j);
        let d = scene.landmark_descriptor(j, &eye);
        let (u0, v0) = (px.x.round() as i64, px.y.round() as i64);
        for y in (v0 - radius).max(0)..=(v0 + radius).min(h as i64 - 1) {
            for x in (u0 - radius).max(0)..=(u0 + radius).min(w as i64 - 1) {
                let r2 = (x as f64 - px.x).powi(2) + (y as f64 - px.y).powi(2);
                let g = (-r2 * inv2s2).exp();
                let p = y as usize * w + x as usize;
                weight[p] += g;
                for (acc, dk) in blob[p * c..(p + 1) * c].iter_mut().zip(&d) {
                    *acc += g * dk;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix(scene.seed, pose_hash(pose)));
    let mut data = vec![0.0f32; w * h * c];
    let mut noise = vec![0.0f64; c];
    for p in 0..w * h {
        for n in noise.iter_mut() {
            *n = rng.sample(StandardNormal);
        }
        let nn = noise.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let g = weight[p];
        let blob_scale = 1.0 / g.max(1.0);
        let noise_scale = (1.0 - g.min(1.0)) * BACKGROUND_NORM / nn;
        for k in 0..c {
            data[p * c + k] = (blob[p * c + k] * blob_scale + noise[k] * noise_scale) as f32;
        }
    }

    SyntheticView {
        map: DescriptorMap {
            width: w,
            height: h,
            channels: c,
            data,
        },
        keypoints,
        landmark_ids,
    }
}
