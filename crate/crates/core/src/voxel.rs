//! Per-landmark voxel grids.
//!
//! A voxel is an axis-aligned cube centred on a landmark, holding an
//! `R × R × R` lattice of nodes. Node `(a, b, c)` sits at
//! `center + ((a, b, c) / (R − 1) − ½) · side` and stores a `C`-channel
//! descriptor plus one raw density value. Node storage is x-fastest:
//! `index = a + R · (b + R · c)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Vec3};
use crate::seed::mix;
use crate::tracking::Track;

/// Slack for points on or just beyond the cube faces.
pub const BOUNDS_SLACK: f64 = 1e-9;
// Fractions this close to an integer are snapped so lattice points are exact.
const SNAP: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelLandmark {
    pub center: Vec3,
    pub side: f64,
    pub resolution: usize,
    pub channels: usize,
    pub desc_nodes: Vec<f64>,
    /// Raw (pre-activation) density per node.
    pub density_nodes: Vec<f64>,
    pub track_id: u64,
}

impl VoxelLandmark {
    pub fn node_count(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn node_position(&self, a: usize, b: usize, c: usize) -> Vec3 {
        node_position(&self.center, self.side, self.resolution, a, b, c)
    }

    pub fn node_descriptor(&self, node: usize) -> &[f64] {
        &self.desc_nodes[node * self.channels..(node + 1) * self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.desc_nodes.iter().chain(&self.density_nodes).all(|v| v.is_finite())
            && self.center.iter().all(|v| v.is_finite())
            && self.side.is_finite()
    }

    /// Rounds every lattice value to the nearest `f32`, the on-disk precision.
    pub fn quantize(&mut self) {
        for v in self.desc_nodes.iter_mut().chain(self.density_nodes.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    pub voxels: Vec<VoxelLandmark>,
    pub intrinsics: CameraIntrinsics,
    pub channels: usize,
    pub resolution: usize,
    pub patch_size: usize,
    pub extractor: String,
}

impl VoxelMap {
    pub fn new(
        voxels: Vec<VoxelLandmark>,
        intrinsics: CameraIntrinsics,
        channels: usize,
        resolution: usize,
        patch_size: usize,
        extractor: impl Into<String>,
    ) -> Result<Self> {
        if voxels
            .iter()
            .any(|v| v.channels != channels || v.resolution != resolution)
        {
            return Err(Error::Config("voxels disagree on channels or resolution".into()));
        }
        Ok(Self {
            voxels,
            intrinsics,
            channels,
            resolution,
            patch_size,
            extractor: extractor.into(),
        })
    }
}

pub fn node_position(center: &Vec3, side: f64, r: usize, a: usize, b: usize, c: usize) -> Vec3 {
    let step = |i: usize| (i as f64 / (r - 1) as f64 - 0.5) * side;
    center + Vec3::new(step(a), step(b), step(c))
}

/// `min_i S · ‖c_i − ℓ‖ / f` over the track's camera centers.
pub fn voxel_size(track: &Track, landmark: &Vec3, patch_size: usize, focal: f64) -> Result<f64> {
    if track.is_empty() {
        return Err(Error::DegenerateGeometry("empty track"));
    }
    if focal <= 0.0 {
        return Err(Error::InvalidIntrinsics);
    }
    Ok(track
        .observations
        .iter()
        .map(|o| patch_size as f64 * (o.pose.center() - landmark).norm() / focal)
        .fold(f64::INFINITY, f64::min))
}

/// The eight lattice nodes around a point and their trilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrilinearStencil {
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
}

impl TrilinearStencil {
    pub fn new(center: &Vec3, side: f64, r: usize, point: &Vec3) -> Result<Self> {
        let cells = (r - 1) as f64;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for axis in 0..3 {
            let lo = center[axis] - 0.5 * side;
            let offset = point[axis] - lo;
            if offset < -BOUNDS_SLACK || offset > side + BOUNDS_SLACK {
                return Err(Error::OutOfBounds);
            }
            let mut u = (offset / side * cells).clamp(0.0, cells);
            let nearest = u.round();
            if (u - nearest).abs() <= SNAP * cells.max(1.0) {
                u = nearest;
            }
            let i0 = (u.floor() as usize).min(r - 2);
            base[axis] = i0;
            frac[axis] = u - i0 as f64;
        }
        let mut nodes = [0usize; 8];
        let mut weights = [0.0f64; 8];
        for k in 0..8 {
            let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            nodes[k] = (base[0] + dx) + r * ((base[1] + dy) + r * (base[2] + dz));
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            weights[k] = wx * wy * wz;
        }
        Ok(Self { nodes, weights })
    }

    pub fn apply(&self, nodes: &[f64], width: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (&n, &w) in self.nodes.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(&nodes[n * width..(n + 1) * width]) {
                *o += w * v;
            }
        }
    }

    pub fn apply_scalar(&self, nodes: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (&n, &w) in self.nodes.iter().zip(&self.weights) {
            if w != 0.0 {
                acc += w * nodes[n];
            }
        }
        acc
    }
}

/// Trilinear blend of a `R³ × width` node lattice at `point`.
pub fn trilinear_sample(
    nodes: &[f64],
    width: usize,
    resolution: usize,
    center: &Vec3,
    side: f64,
    point: &Vec3,
) -> Result<Vec<f64>> {
    if resolution < 2 || nodes.len() != resolution.pow(3) * width {
        return Err(Error::Config("lattice shape does not match resolution".into()));
    }
    let stencil = TrilinearStencil::new(center, side, resolution, point)?;
    let mut out = vec![0.0; width];
    stencil.apply(nodes, width, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoxelInit {
    pub noise_sigma: f64,
    /// Raw density every node starts at.
    pub raw_density: f64,
    pub seed: u64,
}

impl Default for VoxelInit {
    fn default() -> Self {
        Self {
            noise_sigma: 1e-3,
            raw_density: crate::renderer::initial_raw_density(0.01, crate::renderer::DEFAULT_SAMPLES),
            seed: 0,
        }
    }
}

pub fn create_voxel(
    track: &Track,
    landmark: &Vec3,
    patch_size: usize,
    intr: &CameraIntrinsics,
    resolution: usize,
    init: &VoxelInit,
) -> Result<VoxelLandmark> {
    if resolution < 2 {
        return Err(Error::Config("resolution must be at least 2".into()));
    }
    let side = voxel_size(track, landmark, patch_size, intr.focal())?;
    let channels = track.channels();
    let mut mean = vec![0.0; channels];
    for o in &track.observations {
        for (m, v) in mean.iter_mut().zip(o.patch.center()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= track.len() as f64);

    let nodes = resolution.pow(3);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(init.seed, track.id));
    let noise = Normal::new(0.0, init.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut desc_nodes = Vec::with_capacity(nodes * channels);
    for _ in 0..nodes {
        desc_nodes.extend(mean.iter().map(|m| m + noise.sample(&mut rng)));
    }
    Ok(VoxelLandmark {
        center: *landmark,
        side,
        resolution,
        channels,
        desc_nodes,
        density_nodes: vec![init.raw_density; nodes],
        track_id: track.id,
    })
}
