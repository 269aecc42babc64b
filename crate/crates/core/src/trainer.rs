//! Per-voxel optimization of the descriptor and density lattices.
//!
//! Each training ray goes through one pixel of one observed patch. The loss
//! for a ray is a weighted sum of
//!
//! * `mse`: mean squared channel error against the observed descriptor,
//! * `cosine`: `1 − cos(rendered, target)`,
//! * `entropy`: mean binary entropy of the per-sample alphas,
//!
//! and the voxel carries a total-variation term over both lattices. Gradients
//! are computed analytically through compositing, density activation and
//! trilinear interpolation; Adam applies them with a per-node step scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ray_through_pixel, CameraIntrinsics, Ray};
use crate::renderer::{activate, ray_stencils, render_ray, sigmoid, softplus, DEFAULT_SAMPLES};
use crate::seed::mix;
use crate::tracking::Track;
use crate::voxel::{TrilinearStencil, VoxelLandmark};

const ALPHA_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mse: f64,
    pub cosine: f64,
    pub tv: f64,
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            cosine: 1.0,
            tv: 1e-2,
            entropy: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub rays_per_epoch: usize,
    pub samples_per_ray: usize,
    pub lr_desc: f64,
    pub lr_density: f64,
    pub weights: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            rays_per_epoch: 1024,
            samples_per_ray: DEFAULT_SAMPLES,
            lr_desc: 0.1,
            lr_density: 0.1,
            weights: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if self.epochs == 0 || self.rays_per_epoch == 0 || self.samples_per_ray == 0 {
            return Err(Error::Config("epochs, rays_per_epoch and samples_per_ray must be positive".into()));
        }
        if [w.mse, w.cosine, w.tv, w.entropy].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("adam parameters out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub mse: f64,
    pub cosine: f64,
    pub tv: f64,
    pub entropy: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(mse: f64, cosine: f64, tv: f64, entropy: f64, w: &LossWeights) -> Self {
        Self {
            mse,
            cosine,
            tv,
            entropy,
            total: w.mse * mse + w.cosine * cosine + w.tv * tv + w.entropy * entropy,
        }
    }
}

fn binary_entropy(alpha: f64) -> f64 {
    let a = alpha.clamp(ALPHA_CLAMP, 1.0 - ALPHA_CLAMP);
    -(a * a.ln() + (1.0 - a) * (1.0 - a).ln())
}

// d/dα of the clamped binary entropy.
fn binary_entropy_slope(alpha: f64) -> f64 {
    if alpha <= ALPHA_CLAMP || alpha >= 1.0 - ALPHA_CLAMP {
        0.0
    } else {
        ((1.0 - alpha) / alpha).ln()
    }
}

/// Mean squared difference of lattice neighbours along all three axes,
/// summed over the descriptor and density lattices.
pub fn total_variation(voxel: &VoxelLandmark) -> f64 {
    let mut acc = 0.0;
    tv_visit(voxel, |_, _, diff_desc, diff_den| {
        acc += diff_desc.iter().map(|d| d * d).sum::<f64>() / voxel.channels as f64 + diff_den * diff_den;
    });
    acc / tv_pairs(voxel.resolution) as f64
}

fn tv_pairs(r: usize) -> usize {
    3 * r * r * (r - 1)
}

fn tv_visit(voxel: &VoxelLandmark, mut f: impl FnMut(usize, usize, &[f64], f64)) {
    let r = voxel.resolution;
    let c = voxel.channels;
    let mut diff = vec![0.0; c];
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                let p = x + r * (y + r * z);
                for (dx, dy, dz) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                    let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                    if nx >= r || ny >= r || nz >= r {
                        continue;
                    }
                    let q = nx + r * (ny + r * nz);
                    for k in 0..c {
                        diff[k] = voxel.desc_nodes[p * c + k] - voxel.desc_nodes[q * c + k];
                    }
                    f(p, q, &diff, voxel.density_nodes[p] - voxel.density_nodes[q]);
                }
            }
        }
    }
}

fn tv_gradient(voxel: &VoxelLandmark, scale: f64, grad_desc: &mut [f64], grad_den: &mut [f64]) {
    let c = voxel.channels;
    let norm = scale * 2.0 / tv_pairs(voxel.resolution) as f64;
    tv_visit(voxel, |p, q, diff_desc, diff_den| {
        for k in 0..c {
            let g = norm * diff_desc[k] / c as f64;
            grad_desc[p * c + k] += g;
            grad_desc[q * c + k] -= g;
        }
        grad_den[p] += norm * diff_den;
        grad_den[q] -= norm * diff_den;
    });
}

/// Loss of one rendered descriptor against its target.
///
/// `ray_alphas` are the per-sample alphas of the rendering ray.
pub fn compute_loss(
    rendered: &[f64],
    target: &[f64],
    voxel: &VoxelLandmark,
    ray_alphas: &[f64],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if rendered.len() != target.len() {
        return Err(Error::ChannelMismatch(rendered.len(), target.len()));
    }
    let nr = rendered.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nt < 1e-12 {
        return Err(Error::ZeroVector);
    }
    if nr < 1e-12 {
        return Err(Error::ZeroRendered);
    }
    let (mse, cosine) = mse_cosine(rendered, target, nr, nt);
    Ok(LossBreakdown::weighted(
        mse,
        cosine,
        total_variation(voxel),
        mean_entropy(ray_alphas),
        weights,
    ))
}

fn mse_cosine(rendered: &[f64], target: &[f64], nr: f64, nt: f64) -> (f64, f64) {
    let c = rendered.len() as f64;
    let mut se = 0.0;
    let mut dot = 0.0;
    for (r, t) in rendered.iter().zip(target) {
        se += (r - t) * (r - t);
        dot += r * t;
    }
    (se / c, 1.0 - dot / (nr * nt))
}

fn mean_entropy(alphas: &[f64]) -> f64 {
    if alphas.is_empty() {
        0.0
    } else {
        alphas.iter().map(|&a| binary_entropy(a)).sum::<f64>() / alphas.len() as f64
    }
}

/// Per-sample alphas of a ray, as fed to [`compute_loss`].
pub fn ray_alphas(voxel: &VoxelLandmark, ray: &Ray, n: usize) -> Result<Vec<f64>> {
    let (_, delta, stencils) = ray_stencils(voxel, ray, n)?;
    Ok(stencils
        .iter()
        .map(|s| -(-activate(s.apply_scalar(&voxel.density_nodes), voxel.side) * delta).exp_m1())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub desc: Vec<f64>,
    pub density: Vec<f64>,
    pub loss: LossBreakdown,
}

/// Reusable buffers for the per-ray kernel.
struct Scratch {
    coeff: Vec<f64>,
    node_dot: Vec<f64>,
    seen: Vec<bool>,
    touched: Vec<usize>,
    rendered: Vec<f64>,
    grad_r: Vec<f64>,
    raw: Vec<f64>,
    alpha: Vec<f64>,
    trans: Vec<f64>,
    dl_dtau: Vec<f64>,
}

impl Scratch {
    fn new(nodes: usize, channels: usize, samples: usize) -> Self {
        Self {
            coeff: vec![0.0; nodes],
            node_dot: vec![0.0; nodes],
            seen: vec![false; nodes],
            touched: Vec::with_capacity(nodes),
            rendered: vec![0.0; channels],
            grad_r: vec![0.0; channels],
            raw: vec![0.0; samples],
            alpha: vec![0.0; samples],
            trans: vec![0.0; samples + 1],
            dl_dtau: vec![0.0; samples],
        }
    }
}

/// Forward and reverse pass for one ray. Adds `scale ×` the gradient of the
/// ray's mse, cosine and entropy terms into the gradient buffers and returns
/// those terms (tv is left to the caller).
#[allow(clippy::too_many_arguments)]
fn ray_kernel(
    voxel: &VoxelLandmark,
    stencils: &[TrilinearStencil],
    delta: f64,
    target: &[f64],
    target_norm: f64,
    w: &LossWeights,
    scale: f64,
    s: &mut Scratch,
    grad_desc: &mut [f64],
    grad_den: &mut [f64],
) -> (f64, f64, f64) {
    let c = voxel.channels;
    let n = stencils.len();
    let tau_per_sp = delta / voxel.side;

    // Compositing weights and their projection onto lattice nodes.
    s.trans[0] = 1.0;
    for (t, st) in stencils.iter().enumerate() {
        let raw = st.apply_scalar(&voxel.density_nodes);
        let tau = softplus(raw) * tau_per_sp;
        let alpha = -(-tau).exp_m1();
        s.raw[t] = raw;
        s.alpha[t] = alpha;
        s.trans[t + 1] = s.trans[t] * (1.0 - alpha);
        let wt = s.trans[t] * alpha;
        for (&node, &tw) in st.nodes.iter().zip(&st.weights) {
            if tw == 0.0 {
                continue;
            }
            if !s.seen[node] {
                s.seen[node] = true;
                s.touched.push(node);
            }
            s.coeff[node] += wt * tw;
        }
    }

    s.rendered.iter_mut().for_each(|v| *v = 0.0);
    for &node in &s.touched {
        let a = s.coeff[node];
        for (r, d) in s.rendered.iter_mut().zip(&voxel.desc_nodes[node * c..(node + 1) * c]) {
            *r += a * d;
        }
    }

    let nr = s.rendered.iter().map(|v| v * v).sum::<f64>().sqrt();
    let zero_rendered = nr < 1e-12;
    let (mse, cosine) = if zero_rendered {
        let se: f64 = s.rendered.iter().zip(target).map(|(r, t)| (r - t) * (r - t)).sum();
        (se / c as f64, 1.0)
    } else {
        mse_cosine(&s.rendered, target, nr, target_norm)
    };
    let entropy = mean_entropy(&s.alpha[..n]);

    // dL/d rendered
    let dot: f64 = s.rendered.iter().zip(target).map(|(r, t)| r * t).sum();
    for k in 0..c {
        let mut g = w.mse * 2.0 * (s.rendered[k] - target[k]) / c as f64;
        if !zero_rendered {
            g -= w.cosine * (target[k] / (nr * target_norm) - dot * s.rendered[k] / (nr * nr * nr * target_norm));
        }
        s.grad_r[k] = g * scale;
    }

    for &node in &s.touched {
        let a = s.coeff[node];
        let row = &voxel.desc_nodes[node * c..(node + 1) * c];
        let gd = &mut grad_desc[node * c..(node + 1) * c];
        let mut h = 0.0;
        for k in 0..c {
            gd[k] += a * s.grad_r[k];
            h += row[k] * s.grad_r[k];
        }
        s.node_dot[node] = h;
    }

    // dL/dτ_t = e_t T_{t+1} − Σ_{u>t} e_u w_u, plus the entropy term.
    let mut suffix = 0.0;
    for t in (0..n).rev() {
        let st = &stencils[t];
        let e: f64 = st
            .nodes
            .iter()
            .zip(&st.weights)
            .filter(|(_, &tw)| tw != 0.0)
            .map(|(&node, &tw)| tw * s.node_dot[node])
            .sum();
        let wt = s.trans[t] * s.alpha[t];
        let ent = scale * w.entropy / n as f64 * binary_entropy_slope(s.alpha[t]) * (1.0 - s.alpha[t]);
        s.dl_dtau[t] = e * s.trans[t + 1] - suffix + ent;
        suffix += e * wt;
    }
    for (t, st) in stencils.iter().enumerate() {
        let d_raw = s.dl_dtau[t] * sigmoid(s.raw[t]) * tau_per_sp;
        for (&node, &tw) in st.nodes.iter().zip(&st.weights) {
            if tw != 0.0 {
                grad_den[node] += d_raw * tw;
            }
        }
    }

    for &node in &s.touched {
        s.coeff[node] = 0.0;
        s.node_dot[node] = 0.0;
        s.seen[node] = false;
    }
    s.touched.clear();
    (mse, cosine, entropy)
}

/// Analytic gradient of [`compute_loss`] (including the voxel's tv term) for
/// the descriptor rendered along `ray`.
pub fn backward(voxel: &VoxelLandmark, ray: &Ray, target: &[f64], weights: &LossWeights, n: usize) -> Result<Gradients> {
    if target.len() != voxel.channels {
        return Err(Error::ChannelMismatch(target.len(), voxel.channels));
    }
    let nt = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nt < 1e-12 {
        return Err(Error::ZeroVector);
    }
    let (_, delta, stencils) = ray_stencils(voxel, ray, n)?;
    let mut desc = vec![0.0; voxel.desc_nodes.len()];
    let mut density = vec![0.0; voxel.density_nodes.len()];
    let mut scratch = Scratch::new(voxel.node_count(), voxel.channels, stencils.len());
    let (mse, cosine, entropy) = ray_kernel(
        voxel,
        &stencils,
        delta,
        target,
        nt,
        weights,
        1.0,
        &mut scratch,
        &mut desc,
        &mut density,
    );
    tv_gradient(voxel, weights.tv, &mut desc, &mut density);
    let loss = LossBreakdown::weighted(mse, cosine, total_variation(voxel), entropy, weights);
    Ok(Gradients { desc, density, loss })
}

struct PoolRay {
    stencils: Vec<TrilinearStencil>,
    delta: f64,
    target: usize,
}

/// Training targets of a track: every patch element whose pixel ray hits the
/// voxel, with its ray.
pub struct RayPool {
    rays: Vec<PoolRay>,
    targets: Vec<Vec<f64>>,
    target_norms: Vec<f64>,
}

impl RayPool {
    pub fn new(voxel: &VoxelLandmark, track: &Track, intr: &CameraIntrinsics, samples: usize) -> Result<Self> {
        let mut rays = Vec::new();
        let mut targets = Vec::new();
        let mut target_norms = Vec::new();
        for obs in &track.observations {
            if obs.patch.channels != voxel.channels {
                return Err(Error::ChannelMismatch(obs.patch.channels, voxel.channels));
            }
            for row in 0..obs.patch.size {
                for col in 0..obs.patch.size {
                    let target = obs.patch.element(row, col);
                    let norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-12 {
                        continue;
                    }
                    let ray = ray_through_pixel(&obs.pose, intr, &obs.patch.element_pixel(row, col));
                    let Ok((_, delta, stencils)) = ray_stencils(voxel, &ray, samples) else {
                        continue;
                    };
                    rays.push(PoolRay {
                        stencils,
                        delta,
                        target: targets.len(),
                    });
                    targets.push(target.to_vec());
                    target_norms.push(norm);
                }
            }
        }
        Ok(Self {
            rays,
            targets,
            target_norms,
        })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// Sum of trilinear weights each node receives over all pool samples.
    pub fn visitation(&self, nodes: usize) -> Vec<f64> {
        let mut counts = vec![0.0; nodes];
        for ray in &self.rays {
            for st in &ray.stencils {
                for (&n, &w) in st.nodes.iter().zip(&st.weights) {
                    counts[n] += w;
                }
            }
        }
        counts
    }
}

/// Per-node step multiplier: visitation normalized by its mean over visited
/// nodes, inverted and capped, so every node moves at a comparable rate per
/// unit of evidence. Unvisited nodes are frozen.
pub fn node_lr_scale(visits: &[f64]) -> Vec<f64> {
    const MAX_SCALE: f64 = 10.0;
    let visited: Vec<f64> = visits.iter().copied().filter(|&v| v > 0.0).collect();
    if visited.is_empty() {
        return vec![0.0; visits.len()];
    }
    let mean = visited.iter().sum::<f64>() / visited.len() as f64;
    visits
        .iter()
        .map(|&v| if v > 0.0 { (mean / v).min(MAX_SCALE) } else { 0.0 })
        .collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, node_scale: &[f64], width: usize, step: i32, cfg: &TrainConfig) {
        let bc1 = 1.0 - cfg.beta1.powi(step);
        let bc2 = 1.0 - cfg.beta2.powi(step);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            *p -= lr * node_scale[i / width] * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub voxel: VoxelLandmark,
    pub history: Vec<LossBreakdown>,
}

/// Trains one voxel on its own track. Touches no other voxel's state.
pub fn train_voxel(voxel: VoxelLandmark, track: &Track, intr: &CameraIntrinsics, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut voxel = voxel;
    let pool = RayPool::new(&voxel, track, intr, cfg.samples_per_ray)?;
    if pool.is_empty() {
        return Err(Error::NoIntersection);
    }
    let nodes = voxel.node_count();
    let c = voxel.channels;
    let node_scale = node_lr_scale(&pool.visitation(nodes));

    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, track.id));
    let mut scratch = Scratch::new(nodes, c, cfg.samples_per_ray);
    let mut grad_desc = vec![0.0; nodes * c];
    let mut grad_den = vec![0.0; nodes];
    let mut adam_desc = Adam::new(nodes * c);
    let mut adam_den = Adam::new(nodes);
    let mut history = Vec::with_capacity(cfg.epochs);
    let w = cfg.weights;
    let per_ray = 1.0 / cfg.rays_per_epoch as f64;

    for epoch in 0..cfg.epochs {
        grad_desc.iter_mut().for_each(|g| *g = 0.0);
        grad_den.iter_mut().for_each(|g| *g = 0.0);
        let (mut mse, mut cosine, mut entropy) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.rays_per_epoch {
            let ray = &pool.rays[rng.gen_range(0..pool.len())];
            let (m, cs, e) = ray_kernel(
                &voxel,
                &ray.stencils,
                ray.delta,
                &pool.targets[ray.target],
                pool.target_norms[ray.target],
                &w,
                per_ray,
                &mut scratch,
                &mut grad_desc,
                &mut grad_den,
            );
            mse += m;
            cosine += cs;
            entropy += e;
        }
        let tv = total_variation(&voxel);
        tv_gradient(&voxel, w.tv, &mut grad_desc, &mut grad_den);
        let loss = LossBreakdown::weighted(mse * per_ray, cosine * per_ray, tv, entropy * per_ray, &w);
        if !loss.total.is_finite() {
            return Err(Error::Divergence(epoch));
        }
        history.push(loss);

        let step = (epoch + 1) as i32;
        adam_desc.step(&mut voxel.desc_nodes, &grad_desc, cfg.lr_desc, &node_scale, c, step, cfg);
        adam_den.step(&mut voxel.density_nodes, &grad_den, cfg.lr_density, &node_scale, 1, step, cfg);
    }
    if !voxel.is_finite() {
        return Err(Error::Divergence(cfg.epochs));
    }
    Ok(TrainOutput { voxel, history })
}

/// Per-element cosine between rendered and observed descriptors over every
/// patch element of `track` whose ray hits the voxel.
pub fn patch_cosines(voxel: &VoxelLandmark, track: &Track, intr: &CameraIntrinsics, samples: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for obs in &track.observations {
        for row in 0..obs.patch.size {
            for col in 0..obs.patch.size {
                let ray = ray_through_pixel(&obs.pose, intr, &obs.patch.element_pixel(row, col));
                let Ok((d, _)) = render_ray(voxel, &ray, samples) else {
                    continue;
                };
                if let Ok(s) = crate::descriptors::similarity(&d, obs.patch.element(row, col)) {
                    out.push(s);
                } else {
                    out.push(0.0);
                }
            }
        }
    }
    out
}

/// Loss-history dump: one row per epoch.
pub fn write_loss_history<W: std::io::Write>(history: &[LossBreakdown], mut w: W) -> Result<()> {
    writeln!(w, "# epoch mse cosine tv entropy total")?;
    for (e, l) in history.iter().enumerate() {
        writeln!(w, "{} {} {} {} {} {}", e, l.mse, l.cosine, l.tv, l.entropy, l.total)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn flat_voxel(c: usize, value: f64, raw: f64) -> VoxelLandmark {
        VoxelLandmark {
            center: Vec3::new(0.0, 0.0, 5.0),
            side: 0.2,
            resolution: 3,
            channels: c,
            desc_nodes: vec![value; 27 * c],
            density_nodes: vec![raw; 27],
            track_id: 0,
        }
    }

    #[test]
    fn perfect_fit_loss() {
        let v = flat_voxel(4, 0.5, 0.0);
        let target = [0.5, 0.5, 0.5, 0.5];
        let l = compute_loss(&target, &target, &v, &[1e-6, 1e-6], &LossWeights::default()).unwrap();
        assert_eq!(l.mse, 0.0);
        assert!(l.cosine.abs() < 1e-15);
        assert_eq!(l.tv, 0.0);
        assert!(l.entropy < 2e-5);
    }

    #[test]
    fn scaled_render_separates_norm_and_direction() {
        let v = flat_voxel(3, 0.5, 0.0);
        let t = [0.3, -0.4, 1.2];
        let r: Vec<f64> = t.iter().map(|x| 2.0 * x).collect();
        let l = compute_loss(&r, &t, &v, &[0.5], &LossWeights::default()).unwrap();
        assert!(l.cosine.abs() < 1e-15);
        let mean_sq = t.iter().map(|x| x * x).sum::<f64>() / 3.0;
        assert!((l.mse - mean_sq).abs() < 1e-15);
    }

    #[test]
    fn entropy_peak() {
        let v = flat_voxel(1, 0.5, 0.0);
        let l = compute_loss(&[1.0], &[1.0], &v, &[0.5; 8], &LossWeights::default()).unwrap();
        assert!((l.entropy - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn weighted_total_identity() {
        let mut v = flat_voxel(3, 0.5, 0.0);
        v.desc_nodes[5] = 2.0;
        v.density_nodes[3] = -1.0;
        let w = LossWeights {
            mse: 0.7,
            cosine: 1.3,
            tv: 0.11,
            entropy: 0.05,
        };
        let l = compute_loss(&[0.1, 0.2, 0.3], &[0.3, 0.1, -0.2], &v, &[0.2, 0.7], &w).unwrap();
        let sum = w.mse * l.mse + w.cosine * l.cosine + w.tv * l.tv + w.entropy * l.entropy;
        assert!((l.total - sum).abs() <= 1e-12);
        assert!(l.tv > 0.0);
    }

    #[test]
    fn zero_rendered_is_reported() {
        let v = flat_voxel(2, 0.0, 0.0);
        assert!(matches!(
            compute_loss(&[0.0, 0.0], &[1.0, 0.0], &v, &[], &LossWeights::default()),
            Err(Error::ZeroRendered)
        ));
    }

    #[test]
    fn stationary_point_has_zero_descriptor_gradient() {
        // Constant lattices and a target equal to the render: mse, cosine and tv vanish.
        let v = flat_voxel(4, 0.25, 1.0);
        let ray = Ray::new(Vec3::new(0.01, 0.02, 0.0), Vec3::z());
        let (r, _) = render_ray(&v, &ray, 8).unwrap();
        let w = LossWeights {
            entropy: 0.0,
            ..LossWeights::default()
        };
        let g = backward(&v, &ray, &r, &w, 8).unwrap();
        assert!(g.desc.iter().all(|x| x.abs() < 1e-12));
        assert!(g.density.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn untouched_nodes_get_zero_gradient() {
        // An axis-parallel ray along the x = y = min face edge only touches the
        // three nodes on that edge.
        let mut v = flat_voxel(2, 0.3, 0.5);
        for (i, d) in v.desc_nodes.iter_mut().enumerate() {
            *d += 0.01 * i as f64;
        }
        let ray = Ray::new(Vec3::new(-0.1, -0.1, 4.0), Vec3::z());
        let w = LossWeights {
            tv: 0.0,
            ..LossWeights::default()
        };
        let g = backward(&v, &ray, &[1.0, -1.0], &w, 8).unwrap();
        let touched: Vec<usize> = (0..3).map(|z| 9 * z).collect();
        for n in 0..27 {
            if !touched.contains(&n) {
                assert_eq!(g.density[n], 0.0);
                assert_eq!(g.desc[2 * n], 0.0);
                assert_eq!(g.desc[2 * n + 1], 0.0);
            }
        }
        assert!(touched.iter().any(|&n| g.density[n] != 0.0));
    }

    #[test]
    fn lr_scale_shape() {
        let s = node_lr_scale(&[0.0, 1.0, 2.0, 1e-4]);
        assert_eq!(s[0], 0.0);
        assert!(s[1] > s[2]);
        assert_eq!(s[3], 10.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.weights.tv = -1.0;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
