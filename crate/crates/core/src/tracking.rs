//! Frame-to-frame landmark tracking by mutual nearest-neighbour descriptor
//! matching inside a spatial radius.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::descriptors::{crop_patch, similarity, DescriptorMap, Keypoint, Patch};
use crate::error::{Error, Result};
use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    /// Spatial gate in pixels.
    pub radius: f64,
    pub min_sim: f64,
    pub min_length: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            radius: 20.0,
            min_sim: 0.8,
            min_length: 5,
        }
    }
}

/// A posed frame with its detections.
#[derive(Debug, Clone)]
pub struct Frame {
    pub pose: Pose,
    pub keypoints: Vec<Keypoint>,
    pub map: DescriptorMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frame_index: usize,
    pub pose: Pose,
    pub keypoint: Keypoint,
    pub patch: Patch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub observations: Vec<Observation>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.observations.first().map_or(0, |o| o.patch.size)
    }

    pub fn channels(&self) -> usize {
        self.observations.first().map_or(0, |o| o.patch.channels)
    }
}

/// Mutual nearest neighbours between two frames' keypoints.
///
/// Candidates must lie within `radius` pixels; similarity ties go to the lower
/// index. Returned pairs are sorted by the `prev` index.
pub fn match_consecutive(
    prev: (&[Keypoint], &DescriptorMap),
    next: (&[Keypoint], &DescriptorMap),
    radius: f64,
    min_sim: f64,
) -> Result<Vec<(usize, usize)>> {
    if prev.1.channels() != next.1.channels() {
        return Err(Error::ChannelMismatch(prev.1.channels(), next.1.channels()));
    }
    let desc_a: Vec<Vec<f64>> = prev.0.iter().map(|k| prev.1.sample_nearest(&k.position)).collect();
    let desc_b: Vec<Vec<f64>> = next.0.iter().map(|k| next.1.sample_nearest(&k.position)).collect();
    let (n, m) = (prev.0.len(), next.0.len());

    let mut sims = vec![f64::NEG_INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            if (prev.0[i].position - next.0[j].position).norm() > radius {
                continue;
            }
            if let Ok(s) = similarity(&desc_a[i], &desc_b[j]) {
                sims[i * m + j] = s;
            }
        }
    }

    let best_next: Vec<Option<usize>> = (0..n)
        .map(|i| argmax((0..m).map(|j| sims[i * m + j])))
        .collect();
    let best_prev: Vec<Option<usize>> = (0..m)
        .map(|j| argmax((0..n).map(|i| sims[i * m + j])))
        .collect();

    Ok((0..n)
        .filter_map(|i| {
            let j = best_next[i]?;
            (best_prev[j] == Some(i) && sims[i * m + j] >= min_sim).then_some((i, j))
        })
        .collect())
}

// First index of the maximum finite value.
fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in values.enumerate() {
        if v.is_finite() && best.map_or(true, |(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Chains consecutive-frame matches into tracks.
///
/// Keypoints whose patch would leave the image neither start nor extend a
/// track. A track ends at the first frame where its keypoint is unmatched.
pub fn build_tracks(frames: &[Frame], patch_size: usize, radius: f64, min_sim: f64) -> Result<Vec<Track>> {
    if frames.len() < 2 {
        return Err(Error::Config("tracking needs at least 2 frames".into()));
    }
    let mut tracks: Vec<Track> = Vec::new();
    // keypoint index in the current frame -> track index
    let mut active: HashMap<usize, usize> = HashMap::new();

    let observe = |f: usize, k: usize| -> Option<Observation> {
        let frame = &frames[f];
        let kp = frame.keypoints[k];
        let patch = crop_patch(&frame.map, &kp, patch_size).ok()?;
        Some(Observation {
            frame_index: f,
            pose: frame.pose,
            keypoint: kp,
            patch,
        })
    };

    for f in 0..frames.len() {
        let mut next_active = HashMap::new();
        if f > 0 {
            let (a, b) = (&frames[f - 1], &frames[f]);
            let pairs = match_consecutive(
                (&a.keypoints, &a.map),
                (&b.keypoints, &b.map),
                radius,
                min_sim,
            )?;
            for (i, j) in pairs {
                if let Some(&t) = active.get(&i) {
                    if let Some(obs) = observe(f, j) {
                        tracks[t].observations.push(obs);
                        next_active.insert(j, t);
                    }
                }
            }
        }
        for k in 0..frames[f].keypoints.len() {
            if next_active.contains_key(&k) {
                continue;
            }
            if let Some(obs) = observe(f, k) {
                next_active.insert(k, tracks.len());
                tracks.push(Track {
                    id: tracks.len() as u64,
                    observations: vec![obs],
                });
            }
        }
        active = next_active;
    }
    Ok(tracks)
}

pub fn filter_tracks(tracks: Vec<Track>, min_length: usize) -> Vec<Track> {
    tracks.into_iter().filter(|t| t.len() >= min_length).collect()
}

/// Debug dump: one line per track, `id length (frame u v)*`.
pub fn write_track_dump<W: Write>(tracks: &[Track], mut w: W) -> Result<()> {
    writeln!(w, "# track_id length [frame_index u v]...")?;
    for t in tracks {
        write!(w, "{} {}", t.id, t.len())?;
        for o in &t.observations {
            write!(w, " {} {} {}", o.frame_index, o.keypoint.position.x, o.keypoint.position.y)?;
        }
        writeln!(w)?;
    }
    Ok(())
}
