//! Dataset directories on disk.
//!
//! ```text
//! intrinsics.txt        fx fy cx cy width height
//! poses.txt             frame_index r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2
//! maps/NNNN.fvdm        descriptor map of frame NNNN
//! keypoints/NNNN.txt    u v score, one per line
//! queries/              same layout for query frames, plus
//! queries/priors.txt    prior pose per query, same format as poses.txt
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::descriptors::{DescriptorMap, Keypoint};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Vec2};
use crate::harness::View;

fn parse_floats(line: &str, what: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("{what}: bad number {t:?}"))))
        .collect()
}

fn content_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    fs::write(path, format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height))?;
    Ok(())
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = read_text(path)?;
    let line = content_lines(&text)
        .next()
        .ok_or_else(|| Error::Parse("intrinsics file is empty".into()))?;
    let v = parse_floats(line, "intrinsics")?;
    if v.len() != 6 || v[4].fract() != 0.0 || v[5].fract() != 0.0 || v[4] < 1.0 || v[5] < 1.0 {
        return Err(Error::Parse("intrinsics needs fx fy cx cy width height".into()));
    }
    CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as u32, v[5] as u32)
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (i, p) in poses.iter().enumerate() {
        write!(w, "{i}")?;
        for v in p.to_row_major() {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in content_lines(&text).enumerate() {
        let v = parse_floats(line, "poses")?;
        if v.len() != 13 || v[0] != n as f64 {
            return Err(Error::Parse(format!("pose line {n}: expected index {n} and 12 values")));
        }
        let m: [f64; 12] = v[1..].try_into().unwrap();
        out.push(Pose::from_row_major(&m).map_err(|_| Error::Parse(format!("pose line {n}: not a rigid transform")))?);
    }
    Ok(out)
}

pub fn write_keypoints(path: &Path, kps: &[Keypoint]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for k in kps {
        writeln!(w, "{} {} {}", k.position.x, k.position.y, k.score)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_keypoints(path: &Path) -> Result<Vec<Keypoint>> {
    let text = read_text(path)?;
    content_lines(&text)
        .map(|line| {
            let v = parse_floats(line, "keypoints")?;
            if v.len() != 3 {
                return Err(Error::Parse(format!("keypoint line {line:?}: expected u v score")));
            }
            Ok(Keypoint {
                position: Vec2::new(v[0], v[1]),
                score: v[2],
            })
        })
        .collect()
}

fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:04}.{ext}")
}

/// Writes views as a frame set rooted at `dir`.
pub fn write_frames(dir: &Path, views: &[View]) -> Result<()> {
    fs::create_dir_all(dir.join("maps"))?;
    fs::create_dir_all(dir.join("keypoints"))?;
    let poses: Vec<Pose> = views.iter().map(|v| v.pose).collect();
    write_poses(&dir.join("poses.txt"), &poses)?;
    for (i, v) in views.iter().enumerate() {
        let f = BufWriter::new(fs::File::create(dir.join("maps").join(frame_name(i, "fvdm")))?);
        v.map.write_to(f)?;
        write_keypoints(&dir.join("keypoints").join(frame_name(i, "txt")), &v.keypoints)?;
    }
    Ok(())
}

/// Reads a frame set. Ground-truth landmark ids are not stored, so every
/// keypoint comes back unlabeled.
pub fn read_frames(dir: &Path) -> Result<Vec<View>> {
    let poses = read_poses(&dir.join("poses.txt"))?;
    poses
        .into_iter()
        .enumerate()
        .map(|(i, pose)| {
            let path = dir.join("maps").join(frame_name(i, "fvdm"));
            let f = fs::File::open(&path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            let map = DescriptorMap::read_from(BufReader::new(f))?;
            let keypoints = read_keypoints(&dir.join("keypoints").join(frame_name(i, "txt")))?;
            let landmark_ids = vec![None; keypoints.len()];
            Ok(View {
                pose,
                map,
                keypoints,
                landmark_ids,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub training: Vec<View>,
    pub queries: Vec<View>,
    pub priors: Vec<Pose>,
}

pub fn queries_dir(root: &Path) -> PathBuf {
    root.join("queries")
}

pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(root)?;
    write_intrinsics(&root.join("intrinsics.txt"), &ds.intrinsics)?;
    write_frames(root, &ds.training)?;
    write_frames(&queries_dir(root), &ds.queries)?;
    write_poses(&queries_dir(root).join("priors.txt"), &ds.priors)?;
    Ok(())
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let intrinsics = read_intrinsics(&root.join("intrinsics.txt"))?;
    let training = read_frames(root)?;
    let qdir = queries_dir(root);
    let (queries, priors) = if qdir.join("poses.txt").exists() {
        let q = read_frames(&qdir)?;
        let p = read_poses(&qdir.join("priors.txt"))?;
        if p.len() != q.len() {
            return Err(Error::Parse("priors.txt and query poses differ in length".into()));
        }
        (q, p)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(Dataset {
        intrinsics,
        training,
        queries,
        priors,
    })
}
