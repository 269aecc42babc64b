//! FVOR voxel-map files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      b"FVOR"
//! version    u32 (= 1)
//! voxels     u32
//! channels   u32
//! resolution u32
//! patch_size u32
//! intrinsics 6 × f64   fx fy cx cy width height
//! extractor  u32 byte length + UTF-8 bytes
//! per voxel:
//!   track_id u64
//!   center   3 × f64
//!   side     f64
//!   desc     R³·C × f32   node-major, channel-minor
//!   density  R³ × f32     raw, pre-activation
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Vec3};
use crate::voxel::{VoxelLandmark, VoxelMap};

pub const MAGIC: &[u8; 4] = b"FVOR";
pub const VERSION: u32 = 1;

/// Bytes a map occupies on disk.
pub fn encoded_size(map: &VoxelMap) -> usize {
    let nodes = map.resolution.pow(3);
    header_size(&map.extractor) + map.voxels.len() * voxel_record_size(nodes, map.channels)
}

pub fn header_size(extractor: &str) -> usize {
    4 + 4 * 5 + 6 * 8 + 4 + extractor.len()
}

pub fn voxel_record_size(nodes: usize, channels: usize) -> usize {
    8 + 3 * 8 + 8 + nodes * channels * 4 + nodes * 4
}

pub fn encode_map(map: &VoxelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_size(map));
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        map.voxels.len() as u32,
        map.channels as u32,
        map.resolution as u32,
        map.patch_size as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let k = &map.intrinsics;
    for v in [k.fx, k.fy, k.cx, k.cy, k.width as f64, k.height as f64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(map.extractor.len() as u32).to_le_bytes());
    out.extend_from_slice(map.extractor.as_bytes());
    for v in &map.voxels {
        out.extend_from_slice(&v.track_id.to_le_bytes());
        for x in v.center.iter().chain(std::iter::once(&v.side)) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for x in v.desc_nodes.iter().chain(&v.density_nodes) {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptPayload(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::CorruptPayload(format!("non-finite value at byte {}", self.pos - 8)));
        }
        Ok(v)
    }

    fn f32s(&mut self, n: usize, out: &mut Vec<f64>) -> Result<()> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptPayload("size overflow".into()))?)?;
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::CorruptPayload("non-finite lattice value".into()));
            }
            out.push(v as f64);
        }
        Ok(())
    }
}

pub fn decode_map(buf: &[u8]) -> Result<VoxelMap> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < 4 {
        return Err(Error::CorruptPayload("truncated header".into()));
    }
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let resolution = r.u32()? as usize;
    let patch_size = r.u32()? as usize;
    let k = [r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?];
    let dims_ok = |v: f64| v >= 1.0 && v <= u32::MAX as f64 && v.fract() == 0.0;
    if !dims_ok(k[4]) || !dims_ok(k[5]) {
        return Err(Error::CorruptPayload("bad image size".into()));
    }
    let intrinsics = CameraIntrinsics::new(k[0], k[1], k[2], k[3], k[4] as u32, k[5] as u32)
        .map_err(|e| Error::CorruptPayload(e.to_string()))?;
    let name_len = r.u32()? as usize;
    let extractor = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::CorruptPayload("extractor name is not UTF-8".into()))?;
    if resolution < 2 || channels == 0 {
        return Err(Error::CorruptPayload("bad lattice shape".into()));
    }
    let nodes = resolution
        .checked_pow(3)
        .ok_or_else(|| Error::CorruptPayload("bad lattice shape".into()))?;
    let record = voxel_record_size(nodes, channels);
    if count.checked_mul(record) != Some(buf.len() - r.pos) {
        return Err(Error::CorruptPayload(format!(
            "payload is {} bytes, expected {} voxels of {} bytes",
            buf.len() - r.pos,
            count,
            record
        )));
    }

    let mut voxels = Vec::with_capacity(count);
    for _ in 0..count {
        let track_id = r.u64()?;
        let center = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
        let side = r.f64()?;
        if side <= 0.0 {
            return Err(Error::CorruptPayload("non-positive voxel side".into()));
        }
        let mut desc_nodes = Vec::with_capacity(nodes * channels);
        r.f32s(nodes * channels, &mut desc_nodes)?;
        let mut density_nodes = Vec::with_capacity(nodes);
        r.f32s(nodes, &mut density_nodes)?;
        voxels.push(VoxelLandmark {
            center,
            side,
            resolution,
            channels,
            desc_nodes,
            density_nodes,
            track_id,
        });
    }
    VoxelMap::new(voxels, intrinsics, channels, resolution, patch_size, extractor)
}

/// Writes `map` to `path`, returning the byte count.
pub fn save_map(map: &VoxelMap, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = encode_map(map);
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_map(path: impl AsRef<Path>) -> Result<VoxelMap> {
    decode_map(&fs::read(path)?)
}
