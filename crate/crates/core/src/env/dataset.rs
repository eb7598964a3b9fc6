//! Dataset container, little-endian:
//!
//! ```text
//! "FWM1"          magic
//! u32             version (1)
//! u32             episode count
//! per episode:
//!   u32 n_frames, u16 window, u16 world, u8 channels, u64 seed
//!   i16 × n_frames × 2            actions (ax, ay)
//!   u8  × n_frames × channels × window × window   pixels
//! ```

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::flow::Action;
use crate::grid::Field;
use crate::io::{write_atomic, ByteReader};

use super::{to_u8, Episode};

pub const DATASET_MAGIC: &[u8; 4] = b"FWM1";
pub const DATASET_VERSION: u32 = 1;

/// Bytes one episode occupies after the file header.
pub fn episode_payload_size(n_frames: usize, channels: usize, window: usize) -> usize {
    17 + 4 * n_frames + n_frames * channels * window * window
}

pub fn encode_dataset(episodes: &[Episode]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(episodes.len() as u32).to_le_bytes());
    for ep in episodes {
        let n = ep.frames.len();
        if ep.actions.len() != n {
            return shape_err(format!("{} actions for {n} frames", ep.actions.len()));
        }
        let channels = ep.frames.first().map_or(1, Field::channels);
        let w = ep.window_size;
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(w as u16).to_le_bytes());
        out.extend_from_slice(&(ep.world_size as u16).to_le_bytes());
        out.push(channels as u8);
        out.extend_from_slice(&ep.seed.to_le_bytes());
        for a in &ep.actions {
            for c in [a.ax, a.ay] {
                let c = i16::try_from(c)
                    .map_err(|_| Error::Shape(format!("action component {c} exceeds i16")))?;
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        for f in &ep.frames {
            if f.shape() != (channels, w, w) {
                return shape_err(format!("frame {:?}, expected ({channels}, {w}, {w})", f.shape()));
            }
            out.extend(f.as_slice().iter().map(|&v| to_u8(v)));
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Episode>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Version("not a dataset (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version(format!("dataset version {version}")));
    }
    let count = r.u32()? as usize;
    let mut episodes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let window = r.u16()? as usize;
        let world = r.u16()? as usize;
        let channels = r.u8()? as usize;
        let seed = r.u64()?;
        let mut actions = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            actions.push(Action::new(r.i16()? as i32, r.i16()? as i32));
        }
        let plane = channels * window * window;
        let pixels = r.take(n * plane)?;
        let frames = pixels
            .chunks_exact(plane.max(1))
            .take(n)
            .map(|px| {
                let data = px.iter().map(|&b| b as f64 / 255.0).collect();
                Field::from_vec(channels, window, window, data)
            })
            .collect::<Result<Vec<_>>>()?;
        episodes.push(Episode {
            frames,
            actions,
            seed,
            world_size: world,
            window_size: window,
        });
    }
    if !r.is_empty() {
        return Err(Error::Version("trailing bytes after the last episode".into()));
    }
    Ok(episodes)
}

pub fn write_dataset(path: &Path, episodes: &[Episode]) -> Result<()> {
    write_atomic(path, &encode_dataset(episodes)?)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Episode>> {
    decode_dataset(&std::fs::read(path)?)
}
