//! Sprite bitmaps: procedural digit-like glyphs and blobs, or images read
//! from an IDX archive (the MNIST distribution format).

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::io::ByteReader;

/// Rounds to the nearest 8-bit level so values survive a dataset round trip.
pub fn quantize(v: f64) -> f64 {
    to_u8(v) as f64 / 255.0
}

pub fn to_u8(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

// Seven-segment layout in unit coordinates: (x0, y0, x1, y1).
const SEGMENTS: [(f64, f64, f64, f64); 7] = [
    (0.3, 0.18, 0.7, 0.18), // top
    (0.7, 0.18, 0.7, 0.5),  // upper right
    (0.7, 0.5, 0.7, 0.82),  // lower right
    (0.3, 0.82, 0.7, 0.82), // bottom
    (0.3, 0.5, 0.3, 0.82),  // lower left
    (0.3, 0.18, 0.3, 0.5),  // upper left
    (0.3, 0.5, 0.7, 0.5),   // middle
];

const DIGITS: [u8; 10] = [
    0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110, 0b1101101, 0b1111101, 0b0000111,
    0b1111111, 0b1101111,
];

fn segment_distance(px: f64, py: f64, (x0, y0, x1, y1): (f64, f64, f64, f64)) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn rasterize(size: usize, strokes: &[(f64, f64, f64, f64)], half_width: f64) -> Field {
    let mut f = Field::zeros(1, size, size);
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let (px, py) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let d = strokes
                .iter()
                .map(|&seg| segment_distance(px, py, seg))
                .fold(f64::INFINITY, f64::min);
            // one-pixel antialiasing ramp outside the stroke core
            let v = 1.0 - (d - half_width) * s;
            f.set(0, y, x, quantize(v));
        }
    }
    f
}

/// A jittered, slanted seven-segment rendering of a random digit.
pub fn digit_glyph<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Field {
    let digit = DIGITS[rng.gen_range(0..10)];
    let slant = rng.gen_range(-0.15..0.15);
    let jitter = 0.05;
    let mut pts: Vec<(f64, f64)> = vec![(0.3, 0.18), (0.7, 0.18), (0.3, 0.5), (0.7, 0.5), (0.3, 0.82), (0.7, 0.82)];
    for p in &mut pts {
        p.0 += rng.gen_range(-jitter..jitter) + slant * (0.5 - p.1);
        p.1 += rng.gen_range(-jitter..jitter);
    }
    let snap = |x: f64, y: f64| {
        *pts.iter()
            .min_by(|a, b| {
                let da = (a.0 - x).powi(2) + (a.1 - y).powi(2);
                let db = (b.0 - x).powi(2) + (b.1 - y).powi(2);
                da.total_cmp(&db)
            })
            .expect("non-empty")
    };
    let strokes: Vec<_> = SEGMENTS
        .iter()
        .enumerate()
        .filter(|(i, _)| digit & (1 << i) != 0)
        .map(|(_, &(x0, y0, x1, y1))| {
            let a = snap(x0, y0);
            let b = snap(x1, y1);
            (a.0, a.1, b.0, b.1)
        })
        .collect();
    let half_width = rng.gen_range(0.05..0.08);
    rasterize(size, &strokes, half_width)
}

/// A connected random-walk stroke.
pub fn blob_glyph<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Field {
    let mut p = (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7));
    let mut strokes = Vec::new();
    for _ in 0..rng.gen_range(3..6) {
        let q = (
            (p.0 + rng.gen_range(-0.3..0.3_f64)).clamp(0.15, 0.85),
            (p.1 + rng.gen_range(-0.3..0.3_f64)).clamp(0.15, 0.85),
        );
        strokes.push((p.0, p.1, q.0, q.1));
        p = q;
    }
    rasterize(size, &strokes, rng.gen_range(0.06..0.1))
}

/// Where sprite bitmaps come from.
#[derive(Clone, Debug)]
pub enum SpriteBank {
    Procedural { size: usize },
    Images(Vec<Field>),
}

impl SpriteBank {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Field {
        match self {
            SpriteBank::Procedural { size } => {
                if rng.gen_bool(0.75) {
                    digit_glyph(rng, *size)
                } else {
                    blob_glyph(rng, *size)
                }
            }
            SpriteBank::Images(images) => images[rng.gen_range(0..images.len())].clone(),
        }
    }

    pub fn sprite_size(&self) -> usize {
        match self {
            SpriteBank::Procedural { size } => *size,
            SpriteBank::Images(images) => images.first().map_or(0, Field::height),
        }
    }
}

/// Reads a `u8` image archive in IDX format (magic `0x00000803`).
pub fn read_idx_images(path: &Path) -> Result<Vec<Field>> {
    let bytes = std::fs::read(path)?;
    parse_idx_images(&bytes)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Field>> {
    let mut r = ByteReader::new(bytes);
    let be = |b: &[u8]| u32::from_be_bytes(b.try_into().expect("4 bytes"));
    let magic = be(r.take(4)?);
    if magic != 0x0000_0803 {
        return Err(Error::Version(format!("IDX magic {magic:#010x}, expected 0x00000803")));
    }
    let n = be(r.take(4)?) as usize;
    let rows = be(r.take(4)?) as usize;
    let cols = be(r.take(4)?) as usize;
    if rows != cols {
        return Err(Error::Shape(format!("IDX images are {rows}x{cols}, need square")));
    }
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let px = r.take(rows * cols)?;
        let data = px.iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Field::from_vec(1, rows, cols, data)?);
    }
    if images.is_empty() {
        return Err(Error::Config("IDX archive holds no images".into()));
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn glyphs_are_quantized_and_nonempty() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for size in [12, 28] {
            for _ in 0..20 {
                let g = SpriteBank::Procedural { size }.sample(&mut rng);
                assert_eq!(g.shape(), (1, size, size));
                assert!(g.sum() > 1.0);
                for &v in g.as_slice() {
                    assert!((0.0..=1.0).contains(&v));
                    assert_eq!(quantize(v), v);
                }
            }
        }
    }

    #[test]
    fn idx_parse() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend_from_slice(&[0, 255, 51, 0, 255, 255, 255, 255]);
        let imgs = parse_idx_images(&bytes).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0].as_slice(), &[0.0, 1.0, 0.2, 0.0]);
        assert!(matches!(parse_idx_images(&bytes[..20]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[3] = 1;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Version(_))));
    }
}
