//! Synthetic ellipse phantoms and the `KREC` dataset file format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kspace::ImageGrid;
use crate::rng::SplitMix64;

pub const DATASET_MAGIC: [u8; 4] = *b"KREC";
pub const DATASET_VERSION: u8 = 1;
/// Magic, version byte, then three little-endian `u32`s.
pub const DATASET_HEADER_LEN: u64 = 17;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    /// Total ellipse count, including the outer body.
    pub n_ellipses: usize,
    /// Magnitude range of the inner ellipse intensities.
    pub intensity: (f64, f64),
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            size,
            n_ellipses: 6,
            intensity: (0.1, 0.4),
            seed,
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// A bright elliptical body with smaller rotated ellipses added or
/// subtracted inside it, clamped to `[0, 1]`. Coordinates span `[-1, 1]`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<ImageGrid> {
    if spec.n_ellipses == 0 {
        return Err(Error::InvalidArgument("phantom needs at least one ellipse".into()));
    }
    if spec.size < 16 || !spec.size.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("phantom size {} must be a power of two >= 16", spec.size)));
    }
    let (lo, hi) = spec.intensity;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidArgument(format!("intensity range ({lo}, {hi})")));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let mut shapes = Vec::with_capacity(spec.n_ellipses);
    let angle = rng.uniform(-0.3, 0.3);
    let body = Ellipse {
        cx: rng.uniform(-0.05, 0.05),
        cy: rng.uniform(-0.05, 0.05),
        a: rng.uniform(0.6, 0.9),
        b: rng.uniform(0.6, 0.9),
        cos: angle.cos(),
        sin: angle.sin(),
        value: rng.uniform(0.5, 0.7),
    };
    for _ in 1..spec.n_ellipses {
        let r = rng.uniform(0.0, 0.5);
        let phi = rng.uniform(0.0, std::f64::consts::TAU);
        let angle = rng.uniform(0.0, std::f64::consts::PI);
        let magnitude = rng.uniform(lo, hi);
        let sign = if rng.next_f64() < 0.35 { -1.0 } else { 1.0 };
        shapes.push(Ellipse {
            cx: body.cx + r * body.a * phi.cos(),
            cy: body.cy + r * body.b * phi.sin(),
            a: rng.uniform(0.08, 0.3),
            b: rng.uniform(0.05, 0.25),
            cos: angle.cos(),
            sin: angle.sin(),
            value: sign * magnitude,
        });
    }
    let n = spec.size;
    let mut pixels = vec![0.0; n * n];
    for (i, p) in pixels.iter_mut().enumerate() {
        let y = 2.0 * ((i / n) as f64 + 0.5) / n as f64 - 1.0;
        let x = 2.0 * ((i % n) as f64 + 0.5) / n as f64 - 1.0;
        if !body.contains(x, y) {
            continue;
        }
        let v = body.value + shapes.iter().filter(|e| e.contains(x, y)).map(|e| e.value).sum::<f64>();
        *p = v.clamp(0.0, 1.0);
    }
    ImageGrid::new(n, n, pixels)
}

/// Phantoms for seeds `seed + 0 .. seed + count`.
pub fn generate_set(size: usize, count: usize, seed: u64) -> Result<Vec<ImageGrid>> {
    (0..count)
        .map(|i| generate_phantom(&PhantomSpec::new(size, seed.wrapping_add(i as u64))))
        .collect()
}

/// Header followed by `f32` pixels, row-major, image after image.
pub fn write_dataset<W: Write>(mut w: W, images: &[ImageGrid]) -> Result<()> {
    let n = u32::try_from(images.len())
        .map_err(|_| Error::ShapeOverflow(format!("{} images exceed the u32 count field", images.len())))?;
    let (h, wd) = images.first().map(|i| (i.height(), i.width())).unwrap_or((0, 0));
    if let Some(bad) = images.iter().find(|i| i.height() != h || i.width() != wd) {
        return Err(Error::ShapeMismatch(format!(
            "dataset mixes {h}x{wd} and {}x{} images",
            bad.height(),
            bad.width()
        )));
    }
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::ShapeOverflow(format!("extent {v}")));
    let mut buf = Vec::with_capacity(DATASET_HEADER_LEN as usize + 4 * images.len() * h * wd);
    buf.extend_from_slice(&DATASET_MAGIC);
    buf.push(DATASET_VERSION);
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&dim(h)?.to_le_bytes());
    buf.extend_from_slice(&dim(wd)?.to_le_bytes());
    for img in images {
        for &p in img.pixels() {
            buf.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<ImageGrid>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let actual = bytes.len() as u64;
    if actual < DATASET_HEADER_LEN {
        if !DATASET_MAGIC.starts_with(&bytes[..bytes.len().min(4)]) {
            return Err(Error::BadMagic);
        }
        return Err(Error::Truncated {
            expected: DATASET_HEADER_LEN,
            actual,
        });
    }
    if bytes[..4] != DATASET_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes[4] != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", bytes[4])));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as u64;
    let (n, h, w) = (field(0), field(1), field(2));
    let expected = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(DATASET_HEADER_LEN))
        .ok_or_else(|| Error::ShapeOverflow(format!("{n} x {h} x {w} samples")))?;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format(format!("{} trailing bytes after payload", actual - expected)));
    }
    let per = (h * w) as usize;
    let payload = &bytes[DATASET_HEADER_LEN as usize..];
    (0..n as usize)
        .map(|i| {
            let pixels = payload[4 * per * i..4 * per * (i + 1)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            ImageGrid::new(h as usize, w as usize, pixels).map_err(|e| Error::Format(e.to_string()))
        })
        .collect()
}

pub fn write_dataset_file(path: &Path, images: &[ImageGrid]) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, images)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_dataset_file(path: &Path) -> Result<Vec<ImageGrid>> {
    read_dataset(fs::File::open(path)?)
}

/// Binary 8-bit PGM; pixels are clamped to `[0, 1]` and scaled by 255.
pub fn write_pgm<W: Write>(mut w: W, img: &ImageGrid) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    buf.extend(img.pixels().iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    w.write_all(&buf)?;
    Ok(())
}
