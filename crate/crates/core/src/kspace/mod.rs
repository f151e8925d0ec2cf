//! Simulated single-coil Cartesian acquisition.
//!
//! Spectra are stored centered: the DC coefficient of an `H x W` grid sits at
//! row `H/2`, column `W/2`. All transforms are orthonormal, so Parseval holds
//! without extra factors.

pub(crate) mod fft;
mod mask;

pub use mask::{make_mask, read_mask, write_mask, SamplingMask};

use num_complex::Complex64;

use crate::error::{Error, Result};
use fft::{check_pow2, fft2_unshifted, fftshift, ifftshift};

/// Real-valued image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        check_pow2(height)?;
        check_pow2(width)?;
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel".into()));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pixelwise map, keeping the shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.height, self.width, self.pixels.iter().map(|&p| f(p)).collect())
    }

    pub fn clamp01(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|p| p.clamp(0.0, 1.0)).collect(),
        }
    }
}

/// Complex grid; in the frequency domain it is stored centered.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceGrid {
    height: usize,
    width: usize,
    entries: Vec<Complex64>,
}

impl KSpaceGrid {
    pub fn new(height: usize, width: usize, entries: Vec<Complex64>) -> Result<Self> {
        check_pow2(height)?;
        check_pow2(width)?;
        if entries.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for a {height}x{width} grid",
                entries.len()
            )));
        }
        Ok(Self { height, width, entries })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![Complex64::new(0.0, 0.0); height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn get(&self, y: usize, x: usize) -> Complex64 {
        self.entries[y * self.width + x]
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Centered orthonormal 2-D DFT of a real image.
pub fn fft2(img: &ImageGrid) -> Result<KSpaceGrid> {
    let data: Vec<Complex64> = img.pixels.iter().map(|&p| Complex64::new(p, 0.0)).collect();
    fft2_complex(img.height, img.width, &data)
}

/// Centered orthonormal 2-D DFT of a complex spatial grid.
pub fn fft2_complex(height: usize, width: usize, data: &[Complex64]) -> Result<KSpaceGrid> {
    check_pow2(height)?;
    check_pow2(width)?;
    if data.len() != height * width {
        return Err(Error::ShapeMismatch(format!("{} values for {height}x{width}", data.len())));
    }
    let mut buf = ifftshift(data, height, width);
    fft2_unshifted(&mut buf, height, width, false);
    KSpaceGrid::new(height, width, fftshift(&buf, height, width))
}

/// Inverse of [`fft2_complex`]: centered spectrum to complex spatial grid.
pub fn ifft2(k: &KSpaceGrid) -> Vec<Complex64> {
    let (h, w) = (k.height, k.width);
    let mut buf = ifftshift(&k.entries, h, w);
    fft2_unshifted(&mut buf, h, w, true);
    fftshift(&buf, h, w)
}

/// Real part of [`ifft2`] as an image.
pub fn ifft2_real(k: &KSpaceGrid) -> ImageGrid {
    let pixels = ifft2(k).into_iter().map(|c| c.re).collect();
    ImageGrid {
        height: k.height,
        width: k.width,
        pixels,
    }
}

fn check_width(k: &KSpaceGrid, mask: &SamplingMask) -> Result<()> {
    if k.width != mask.width() {
        return Err(Error::ShapeMismatch(format!(
            "mask width {} for grid width {}",
            mask.width(),
            k.width
        )));
    }
    Ok(())
}

/// `M x`: keep sampled columns, zero the rest.
pub fn undersample(full: &KSpaceGrid, mask: &SamplingMask) -> Result<KSpaceGrid> {
    check_width(full, mask)?;
    let cols = mask.columns();
    let entries = full
        .entries
        .iter()
        .enumerate()
        .map(|(i, &c)| if cols[i % full.width] { c } else { Complex64::new(0.0, 0.0) })
        .collect();
    KSpaceGrid::new(full.height, full.width, entries)
}

/// Magnitude of the inverse transform, before any normalization.
pub fn zero_fill_magnitude(obs: &KSpaceGrid) -> ImageGrid {
    let pixels = ifft2(obs).into_iter().map(|c| c.norm()).collect();
    ImageGrid {
        height: obs.height,
        width: obs.width,
        pixels,
    }
}

/// Nearest-rank percentile of a sample, `q` in (0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Zero-filled reconstruction: magnitude image, divided by its 99th
/// percentile when that exceeds 1, then clamped to `[0, 1]`.
pub fn zero_fill(obs: &KSpaceGrid) -> ImageGrid {
    let mag = zero_fill_magnitude(obs);
    let scale = percentile(&mag.pixels, 0.99).max(1.0);
    ImageGrid {
        height: mag.height,
        width: mag.width,
        pixels: mag.pixels.iter().map(|p| (p / scale).clamp(0.0, 1.0)).collect(),
    }
}

/// Replace the candidate's spectrum by the observation on sampled columns.
/// Returns the real part of the merged image.
pub fn data_consistency(candidate: &ImageGrid, obs: &KSpaceGrid, mask: &SamplingMask) -> Result<ImageGrid> {
    if candidate.height != obs.height || candidate.width != obs.width {
        return Err(Error::ShapeMismatch(format!(
            "candidate {}x{} vs observation {}x{}",
            candidate.height, candidate.width, obs.height, obs.width
        )));
    }
    check_width(obs, mask)?;
    let mut k = fft2(candidate)?;
    let cols = mask.columns();
    for (i, e) in k.entries.iter_mut().enumerate() {
        if cols[i % obs.width] {
            *e = obs.entries[i];
        }
    }
    Ok(ifft2_real(&k))
}

/// Largest deviation between the masked spectrum of `img` and `obs`.
pub fn masked_residual(img: &ImageGrid, obs: &KSpaceGrid, mask: &SamplingMask) -> Result<f64> {
    check_width(obs, mask)?;
    let k = fft2(img)?;
    let cols = mask.columns();
    Ok(k.entries
        .iter()
        .zip(&obs.entries)
        .enumerate()
        .filter(|(i, _)| cols[i % obs.width])
        .map(|(_, (a, b))| (a - b).norm())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_image(n: usize, seed: u64) -> ImageGrid {
        let mut rng = SplitMix64::new(seed);
        ImageGrid::new(n, n, (0..n * n).map(|_| rng.next_f64()).collect()).unwrap()
    }

    #[test]
    fn constant_image_has_single_dc_entry() {
        let n = 8;
        let img = ImageGrid::new(n, n, vec![0.3; n * n]).unwrap();
        let k = fft2(&img).unwrap();
        for y in 0..n {
            for x in 0..n {
                let v = k.get(y, x);
                if (y, x) == (n / 2, n / 2) {
                    assert!((v.re - 0.3 * n as f64).abs() < 1e-12 && v.im.abs() < 1e-12);
                } else {
                    assert!(v.norm() < 1e-12, "({y},{x}) = {v}");
                }
            }
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(matches!(ImageGrid::zeros(12, 16), Err(Error::NotPowerOfTwo(12))));
        assert!(matches!(
            fft2_complex(6, 4, &[Complex64::new(0.0, 0.0); 24]),
            Err(Error::NotPowerOfTwo(6))
        ));
    }

    #[test]
    fn zero_fill_of_zero_grid_is_zero() {
        let k = KSpaceGrid::zeros(16, 16).unwrap();
        assert!(zero_fill(&k).pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn full_mask_is_identity() {
        let img = random_image(16, 1);
        let k = fft2(&img).unwrap();
        let mask = make_mask(16, 1, 0.5, 0).unwrap();
        assert_eq!(undersample(&k, &mask).unwrap(), k);
        let back = zero_fill_magnitude(&k);
        for (a, b) in back.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn center_only_mask_keeps_constant_spectrum() {
        let img = ImageGrid::new(16, 16, vec![0.7; 256]).unwrap();
        let k = fft2(&img).unwrap();
        let mut cols = vec![false; 16];
        cols[8] = true;
        let mask = SamplingMask::from_columns(cols, 4, 0.0625, 0).unwrap();
        let obs = undersample(&k, &mask).unwrap();
        assert!(obs.entries().iter().zip(k.entries()).all(|(a, b)| (a - b).norm() < 1e-15));
    }

    #[test]
    fn undersample_zeroes_exactly_the_unsampled_columns() {
        let img = random_image(32, 2);
        let k = fft2(&img).unwrap();
        let mask = make_mask(32, 4, 0.08, 11).unwrap();
        let obs = undersample(&k, &mask).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if mask.columns()[x] {
                    assert_eq!(obs.get(y, x), k.get(y, x));
                } else {
                    assert_eq!(obs.get(y, x), Complex64::new(0.0, 0.0));
                }
            }
        }
        assert_eq!(undersample(&obs, &mask).unwrap(), obs);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let k = KSpaceGrid::zeros(16, 16).unwrap();
        let mask = make_mask(32, 4, 0.08, 0).unwrap();
        assert!(matches!(undersample(&k, &mask), Err(Error::ShapeMismatch(_))));
        let img = ImageGrid::zeros(16, 16).unwrap();
        assert!(data_consistency(&img, &k, &mask).is_err());
    }

    #[test]
    fn data_consistency_fixed_point_and_idempotence() {
        let truth = random_image(32, 3);
        let mask = make_mask(32, 4, 0.08, 5).unwrap();
        let obs = undersample(&fft2(&truth).unwrap(), &mask).unwrap();

        let fixed = data_consistency(&truth, &obs, &mask).unwrap();
        for (a, b) in fixed.pixels().iter().zip(truth.pixels()) {
            assert!((a - b).abs() < 1e-10);
        }

        let cand = random_image(32, 4);
        let once = data_consistency(&cand, &obs, &mask).unwrap();
        let twice = data_consistency(&once, &obs, &mask).unwrap();
        for (a, b) in once.pixels().iter().zip(twice.pixels()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(masked_residual(&once, &obs, &mask).unwrap() < 1e-10);
    }

    #[test]
    fn data_consistency_of_zero_candidate_is_zero_fill() {
        let truth = random_image(16, 6);
        let mask = make_mask(16, 4, 0.08, 2).unwrap();
        let obs = undersample(&fft2(&truth).unwrap(), &mask).unwrap();
        let dc = data_consistency(&ImageGrid::zeros(16, 16).unwrap(), &obs, &mask).unwrap();
        let zf = ifft2(&obs);
        for (a, b) in dc.pixels().iter().zip(&zf) {
            assert!((a - b.re).abs() < 1e-12);
            assert!(b.im.abs() < 1e-12);
        }
    }
}
