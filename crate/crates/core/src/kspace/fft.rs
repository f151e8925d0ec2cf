//! Radix-2 FFT with orthonormal scaling and centered spectra.

use num_complex::Complex64;

use crate::error::{Error, Result};

pub(crate) fn check_pow2(n: usize) -> Result<()> {
    if n.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::NotPowerOfTwo(n))
    }
}

/// In-place unnormalized 1-D transform. `inverse` flips the twiddle sign.
pub(crate) fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let half = len / 2;
        let twiddles: Vec<Complex64> = (0..half).map(|k| Complex64::from_polar(1.0, ang * k as f64)).collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Orthonormal 2-D transform of a row-major `h x w` buffer, no shifting.
pub(crate) fn fft2_unshifted(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    for row in data.chunks_mut(w) {
        fft_in_place(row, inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        fft_in_place(&mut col, inverse);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in data.iter_mut() {
        *v *= scale;
    }
}

/// Swap quadrants so that index 0 moves to the center. For even extents this
/// is its own inverse.
pub(crate) fn fftshift<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    let (sh, sw) = (h / 2, w / 2);
    let mut out = data.to_vec();
    for y in 0..h {
        for x in 0..w {
            out[((y + sh) % h) * w + (x + sw) % w] = data[y * w + x];
        }
    }
    out
}

pub(crate) fn ifftshift<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    let (sh, sw) = (h - h / 2, w - w / 2);
    let mut out = data.to_vec();
    for y in 0..h {
        for x in 0..w {
            out[((y + sh) % h) * w + (x + sw) % w] = data[y * w + x];
        }
    }
    out
}
