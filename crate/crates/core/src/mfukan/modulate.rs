//! Scalar modulation of decoder features: channel-mean driven amplification
//! of backbone features and low-frequency attenuation of skip features.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kspace::fft::{check_pow2, fft2_unshifted};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

fn dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::ShapeMismatch(format!("expected [C, H, W], got {s:?}"))),
    }
}

fn channel_means(x: &[f64], c: usize, plane: usize) -> Vec<f64> {
    (0..c)
        .map(|i| x[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect()
}

fn argmin_max(m: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, v) in m.iter().enumerate() {
        if *v < m[lo] {
            lo = i;
        }
        if *v > m[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

fn alpha_from_means(m: &[f64], b: f64) -> Vec<f64> {
    let (lo, hi) = argmin_max(m);
    let span = m[hi] - m[lo];
    if span == 0.0 {
        return vec![1.0; m.len()];
    }
    m.iter().map(|v| (b - 1.0) * (v - m[lo]) / span + 1.0).collect()
}

/// Per-channel factor `alpha_i = (b - 1) (mean_i - min) / (max - min) + 1`
/// from the spatial means of `x`; all ones when every mean is equal.
pub fn backbone_alpha(x: &Tensor, b: f64) -> Result<Vec<f64>> {
    let (c, h, w) = dims(x)?;
    Ok(alpha_from_means(&channel_means(x.data(), c, h * w), b))
}

/// Multiply channels `i < C/2` by `alpha[i]`; the rest pass through.
pub fn scale_backbone(x: &Tensor, alpha: &[f64]) -> Result<Tensor> {
    let (c, h, w) = dims(x)?;
    if alpha.len() != c {
        return Err(Error::ShapeMismatch(format!("{} factors for {c} channels", alpha.len())));
    }
    let plane = h * w;
    let mut out = x.data().to_vec();
    for (i, a) in alpha.iter().enumerate().take(c / 2) {
        for v in &mut out[i * plane..(i + 1) * plane] {
            *v *= a;
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

// Scaling with alpha computed from the same input; the backward pass
// differentiates through the channel means, including the min/max terms.
#[derive(Debug)]
struct BackboneScaleOp {
    b: f64,
}

impl CustomOp for BackboneScaleOp {
    fn name(&self) -> &'static str {
        "backbone_scale"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let (c, h, w) = dims(x).expect("checked in forward");
        let plane = h * w;
        let xd = x.data();
        let m = channel_means(xd, c, plane);
        let alpha = alpha_from_means(&m, self.b);
        let half = c / 2;
        let mut dx = grad.to_vec();
        for i in 0..half {
            for (d, g) in dx[i * plane..(i + 1) * plane].iter_mut().zip(&grad[i * plane..]) {
                *d = g * alpha[i];
            }
        }
        let (lo, hi) = argmin_max(&m);
        let span = m[hi] - m[lo];
        if span != 0.0 && self.b != 1.0 {
            let k = self.b - 1.0;
            // dL/dmean_j accumulated through every alpha_i with i < C/2
            let mut dm = vec![0.0; c];
            for i in 0..half {
                let gi: f64 = (0..plane).map(|p| grad[i * plane + p] * xd[i * plane + p]).sum();
                let u = m[i] - m[lo];
                dm[i] += gi * k / span;
                dm[lo] += gi * k * (-1.0 / span + u / (span * span));
                dm[hi] -= gi * k * u / (span * span);
            }
            for j in 0..c {
                let add = dm[j] / plane as f64;
                for v in &mut dx[j * plane..(j + 1) * plane] {
                    *v += add;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Tape version of `scale_backbone(x, backbone_alpha(x, b))`.
pub fn scale_backbone_op(tape: &mut Tape, x: Var, b: f64) -> Result<Var> {
    let xv = tape.value(x);
    let alpha = backbone_alpha(xv, b)?;
    let out = scale_backbone(xv, &alpha)?;
    Ok(tape.custom(&[x], out, Box::new(BackboneScaleOp { b }))?)
}

/// Radius of each unshifted frequency bin, normalized so the Nyquist corner
/// has `r = 1` and DC has `r = 0`.
fn radius_map(h: usize, w: usize) -> Vec<f64> {
    let freq = |u: usize, n: usize| -> f64 {
        let f = if u <= n / 2 { u as f64 } else { u as f64 - n as f64 };
        f / (n as f64 / 2.0)
    };
    let mut r = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = freq(y, h);
        for x in 0..w {
            let fx = freq(x, w);
            r.push(((fy * fy + fx * fx) / 2.0).sqrt());
        }
    }
    r
}

fn spectral_scale(data: &[f64], c: usize, h: usize, w: usize, s: f64, r_thresh: f64) -> Vec<f64> {
    let plane = h * w;
    let beta: Vec<f64> = radius_map(h, w)
        .into_iter()
        .map(|r| if r < r_thresh { s } else { 1.0 })
        .collect();
    let mut out = Vec::with_capacity(data.len());
    let mut buf = vec![Complex64::new(0.0, 0.0); plane];
    for ch in 0..c {
        for (b, v) in buf.iter_mut().zip(&data[ch * plane..(ch + 1) * plane]) {
            *b = Complex64::new(*v, 0.0);
        }
        fft2_unshifted(&mut buf, h, w, false);
        for (b, f) in buf.iter_mut().zip(&beta) {
            *b *= f;
        }
        fft2_unshifted(&mut buf, h, w, true);
        out.extend(buf.iter().map(|z| z.re));
    }
    out
}

/// Per channel: `real(ifft2(fft2(h) * beta))` with `beta = s` on bins of
/// normalized radius below `r_thresh` and 1 elsewhere.
pub fn fourier_skip_modulate(h: &Tensor, s: f64, r_thresh: f64) -> Result<Tensor> {
    let (c, hh, ww) = dims(h)?;
    check_pow2(hh)?;
    check_pow2(ww)?;
    Ok(Tensor::new(h.shape().to_vec(), spectral_scale(h.data(), c, hh, ww, s, r_thresh))?)
}

// The operator is a real symmetric filter, hence self-adjoint.
#[derive(Debug)]
struct FourierSkipOp {
    s: f64,
    r_thresh: f64,
}

impl CustomOp for FourierSkipOp {
    fn name(&self) -> &'static str {
        "fourier_skip"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (c, h, w) = dims(inputs[0]).expect("checked in forward");
        vec![Some(spectral_scale(grad, c, h, w, self.s, self.r_thresh))]
    }
}

pub fn fourier_skip_op(tape: &mut Tape, x: Var, s: f64, r_thresh: f64) -> Result<Var> {
    let out = fourier_skip_modulate(tape.value(x), s, r_thresh)?;
    Ok(tape.custom(&[x], out, Box::new(FourierSkipOp { s, r_thresh }))?)
}
