use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance schedule `beta_t` with cumulative products `abar_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

/// Linear beta ramp over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    DiffusionSchedule::from_betas(betas)
}

impl DiffusionSchedule {
    /// Arbitrary schedule; every beta must lie in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty schedule".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(Error::TimestepOutOfRange { t, steps: self.steps() })
        }
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphas_cumprod[t])
    }

    /// Mean coefficients `(c_x0, c_xt)` and variance of `q(x_{t-1} | x_t, x_0)`
    /// for `t >= 1`.
    pub fn posterior(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check(t)?;
        if t == 0 {
            return Err(Error::InvalidArgument("no posterior step below t = 0".into()));
        }
        let (ab, ab_prev, beta) = (self.alphas_cumprod[t], self.alphas_cumprod[t - 1], self.betas[t]);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c0, ct, var))
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    same_shape(x0, eps)?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// Invert [`q_sample`] for `x0` given a noise estimate.
pub fn predict_x0(x_t: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    same_shape(x_t, eps)?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x_t.data().iter().zip(eps.data()).map(|(x, e)| (x - b * e) / a).collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}

/// Clamp bound `s(k) = max(b - omega k, s_min)` over the reverse progress
/// index `k` (0 at the noisiest step).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipSchedule {
    pub omega: f64,
    pub b: f64,
    pub s_min: f64,
}

impl ClipSchedule {
    pub fn new(omega: f64, b: f64, s_min: f64) -> Result<Self> {
        if !(omega >= 0.0 && s_min > 0.0 && b.is_finite()) {
            return Err(Error::InvalidArgument(format!("clip omega {omega}, s_min {s_min}")));
        }
        if b < s_min {
            return Err(Error::InvalidArgument(format!("clip intercept {b} below floor {s_min}")));
        }
        Ok(Self { omega, b, s_min })
    }

    /// Falls from 1.5 to the floor 1.0 over the first half of `steps`.
    pub fn dynamic(steps: usize) -> Self {
        Self {
            omega: 1.0 / steps as f64,
            b: 1.5,
            s_min: 1.0,
        }
    }

    /// The fixed `[-1, 1]` clamp.
    pub fn fixed() -> Self {
        Self {
            omega: 0.0,
            b: 1.0,
            s_min: 1.0,
        }
    }
}

pub fn clip_threshold(k: usize, clip: &ClipSchedule) -> f64 {
    (clip.b - clip.omega * k as f64).max(clip.s_min)
}
