use std::io::Write;

use super::{from_model_domain, tensor_as_image, to_model_domain, ClipSchedule, Denoiser, DiffusionSchedule};
use crate::diffusion::clip_threshold;
use crate::error::{Error, Result};
use crate::kspace::{data_consistency, masked_residual, ImageGrid, KSpaceGrid, SamplingMask};
use crate::mcmodel::{build_condition, noise_condition};
use crate::rng::SplitMix64;
use crate::tensor::{Ctx, Mode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub clip: ClipSchedule,
    pub dc_every: usize,
    pub seed: u64,
}

/// One reverse step of the sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub t: usize,
    pub s_k: f64,
    /// MSE between the current clean estimate (in `[0, 1]`) and the reference.
    pub mse_to_reference: Option<f64>,
    /// Masked k-space residual after data consistency, when it ran this step.
    pub dc_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub image: ImageGrid,
    pub trace: Vec<TraceRow>,
}

fn mse(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let n = a.pixels().len() as f64;
    a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Ancestral reverse loop from pure noise. Each step predicts the noise,
/// forms and clamps the clean estimate, enforces data consistency every
/// `dc_every` steps (and always on the last), and draws the next state from
/// the posterior.
pub fn sample_reconstruct<D: Denoiser>(
    model: &D,
    obs: &KSpaceGrid,
    mask: &SamplingMask,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    reference: Option<&ImageGrid>,
) -> Result<SampleOutput> {
    if cfg.dc_every == 0 {
        return Err(Error::InvalidArgument("dc_every must be at least 1".into()));
    }
    let clip = cfg.clip;
    if clip.b < clip.s_min || clip.omega < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "clip intercept {} below floor {} or negative slope",
            clip.b, clip.s_min
        )));
    }
    if let Some(r) = reference {
        if r.height() != obs.height() || r.width() != obs.width() {
            return Err(Error::ShapeMismatch("reference and observation differ in size".into()));
        }
    }
    let (h, w) = (obs.height(), obs.width());
    let steps = sched.steps();
    let mut init = SplitMix64::derive(cfg.seed, &[u64::MAX]);
    let mut x = Tensor::new(vec![1, h, w], init.normal_vec(h * w))?;
    let mut trace = Vec::with_capacity(steps);

    for k in 0..steps {
        let t = steps - 1 - k;
        let cond = build_condition(obs, &tensor_as_image(&x)?)?;
        let cond_seed = SplitMix64::derive(cfg.seed, &[k as u64]).next_u64();
        let cond = noise_condition(&cond, t, sched, cond_seed)?;

        let eps = {
            let mut cx = Ctx::new(model.store(), Mode::Train, false);
            let xv = cx.constant(x.clone());
            let cv = cx.constant(cond);
            let e = model.predict(&mut cx, xv, t, cv)?;
            cx.value(e).clone()
        };
        if eps.shape() != x.shape() {
            return Err(Error::ShapeMismatch(format!("prediction {:?} for state {:?}", eps.shape(), x.shape())));
        }
        let s = clip_threshold(k, &clip);
        let mut x0 = super::predict_x0(&x, t, &eps, sched)?;
        x0.data_mut().iter_mut().for_each(|v| *v = v.clamp(-s, s));
        if x0.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite clean estimate at step {k}")));
        }

        let mut dc_residual = None;
        if k % cfg.dc_every == 0 || t == 0 {
            let img = data_consistency(&from_model_domain(&x0)?, obs, mask)?;
            dc_residual = Some(masked_residual(&img, obs, mask)?);
            x0 = to_model_domain(&img);
        }
        let estimate = from_model_domain(&x0)?.clamp01();
        trace.push(TraceRow {
            k,
            t,
            s_k: s,
            mse_to_reference: reference.map(|r| mse(&estimate, r)),
            dc_residual,
        });
        if t == 0 {
            return Ok(SampleOutput { image: estimate, trace });
        }

        let (c0, ct, var) = sched.posterior(t)?;
        let sd = var.sqrt();
        let mut rng = SplitMix64::derive(cfg.seed, &[k as u64, 1]);
        let next = x0
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| c0 * a + ct * b + sd * rng.normal())
            .collect();
        x = Tensor::new(vec![1, h, w], next)?;
    }
    unreachable!("the loop returns at t = 0")
}

/// Trace as CSV: `k,t,s_k,mse_to_reference,dc_residual`; absent values are
/// left empty.
pub fn write_trace<W: Write>(mut w: W, rows: &[TraceRow]) -> Result<()> {
    writeln!(w, "k,t,s_k,mse_to_reference,dc_residual")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.10e}")).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.k,
            r.t,
            r.s_k,
            opt(r.mse_to_reference),
            opt(r.dc_residual)
        )?;
    }
    Ok(())
}
