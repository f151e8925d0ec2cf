//! Noise schedule, epsilon-prediction training, and the clipped ancestral
//! sampler with data consistency.

mod sampler;
mod schedule;

pub use sampler::{sample_reconstruct, write_trace, SampleOutput, SamplerConfig, TraceRow};
pub use schedule::{clip_threshold, make_schedule, predict_x0, q_sample, ClipSchedule, DiffusionSchedule};

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::kspace::{ImageGrid, KSpaceGrid};
use crate::mcmodel::{build_condition, noise_condition, McModel};
use crate::mfukan::{UKanConfig, UKanModel};
use crate::nn::BatchNorm;
use crate::rng::SplitMix64;
use crate::tensor::{read_checkpoint, write_checkpoint, Adam, AdamState, Ctx, Mode, ParamStore, StatUpdate, Tensor, TensorError, Var};

/// A noise predictor evaluated on a tape bound to its parameter store.
pub trait Denoiser {
    fn store(&self) -> &ParamStore;

    /// Noise estimate for `x_t` (`[1, H, W]`, model domain) given the noised
    /// condition `cond` (`[2, H, W]`).
    fn predict(&self, cx: &mut Ctx, x_t: Var, t: usize, cond: Var) -> Result<Var>;
}

/// Backbone plus conditioning encoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct TcKanRecon {
    pub store: ParamStore,
    pub backbone: UKanModel,
    pub condition: McModel,
}

impl TcKanRecon {
    pub fn new(cfg: UKanConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        let backbone = UKanModel::new(&mut store, "ukan", cfg.clone(), &mut rng)?;
        let condition = McModel::new(&mut store, "mc", cfg, &mut rng)?;
        Ok(Self {
            store,
            backbone,
            condition,
        })
    }

    pub fn cfg(&self) -> &UKanConfig {
        &self.backbone.cfg
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        Ok(write_checkpoint(w, self.store.named())?)
    }

    /// Build a model for `cfg` and fill it from a checkpoint; tensor names and
    /// shapes must match exactly.
    pub fn load<R: Read>(r: R, cfg: UKanConfig) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.store.load_named(read_checkpoint(r)?)?;
        Ok(m)
    }
}

impl Denoiser for TcKanRecon {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn predict(&self, cx: &mut Ctx, x_t: Var, t: usize, cond: Var) -> Result<Var> {
        let feats = self.condition.encode(cx, cond, t)?;
        self.backbone.forward(cx, x_t, t, Some(&feats))
    }
}

/// `[0, 1]` image to the model domain `[-1, 1]` as a `[1, H, W]` tensor.
pub fn to_model_domain(img: &ImageGrid) -> Tensor {
    let data = img.pixels().iter().map(|p| 2.0 * p - 1.0).collect();
    Tensor::new(vec![1, img.height(), img.width()], data).expect("image extents are positive")
}

/// Inverse of [`to_model_domain`], without clamping.
pub fn from_model_domain(x: &Tensor) -> Result<ImageGrid> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::ShapeMismatch(format!("expected [1, H, W], got {s:?}")));
    }
    ImageGrid::new(s[1], s[2], x.data().iter().map(|v| (v + 1.0) / 2.0).collect())
}

fn tensor_as_image(x: &Tensor) -> Result<ImageGrid> {
    let s = x.shape();
    ImageGrid::new(s[1], s[2], x.data().to_vec())
}

/// Everything drawn at random for one training item.
struct ItemDraw {
    t: usize,
    eps: Tensor,
    cond_seed: u64,
}

fn draw_item(seed: u64, index: usize, shape: &[usize], steps: usize) -> ItemDraw {
    let mut rng = SplitMix64::derive(seed, &[index as u64]);
    let t = rng.below(steps as u64) as usize;
    let n = shape.iter().product();
    let eps = Tensor::new(shape.to_vec(), rng.normal_vec(n)).expect("shape is valid");
    ItemDraw {
        t,
        eps,
        cond_seed: rng.next_u64(),
    }
}

/// Loss of one batch plus, when requested, the batch-mean gradient of every
/// store entry and the batch-norm statistics seen.
pub struct BatchLoss {
    pub loss: f64,
    pub grads: Option<Vec<Option<Vec<f64>>>>,
    pub stats: Vec<StatUpdate>,
}

fn batch_loss<D: Denoiser>(
    model: &D,
    images: &[&ImageGrid],
    obs: &[&KSpaceGrid],
    sched: &DiffusionSchedule,
    seed: u64,
    track: bool,
) -> Result<BatchLoss> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if images.len() != obs.len() {
        return Err(Error::ShapeMismatch(format!("{} images, {} observations", images.len(), obs.len())));
    }
    let n = images.len() as f64;
    let mut total = 0.0;
    let mut grads: Option<Vec<Option<Vec<f64>>>> = None;
    let mut stats = Vec::new();
    for (i, (img, ob)) in images.iter().zip(obs).enumerate() {
        let x0 = to_model_domain(img);
        let d = draw_item(seed, i, x0.shape(), sched.steps());
        let x_t = q_sample(&x0, d.t, &d.eps, sched)?;
        let cond = build_condition(ob, &tensor_as_image(&x_t)?)?;
        let cond = noise_condition(&cond, d.t, sched, d.cond_seed)?;

        let mut cx = Ctx::new(model.store(), Mode::Train, track);
        let xv = cx.constant(x_t);
        let cv = cx.constant(cond);
        let pred = model.predict(&mut cx, xv, d.t, cv)?;
        let target = cx.constant(d.eps);
        let diff = cx.sub(pred, target)?;
        let sq = cx.mul(diff, diff)?;
        let loss = cx.mean(sq)?;
        total += cx.value(loss).data()[0];
        stats.extend(cx.take_stats());
        if track {
            let vars = cx.param_vars().to_vec();
            let mut g = cx.tape.backward(loss)?;
            let item = model.store().collect_grads(&vars, &mut g);
            match &mut grads {
                None => grads = Some(item),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(item) {
                        match (a.as_mut(), b) {
                            (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                            (None, Some(b)) => *a = Some(b),
                            _ => {}
                        }
                    }
                }
            }
        }
    }
    if let Some(g) = &mut grads {
        for v in g.iter_mut().flatten() {
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(BatchLoss {
        loss: total / n,
        grads,
        stats,
    })
}

/// Mean over the batch of `mean((eps - eps_hat)^2)`, with `t` uniform on
/// `0..T` and `eps ~ N(0, 1)` drawn per item from `seed`.
pub fn training_loss<D: Denoiser>(
    model: &D,
    images: &[ImageGrid],
    obs: &[KSpaceGrid],
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<f64> {
    let imgs: Vec<&ImageGrid> = images.iter().collect();
    let obs: Vec<&KSpaceGrid> = obs.iter().collect();
    Ok(batch_loss(model, &imgs, &obs, sched, seed, false)?.loss)
}

/// Like [`training_loss`], also returning batch-mean gradients.
pub fn training_loss_and_grads<D: Denoiser>(
    model: &D,
    images: &[ImageGrid],
    obs: &[KSpaceGrid],
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<BatchLoss> {
    let imgs: Vec<&ImageGrid> = images.iter().collect();
    let obs: Vec<&KSpaceGrid> = obs.iter().collect();
    batch_loss(model, &imgs, &obs, sched, seed, true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Adam training over shuffled minibatches. `on_epoch(epoch, mean_loss)` is
/// called after each epoch (epochs count from 1). Returns the per-epoch
/// losses.
pub fn train(
    model: &mut TcKanRecon,
    images: &[ImageGrid],
    obs: &[KSpaceGrid],
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if images.is_empty() || cfg.batch == 0 {
        return Err(Error::EmptyBatch);
    }
    if images.len() != obs.len() {
        return Err(Error::ShapeMismatch(format!("{} images, {} observations", images.len(), obs.len())));
    }
    let adam = Adam::new(cfg.lr);
    let mut state = AdamState::default();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        SplitMix64::derive(cfg.seed, &[epoch as u64]).shuffle(&mut order);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let imgs: Vec<&ImageGrid> = chunk.iter().map(|&i| &images[i]).collect();
            let obs_b: Vec<&KSpaceGrid> = chunk.iter().map(|&i| &obs[i]).collect();
            let seed = SplitMix64::derive(cfg.seed, &[epoch as u64, b as u64]).next_u64();
            let out = match batch_loss(model, &imgs, &obs_b, sched, seed, true) {
                Err(Error::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(Error::NonFiniteLoss { epoch, value: f64::NAN })
                }
                other => other?,
            };
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, value: out.loss });
            }
            sum += out.loss * chunk.len() as f64;
            let grads = out.grads.expect("tracked");
            adam.step_store(&mut model.store, &grads, &mut state)?;
            model.store.apply_stat_updates(&out.stats, BatchNorm::MOMENTUM);
        }
        let mean = sum / images.len() as f64;
        log::info!("epoch {epoch}: loss {mean:.6}");
        on_epoch(epoch, mean);
        losses.push(mean);
    }
    Ok(losses)
}
