//! Conditioning path: the observed image stacked with the current estimate,
//! forward-noised, and compressed by a small conv encoder into one feature
//! map per decoder stage.

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::kspace::{ifft2_real, ImageGrid, KSpaceGrid};
use crate::mfukan::{Bottleneck, UKanConfig, STAGES};
use crate::nn::{Conv3x3, Norm};
use crate::rng::SplitMix64;
use crate::tensor::{Ctx, Mode, NormKind, ParamStore, Tensor, Var};

/// Group count for the encoder's group norms.
pub const GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionInput {
    pub obs_image: ImageGrid,
    pub x: ImageGrid,
    /// `[2, H, W]`: channel 0 is `obs_image`, channel 1 is `x`.
    pub x_tilde: Tensor,
}

/// One feature map per decoder stage, shallowest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionFeatures {
    pub stages: Vec<Tensor>,
}

/// Stack `real(ifft2(obs))` with `x`.
pub fn build_condition(obs: &KSpaceGrid, x: &ImageGrid) -> Result<ConditionInput> {
    if obs.height() != x.height() || obs.width() != x.width() {
        return Err(Error::ShapeMismatch(format!(
            "observation {}x{} vs image {}x{}",
            obs.height(),
            obs.width(),
            x.height(),
            x.width()
        )));
    }
    let obs_image = ifft2_real(obs);
    let mut data = obs_image.pixels().to_vec();
    data.extend_from_slice(x.pixels());
    let x_tilde = Tensor::new(vec![2, x.height(), x.width()], data)?;
    Ok(ConditionInput {
        obs_image,
        x: x.clone(),
        x_tilde,
    })
}

/// Forward-noise the stacked condition at step `t` with noise drawn from `seed`.
pub fn noise_condition(c: &ConditionInput, t: usize, sched: &DiffusionSchedule, seed: u64) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut rng = SplitMix64::new(seed);
    let data = c.x_tilde.data().iter().map(|x| a * x + b * rng.normal()).collect();
    Ok(Tensor::new(c.x_tilde.shape().to_vec(), data)?)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Three (conv, ReLU, group norm, 2x average pool) stages followed by two
/// Tok-KAN blocks on the deepest map.
#[derive(Clone, Debug)]
pub struct McModel {
    pub cfg: UKanConfig,
    convs: Vec<Conv3x3>,
    norms: Vec<Norm>,
    bottleneck: Bottleneck,
}

impl McModel {
    pub fn new(store: &mut ParamStore, name: &str, cfg: UKanConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let cin = [2, c[0], c[1]];
        let convs = (0..STAGES)
            .map(|i| Conv3x3::new(store, &format!("{name}.conv{i}"), cin[i], c[i], rng))
            .collect();
        let norms = (0..STAGES)
            .map(|i| Norm::new(store, &format!("{name}.gn{i}"), c[i], NormKind::Group(gcd(GROUPS, c[i]))))
            .collect();
        let bottleneck = Bottleneck::new(store, &format!("{name}.mid"), &cfg, c[2], false, rng);
        Ok(Self {
            cfg,
            convs,
            norms,
            bottleneck,
        })
    }

    pub fn norms(&self) -> &[Norm] {
        &self.norms
    }

    pub fn bottleneck(&self) -> &Bottleneck {
        &self.bottleneck
    }

    /// Encode a noised condition `[2, H, W]`; returns one map per stage.
    pub fn encode(&self, cx: &mut Ctx, x: Var, t: usize) -> Result<Vec<Var>> {
        self.cfg.check_input(cx.shape(x), 2)?;
        let mut a = x;
        let mut feats = Vec::with_capacity(STAGES);
        for (conv, gn) in self.convs.iter().zip(&self.norms) {
            a = conv.forward(cx, a)?;
            a = cx.relu(a)?;
            a = gn.forward(cx, a)?;
            a = cx.avg_pool2(a)?;
            feats.push(a);
        }
        feats[STAGES - 1] = self.bottleneck.forward(cx, a, t, self.cfg.timesteps)?;
        Ok(feats)
    }
}

/// Evaluate the encoder on a plain tensor.
pub fn condition_encode(
    model: &McModel,
    store: &ParamStore,
    x_tilde_noised: &Tensor,
    t: usize,
) -> Result<ConditionFeatures> {
    let mut cx = Ctx::new(store, Mode::Train, false);
    let x = cx.constant(x_tilde_noised.clone());
    let feats = model.encode(&mut cx, x, t)?;
    Ok(ConditionFeatures {
        stages: feats.into_iter().map(|v| cx.value(v).clone()).collect(),
    })
}
