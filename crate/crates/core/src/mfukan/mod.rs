//! The U-shaped denoising backbone: conv encoder, Tok-KAN bottleneck with
//! self-attention, and a decoder whose merge points modulate backbone and
//! skip features.

mod attention;
mod modulate;

pub use attention::Attention;
pub use modulate::{backbone_alpha, fourier_skip_modulate, fourier_skip_op, scale_backbone, scale_backbone_op};

use crate::error::{Error, Result};
use crate::kan::TokKanBlock;
use crate::nn::{Conv3x3, ConvBlock, Linear};
use crate::rng::SplitMix64;
use crate::tensor::{Ctx, Mode, ParamStore, Tensor, Var};

/// Number of down/upsampling stages.
pub const STAGES: usize = 3;

/// Hyperparameters of the backbone (and, for the shared parts, of the
/// conditioning encoder).
#[derive(Clone, Debug, PartialEq)]
pub struct UKanConfig {
    pub in_channels: usize,
    pub channels: [usize; STAGES],
    pub patch_size: usize,
    pub token_dim: usize,
    pub heads: usize,
    /// Backbone amplification bound per decoder stage (shallowest first).
    pub b_l: [f64; STAGES],
    /// Low-frequency skip attenuation per decoder stage.
    pub s_l: [f64; STAGES],
    /// Normalized radius below which skip spectra are attenuated.
    pub r_thresh: [f64; STAGES],
    pub mf_enabled: bool,
    /// KAN token mixers; `false` swaps in parameter-matched MLPs.
    pub tokkan_enabled: bool,
    /// Diffusion step count; timesteps must lie in `0..timesteps`.
    pub timesteps: usize,
}

impl Default for UKanConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: [16, 32, 64],
            patch_size: 1,
            token_dim: 64,
            heads: 4,
            b_l: [1.2; STAGES],
            s_l: [0.9; STAGES],
            r_thresh: [0.25; STAGES],
            mf_enabled: true,
            tokkan_enabled: true,
            timesteps: 50,
        }
    }
}

impl UKanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.in_channels == 0 || self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.patch_size == 0 || self.token_dim == 0 || self.heads == 0 || self.token_dim % self.heads != 0 {
            return bad(format!(
                "token_dim {} must be a positive multiple of heads {}",
                self.token_dim, self.heads
            ));
        }
        if let Some(b) = self.b_l.iter().find(|&&b| !(b >= 1.0)) {
            return bad(format!("b_l = {b} must be >= 1"));
        }
        if let Some(s) = self.s_l.iter().find(|&&s| !(s > 0.0 && s <= 1.0)) {
            return bad(format!("s_l = {s} must lie in (0, 1]"));
        }
        if let Some(r) = self.r_thresh.iter().find(|&&r| !(0.0..=1.0).contains(&r)) {
            return bad(format!("r_thresh = {r} must lie in [0, 1]"));
        }
        if self.timesteps == 0 {
            return bad("timesteps must be positive".into());
        }
        Ok(())
    }

    /// `[C, H, W]` of the decoder stage outputs (and conditioning features)
    /// for an `h x w` input, shallowest first.
    pub fn stage_shapes(&self, h: usize, w: usize) -> [[usize; 3]; STAGES] {
        let mut out = [[0; 3]; STAGES];
        for (i, s) in out.iter_mut().enumerate() {
            *s = [self.channels[i], h >> (i + 1), w >> (i + 1)];
        }
        out
    }

    /// Input extents must survive three halvings and tile into patches.
    pub fn check_input(&self, shape: &[usize], channels: usize) -> Result<(usize, usize)> {
        let ok = shape.len() == 3
            && shape[0] == channels
            && shape[1] % 8 == 0
            && shape[2] % 8 == 0
            && (shape[1] / 8) % self.patch_size == 0
            && (shape[2] / 8) % self.patch_size == 0;
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "input {shape:?}: need [{channels}, H, W] with H, W divisible by {}",
                8 * self.patch_size
            )));
        }
        Ok((shape[1], shape[2]))
    }
}

/// Tokenize, two Tok-KAN blocks (with optional attention between them), and
/// project back to a feature map of the input's shape.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub patch: usize,
    pub channels: usize,
    embed: Linear,
    blocks: Vec<TokKanBlock>,
    attention: Option<Attention>,
    unembed: Linear,
}

impl Bottleneck {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &UKanConfig,
        channels: usize,
        with_attention: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        let raw = channels * cfg.patch_size * cfg.patch_size;
        let d = cfg.token_dim;
        Self {
            patch: cfg.patch_size,
            channels,
            embed: Linear::new(store, &format!("{name}.embed"), raw, d, false, rng),
            blocks: (0..2)
                .map(|i| TokKanBlock::new(store, &format!("{name}.tok{i}"), d, cfg.tokkan_enabled, rng))
                .collect(),
            attention: with_attention.then(|| Attention::new(store, &format!("{name}.attn"), d, cfg.heads, rng)),
            unembed: Linear::new(store, &format!("{name}.unembed"), d, raw, false, rng),
        }
    }

    pub fn blocks(&self) -> &[TokKanBlock] {
        &self.blocks
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, t: usize, steps: usize) -> Result<Var> {
        let s = cx.shape(x).to_vec();
        let tokens = cx.patchify(x, self.patch)?;
        let mut z = self.embed.forward(cx, tokens)?;
        z = self.blocks[0].forward(cx, z, t, steps)?;
        if let Some(att) = &self.attention {
            z = att.forward(cx, z)?;
        }
        z = self.blocks[1].forward(cx, z, t, steps)?;
        let raw = self.unembed.forward(cx, z)?;
        Ok(cx.unpatchify(raw, self.patch, s[0], s[1], s[2])?)
    }
}

/// Backbone parameters; tensors live in the [`ParamStore`] passed to `new`.
#[derive(Clone, Debug)]
pub struct UKanModel {
    pub cfg: UKanConfig,
    stem: ConvBlock,
    enc: Vec<ConvBlock>,
    bottleneck: Bottleneck,
    dec: Vec<ConvBlock>,
    head: ConvBlock,
    out: Conv3x3,
}

impl UKanModel {
    pub fn new(store: &mut ParamStore, name: &str, cfg: UKanConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let stem = ConvBlock::new(store, &format!("{name}.stem"), cfg.in_channels, c[0], rng);
        let enc_in = [c[0], c[0], c[1]];
        let enc = (0..STAGES)
            .map(|i| ConvBlock::new(store, &format!("{name}.enc{i}"), enc_in[i], c[i], rng))
            .collect();
        let bottleneck = Bottleneck::new(store, &format!("{name}.mid"), &cfg, c[2], true, rng);
        // stage i merges the upsampled deeper features (or the bottleneck
        // output at the deepest stage) with skip i
        let dec = (0..STAGES)
            .map(|i| {
                let deeper = if i == STAGES - 1 { c[i] } else { c[i + 1] };
                ConvBlock::new(store, &format!("{name}.dec{i}"), deeper + c[i], c[i], rng)
            })
            .collect();
        let head = ConvBlock::new(store, &format!("{name}.head"), 2 * c[0], c[0], rng);
        let out = Conv3x3::new(store, &format!("{name}.out"), c[0], cfg.in_channels, rng);
        Ok(Self {
            cfg,
            stem,
            enc,
            bottleneck,
            dec,
            head,
            out,
        })
    }

    pub fn bottleneck(&self) -> &Bottleneck {
        &self.bottleneck
    }

    /// Predict the noise in `x_t` (`[C_in, H, W]`). `cond`, when given, holds
    /// one feature map per decoder stage (shallowest first) that is added to
    /// that stage's output.
    pub fn forward(&self, cx: &mut Ctx, x_t: Var, t: usize, cond: Option<&[Var]>) -> Result<Var> {
        let (h, w) = self.cfg.check_input(cx.shape(x_t), self.cfg.in_channels)?;
        if t >= self.cfg.timesteps {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.cfg.timesteps,
            });
        }
        if let Some(cond) = cond {
            let shapes = self.cfg.stage_shapes(h, w);
            if cond.len() != STAGES {
                return Err(Error::ShapeMismatch(format!(
                    "{} conditioning stages, expected {STAGES}",
                    cond.len()
                )));
            }
            for (i, (&v, s)) in cond.iter().zip(&shapes).enumerate() {
                if cx.shape(v) != s {
                    return Err(Error::ShapeMismatch(format!(
                        "conditioning stage {i} is {:?}, decoder expects {s:?}",
                        cx.shape(v)
                    )));
                }
            }
        }
        let e0 = self.stem.forward(cx, x_t)?;
        let mut a = e0;
        let mut skips = Vec::with_capacity(STAGES);
        for blk in &self.enc {
            a = blk.forward(cx, a)?;
            a = cx.avg_pool2(a)?;
            skips.push(a);
        }
        let mut up = self.bottleneck.forward(cx, skips[STAGES - 1], t, self.cfg.timesteps)?;
        for i in (0..STAGES).rev() {
            let (mut back, mut skip) = (up, skips[i]);
            if self.cfg.mf_enabled {
                back = scale_backbone_op(cx, back, self.cfg.b_l[i])?;
                skip = fourier_skip_op(cx, skip, self.cfg.s_l[i], self.cfg.r_thresh[i])?;
            }
            let merged = cx.concat(&[back, skip])?;
            let mut m = self.dec[i].forward(cx, merged)?;
            if let Some(cond) = cond {
                m = cx.add(m, cond[i])?;
            }
            up = cx.upsample2(m)?;
        }
        let merged = cx.concat(&[up, e0])?;
        let hd = self.head.forward(cx, merged)?;
        Ok(self.out.forward(cx, hd)?)
    }
}

/// Evaluate the backbone on plain tensors without recording gradients.
pub fn ukan_forward(
    model: &UKanModel,
    store: &ParamStore,
    mode: Mode,
    x_t: &Tensor,
    t: usize,
    cond: &[Tensor],
) -> Result<Tensor> {
    let mut cx = Ctx::new(store, mode, false);
    let x = cx.constant(x_t.clone());
    let cond_vars: Vec<Var> = cond.iter().map(|c| cx.constant(c.clone())).collect();
    let y = model.forward(&mut cx, x, t, (!cond.is_empty()).then_some(&cond_vars[..]))?;
    Ok(cx.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> UKanConfig {
        UKanConfig {
            channels: [4, 4, 8],
            token_dim: 8,
            heads: 2,
            ..UKanConfig::default()
        }
    }

    fn build(cfg: UKanConfig, seed: u64) -> (ParamStore, UKanModel) {
        let mut store = ParamStore::new();
        let m = UKanModel::new(&mut store, "ukan", cfg, &mut SplitMix64::new(seed)).unwrap();
        (store, m)
    }

    #[test]
    fn output_shape_matches_input() {
        let (store, m) = build(small_cfg(), 1);
        for n in [32, 64] {
            let x = Tensor::randn(vec![1, n, n], 1.0, &mut SplitMix64::new(2));
            let y = ukan_forward(&m, &store, Mode::Train, &x, 3, &[]).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn neutral_modulation_equals_plain_concat() {
        let neutral = UKanConfig {
            b_l: [1.0; 3],
            s_l: [1.0; 3],
            ..small_cfg()
        };
        let (store, on) = build(neutral.clone(), 3);
        let off = UKanModel {
            cfg: UKanConfig {
                mf_enabled: false,
                ..neutral
            },
            ..on.clone()
        };
        let x = Tensor::randn(vec![1, 16, 16], 1.0, &mut SplitMix64::new(4));
        let a = ukan_forward(&on, &store, Mode::Train, &x, 10, &[]).unwrap();
        let b = ukan_forward(&off, &store, Mode::Train, &x, 10, &[]).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn zero_conditioning_is_a_no_op() {
        let (store, m) = build(small_cfg(), 5);
        let x = Tensor::randn(vec![1, 16, 16], 1.0, &mut SplitMix64::new(6));
        let zeros: Vec<Tensor> = m.cfg.stage_shapes(16, 16).iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        let a = ukan_forward(&m, &store, Mode::Train, &x, 7, &[]).unwrap();
        let b = ukan_forward(&m, &store, Mode::Train, &x, 7, &zeros).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic() {
        let (store, m) = build(small_cfg(), 7);
        let x = Tensor::randn(vec![1, 16, 16], 1.0, &mut SplitMix64::new(8));
        assert_eq!(
            ukan_forward(&m, &store, Mode::Eval, &x, 1, &[]).unwrap(),
            ukan_forward(&m, &store, Mode::Eval, &x, 1, &[]).unwrap()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let (store, m) = build(small_cfg(), 9);
        let x = Tensor::zeros(vec![1, 12, 12]);
        assert!(ukan_forward(&m, &store, Mode::Train, &x, 0, &[]).is_err());
        let x = Tensor::zeros(vec![1, 16, 16]);
        assert!(matches!(
            ukan_forward(&m, &store, Mode::Train, &x, 50, &[]),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(ukan_forward(&m, &store, Mode::Train, &x, 0, &[Tensor::zeros(vec![4, 8, 8])]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(UKanConfig::default().validate().is_ok());
        assert!(UKanConfig { b_l: [0.9, 1.0, 1.0], ..UKanConfig::default() }.validate().is_err());
        assert!(UKanConfig { s_l: [0.0, 1.0, 1.0], ..UKanConfig::default() }.validate().is_err());
        assert!(UKanConfig { heads: 3, ..UKanConfig::default() }.validate().is_err());
    }

    #[test]
    fn stage_shapes_at_32() {
        let s = UKanConfig::default().stage_shapes(32, 32);
        assert_eq!(s, [[16, 16, 16], [32, 8, 8], [64, 4, 4]]);
    }

    fn fd_check(size: usize) {
        use crate::tensor::gradcheck::{check_store_gradients, jitter};
        let (mut store, m) = build(small_cfg(), 11);
        let mut rng = SplitMix64::new(12);
        jitter(&mut store, 0.1, &mut rng);
        let x = store.add("input", Tensor::randn(vec![1, size, size], 1.0, &mut rng));
        let target = Tensor::randn(vec![1, size, size], 1.0, &mut rng);
        let res = check_store_gradients(&store, 1e-5, 6, |cx| {
            let xv = cx.p(x);
            let y = m.forward(cx, xv, 4, None)?;
            let tv = cx.constant(target.clone());
            let d = cx.sub(y, tv)?;
            let sq = cx.mul(d, d)?;
            Ok::<_, Error>(cx.mean(sq)?)
        })
        .unwrap();
        let worst = store.name(store.ids().nth(res.worst_input).unwrap()).to_string();
        assert!(res.max_rel_error <= 1e-3, "{size}x{size}: {res:?} ({worst})");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        fd_check(8);
        // at 16x16 the bottleneck holds four tokens, so every block is live
        fd_check(16);
    }
}
