use super::layer::KanLayer;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Linear, Norm};
use crate::rng::SplitMix64;
use crate::tensor::{Ctx, NormKind, ParamStore, Tensor, TensorError, Var};

/// Width of the sinusoidal timestep embedding.
pub const TIME_EMBED_DIM: usize = 64;

/// Standard sinusoidal embedding: `sin(t f_i)` in the first half and
/// `cos(t f_i)` in the second, with `f_i = 10000^(-i / half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * f;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

fn patch_check(c: usize, h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::ShapeMismatch(format!("patch size {p} does not divide {h}x{w} (C={c})")));
    }
    Ok(())
}

/// Split `[C, H, W]` into `N = HW / P^2` raster-ordered patches, flatten each
/// in (channel, row, column) order and project by `e` of shape `[C P^2, D]`.
pub fn tokenize(x: &Tensor, p: usize, e: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("tokenize expects [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    patch_check(c, h, w, p)?;
    let dim = c * p * p;
    if e.rank() != 2 || e.shape()[0] != dim {
        return Err(Error::ShapeMismatch(format!("projection {:?} for token dim {dim}", e.shape())));
    }
    let mut tape = crate::tensor::Tape::new();
    let xv = tape.constant(x.clone());
    let ev = tape.constant(e.clone());
    let raw = tape.patchify(xv, p)?;
    let tok = tape.matmul(raw, ev)?;
    Ok(tape.value(tok).clone())
}

/// Inverse of [`tokenize`] with an identity projection.
pub fn detokenize(tokens: &Tensor, p: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
    patch_check(c, h, w, p)?;
    let mut tape = crate::tensor::Tape::new();
    let tv = tape.constant(tokens.clone());
    let img = tape.unpatchify(tv, p, c, h, w)?;
    Ok(tape.value(img).clone())
}

/// Token mixer of a Tok-KAN block: three KAN layers, or the ablation's
/// two-layer MLPs of matching parameter count.
#[derive(Clone, Debug)]
pub enum Mixer {
    Kan(Vec<KanLayer>),
    Mlp(Vec<(Linear, Linear)>),
}

/// Hidden width for an MLP `D -> h -> D` (with biases) whose parameter count
/// matches a `D -> D` KAN layer with the default grid.
pub fn matched_mlp_hidden(d: usize) -> usize {
    let kan = d * d * (super::layer::default_grid().n_basis() + 2);
    ((kan - d) as f64 / (2 * d + 1) as f64).round().max(1.0) as usize
}

/// `Z_k = LN(KAN(Z_{k-1})) + F(TE(t))`, where `KAN` is three rounds of
/// (KAN layer, batch norm over tokens, ReLU).
#[derive(Clone, Debug)]
pub struct TokKanBlock {
    pub dim: usize,
    pub mixer: Mixer,
    pub bns: Vec<BatchNorm>,
    pub ln: Norm,
    pub time_proj: Linear,
}

impl TokKanBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, use_kan: bool, rng: &mut SplitMix64) -> Self {
        let mixer = if use_kan {
            Mixer::Kan(
                (0..3)
                    .map(|i| KanLayer::new(store, &format!("{name}.kan{i}"), dim, dim, rng))
                    .collect(),
            )
        } else {
            let hidden = matched_mlp_hidden(dim);
            Mixer::Mlp(
                (0..3)
                    .map(|i| {
                        (
                            Linear::new(store, &format!("{name}.mlp{i}.fc1"), dim, hidden, true, rng),
                            Linear::new(store, &format!("{name}.mlp{i}.fc2"), hidden, dim, true, rng),
                        )
                    })
                    .collect(),
            )
        };
        let bns = (0..3)
            .map(|i| BatchNorm::new(store, &format!("{name}.bn{i}"), dim, NormKind::BatchRows))
            .collect();
        let ln = Norm::new(store, &format!("{name}.ln"), dim, NormKind::Layer);
        let time_proj = Linear::new(store, &format!("{name}.time_proj"), TIME_EMBED_DIM, dim, false, rng);
        Self {
            dim,
            mixer,
            bns,
            ln,
            time_proj,
        }
    }

    fn mix(&self, cx: &mut Ctx, i: usize, z: Var) -> Result<Var> {
        Ok(match &self.mixer {
            Mixer::Kan(layers) => layers[i].forward(cx, z)?,
            Mixer::Mlp(layers) => {
                let h = layers[i].0.forward(cx, z)?;
                let h = cx.relu(h)?;
                layers[i].1.forward(cx, h)?
            }
        })
    }

    /// The additive embedding term `F(TE(t))` as a `[1, D]` row.
    pub fn time_term(&self, cx: &mut Ctx, t: usize) -> Result<Var> {
        let te = cx.constant(Tensor::new(vec![1, TIME_EMBED_DIM], timestep_embedding(t, TIME_EMBED_DIM))?);
        Ok(self.time_proj.forward(cx, te)?)
    }

    /// `z` is `[N, D]`; `t` must lie in `0..steps`.
    pub fn forward(&self, cx: &mut Ctx, z: Var, t: usize, steps: usize) -> Result<Var> {
        if t >= steps {
            return Err(Error::TimestepOutOfRange { t, steps });
        }
        let s = cx.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "tokkan_block",
                detail: format!("tokens {s:?} for dim {}", self.dim),
            }
            .into());
        }
        let mut h = z;
        for i in 0..3 {
            h = self.mix(cx, i, h)?;
            h = self.bns[i].forward(cx, h)?;
            h = cx.relu(h)?;
        }
        let h = self.ln.forward(cx, h)?;
        let row = self.time_term(cx, t)?;
        let ones = cx.constant(Tensor::ones(vec![s[0], 1]));
        let emb = cx.matmul(ones, row)?;
        Ok(cx.add(h, emb)?)
    }
}
