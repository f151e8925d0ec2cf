use crate::nn::Linear;
use crate::rng::SplitMix64;
use crate::tensor::{Ctx, ParamStore, Result, TensorError, Var};

/// Multi-head self-attention over tokens `[N, D]` with a residual connection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub dim: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut SplitMix64) -> Self {
        assert!(heads > 0 && dim % heads == 0, "{dim} not divisible into {heads} heads");
        Self {
            heads,
            dim,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
        }
    }

    // Columns `h*dh..(h+1)*dh` of an [N, D] matrix, as [N, dh].
    fn head_cols(cx: &mut Ctx, xt: Var, h: usize, dh: usize) -> Result<Var> {
        let rows = cx.slice(xt, h * dh, dh)?;
        cx.transpose(rows)
    }

    pub fn forward(&self, cx: &mut Ctx, z: Var) -> Result<Var> {
        let s = cx.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                detail: format!("tokens {s:?} for dim {}", self.dim),
            });
        }
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(cx, z)?;
        let k = self.k.forward(cx, z)?;
        let v = self.v.forward(cx, z)?;
        let (qt, kt, vt) = (cx.transpose(q)?, cx.transpose(k)?, cx.transpose(v)?);
        let mut heads_t = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = Self::head_cols(cx, qt, h, dh)?;
            let kh_t = cx.slice(kt, h * dh, dh)?;
            let vh = Self::head_cols(cx, vt, h, dh)?;
            let scores = cx.matmul(qh, kh_t)?;
            let scores = cx.scale(scores, scale)?;
            let attn = cx.softmax(scores)?;
            let out = cx.matmul(attn, vh)?;
            heads_t.push(cx.transpose(out)?);
        }
        let merged = cx.concat(&heads_t)?;
        let merged = cx.transpose(merged)?;
        let out = self.o.forward(cx, merged)?;
        cx.add(z, out)
    }
}
