//! Small parameterized layers shared by the backbone and the conditioning encoder.

use crate::rng::SplitMix64;
use crate::tensor::{Ctx, NormKind, ParamId, ParamStore, Result, Tensor, Var};

/// 3x3, stride 1, pad 1 convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3x3 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut SplitMix64) -> Self {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(vec![cout, cin, 3, 3], std, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Self { weight, bias, cin, cout }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), cx.p(self.bias));
        cx.conv2d(x, w, Some(b))
    }
}

/// Dense map `x W (+ b)` on row vectors: x [N, in], W [in, out].
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, bias: bool, rng: &mut SplitMix64) -> Self {
        let std = 1.0 / (n_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(vec![n_in, n_out], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![1, n_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let y = cx.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let rows = cx.shape(x)[0];
                let ones = cx.constant(Tensor::ones(vec![rows, 1]));
                let b = cx.p(b);
                let bb = cx.matmul(ones, b)?;
                cx.add(y, bb)
            }
            None => Ok(y),
        }
    }
}

/// Batch norm affine parameters plus running statistics (momentum 0.1).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub kind: NormKind,
}

impl BatchNorm {
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kind: NormKind) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(vec![channels])),
            kind,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        cx.batch_norm(x, self.gamma, self.beta, (self.running_mean, self.running_var), self.kind)
    }
}

/// Layer or group norm (statistics always from the input).
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub kind: NormKind,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kind: NormKind) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            kind,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        cx.norm(x, self.gamma, self.beta, self.kind)
    }
}

/// conv -> batch norm -> relu.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv3x3,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut SplitMix64) -> Self {
        Self {
            conv: Conv3x3::new(store, &format!("{name}.conv"), cin, cout, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout, NormKind::BatchPlanes),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        cx.relu(y)
    }
}
