use std::fmt;

use super::kernels::{self, NormLayout, NORM_EPS};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation implemented outside the tape (KAN edges, spectral
/// modulation, ...). `backward` returns one optional gradient per input.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

/// Statistics layout of a normalization primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormKind {
    /// Batch norm over the rows of a [N, C] matrix.
    BatchRows,
    /// Batch norm over spatial positions of a [C, H, W] map.
    BatchPlanes,
    /// Layer norm over the last axis of [N, D].
    Layer,
    /// Group norm over [C, H, W] with the given number of groups.
    Group(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Silu(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Normalization with externally supplied statistics (batch norm eval mode).
    FrozenNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    MeanOverChannel(Var),
    Sum(Var),
    Mean(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Gather {
        x: Var,
        map: Vec<usize>,
    },
    Scatter {
        x: Var,
        map: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Silu(..) => "silu",
            Op::Norm { .. } => "norm",
            Op::FrozenNorm { .. } => "norm_frozen",
            Op::Softmax(..) => "softmax",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::MeanOverChannel(..) => "mean_over_channel",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Upsample2(..) => "upsample2",
            Op::Gather { .. } => "patchify",
            Op::Scatter { .. } => "unpatchify",
            Op::Custom { .. } => "custom",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Silu(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::MeanOverChannel(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::AvgPool2(a)
            | Op::Upsample2(a) => vec![*a],
            Op::Conv2d { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Norm { x, gamma, beta, .. } | Op::FrozenNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Concat(xs) => xs.clone(),
            Op::Slice { x, .. } | Op::Gather { x, .. } | Op::Scatter { x, .. } => vec![*x],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of primitive applications.
///
/// Nodes are stored in creation order, which is a topological order of the
/// computation graph; backward visits them in reverse exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar root with respect to every tracked leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match acc {
        Some(a) => {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
        None => *acc = Some(g),
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Register an input. It is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register an untracked input.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Short description of the recorded op sequence, used to compare tapes.
    pub fn op_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Custom { op, .. } => format!("custom:{}", op.name()),
                other => other.name().to_string(),
            })
            .collect()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, name: &'static str) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let inputs = op.inputs();
        for &i in &inputs {
            self.check(i)?;
        }
        let tracked = inputs.iter().any(|i| self.nodes[i.0].tracked);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, data, name)
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(a)?;
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, data, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), "scale", |x| c * x)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Silu(a), "silu", silu)
    }

    /// [m, k] x [k, n] -> [m, n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::Matmul(a, b), vec![m, n], data, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(mismatch("transpose", format!("rank {} input", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(self.value(a).data(), r, c);
        self.push(Op::Transpose(a), vec![c, r], data, "transpose")
    }

    /// 3x3 convolution with stride 1 and zero padding 1.
    /// x: [Cin, H, W], w: [Cout, Cin, 3, 3], b: [Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 {
            return Err(mismatch("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        let (cin, h, wd, cout) = (sx[0], sx[1], sx[2], sw[0]);
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [cout] {
                return Err(mismatch("conv2d", format!("bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let data = kernels::conv3x3(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cin,
            cout,
            h,
            wd,
        );
        self.push(Op::Conv2d { x, w, b }, vec![cout, h, wd], data, "conv2d")
    }

    fn norm_layout(&self, x: Var, kind: NormKind) -> Result<(NormLayout, usize)> {
        let s = self.shape(x);
        let layout = match (kind, s.len()) {
            (NormKind::BatchRows, 2) => NormLayout::Columns { cols: s[1] },
            (NormKind::Layer, 2) => NormLayout::Rows { cols: s[1] },
            (NormKind::BatchPlanes, 3) => NormLayout::Planes { plane: s[1] * s[2] },
            (NormKind::Group(g), 3) => {
                if g == 0 || s[0] % g != 0 {
                    return Err(mismatch("groupnorm", format!("{} channels in {g} groups", s[0])));
                }
                NormLayout::ChannelGroups {
                    plane: s[1] * s[2],
                    per_group: s[0] / g,
                }
            }
            _ => return Err(mismatch("norm", format!("{kind:?} on shape {s:?}"))),
        };
        let channels = match kind {
            NormKind::BatchRows | NormKind::Layer => s[1],
            _ => s[0],
        };
        Ok((layout, channels))
    }

    fn check_affine(&self, gamma: Var, beta: Var, channels: usize) -> Result<()> {
        self.check(gamma)?;
        self.check(beta)?;
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(mismatch(
                "norm",
                format!(
                    "affine {:?}/{:?} for {channels} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(())
    }

    /// Normalization with statistics computed from `x`. Returns the output and
    /// the per-group (mean, variance) used, for running-statistics tracking.
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var, kind: NormKind) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.check(x)?;
        let (layout, channels) = self.norm_layout(x, kind)?;
        self.check_affine(gamma, beta, channels)?;
        let (mean, var) = kernels::group_stats(self.value(x).data(), layout);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let data = kernels::normalize_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            layout,
            &mean,
            &inv_std,
        );
        let shape = self.shape(x).to_vec();
        let out = self.push(
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                mean: mean.clone(),
                inv_std,
            },
            shape,
            data,
            "norm",
        )?;
        Ok((out, mean, var))
    }

    /// Batch normalization using fixed (running) statistics.
    pub fn norm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        self.check(x)?;
        let (layout, channels) = self.norm_layout(x, kind)?;
        self.check_affine(gamma, beta, channels)?;
        if !matches!(kind, NormKind::BatchRows | NormKind::BatchPlanes)
            || mean.len() != channels
            || var.len() != channels
        {
            return Err(mismatch("norm_frozen", format!("{kind:?} with {} statistics", mean.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let data = kernels::normalize_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            layout,
            mean,
            &inv_std,
        );
        let shape = self.shape(x).to_vec();
        self.push(
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                layout,
                mean: mean.to_vec(),
                inv_std,
            },
            shape,
            data,
            "norm_frozen",
        )
    }

    /// Row-wise softmax of a [N, M] matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(mismatch("softmax", format!("rank {} input", s.len())));
        }
        let data = kernels::softmax_rows(self.value(a).data(), s[1]);
        self.push(Op::Softmax(a), s, data, "softmax")
    }

    /// Concatenate along axis 0; trailing extents must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        self.check(first)?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            self.check(x)?;
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(mismatch("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Op::Concat(xs.to_vec()), shape, data, "concat")
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(mismatch("slice", format!("{start}..{} of {}", start + len, s[0])));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        self.push(Op::Slice { x, start }, shape, data, "slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let data = self.value(x).data().to_vec();
        if shape.iter().product::<usize>() != data.len() {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        self.push(Op::Reshape(x), shape.to_vec(), data, "reshape")
    }

    /// [C, H, W] -> [1, H, W], averaging over channels.
    pub fn mean_over_channel(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(mismatch("mean_over_channel", format!("{s:?}")));
        }
        let plane = s[1] * s[2];
        let src = self.value(x).data();
        let mut data = vec![0.0; plane];
        for ch in src.chunks(plane) {
            for (d, v) in data.iter_mut().zip(ch) {
                *d += v;
            }
        }
        let inv = 1.0 / s[0] as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        self.push(Op::MeanOverChannel(x), vec![1, s[1], s[2]], data, "mean_over_channel")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), vec![1], vec![s], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean(x), vec![1], vec![m], "mean")
    }

    fn image_dims(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(mismatch(op, format!("expected [C, H, W], got {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.image_dims(x, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(mismatch("avg_pool2", format!("odd extent {h}x{w}")));
        }
        let data = kernels::avg_pool2(self.value(x).data(), c, h, w);
        self.push(Op::AvgPool2(x), vec![c, h / 2, w / 2], data, "avg_pool2")
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.image_dims(x, "upsample2")?;
        let data = kernels::upsample2(self.value(x).data(), c, h, w);
        self.push(Op::Upsample2(x), vec![c, 2 * h, 2 * w], data, "upsample2")
    }

    /// [C, H, W] -> [N, C*P*P] with N = H*W/P^2 tokens in raster order.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let (c, h, w) = self.image_dims(x, "patchify")?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(mismatch("patchify", format!("patch {p} on {h}x{w}")));
        }
        let map = kernels::patch_index(c, h, w, p);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        self.push(Op::Gather { x, map }, vec![h * w / (p * p), c * p * p], data, "patchify")
    }

    /// Inverse of [`Tape::patchify`].
    pub fn unpatchify(&mut self, x: Var, p: usize, c: usize, h: usize, w: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if p == 0 || h % p != 0 || w % p != 0 || s != [h * w / (p * p), c * p * p] {
            return Err(mismatch("unpatchify", format!("{s:?} into [{c}, {h}, {w}] with patch {p}")));
        }
        let map = kernels::patch_index(c, h, w, p);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for (j, &i) in map.iter().enumerate() {
            data[i] = src[j];
        }
        self.push(Op::Scatter { x, map }, vec![c, h, w], data, "unpatchify")
    }

    /// Record an externally computed differentiable op.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        let shape = output.shape().to_vec();
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            shape,
            output.into_data(),
            name,
        )
    }

    /// Reverse sweep from a scalar root. Consumes the tape.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        self.check(root)?;
        if self.value(root).numel() != 1 {
            return Err(TensorError::RootNotScalar(self.shape(root).to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut keep = vec![false; n];
        if self.nodes[root.0].tracked {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                keep[idx] = node.tracked;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, gi) in self.local_grads(node, &g) {
                if self.nodes[input.0].tracked {
                    add_into(&mut grads[input.0], gi);
                }
            }
        }
        for (g, k) in grads.iter_mut().zip(&keep) {
            if !k {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| c * x).collect())],
            Op::Matmul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                let ga = kernels::matmul_nt(g, val(*b), m, n, k);
                let gb = kernels::matmul_tn(val(*a), g, m, k, n);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => {
                let (r, c) = (shape(*a)[0], shape(*a)[1]);
                vec![(*a, kernels::transpose(g, c, r))]
            }
            Op::Conv2d { x, w, b } => {
                let (sx, sw) = (shape(*x), shape(*w));
                let (dx, dw, db) = kernels::conv3x3_backward(val(*x), val(*w), g, sx[0], sw[0], sx[1], sx[2]);
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::Relu(a) => {
                let ga = g.iter().zip(val(*a)).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect();
                vec![(*a, ga)]
            }
            Op::Silu(a) => {
                let ga = g.iter().zip(val(*a)).map(|(gv, x)| gv * silu_grad(*x)).collect();
                vec![(*a, ga)]
            }
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                mean,
                inv_std,
            } => {
                let (dx, dg, db) = kernels::normalize_backward(val(*x), val(*gamma), g, *layout, mean, inv_std);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                layout,
                mean,
                inv_std,
            } => {
                let (xv, gm) = (val(*x), val(*gamma));
                let mut dg = vec![0.0; gm.len()];
                let mut db = vec![0.0; gm.len()];
                let mut dx = vec![0.0; xv.len()];
                for i in 0..xv.len() {
                    let (k, c) = (layout.group(i), layout.channel(i));
                    dg[c] += g[i] * (xv[i] - mean[k]) * inv_std[k];
                    db[c] += g[i];
                    dx[i] = g[i] * gm[c] * inv_std[k];
                }
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Softmax(a) => {
                let cols = shape(*a)[1];
                let y = node.value.data();
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                xs.iter()
                    .map(|&x| {
                        let len = self.nodes[x.0].value.numel();
                        let part = g[offset..offset + len].to_vec();
                        offset += len;
                        (x, part)
                    })
                    .collect()
            }
            Op::Slice { x, start } => {
                let src = &self.nodes[x.0].value;
                let inner = src.numel() / src.shape()[0];
                let mut gx = vec![0.0; src.numel()];
                gx[start * inner..start * inner + g.len()].copy_from_slice(g);
                vec![(*x, gx)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::MeanOverChannel(a) => {
                let c = shape(*a)[0];
                let inv = 1.0 / c as f64;
                let ga = (0..c).flat_map(|_| g.iter().map(|v| v * inv)).collect();
                vec![(*a, ga)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.nodes[a.0].value.numel()])],
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::AvgPool2(a) => {
                let s = shape(*a);
                vec![(*a, kernels::avg_pool2_backward(g, s[0], s[1], s[2]))]
            }
            Op::Upsample2(a) => {
                let s = shape(*a);
                vec![(*a, kernels::upsample2_backward(g, s[0], s[1], s[2]))]
            }
            Op::Gather { x, map } => {
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (j, &i) in map.iter().enumerate() {
                    gx[i] += g[j];
                }
                vec![(*x, gx)]
            }
            Op::Scatter { x, map } => vec![(*x, map.iter().map(|&i| g[i]).collect())],
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                op.backward(&ins, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, v)| gi.map(|gi| (*v, gi)))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(t: &mut Tape, data: &[f64]) -> Var {
        t.leaf(Tensor::new(vec![data.len()], data.to_vec()).unwrap().with_grad())
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = vec_var(&mut t, &[1.5, -2.0]);
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let s = t.sum(z).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0, -3.0]);
    }

    #[test]
    fn constants_and_intermediates_get_no_gradient() {
        let mut t = Tape::new();
        let x = vec_var(&mut t, &[1.0, 2.0]);
        let c = t.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
        assert!(g.get(y).is_none());
    }

    #[test]
    fn backward_needs_scalar_root_and_fresh_tape() {
        let mut t = Tape::new();
        let x = vec_var(&mut t, &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(TensorError::RootNotScalar(_))));
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(t.is_consumed());
        assert!(matches!(t.backward(s), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = vec_var(&mut t, &[1.0, 2.0]);
        let b = vec_var(&mut t, &[1.0, 2.0, 3.0]);
        assert!(matches!(t.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }
}
