// Forward/backward numeric kernels behind the tape primitives. All buffers are
// row-major; image tensors are laid out [channels, height, width].

/// Variance floor shared by all normalization layers.
pub const NORM_EPS: f64 = 1e-5;

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for a: [k, m], b: [k, n].
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for a: [m, k], b: [n, k].
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

// Output rows/cols `y` for which `y + d` stays inside `[0, n)`.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi)
}

/// 3x3 convolution, stride 1, zero padding 1.
pub(crate) fn conv3x3(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) -> Vec<f64> {
    let plane = h * wd;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        if let Some(b) = bias {
            dst.fill(b[o]);
        }
        for i in 0..cin {
            let src = &x[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let wv = w[((o * cin + i) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - 1;
                    let (x0, x1) = valid_range(wd, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let srow = &src[sy * wd..(sy + 1) * wd];
                        let drow = &mut dst[y * wd..(y + 1) * wd];
                        let sx0 = (x0 as isize + dx) as usize;
                        for (d, s) in drow[x0..x1].iter_mut().zip(&srow[sx0..sx0 + (x1 - x0)]) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv3x3`] with respect to input, weight and bias.
pub(crate) fn conv3x3_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = h * wd;
    let mut dx = vec![0.0; cin * plane];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for o in 0..cout {
        let gp = &g[o * plane..(o + 1) * plane];
        db[o] = gp.iter().sum();
        for i in 0..cin {
            let src = &x[i * plane..(i + 1) * plane];
            let dsrc = &mut dx[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let widx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let wv = w[widx];
                    let dx_off = kx as isize - 1;
                    let (x0, x1) = valid_range(wd, dx_off);
                    let sx0 = (x0 as isize + dx_off) as usize;
                    let len = x1 - x0;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gp[y * wd + x0..y * wd + x1];
                        let srow = &src[sy * wd + sx0..sy * wd + sx0 + len];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        let drow = &mut dsrc[sy * wd + sx0..sy * wd + sx0 + len];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                    dw[widx] = acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// How a normalization layer partitions elements into statistics groups and
/// affine channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum NormLayout {
    /// [rows, cols]: one group per column (batch norm over tokens).
    Columns { cols: usize },
    /// [channels, plane]: one group per channel (batch norm over positions).
    Planes { plane: usize },
    /// [rows, cols]: one group per row, affine per column (layer norm).
    Rows { cols: usize },
    /// [channels, plane] with `per_group` consecutive channels per group.
    ChannelGroups { plane: usize, per_group: usize },
}

impl NormLayout {
    pub(crate) fn n_groups(&self, len: usize) -> usize {
        match *self {
            NormLayout::Columns { cols } => cols,
            NormLayout::Planes { plane } => len / plane,
            NormLayout::Rows { cols } => len / cols,
            NormLayout::ChannelGroups { plane, per_group } => len / plane / per_group,
        }
    }

    #[inline]
    pub(crate) fn group(&self, i: usize) -> usize {
        match *self {
            NormLayout::Columns { cols } => i % cols,
            NormLayout::Planes { plane } => i / plane,
            NormLayout::Rows { cols } => i / cols,
            NormLayout::ChannelGroups { plane, per_group } => i / plane / per_group,
        }
    }

    #[inline]
    pub(crate) fn channel(&self, i: usize) -> usize {
        match *self {
            NormLayout::Columns { cols } | NormLayout::Rows { cols } => i % cols,
            NormLayout::Planes { plane } | NormLayout::ChannelGroups { plane, .. } => i / plane,
        }
    }
}

/// Per-group mean and (biased) variance.
pub(crate) fn group_stats(x: &[f64], layout: NormLayout) -> (Vec<f64>, Vec<f64>) {
    let g = layout.n_groups(x.len());
    let mut count = vec![0usize; g];
    let mut mean = vec![0.0; g];
    for (i, &v) in x.iter().enumerate() {
        let k = layout.group(i);
        mean[k] += v;
        count[k] += 1;
    }
    for (m, &c) in mean.iter_mut().zip(&count) {
        *m /= c as f64;
    }
    let mut var = vec![0.0; g];
    for (i, &v) in x.iter().enumerate() {
        let k = layout.group(i);
        let d = v - mean[k];
        var[k] += d * d;
    }
    for (s, &c) in var.iter_mut().zip(&count) {
        *s /= c as f64;
    }
    (mean, var)
}

pub(crate) fn normalize_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    layout: NormLayout,
    mean: &[f64],
    inv_std: &[f64],
) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let k = layout.group(i);
            let c = layout.channel(i);
            (v - mean[k]) * inv_std[k] * gamma[c] + beta[c]
        })
        .collect()
}

/// Backward of batch-statistics normalization. Returns (dx, dgamma, dbeta).
pub(crate) fn normalize_backward(
    x: &[f64],
    gamma: &[f64],
    g: &[f64],
    layout: NormLayout,
    mean: &[f64],
    inv_std: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let groups = mean.len();
    let mut dgamma = vec![0.0; gamma.len()];
    let mut dbeta = vec![0.0; gamma.len()];
    let mut sum_gx = vec![0.0; groups];
    let mut sum_gxh = vec![0.0; groups];
    let mut count = vec![0usize; groups];
    for i in 0..x.len() {
        let k = layout.group(i);
        let c = layout.channel(i);
        let xh = (x[i] - mean[k]) * inv_std[k];
        dgamma[c] += g[i] * xh;
        dbeta[c] += g[i];
        let gx = g[i] * gamma[c];
        sum_gx[k] += gx;
        sum_gxh[k] += gx * xh;
        count[k] += 1;
    }
    let dx = (0..x.len())
        .map(|i| {
            let k = layout.group(i);
            let c = layout.channel(i);
            let n = count[k] as f64;
            let xh = (x[i] - mean[k]) * inv_std[k];
            inv_std[k] * (g[i] * gamma[c] - sum_gx[k] / n - xh * sum_gxh[k] / n)
        })
        .collect();
    (dx, dgamma, dbeta)
}

pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

pub(crate) fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let base = ch * h * w;
                let s = x[base + 2 * y * w + 2 * xx]
                    + x[base + 2 * y * w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * w + 2 * xx]
                    + x[base + (2 * y + 1) * w + 2 * xx + 1];
                out[(ch * ho + y) * wo + xx] = 0.25 * s;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[(ch * h + y) * w + xx] = 0.25 * g[(ch * ho + y / 2) * wo + xx / 2];
            }
        }
    }
    dx
}

pub(crate) fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                out[(ch * ho + y) * wo + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * ho + y) * wo + xx];
            }
        }
    }
    dx
}

/// Index map for patch flattening: `out[n * dim + j] = x[map[n * dim + j]]`
/// with tokens in raster order and each token ordered (channel, py, px).
pub(crate) fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (nh, nw) = (h / p, w / p);
    let dim = c * p * p;
    let mut map = Vec::with_capacity(nh * nw * dim);
    for ty in 0..nh {
        for tx in 0..nw {
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        map.push((ch * h + ty * p + py) * w + tx * p + px);
                    }
                }
            }
        }
    }
    map
}
