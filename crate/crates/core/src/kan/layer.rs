use super::spline::{silu, silu_grad, KnotGrid};
use crate::rng::SplitMix64;
use crate::tensor::{Ctx, CustomOp, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Plain-value parameters of one KAN layer: `n_out x n_in` edge functions
/// sharing one knot grid.
///
/// Shapes: `coeffs [n_out, n_in, n_basis]`, `base [n_out, n_in]`,
/// `spline [n_out, n_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KanLayerParams {
    pub n_in: usize,
    pub n_out: usize,
    pub grid: KnotGrid,
    pub coeffs: Tensor,
    pub base: Tensor,
    pub spline: Tensor,
}

impl KanLayerParams {
    /// All spline coefficients zero and both edge weights one.
    pub fn silu_init(n_in: usize, n_out: usize, grid: KnotGrid) -> Self {
        let nb = grid.n_basis();
        Self {
            n_in,
            n_out,
            grid,
            coeffs: Tensor::zeros(vec![n_out, n_in, nb]),
            base: Tensor::ones(vec![n_out, n_in]),
            spline: Tensor::ones(vec![n_out, n_in]),
        }
    }

    /// Edge value `phi_{q,p}(x)`.
    pub fn edge(&self, q: usize, p: usize, x: f64) -> f64 {
        let nb = self.grid.n_basis();
        let e = q * self.n_in + p;
        let (start, vals) = self.grid.nonzero_basis(x);
        let c = &self.coeffs.data()[e * nb + start..];
        let s: f64 = vals.iter().zip(c).map(|(b, c)| b * c).sum();
        self.base.data()[e] * silu(x) + self.spline.data()[e] * s
    }
}

/// Default knot grid: cubic, 8 intervals on [-1, 1].
pub fn default_grid() -> KnotGrid {
    KnotGrid::uniform(8, 3, -1.0, 1.0)
}

struct Basis {
    start: Vec<usize>,
    vals: Vec<f64>,
    ders: Vec<f64>,
    inside: Vec<bool>,
}

fn eval_basis(grid: &KnotGrid, x: &[f64], with_deriv: bool) -> Basis {
    let k1 = grid.degree() + 1;
    let (lo, hi) = grid.domain();
    let mut b = Basis {
        start: Vec::with_capacity(x.len()),
        vals: Vec::with_capacity(x.len() * k1),
        ders: Vec::new(),
        inside: Vec::with_capacity(x.len()),
    };
    for &v in x {
        if with_deriv {
            let (s, vals, ders) = grid.nonzero_basis_deriv(v);
            b.start.push(s);
            b.vals.extend(vals);
            b.ders.extend(ders);
        } else {
            let (s, vals) = grid.nonzero_basis(v);
            b.start.push(s);
            b.vals.extend(vals);
        }
        b.inside.push(v > lo && v < hi);
    }
    b
}

fn check_input(x: &Tensor, n_in: usize) -> Result<usize> {
    let s = x.shape();
    let ok = match s.len() {
        1 => s[0] == n_in,
        2 => s[1] == n_in,
        _ => false,
    };
    if !ok {
        return Err(TensorError::ShapeMismatch {
            op: "kan_layer",
            detail: format!("input {s:?} for {n_in} inputs"),
        });
    }
    Ok(if s.len() == 1 { 1 } else { s[0] })
}

fn apply(x: &[f64], rows: usize, p: &KanLayerParams) -> Vec<f64> {
    let (n_in, n_out) = (p.n_in, p.n_out);
    let nb = p.grid.n_basis();
    let k1 = p.grid.degree() + 1;
    let basis = eval_basis(&p.grid, x, false);
    let act: Vec<f64> = x.iter().map(|&v| silu(v)).collect();
    let (coeffs, base, spline) = (p.coeffs.data(), p.base.data(), p.spline.data());
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        for q in 0..n_out {
            let mut acc = 0.0;
            for i in 0..n_in {
                let xi = r * n_in + i;
                let e = q * n_in + i;
                let c = &coeffs[e * nb + basis.start[xi]..];
                let s: f64 = basis.vals[xi * k1..(xi + 1) * k1].iter().zip(c).map(|(b, c)| b * c).sum();
                acc += base[e] * act[xi] + spline[e] * s;
            }
            out[r * n_out + q] = acc;
        }
    }
    out
}

/// `out_q = sum_p phi_{q,p}(z_p)` for `z` of shape `[n_in]` or `[rows, n_in]`.
pub fn kan_layer_forward(z: &Tensor, params: &KanLayerParams) -> Result<Tensor> {
    let rows = check_input(z, params.n_in)?;
    let out = apply(z.data(), rows, params);
    let shape = if z.rank() == 1 {
        vec![params.n_out]
    } else {
        vec![rows, params.n_out]
    };
    Tensor::new(shape, out)
}

/// Evaluate a stack of layers, feeding each output to the next.
pub fn kan_stack_forward(z: &Tensor, layers: &[KanLayerParams]) -> Result<Tensor> {
    let mut cur = z.clone();
    for l in layers {
        cur = kan_layer_forward(&cur, l)?;
    }
    Ok(cur)
}

#[derive(Debug)]
struct KanOp {
    grid: KnotGrid,
    n_in: usize,
    n_out: usize,
}

impl CustomOp for KanOp {
    fn name(&self) -> &'static str {
        "kan_layer"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, coeffs, base, spline) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data());
        let (n_in, n_out) = (self.n_in, self.n_out);
        let rows = x.len() / n_in;
        let nb = self.grid.n_basis();
        let k1 = self.grid.degree() + 1;
        let basis = eval_basis(&self.grid, x, true);
        let mut dx = vec![0.0; x.len()];
        let mut dc = vec![0.0; coeffs.len()];
        let mut db = vec![0.0; base.len()];
        let mut ds = vec![0.0; spline.len()];
        for r in 0..rows {
            for i in 0..n_in {
                let xi = r * n_in + i;
                let (act, dact) = (silu(x[xi]), silu_grad(x[xi]));
                let st = basis.start[xi];
                let vals = &basis.vals[xi * k1..(xi + 1) * k1];
                let ders = &basis.ders[xi * k1..(xi + 1) * k1];
                for q in 0..n_out {
                    let g = grad[r * n_out + q];
                    if g == 0.0 {
                        continue;
                    }
                    let e = q * n_in + i;
                    let c = &coeffs[e * nb + st..e * nb + st + k1];
                    let s: f64 = vals.iter().zip(c).map(|(b, c)| b * c).sum();
                    db[e] += g * act;
                    ds[e] += g * s;
                    let gw = g * spline[e];
                    for (d, b) in dc[e * nb + st..e * nb + st + k1].iter_mut().zip(vals) {
                        *d += gw * b;
                    }
                    let mut dxv = base[e] * dact;
                    if basis.inside[xi] {
                        dxv += spline[e] * ders.iter().zip(c).map(|(d, c)| d * c).sum::<f64>();
                    }
                    dx[xi] += g * dxv;
                }
            }
        }
        vec![Some(dx), Some(dc), Some(db), Some(ds)]
    }
}

/// Record a KAN layer on a tape from explicit parameter variables.
pub fn kan_layer_op(
    tape: &mut crate::tensor::Tape,
    grid: &KnotGrid,
    x: Var,
    coeffs: Var,
    base: Var,
    spline: Var,
) -> Result<Var> {
    let cs = tape.shape(coeffs).to_vec();
    if cs.len() != 3 || cs[2] != grid.n_basis() || tape.shape(base) != &cs[..2] || tape.shape(spline) != &cs[..2] {
        return Err(TensorError::ShapeMismatch {
            op: "kan_layer",
            detail: format!("coefficient shape {cs:?}"),
        });
    }
    let params = KanLayerParams {
        n_in: cs[1],
        n_out: cs[0],
        grid: grid.clone(),
        coeffs: tape.value(coeffs).clone(),
        base: tape.value(base).clone(),
        spline: tape.value(spline).clone(),
    };
    let out = kan_layer_forward(tape.value(x), &params)?;
    let op = KanOp {
        grid: grid.clone(),
        n_in: params.n_in,
        n_out: params.n_out,
    };
    tape.custom(&[x, coeffs, base, spline], out, Box::new(op))
}

/// A KAN layer whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct KanLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub grid: KnotGrid,
    pub coeffs: ParamId,
    pub base: ParamId,
    pub spline: ParamId,
}

impl KanLayer {
    /// Spline coefficients start at zero and spline weights at one; base
    /// weights are drawn at the usual dense-layer scale so that output units
    /// differ from the start.
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut SplitMix64) -> Self {
        let grid = default_grid();
        let nb = grid.n_basis();
        let coeffs = store.add(format!("{name}.coeffs"), Tensor::zeros(vec![n_out, n_in, nb]));
        let base = store.add(
            format!("{name}.base"),
            Tensor::randn(vec![n_out, n_in], 1.0 / (n_in as f64).sqrt(), rng),
        );
        let spline = store.add(format!("{name}.spline"), Tensor::ones(vec![n_out, n_in]));
        Self {
            n_in,
            n_out,
            grid,
            coeffs,
            base,
            spline,
        }
    }

    pub fn params(&self, store: &ParamStore) -> KanLayerParams {
        KanLayerParams {
            n_in: self.n_in,
            n_out: self.n_out,
            grid: self.grid.clone(),
            coeffs: store.get(self.coeffs).clone(),
            base: store.get(self.base).clone(),
            spline: store.get(self.spline).clone(),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (c, b, s) = (cx.p(self.coeffs), cx.p(self.base), cx.p(self.spline));
        kan_layer_op(cx, &self.grid, x, c, b, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use crate::tensor::Tape;

    fn random_params(n_in: usize, n_out: usize, rng: &mut SplitMix64) -> KanLayerParams {
        let grid = default_grid();
        let nb = grid.n_basis();
        KanLayerParams {
            n_in,
            n_out,
            grid,
            coeffs: Tensor::randn(vec![n_out, n_in, nb], 0.5, rng),
            base: Tensor::randn(vec![n_out, n_in], 1.0, rng),
            spline: Tensor::randn(vec![n_out, n_in], 1.0, rng),
        }
    }

    #[test]
    fn silu_identity_case() {
        let p = KanLayerParams::silu_init(1, 1, default_grid());
        for x in [-3.0, -0.5, 0.0, 0.25, 2.0] {
            let y = kan_layer_forward(&Tensor::new(vec![1], vec![x]).unwrap(), &p).unwrap();
            assert_eq!(y.data()[0], silu(x));
        }
    }

    #[test]
    fn matches_edge_sum() {
        let mut rng = SplitMix64::new(2);
        let p = random_params(5, 3, &mut rng);
        let z = Tensor::uniform(vec![5], -1.2, 1.2, &mut rng);
        let y = kan_layer_forward(&z, &p).unwrap();
        for q in 0..3 {
            let direct: f64 = (0..5).map(|i| p.edge(q, i, z.data()[i])).sum();
            assert!((y.data()[q] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_equals_stepwise() {
        let mut rng = SplitMix64::new(3);
        let layers = [random_params(4, 6, &mut rng), random_params(6, 2, &mut rng)];
        let z = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let stepwise = kan_layer_forward(&kan_layer_forward(&z, &layers[0]).unwrap(), &layers[1]).unwrap();
        assert_eq!(kan_stack_forward(&z, &layers).unwrap(), stepwise);
    }

    #[test]
    fn length_mismatch() {
        let p = KanLayerParams::silu_init(3, 2, default_grid());
        assert!(kan_layer_forward(&Tensor::zeros(vec![4]), &p).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(11);
        for case in 0..20 {
            let (n_in, n_out, rows) = (1 + case % 4, 1 + case % 3, 1 + case % 5);
            let p = random_params(n_in, n_out, &mut rng);
            let x = Tensor::uniform(vec![rows, n_in], -1.4, 1.4, &mut rng);
            let w = Tensor::randn(vec![rows, n_out], 1.0, &mut rng);
            let grid = p.grid.clone();
            let res = check_gradients(&[x, p.coeffs, p.base, p.spline, w], 1e-5, None, |t: &mut Tape, v| {
                let y = kan_layer_op(t, &grid, v[0], v[1], v[2], v[3])?;
                let y = t.mul(y, v[4])?;
                t.sum(y)
            })
            .unwrap();
            assert!(res.max_rel_error <= 1e-4, "case {case}: {res:?}");
        }
    }
}
