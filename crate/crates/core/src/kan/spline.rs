use crate::error::{Error, Result};

/// Knot vector for B-splines of a fixed degree.
///
/// A uniform grid with `G` intervals on `[lo, hi]` is extended by `degree`
/// knots on each side, giving `G + 2*degree + 1` knots and `G + degree`
/// basis functions that sum to one everywhere on `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotGrid {
    knots: Vec<f64>,
    degree: usize,
}

impl KnotGrid {
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if knots.len() < 2 * degree + 2 {
            return Err(Error::DegenerateGrid(format!(
                "{} knots cannot carry degree {degree}",
                knots.len()
            )));
        }
        if let Some(w) = knots.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::DegenerateGrid(format!("knots {} and {} are not increasing", w[0], w[1])));
        }
        Ok(Self { knots, degree })
    }

    pub fn uniform(intervals: usize, degree: usize, lo: f64, hi: f64) -> Self {
        assert!(intervals > 0 && hi > lo);
        let h = (hi - lo) / intervals as f64;
        let knots = (0..intervals + 2 * degree + 1)
            .map(|j| lo + (j as f64 - degree as f64) * h)
            .collect();
        Self { knots, degree }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// Interval on which the basis is a partition of unity.
    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.knots.len() - 1 - self.degree])
    }

    pub fn clamp(&self, x: f64) -> f64 {
        let (lo, hi) = self.domain();
        x.clamp(lo, hi)
    }

    // Knot span index `i` with knots[i] <= x < knots[i+1]; the right domain
    // end belongs to the last span.
    fn span(&self, x: f64) -> usize {
        let (lo_idx, hi_idx) = (self.degree, self.n_basis() - 1);
        if x >= self.knots[hi_idx + 1] {
            return hi_idx;
        }
        let (mut lo, mut hi) = (lo_idx, hi_idx + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    fn basis_at_span(&self, span: usize, x: f64, degree: usize) -> Vec<f64> {
        let u = &self.knots;
        let mut n = vec![0.0; degree + 1];
        let mut left = vec![0.0; degree + 1];
        let mut right = vec![0.0; degree + 1];
        n[0] = 1.0;
        for j in 1..=degree {
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }

    /// The `degree + 1` possibly-nonzero basis values at `x` (clamped into the
    /// domain) and the index of the first one.
    pub fn nonzero_basis(&self, x: f64) -> (usize, Vec<f64>) {
        let x = self.clamp(x);
        let span = self.span(x);
        (span - self.degree, self.basis_at_span(span, x, self.degree))
    }

    /// Like [`KnotGrid::nonzero_basis`], also returning d/dx of each value.
    pub fn nonzero_basis_deriv(&self, x: f64) -> (usize, Vec<f64>, Vec<f64>) {
        let x = self.clamp(x);
        let p = self.degree;
        let span = self.span(x);
        let vals = self.basis_at_span(span, x, p);
        let mut der = vec![0.0; p + 1];
        if p > 0 {
            let lower = self.basis_at_span(span, x, p - 1);
            let u = &self.knots;
            // lower[r] is N_{span-p+1+r, p-1}
            let low = |k: usize| -> f64 {
                if k + p < span + 1 || k > span {
                    0.0
                } else {
                    lower[k + p - 1 - span]
                }
            };
            for (r, d) in der.iter_mut().enumerate() {
                let k = span - p + r;
                let a = low(k) / (u[k + p] - u[k]);
                let b = low(k + 1) / (u[k + p + 1] - u[k + 1]);
                *d = p as f64 * (a - b);
            }
        }
        (span - p, vals, der)
    }

    /// Dense basis vector of length [`KnotGrid::n_basis`].
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let (start, vals) = self.nonzero_basis(x);
        let mut out = vec![0.0; self.n_basis()];
        out[start..start + vals.len()].copy_from_slice(&vals);
        out
    }
}

/// B-spline basis values at `x` for a knot vector and degree; `x` is clamped
/// to the grid's interior domain.
pub fn bspline_basis(x: f64, knots: &[f64], degree: usize) -> Result<Vec<f64>> {
    Ok(KnotGrid::new(knots.to_vec(), degree)?.basis(x))
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// One learnable edge activation `phi(x) = w_b * silu(x) + w_s * sum_i c_i B_i(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineEdge {
    pub grid: KnotGrid,
    pub coeffs: Vec<f64>,
    pub base_weight: f64,
    pub spline_weight: f64,
}

impl SplineEdge {
    pub fn new(grid: KnotGrid) -> Self {
        let n = grid.n_basis();
        Self {
            grid,
            coeffs: vec![0.0; n],
            base_weight: 1.0,
            spline_weight: 1.0,
        }
    }

    pub fn spline(&self, x: f64) -> f64 {
        let (start, vals) = self.grid.nonzero_basis(x);
        vals.iter().zip(&self.coeffs[start..]).map(|(b, c)| b * c).sum()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.base_weight * silu(x) + self.spline_weight * self.spline(x)
    }

    /// Least-squares spline coefficients for samples `(xs, ys)` of the target
    /// `phi`, holding the base and spline weights fixed.
    pub fn fit_least_squares(&mut self, xs: &[f64], ys: &[f64]) -> Result<()> {
        if xs.len() != ys.len() || xs.is_empty() || self.spline_weight == 0.0 {
            return Err(Error::InvalidArgument("need matching samples and nonzero spline weight".into()));
        }
        let n = self.grid.n_basis();
        let mut ata = vec![0.0; n * n];
        let mut aty = vec![0.0; n];
        for (&x, &y) in xs.iter().zip(ys) {
            let row = self.grid.basis(x);
            let target = (y - self.base_weight * silu(x)) / self.spline_weight;
            for i in 0..n {
                aty[i] += row[i] * target;
                for j in 0..n {
                    ata[i * n + j] += row[i] * row[j];
                }
            }
        }
        self.coeffs = solve_dense(ata, aty, n)
            .ok_or_else(|| Error::InvalidArgument("samples do not cover every basis function".into()))?;
        Ok(())
    }
}

// Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-14 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn uniform_grid_layout() {
        let g = KnotGrid::uniform(8, 3, -1.0, 1.0);
        assert_eq!(g.knots().len(), 8 + 2 * 3 + 1);
        assert_eq!(g.n_basis(), 11);
        assert_eq!(g.domain(), (-1.0, 1.0));
    }

    #[test]
    fn linear_basis_is_one_hot_at_knots() {
        let g = KnotGrid::uniform(4, 1, -1.0, 1.0);
        for (j, &k) in g.knots().iter().enumerate().skip(1).take(5) {
            let b = g.basis(k);
            for (i, v) in b.iter().enumerate() {
                let expected = if i + 1 == j { 1.0 } else { 0.0 };
                assert!((v - expected).abs() < 1e-15, "knot {j} basis {i} = {v}");
            }
        }
    }

    #[test]
    fn partition_of_unity() {
        let g = KnotGrid::uniform(8, 3, -1.0, 1.0);
        let mut rng = SplitMix64::new(4);
        for _ in 0..1000 {
            let x = rng.uniform(-1.0, 1.0);
            let s: f64 = g.basis(x).iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
        assert!((g.basis(1.0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn outside_inputs_are_clamped() {
        let g = KnotGrid::uniform(8, 3, -1.0, 1.0);
        assert_eq!(g.basis(3.0), g.basis(1.0));
        assert_eq!(g.basis(-7.5), g.basis(-1.0));
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let g = KnotGrid::uniform(8, 3, -1.0, 1.0);
        let mut rng = SplitMix64::new(8);
        for _ in 0..200 {
            let x = rng.uniform(-0.99, 0.99);
            let (start, _, der) = g.nonzero_basis_deriv(x);
            let (bp, bm) = (g.basis(x + 1e-6), g.basis(x - 1e-6));
            for (r, d) in der.iter().enumerate() {
                let fd = (bp[start + r] - bm[start + r]) / 2e-6;
                assert!((fd - d).abs() < 1e-5, "x={x} r={r}: {fd} vs {d}");
            }
        }
    }

    #[test]
    fn degenerate_grid_rejected() {
        assert!(matches!(
            bspline_basis(0.0, &[0.0, 0.5, 0.5, 1.0, 1.5], 1),
            Err(Error::DegenerateGrid(_))
        ));
        assert!(bspline_basis(0.0, &[0.0, 1.0], 1).is_err());
    }

    #[test]
    fn zero_coefficients_reduce_to_silu() {
        let e = SplineEdge::new(KnotGrid::uniform(8, 3, -1.0, 1.0));
        for x in [-2.0, -0.3, 0.0, 0.7, 4.0] {
            assert_eq!(e.eval(x), silu(x));
        }
    }
}
