//! B-spline basis evaluation and the KANLinear layer.
//!
//! Each edge `(j, i)` of a layer carries a learnable univariate function
//! `base_weight[j,i]·silu(x_i) + spline_scale[j,i]·Σ_b coeffs[j,i,b]·B_b(x_i)`;
//! output `j` sums its incoming edges.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

/// Uniform knot vector over `[g_min, g_max]`, extended by `degree` knots on
/// each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    degree: usize,
    g_min: f64,
    g_max: f64,
    intervals: usize,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(degree: usize, intervals: usize, range: (f64, f64)) -> Result<Self> {
        let (g_min, g_max) = range;
        if degree < 1 || intervals < 1 || !(g_min < g_max) {
            return Err(contract(format!("invalid spline grid: degree {degree}, intervals {intervals}, range {range:?}")));
        }
        let h = (g_max - g_min) / intervals as f64;
        let knots = (0..intervals + 2 * degree + 1).map(|i| g_min + (i as f64 - degree as f64) * h).collect();
        Ok(Self { degree, g_min, g_max, intervals, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn range(&self) -> (f64, f64) {
        (self.g_min, self.g_max)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// `G + p`.
    pub fn num_basis(&self) -> usize {
        self.intervals + self.degree
    }

    fn spacing(&self) -> f64 {
        (self.g_max - self.g_min) / self.intervals as f64
    }

    /// All basis functions of `degree` at `x` (already clamped), via the
    /// triangular Cox–de Boor table. The right end of the range belongs to
    /// the last interval.
    fn basis_of_degree(&self, x: f64, degree: usize) -> Vec<f64> {
        let t = &self.knots;
        let p = self.degree;
        let mut b = vec![0.0; t.len() - 1];
        let span = (((x - self.g_min) / self.spacing()).floor() as usize).min(self.intervals - 1) + p;
        b[span] = 1.0;
        for d in 1..=degree {
            for i in 0..t.len() - 1 - d {
                let left = (x - t[i]) / (t[i + d] - t[i]) * b[i];
                let right = (t[i + d + 1] - x) / (t[i + d + 1] - t[i + 1]) * b[i + 1];
                b[i] = left + right;
            }
        }
        b.truncate(t.len() - 1 - degree);
        b
    }

    fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.g_min, self.g_max)
    }

    /// `(values, derivatives)` of the `G + p` basis functions at `x`.
    /// Derivatives are zero outside the range, where the input is clamped.
    pub fn basis_with_derivative(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let xc = self.clamp(x);
        let values = self.basis_of_degree(xc, self.degree);
        let inside = x >= self.g_min && x <= self.g_max;
        let derivs = if inside {
            let lower = self.basis_of_degree(xc, self.degree - 1);
            let h = self.spacing();
            (0..values.len()).map(|i| (lower[i] - lower[i + 1]) / h).collect()
        } else {
            vec![0.0; values.len()]
        };
        (values, derivs)
    }
}

/// All `G + p` basis values at `x`; inputs outside the grid range are
/// clamped to it.
pub fn bspline_basis(x: f64, grid: &SplineGrid) -> Vec<f64> {
    grid.basis_of_degree(grid.clamp(x), grid.degree)
}

/// Parameters of one KANLinear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanLayerParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: SplineGrid,
    /// `[out_dim, in_dim, G+p]`
    pub spline_coeffs: Tensor,
    /// `[out_dim, in_dim]`
    pub base_weight: Tensor,
    /// `[out_dim, in_dim]`
    pub spline_scale: Tensor,
    /// Residual `silu` branch; on by default.
    pub use_base: bool,
}

/// Graph handles of a bound [`KanLayerParams`].
#[derive(Debug, Clone, Copy)]
pub struct KanVars<'g> {
    pub spline_coeffs: Var<'g>,
    pub base_weight: Var<'g>,
    pub spline_scale: Var<'g>,
}

impl KanLayerParams {
    pub fn validate(&self) -> Result<()> {
        let nb = self.grid.num_basis();
        let ok = self.spline_coeffs.shape() == [self.out_dim, self.in_dim, nb]
            && self.base_weight.shape() == [self.out_dim, self.in_dim]
            && self.spline_scale.shape() == [self.out_dim, self.in_dim];
        if !ok {
            return Err(contract("KAN parameter shapes do not match in/out dims and grid"));
        }
        Ok(())
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> KanVars<'g> {
        KanVars {
            spline_coeffs: g.leaf(&self.spline_coeffs),
            base_weight: g.leaf(&self.base_weight),
            spline_scale: g.leaf(&self.spline_scale),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 3] {
        [("spline_coeffs", &self.spline_coeffs), ("base_weight", &self.base_weight), ("spline_scale", &self.spline_scale)]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.spline_coeffs, &mut self.base_weight, &mut self.spline_scale]
    }

    /// Sets every parameter to zero (spline scale included).
    pub fn zeroed(mut self) -> Self {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        self
    }

    /// Layer applied on the graph to `x` `[N, in_dim]` with bound `vars`.
    pub fn forward<'g>(&self, x: Var<'g>, vars: &KanVars<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(contract(format!("KAN input must be [N, {}], got {shape:?}", self.in_dim)));
        }
        let g = x.graph();
        let n = shape[0];
        let nb = self.grid.num_basis();
        let (values, derivs) = {
            let xs = x.value_ref();
            let mut values = Vec::with_capacity(xs.len() * nb);
            let mut derivs = Vec::with_capacity(xs.len() * nb);
            for &v in xs.iter() {
                let (b, d) = self.grid.basis_with_derivative(v);
                values.extend(b);
                derivs.extend(d);
            }
            (values, derivs)
        };
        let basis = g.expand(x, values, derivs, nb).reshape(&[n, self.in_dim * nb]);

        // spline_scale broadcast over the basis axis
        let idx: Vec<usize> = (0..self.out_dim * self.in_dim).flat_map(|e| std::iter::repeat_n(e, nb)).collect();
        let scale = vars.spline_scale.gather(idx, &[self.out_dim, self.in_dim * nb]);
        let weights = vars.spline_coeffs.reshape(&[self.out_dim, self.in_dim * nb]).mul(scale);
        let spline = basis.matmul(weights.t());
        if !self.use_base {
            return Ok(spline);
        }
        let base = x.silu().matmul(vars.base_weight.t());
        Ok(spline.add(base))
    }
}

/// Fresh layer over the grid `[-1, 1]`: spline coefficients ~ N(0, (0.1/√in)²),
/// base weights Kaiming-uniform `U(±1/√in)`, spline scales 1.
pub fn kan_init(in_dim: usize, out_dim: usize, intervals: usize, degree: usize, rng: &mut Rng) -> Result<KanLayerParams> {
    if in_dim == 0 || out_dim == 0 {
        return Err(contract("KAN dims must be >= 1"));
    }
    let grid = SplineGrid::new(degree, intervals, (-1.0, 1.0))?;
    let nb = grid.num_basis();
    let coeff_std = 0.1 / (in_dim as f64).sqrt();
    let spline_coeffs = Tensor::randn(&[out_dim, in_dim, nb], coeff_std, rng).with_grad();
    let bound = 1.0 / (in_dim as f64).sqrt();
    let mut base_weight = Tensor::zeros(&[out_dim, in_dim]).with_grad();
    base_weight.data_mut().iter_mut().for_each(|w| *w = rng.range(-bound, bound));
    let spline_scale = Tensor::filled(&[out_dim, in_dim], 1.0).with_grad();
    Ok(KanLayerParams { in_dim, out_dim, grid, spline_coeffs, base_weight, spline_scale, use_base: true })
}

/// Evaluates the layer on a plain `[N, in_dim]` tensor.
pub fn kan_forward(x: &Tensor, params: &KanLayerParams) -> Result<Tensor> {
    params.validate()?;
    if x.shape().len() != 2 || x.shape()[1] != params.in_dim {
        return Err(contract(format!("KAN input must be [N, {}], got {:?}", params.in_dim, x.shape())));
    }
    if !x.is_finite() {
        return Err(contract("KAN input must be finite"));
    }
    let g = Graph::new();
    let xv = g.constant(x.shape(), x.data().to_vec());
    let vars = params.bind(&g);
    Ok(params.forward(xv, &vars)?.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook recursive Cox–de Boor with half-open spans and 0/0 := 0.
    fn oracle(i: usize, p: usize, x: f64, t: &[f64]) -> f64 {
        if p == 0 {
            return if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = t[i + p] - t[i];
        if d1 != 0.0 {
            v += (x - t[i]) / d1 * oracle(i, p - 1, x, t);
        }
        let d2 = t[i + p + 1] - t[i + 1];
        if d2 != 0.0 {
            v += (t[i + p + 1] - x) / d2 * oracle(i + 1, p - 1, x, t);
        }
        v
    }

    #[test]
    fn knot_count_and_basis_count() {
        let g = SplineGrid::new(3, 5, (-1.0, 1.0)).unwrap();
        assert_eq!(g.knots().len(), 5 + 2 * 3 + 1);
        assert_eq!(g.num_basis(), 8);
        assert!(SplineGrid::new(0, 5, (-1.0, 1.0)).is_err());
        assert!(SplineGrid::new(1, 0, (-1.0, 1.0)).is_err());
    }

    #[test]
    fn degree_one_at_knot() {
        let g = SplineGrid::new(1, 2, (0.0, 1.0)).unwrap();
        let b = bspline_basis(0.5, &g);
        assert_eq!(b.len(), 3);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // the hat centred on the knot carries all the mass; its neighbours none
        assert!((b[1] - 1.0).abs() < 1e-12 && b[0].abs() < 1e-12 && b[2].abs() < 1e-12);
        let b = bspline_basis(0.25, &g);
        assert!((b[0] - 0.5).abs() < 1e-12 && (b[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cubic_matches_recursive_oracle() {
        let g = SplineGrid::new(3, 5, (-1.0, 1.0)).unwrap();
        let b = bspline_basis(0.3, &g);
        for (i, v) in b.iter().enumerate() {
            assert!((v - oracle(i, 3, 0.3, g.knots())).abs() < 1e-12, "basis {i}");
        }
    }

    #[test]
    fn clamping_outside_range() {
        let g = SplineGrid::new(2, 4, (-1.0, 1.0)).unwrap();
        assert_eq!(bspline_basis(5.0, &g), bspline_basis(1.0, &g));
        assert_eq!(bspline_basis(-7.0, &g), bspline_basis(-1.0, &g));
        let (_, d) = g.basis_with_derivative(3.0);
        assert!(d.iter().all(|v| *v == 0.0));
        let b = bspline_basis(1.0, &g);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn derivative_matches_difference_quotient() {
        let g = SplineGrid::new(3, 5, (-1.0, 1.0)).unwrap();
        let x = 0.137;
        let (_, d) = g.basis_with_derivative(x);
        let (bp, bm) = (bspline_basis(x + 1e-6, &g), bspline_basis(x - 1e-6, &g));
        for i in 0..d.len() {
            assert!((d[i] - (bp[i] - bm[i]) / 2e-6).abs() < 1e-6);
        }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = kan_init(16, 16, 5, 3, &mut Rng::new(9)).unwrap();
        let b = kan_init(16, 16, 5, 3, &mut Rng::new(9)).unwrap();
        assert_eq!(a.spline_coeffs.shape(), &[16, 16, 8]);
        assert_eq!(a, b);
        assert!(a.spline_scale.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let p = kan_init(3, 2, 5, 3, &mut Rng::new(1)).unwrap();
        assert!(kan_forward(&Tensor::zeros(&[4, 2]), &p).is_err());
        assert!(kan_forward(&Tensor::zeros(&[4]), &p).is_err());
        assert_eq!(kan_forward(&Tensor::zeros(&[4, 3]), &p).unwrap().shape(), &[4, 2]);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = kan_init(3, 2, 5, 3, &mut Rng::new(1)).unwrap().zeroed();
        let mut rng = Rng::new(2);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        assert!(kan_forward(&x, &p).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn degree_one_reproduces_identity() {
        // Hat-function coefficients at the knot abscissae (Greville points
        // for p = 1) reproduce f(t) = t exactly.
        let mut p = kan_init(1, 1, 4, 1, &mut Rng::new(3)).unwrap();
        p.use_base = false;
        let knots = p.grid.knots().to_vec();
        let coeffs: Vec<f64> = (0..p.grid.num_basis()).map(|b| knots[b + 1]).collect();
        p.spline_coeffs.data_mut().copy_from_slice(&coeffs);
        let xs: Vec<f64> = (0..41).map(|i| -1.0 + i as f64 * 0.05).collect();
        let x = Tensor::new(&[xs.len(), 1], xs.clone()).unwrap();
        let y = kan_forward(&x, &p).unwrap();
        for (a, b) in xs.iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
