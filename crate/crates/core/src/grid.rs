//! Staggered polar mesh, complex fields sampled on it, and the discrete
//! L² / H¹ structure (midpoint quadrature in r, periodic rule in Θ).

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{GprgError, Result};
use crate::stencil;

pub const MIN_N_R: usize = 4;
pub const MIN_N_THETA: usize = 16;

/// Staggered polar grid on the disk of radius `radius`.
///
/// Radial nodes sit at `r_{i+1/2} = (i + 1/2) h_r`, so neither the pole nor
/// the outer boundary is a node. Quadrature weights are `r_{i+1/2} h_r h_Θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarGrid {
    n_r: usize,
    n_theta: usize,
    radius: f64,
    h_r: f64,
    h_theta: f64,
    r_nodes: Vec<f64>,
    row_weights: Vec<f64>,
}

impl PolarGrid {
    pub fn new(n_r: usize, n_theta: usize, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(GprgError::Config(format!(
                "grid radius must be a positive finite number, got {radius}"
            )));
        }
        if n_r < MIN_N_R {
            return Err(GprgError::Config(format!(
                "n_r must be at least {MIN_N_R}, got {n_r}"
            )));
        }
        if n_theta < MIN_N_THETA || n_theta % 2 != 0 {
            return Err(GprgError::Config(format!(
                "n_theta must be even and at least {MIN_N_THETA}, got {n_theta}"
            )));
        }
        let h_r = radius / n_r as f64;
        let h_theta = 2.0 * PI / n_theta as f64;
        let r_nodes: Vec<f64> = (0..n_r).map(|i| (i as f64 + 0.5) * h_r).collect();
        let row_weights = r_nodes.iter().map(|r| r * h_r * h_theta).collect();
        Ok(Self {
            n_r,
            n_theta,
            radius,
            h_r,
            h_theta,
            r_nodes,
            row_weights,
        })
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn h_r(&self) -> f64 {
        self.h_r
    }

    pub fn h_theta(&self) -> f64 {
        self.h_theta
    }

    pub fn r_nodes(&self) -> &[f64] {
        &self.r_nodes
    }

    /// Quadrature weight shared by every node of radial row `i`.
    pub fn weight(&self, i: usize) -> f64 {
        self.row_weights[i]
    }

    pub fn row_weights(&self) -> &[f64] {
        &self.row_weights
    }

    pub fn theta(&self, j: usize) -> f64 {
        j as f64 * self.h_theta
    }

    /// Number of complex unknowns.
    pub fn len(&self) -> usize {
        self.n_r * self.n_theta
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n_theta + j
    }

    /// Radius of the face between rows `i − 1` and `i` (face 0 is the pole).
    pub fn face_radius(&self, i: usize) -> f64 {
        i as f64 * self.h_r
    }

    /// Sum of all quadrature weights (πR² up to round-off).
    pub fn total_weight(&self) -> f64 {
        let mut acc = NeumaierSum::default();
        for w in &self.row_weights {
            acc.add(w * self.n_theta as f64);
        }
        acc.value()
    }
}

/// Compensated summation (Neumaier's variant of Kahan).
#[derive(Debug, Default, Clone, Copy)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Weighted row sum `Σ_i w_i Σ_j g(i, j)` with compensated accumulation.
pub(crate) fn weighted_sum(grid: &PolarGrid, mut g: impl FnMut(usize, usize) -> f64) -> f64 {
    let mut total = NeumaierSum::default();
    for i in 0..grid.n_r {
        let mut row = NeumaierSum::default();
        for j in 0..grid.n_theta {
            row.add(g(i, grid.index(i, j)));
        }
        total.add(grid.row_weights[i] * row.value());
    }
    total.value()
}

/// Complex-valued sample on a [`PolarGrid`], stored row-major (`i` then `j`).
#[derive(Debug, Clone)]
pub struct Field {
    grid: Arc<PolarGrid>,
    values: Vec<Complex64>,
}

impl PartialEq for Field {
    fn eq(&self, other: &Self) -> bool {
        self.same_grid(other) && self.values == other.values
    }
}

impl Field {
    pub fn zeros(grid: &Arc<PolarGrid>) -> Self {
        Self {
            grid: Arc::clone(grid),
            values: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn from_values(grid: &Arc<PolarGrid>, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(GprgError::GridMismatch(format!(
                "expected {} values for a {}x{} grid, got {}",
                grid.len(),
                grid.n_r,
                grid.n_theta,
                values.len()
            )));
        }
        Ok(Self {
            grid: Arc::clone(grid),
            values,
        })
    }

    /// Samples `f(r, Θ)` at every node.
    pub fn from_fn(grid: &Arc<PolarGrid>, mut f: impl FnMut(f64, f64) -> Complex64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for &r in grid.r_nodes() {
            for j in 0..grid.n_theta {
                values.push(f(r, grid.theta(j)));
            }
        }
        Self {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn grid(&self) -> &Arc<PolarGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> Complex64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        let n = self.grid.n_theta;
        &self.values[i * n..(i + 1) * n]
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    pub(crate) fn assert_same_grid(&self, other: &Field) {
        assert!(
            self.same_grid(other),
            "fields live on different grids ({}x{} vs {}x{})",
            self.grid.n_r,
            self.grid.n_theta,
            other.grid.n_r,
            other.grid.n_theta
        );
    }

    /// Real L² inner product `Re Σ w u v̄`.
    pub fn inner_l2(&self, other: &Field) -> f64 {
        inner_l2(self, other)
    }

    pub fn norm_l2(&self) -> f64 {
        weighted_sum(&self.grid, |_, k| self.values[k].norm_sqr()).sqrt()
    }

    /// Largest pointwise modulus.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// `self += a · x`
    pub fn axpy(&mut self, a: f64, x: &Field) {
        self.assert_same_grid(x);
        for (y, x) in self.values.iter_mut().zip(&x.values) {
            *y += x * a;
        }
    }

    /// `self += a · x` for complex `a`.
    pub fn axpy_complex(&mut self, a: Complex64, x: &Field) {
        self.assert_same_grid(x);
        for (y, x) in self.values.iter_mut().zip(&x.values) {
            *y += x * a;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for y in &mut self.values {
            *y *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> Field {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// `a · self + b · other`
    pub fn lin_comb(&self, a: f64, other: &Field, b: f64) -> Field {
        self.assert_same_grid(other);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| x * a + y * b)
            .collect();
        Field {
            grid: Arc::clone(&self.grid),
            values,
        }
    }

    pub fn sub(&self, other: &Field) -> Field {
        self.lin_comb(1.0, other, -1.0)
    }

    pub fn add(&self, other: &Field) -> Field {
        self.lin_comb(1.0, other, 1.0)
    }

    /// Multiplication by the imaginary unit.
    pub fn times_i(&self) -> Field {
        self.map(|z| Complex64::new(-z.im, z.re))
    }

    /// Global phase shift `e^{iα} u`.
    pub fn with_phase(&self, alpha: f64) -> Field {
        let p = Complex64::from_polar(1.0, alpha);
        self.map(|z| z * p)
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Field {
        Field {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|&z| f(z)).collect(),
        }
    }

    /// Unit-L² copy; `None` for a (numerically) zero field.
    pub fn normalized(&self) -> Option<Field> {
        let n = self.norm_l2();
        (n > 0.0 && n.is_finite()).then(|| self.scaled(1.0 / n))
    }

    /// Discrete coordinate rotation: `out(i, j) = u(i, (j − k) mod n_Θ)`.
    pub fn rotate_by_index(&self, k: i64) -> Field {
        let n = self.grid.n_theta;
        let shift = k.rem_euclid(n as i64) as usize;
        let mut out = Field::zeros(&self.grid);
        for i in 0..self.grid.n_r {
            let src = self.row(i);
            let dst = &mut out.values[i * n..(i + 1) * n];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[(j + n - shift) % n];
            }
        }
        out
    }

    /// Transfers the field to another grid on the same disk: spectral in Θ
    /// (modes truncated or zero-padded), cubic Lagrange in r per angular
    /// mode with parity extension through the pole and odd reflection at
    /// the Dirichlet boundary.
    pub fn resample(&self, target: &Arc<PolarGrid>) -> Result<Field> {
        let src = self.grid.as_ref();
        if src.radius != target.radius {
            return Err(GprgError::GridMismatch(format!(
                "cannot resample from radius {} to radius {}",
                src.radius, target.radius
            )));
        }
        let (ns, nt) = (src.n_theta, target.n_theta);
        let mut planner = rustfft::FftPlanner::new();
        let fwd = planner.plan_fft_forward(ns);
        let inv = planner.plan_fft_inverse(nt);
        let mut spec = self.values.clone();
        for row in spec.chunks_exact_mut(ns) {
            fwd.process(row);
        }
        let keep = ns.min(nt) / 2;
        let modes: Vec<i64> = (-(keep as i64) + 1..keep as i64).collect();
        let slot = |m: i64, n: usize| m.rem_euclid(n as i64) as usize;
        let n_r = src.n_r as i64;
        let mut out = vec![Complex64::new(0.0, 0.0); target.len()];
        for (ti, &rho) in target.r_nodes.iter().enumerate() {
            let x = rho / src.h_r - 0.5;
            let i0 = x.floor() as i64;
            let t = x - i0 as f64;
            // cubic Lagrange weights on nodes i0-1 .. i0+2
            let w = [
                -t * (t - 1.0) * (t - 2.0) / 6.0,
                (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
                -(t + 1.0) * t * (t - 2.0) / 2.0,
                (t + 1.0) * t * (t - 1.0) / 6.0,
            ];
            let dst = &mut out[ti * nt..(ti + 1) * nt];
            for &m in &modes {
                let parity = if m % 2 == 0 { 1.0 } else { -1.0 };
                let value = |k: i64| -> Complex64 {
                    let (idx, sign) = if k < 0 {
                        (-1 - k, parity)
                    } else if k >= n_r {
                        (2 * n_r - 1 - k, -1.0)
                    } else {
                        (k, 1.0)
                    };
                    if !(0..n_r).contains(&idx) {
                        return Complex64::new(0.0, 0.0);
                    }
                    spec[idx as usize * ns + slot(m, ns)] * sign
                };
                let v: Complex64 = (0..4).map(|q| value(i0 - 1 + q as i64) * w[q]).sum();
                dst[slot(m, nt)] = v / ns as f64;
            }
        }
        for row in out.chunks_exact_mut(nt) {
            inv.process(row);
        }
        Field::from_values(target, out)
    }

    /// Discrete H¹ norm `sqrt(‖u‖² + ‖∇u‖²)`; the gradient part is the
    /// summation-by-parts form of the polar Laplacian stencils.
    pub fn norm_h1_discrete(&self) -> f64 {
        (self.norm_l2().powi(2) + gradient_energy(self)).sqrt()
    }
}

/// Real L² inner product `Re Σ_{ij} w_{ij} u_{ij} conj(v_{ij})`.
pub fn inner_l2(u: &Field, v: &Field) -> f64 {
    u.assert_same_grid(v);
    weighted_sum(&u.grid, |_, k| {
        let (a, b) = (u.values[k], v.values[k]);
        a.re * b.re + a.im * b.im
    })
}

/// `‖∇u‖²` as the quadratic form `⟨−Δ_h u, u⟩`: radial face differences
/// (the pole face has zero radius; the ghost row beyond R is zero) plus
/// the eighth-order angular form.
pub fn gradient_energy(u: &Field) -> f64 {
    let g = u.grid.as_ref();
    let (n_r, n_t) = (g.n_r, g.n_theta);
    let mut total = NeumaierSum::default();
    for i in 1..=n_r {
        let coef = g.face_radius(i) * g.h_theta / g.h_r;
        let mut row = NeumaierSum::default();
        for j in 0..n_t {
            let inner = if i < n_r {
                u.values[g.index(i, j)]
            } else {
                Complex64::new(0.0, 0.0)
            };
            row.add((inner - u.values[g.index(i - 1, j)]).norm_sqr());
        }
        total.add(coef * row.value());
    }
    let h2 = g.h_theta * g.h_theta;
    for i in 0..n_r {
        let coef = g.h_r * g.h_theta / (g.r_nodes[i] * h2);
        let row = u.row(i);
        let mut acc = NeumaierSum::default();
        for j in 0..n_t {
            let mut d2 = row[j] * stencil::SECOND_CENTER;
            for (k, e) in stencil::SECOND.iter().enumerate() {
                let s = k + 1;
                d2 += (row[(j + s) % n_t] + row[(j + n_t - s) % n_t]) * *e;
            }
            acc.add(-(row[j].re * d2.re + row[j].im * d2.im));
        }
        total.add(coef * acc.value());
    }
    total.value()
}
