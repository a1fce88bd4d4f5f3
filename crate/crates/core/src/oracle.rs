//! Brute-force truth sources for tests: finite-difference derivatives of
//! `E` and dense real matrices assembled entry by entry from the stencil
//! formulas on tiny grids.
//!
//! Complex fields are paired as real vectors `(Re u, Im u)` stacked, so a
//! grid with `N` points gives dimension `2N`. Every operator `A` is stored
//! as the matrix of its action; the symmetric form is `M A` with the
//! diagonal mass matrix `M`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{GprgError, Result};
use crate::grid::Field;
use crate::operators::OperatorSet;
use crate::precond::{PreconditionerKind, PreconditionerSpec};
use crate::stencil;

/// Largest `n_r · n_theta` accepted by [`assemble_dense`].
pub const MAX_DENSE_POINTS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdOrder {
    First,
    Second,
}

/// Central finite difference of `E` along `v`.
pub fn fd_directional(ops: &OperatorSet, state: &Field, v: &Field, h: f64, order: FdOrder) -> f64 {
    if v.values().iter().all(|z| *z == Complex64::new(0.0, 0.0)) {
        return 0.0;
    }
    let plus = ops.energy(&state.lin_comb(1.0, v, h));
    let minus = ops.energy(&state.lin_comb(1.0, v, -h));
    match order {
        FdOrder::First => (plus - minus) / (2.0 * h),
        FdOrder::Second => (plus - 2.0 * ops.energy(state) + minus) / (h * h),
    }
}

/// Dense real representations of the discrete operators at one state.
#[derive(Debug, Clone)]
pub struct DenseSystem {
    /// Number of grid points `N`; matrices are `2N × 2N`.
    pub points: usize,
    /// Diagonal of the mass matrix (weights duplicated for Re and Im).
    pub mass: DVector<f64>,
    pub h0: DMatrix<f64>,
    pub h_phi: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    pub lambda_tilde: f64,
    pub precond: Option<DMatrix<f64>>,
}

pub fn to_real(u: &Field) -> DVector<f64> {
    let n = u.values().len();
    DVector::from_fn(2 * n, |k, _| {
        if k < n {
            u.values()[k].re
        } else {
            u.values()[k - n].im
        }
    })
}

pub fn from_real(like: &Field, x: &DVector<f64>) -> Field {
    let n = like.values().len();
    let values = (0..n).map(|k| Complex64::new(x[k], x[k + n])).collect();
    Field::from_values(like.grid(), values).expect("length matches")
}

/// Assembles `M`, `H₀`, `H_φ`, `E″(φ)` and optionally a preconditioner.
pub fn assemble_dense(
    ops: &OperatorSet,
    state: &Field,
    spec: Option<&PreconditionerSpec>,
) -> Result<DenseSystem> {
    let g = ops.grid();
    let (n_r, n_t) = (g.n_r(), g.n_theta());
    let n = n_r * n_t;
    if n > MAX_DENSE_POINTS {
        return Err(GprgError::InvalidArgument(format!(
            "dense assembly limited to {MAX_DENSE_POINTS} points, grid has {n}"
        )));
    }
    let (h, ht) = (g.h_r(), g.h_theta());
    let idx = |i: usize, j: i64| i * n_t + j.rem_euclid(n_t as i64) as usize;

    // Complex-linear scalar parts: Laplacian L and angular derivative D.
    let mut lap = DMatrix::<f64>::zeros(n, n);
    let mut d1 = DMatrix::<f64>::zeros(n, n);
    for i in 0..n_r {
        let r = (i as f64 + 0.5) * h;
        let (f_in, f_out) = (i as f64 * h, (i + 1) as f64 * h);
        for j in 0..n_t as i64 {
            let row = idx(i, j);
            lap[(row, row)] -= (f_in + f_out) / (h * h * r);
            if i + 1 < n_r {
                lap[(row, idx(i + 1, j))] += f_out / (h * h * r);
            }
            if i > 0 {
                lap[(row, idx(i - 1, j))] += f_in / (h * h * r);
            }
            let ang = 1.0 / (r * r * ht * ht);
            lap[(row, row)] += ang * stencil::SECOND_CENTER;
            for (k, (&c2, &c1)) in stencil::SECOND.iter().zip(&stencil::FIRST).enumerate() {
                let k = k as i64 + 1;
                lap[(row, idx(i, j + k))] += ang * c2;
                lap[(row, idx(i, j - k))] += ang * c2;
                d1[(row, idx(i, j + k))] += c1 / ht;
                d1[(row, idx(i, j - k))] -= c1 / ht;
            }
        }
    }
    let potential = ops.potential();
    let omega = ops.omega();
    let eta = ops.eta();
    let values = state.values();

    // real block assembly: [[A, −B], [B, A]] for a complex-linear A + iB
    let complex_linear = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        let mut m = DMatrix::<f64>::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(a);
        m.view_mut((n, n), (n, n)).copy_from(a);
        m.view_mut((0, n), (n, n)).copy_from(&(-b));
        m.view_mut((n, 0), (n, n)).copy_from(b);
        m
    };
    let mut kinetic_v = &lap * -0.5;
    for k in 0..n {
        kinetic_v[(k, k)] += potential[k / n_t];
    }
    // −Ω L_z = iΩ ∂_Θ
    let rot = &d1 * omega;
    let zero = DMatrix::<f64>::zeros(n, n);
    let p1_base = complex_linear(&kinetic_v, &zero);
    let h0 = complex_linear(&kinetic_v, &rot);
    let mut h_phi = h0.clone();
    let mut hessian = h0.clone();
    for (k, p) in values.iter().enumerate() {
        let rho = eta * p.norm_sqr();
        h_phi[(k, k)] += rho;
        h_phi[(k + n, k + n)] += rho;
        // η(|φ|²u + φ²ū): φ² = a + ib acts on (x, y) as [[a, b], [b, −a]]
        let sq = *p * *p * eta;
        hessian[(k, k)] += 2.0 * rho + sq.re;
        hessian[(k + n, k + n)] += 2.0 * rho - sq.re;
        hessian[(k, k + n)] += sq.im;
        hessian[(k + n, k)] += sq.im;
    }
    let mass = DVector::from_fn(2 * n, |k, _| g.weight((k % n) / n_t));
    let phi = to_real(state);
    let lambda_tilde = (&h_phi * &phi).component_mul(&mass).dot(&phi);

    let precond = spec.map(|s| {
        let mut m = match s.kind {
            PreconditionerKind::P1 => p1_base.clone(),
            PreconditionerKind::P2 => h0.clone(),
            PreconditionerKind::P3 => h_phi.clone(),
            PreconditionerKind::P4 => {
                let mut m = hessian.clone();
                for k in 0..2 * n {
                    m[(k, k)] += s.sigma0 - lambda_tilde;
                }
                m
            }
        };
        if s.kind != PreconditionerKind::P4 {
            for k in 0..2 * n {
                m[(k, k)] += s.shift_a;
            }
        }
        m
    });
    Ok(DenseSystem {
        points: n,
        mass,
        h0,
        h_phi,
        hessian,
        lambda_tilde,
        precond,
    })
}

impl DenseSystem {
    /// Symmetric form `M A`.
    pub fn form(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = a.clone();
        for (k, mut row) in out.row_iter_mut().enumerate() {
            row *= self.mass[k];
        }
        out
    }

    /// `‖F − Fᵀ‖_max / ‖F‖_max` of the form of `a`.
    pub fn asymmetry(&self, a: &DMatrix<f64>) -> f64 {
        let f = self.form(a);
        let scale = f.amax();
        (&f - f.transpose()).amax() / scale
    }

    pub fn apply(&self, a: &DMatrix<f64>, u: &Field) -> Field {
        from_real(u, &(a * to_real(u)))
    }

    pub fn solve(&self, a: &DMatrix<f64>, w: &Field) -> Result<Field> {
        let lu = a.clone().lu();
        let x = lu
            .solve(&to_real(w))
            .ok_or_else(|| GprgError::NotCoercive { detail: "singular dense matrix".into() })?;
        Ok(from_real(w, &x))
    }

    /// Eigenpairs of the generalized problem `(M A) v = θ (M B) v` on the
    /// subspace `M`-orthogonal to `constraints`; `b = None` means `B = I`.
    /// Eigenvalues ascending, eigenvectors `M B`-orthonormal.
    pub fn constrained_eigs(
        &self,
        a: &DMatrix<f64>,
        b: Option<&DMatrix<f64>>,
        constraints: &[Field],
    ) -> Result<Vec<(f64, Field)>> {
        let dim = 2 * self.points;
        let sqrt_m = self.mass.map(f64::sqrt);
        let scale = |f: &DMatrix<f64>| {
            // M^{-1/2} (M F) M^{-1/2} = M^{1/2} F M^{-1/2}
            let mut out = f.clone();
            for r in 0..dim {
                for c in 0..dim {
                    out[(r, c)] *= sqrt_m[r] / sqrt_m[c];
                }
            }
            0.5 * (&out + out.transpose())
        };
        let a_t = scale(a);
        let b_t = b.map(scale);
        let basis = complement_basis(
            &constraints
                .iter()
                .map(|c| to_real(c).component_mul(&sqrt_m))
                .collect::<Vec<_>>(),
            dim,
        );
        let ar = basis.transpose() * &a_t * &basis;
        let (values, vectors) = match b_t {
            None => {
                let eig = SymmetricEigen::new(0.5 * (&ar + ar.transpose()));
                (eig.eigenvalues, eig.eigenvectors)
            }
            Some(b_t) => {
                let br = basis.transpose() * &b_t * &basis;
                let chol = nalgebra::Cholesky::new(0.5 * (&br + br.transpose())).ok_or_else(|| {
                    GprgError::NotCoercive {
                        detail: "dense pencil metric is not positive definite".into(),
                    }
                })?;
                let l = chol.l();
                let l_inv = l
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| GprgError::NotCoercive { detail: "singular Cholesky factor".into() })?;
                let c = &l_inv * &ar * l_inv.transpose();
                let eig = SymmetricEigen::new(0.5 * (&c + c.transpose()));
                (eig.eigenvalues, l_inv.transpose() * eig.eigenvectors)
            }
        };
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&x, &y| values[x].total_cmp(&values[y]));
        let like = constraints
            .first()
            .ok_or_else(|| GprgError::InvalidArgument("at least one constraint required".into()))?;
        Ok(order
            .into_iter()
            .map(|k| {
                let w = &basis * vectors.column(k);
                let v = w.component_div(&sqrt_m);
                (values[k], from_real(like, &v))
            })
            .collect())
    }
}

/// Orthonormal basis of the Euclidean complement of `span(vectors)`, as the
/// eigenvectors of the complementary projector with eigenvalue one.
fn complement_basis(vectors: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    let mut q: Vec<DVector<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for _ in 0..2 {
            for u in &q {
                w -= u * u.dot(&w);
            }
        }
        let nrm = w.norm();
        if nrm > 1e-12 * v.norm() {
            q.push(w / nrm);
        }
    }
    let mut proj = DMatrix::<f64>::identity(dim, dim);
    for u in &q {
        proj -= u * u.transpose();
    }
    let eig = SymmetricEigen::new(proj);
    let keep: Vec<usize> = (0..dim).filter(|&k| eig.eigenvalues[k] > 0.5).collect();
    DMatrix::from_fn(dim, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])])
}
