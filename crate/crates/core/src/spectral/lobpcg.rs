//! Block preconditioned conjugate-gradient eigensolver for symmetric
//! pencils `A v = θ B v` on the subspace L²-orthogonal to a set of
//! constraint fields.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{GprgError, Result};
use crate::grid::Field;

/// Relative cutoff below which Gram-matrix directions are discarded.
const GRAM_CUTOFF: f64 = 1e-12;
/// Images `A X`, `B X` are recomputed from scratch this often.
const REFRESH_EVERY: usize = 25;

pub struct Pencil<'a> {
    pub apply_a: &'a dyn Fn(&Field) -> Field,
    /// `None` means `B = I`.
    pub apply_b: Option<&'a dyn Fn(&Field) -> Field>,
    pub precond: &'a dyn Fn(&Field) -> Result<Field>,
    /// `|s|` when `A = A₀ − s I`; adds `|s| ‖x‖` to the residual scale.
    pub shift: f64,
}

#[derive(Debug, Clone)]
pub struct LobpcgOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Target the largest eigenvalues instead of the smallest.
    pub largest: bool,
}

impl Default for LobpcgOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 500,
            largest: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LobpcgResult {
    /// Ascending for smallest, descending for largest.
    pub values: Vec<f64>,
    /// `B`-normalized.
    pub vectors: Vec<Field>,
    /// `‖A x − θ B x‖ / (‖A x‖ + |s| ‖x‖ + |θ| ‖B x‖)` per returned pair.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// Whether every returned pair met the tolerance.
    pub converged: bool,
}

/// L²-orthogonal projector onto the complement of `span(constraints)`.
pub struct Deflation {
    basis: Vec<Field>,
}

impl Deflation {
    pub fn new(constraints: &[Field]) -> Self {
        let mut basis: Vec<Field> = Vec::new();
        for c in constraints {
            let mut w = c.clone();
            for _ in 0..2 {
                for q in &basis {
                    w.axpy(-q.inner_l2(&w), q);
                }
            }
            let n = w.norm_l2();
            if n > 1e-10 * c.norm_l2() && n > 0.0 {
                basis.push(w.scaled(1.0 / n));
            }
        }
        Self { basis }
    }

    /// Number of independent constraint directions.
    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn project(&self, v: &Field) -> Field {
        let mut w = v.clone();
        // twice is enough
        for _ in 0..2 {
            for q in &self.basis {
                w.axpy(-q.inner_l2(&w), q);
            }
        }
        w
    }

    /// Largest `|(v, q)|/‖v‖` over the constraint directions.
    pub fn violation(&self, v: &Field) -> f64 {
        let n = v.norm_l2();
        self.basis
            .iter()
            .map(|q| q.inner_l2(v).abs() / n)
            .fold(0.0, f64::max)
    }
}

fn gram(left: &[Field], right: &[Field]) -> DMatrix<f64> {
    DMatrix::from_fn(left.len(), right.len(), |i, j| left[i].inner_l2(&right[j]))
}

fn symmetric_gram(vs: &[Field], images: &[Field]) -> DMatrix<f64> {
    let n = vs.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = 0.5 * (vs[i].inner_l2(&images[j]) + vs[j].inner_l2(&images[i]));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

fn combine(fields: &[Field], coeffs: &DMatrix<f64>, col: usize) -> Field {
    let mut out = Field::zeros(fields[0].grid());
    for (k, f) in fields.iter().enumerate() {
        let c = coeffs[(k, col)];
        if c != 0.0 {
            out.axpy(c, f);
        }
    }
    out
}

/// Rayleigh–Ritz on `span(S)`: returns Ritz values (ascending) and
/// coefficient vectors, after discarding numerically dependent directions.
fn rayleigh_ritz(ga: &DMatrix<f64>, gb: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = gb.nrows();
    // unit B-diagonal first
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let g = gb[(i, i)];
            if g > 0.0 {
                1.0 / g.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let gb = DMatrix::from_fn(n, n, |i, j| gb[(i, j)] * d[i] * d[j]);
    let ga = DMatrix::from_fn(n, n, |i, j| ga[(i, j)] * d[i] * d[j]);
    let eig_b = SymmetricEigen::new(gb);
    let top = eig_b.eigenvalues.max();
    if !(top > 0.0) {
        return Err(GprgError::NotCoercive {
            detail: "eigensolver metric is not positive on the search space".into(),
        });
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&k| eig_b.eigenvalues[k] > GRAM_CUTOFF * top)
        .collect();
    let t = DMatrix::from_fn(n, keep.len(), |r, c| {
        eig_b.eigenvectors[(r, keep[c])] / eig_b.eigenvalues[keep[c]].sqrt()
    });
    let c = t.transpose() * ga * &t;
    let eig = SymmetricEigen::new(0.5 * (&c + c.transpose()));
    let mut order: Vec<usize> = (0..keep.len()).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = DMatrix::from_fn(keep.len(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    let scaled = DMatrix::from_fn(n, keep.len(), |r, c| t[(r, c)] * d[r]);
    Ok((values, scaled * vecs))
}

/// Computes `k` extreme eigenpairs with a block of `initial.len()` vectors.
/// Hitting the iteration cap is not an error; see `converged`.
pub fn lobpcg(
    pencil: &Pencil<'_>,
    deflation: &Deflation,
    initial: Vec<Field>,
    k: usize,
    opts: &LobpcgOptions,
) -> Result<LobpcgResult> {
    let m = initial.len();
    if k == 0 || m < k {
        return Err(GprgError::InvalidArgument(format!(
            "block of {m} vectors cannot deliver {k} eigenpairs"
        )));
    }
    let sign = if opts.largest { -1.0 } else { 1.0 };
    let apply_a = |v: &Field| {
        let mut out = deflation.project(&(pencil.apply_a)(v));
        if sign < 0.0 {
            out.scale(-1.0);
        }
        out
    };
    let apply_b = |v: &Field| match pencil.apply_b {
        Some(b) => deflation.project(&b(v)),
        None => v.clone(),
    };

    let mut x: Vec<Field> = initial.iter().map(|v| deflation.project(v)).collect();
    let mut ax: Vec<Field> = x.iter().map(&apply_a).collect();
    let mut bx: Vec<Field> = x.iter().map(&apply_b).collect();
    let (theta0, coef) = rayleigh_ritz(&symmetric_gram(&x, &ax), &symmetric_gram(&x, &bx))?;
    if theta0.len() < m {
        return Err(GprgError::InvalidArgument(
            "initial block is linearly dependent after deflation".into(),
        ));
    }
    let rotate = |fs: &[Field], c: &DMatrix<f64>| -> Vec<Field> {
        (0..c.ncols()).map(|j| combine(fs, c, j)).collect()
    };
    x = rotate(&x, &coef);
    ax = rotate(&ax, &coef);
    bx = rotate(&bx, &coef);
    let mut theta = theta0;
    let mut p: Vec<Field> = Vec::new();
    let mut ap: Vec<Field> = Vec::new();
    let mut bp: Vec<Field> = Vec::new();
    let mut residuals = vec![f64::INFINITY; m];

    for iter in 0..opts.max_iters {
        let mut r = Vec::with_capacity(m);
        for j in 0..m {
            let res = ax[j].lin_comb(1.0, &bx[j], -theta[j]);
            let scale = ax[j].norm_l2()
                + pencil.shift.abs() * x[j].norm_l2()
                + theta[j].abs() * bx[j].norm_l2();
            residuals[j] = res.norm_l2() / scale.max(f64::MIN_POSITIVE);
            r.push(res);
        }
        log::debug!(
            "lobpcg iter {iter}: theta = {:?}, worst residual {:.3e}",
            &theta[..k].iter().map(|t| sign * t).collect::<Vec<_>>(),
            residuals[..k].iter().cloned().fold(0.0, f64::max)
        );
        if residuals[..k].iter().all(|&res| res <= opts.tol) {
            return Ok(finish(sign, theta, x, residuals, k, iter, true));
        }
        // preconditioned residuals of the unconverged vectors
        let mut w = Vec::new();
        for j in 0..m {
            if residuals[j] <= opts.tol && j < k {
                continue;
            }
            let t = deflation.project(&(pencil.precond)(&r[j])?);
            let n = t.norm_l2();
            if n > 0.0 && n.is_finite() {
                w.push(t.scaled(1.0 / n));
            }
        }
        if w.is_empty() {
            return Ok(finish(sign, theta, x, residuals, k, iter, false));
        }
        let aw: Vec<Field> = w.iter().map(&apply_a).collect();
        let bw: Vec<Field> = w.iter().map(&apply_b).collect();

        let mut s: Vec<Field> = x.clone();
        let mut as_: Vec<Field> = ax.clone();
        let mut bs: Vec<Field> = bx.clone();
        s.extend(w.iter().cloned());
        as_.extend(aw);
        bs.extend(bw);
        let base = s.len();
        s.extend(p.iter().cloned());
        as_.extend(ap.iter().cloned());
        bs.extend(bp.iter().cloned());
        let (mut values, mut coef) =
            rayleigh_ritz(&symmetric_gram(&s, &as_), &symmetric_gram(&s, &bs))?;
        if values.len() < m && s.len() > base {
            // restart without the search directions
            s.truncate(base);
            as_.truncate(base);
            bs.truncate(base);
            (values, coef) = rayleigh_ritz(&symmetric_gram(&s, &as_), &symmetric_gram(&s, &bs))?;
        }
        if values.len() < m {
            return Err(GprgError::EigenNotConverged {
                iterations: iter,
                residual: residuals[..k].iter().cloned().fold(0.0, f64::max),
            });
        }
        let c = coef.columns(0, m).into_owned();
        let mut c_dir = c.clone();
        c_dir.rows_mut(0, m).fill(0.0);
        let new_x = rotate(&s, &c);
        let new_ax = rotate(&as_, &c);
        let new_bx = rotate(&bs, &c);
        p = rotate(&s, &c_dir);
        ap = rotate(&as_, &c_dir);
        bp = rotate(&bs, &c_dir);
        // normalize directions to keep the Gram matrices well scaled
        for j in 0..p.len() {
            let n = p[j].norm_l2();
            if n > 0.0 {
                p[j].scale(1.0 / n);
                ap[j].scale(1.0 / n);
                bp[j].scale(1.0 / n);
            }
        }
        x = new_x;
        ax = new_ax;
        bx = new_bx;
        theta = values[..m].to_vec();
        if (iter + 1) % REFRESH_EVERY == 0 {
            x = x.iter().map(|v| deflation.project(v)).collect();
            ax = x.iter().map(&apply_a).collect();
            bx = x.iter().map(&apply_b).collect();
            let (t, c) = rayleigh_ritz(&symmetric_gram(&x, &ax), &symmetric_gram(&x, &bx))?;
            x = rotate(&x, &c);
            ax = rotate(&ax, &c);
            bx = rotate(&bx, &c);
            theta = t;
        }
    }
    // residuals of the final iterate
    for j in 0..m {
        let res = ax[j].lin_comb(1.0, &bx[j], -theta[j]);
        let scale = ax[j].norm_l2()
            + pencil.shift.abs() * x[j].norm_l2()
            + theta[j].abs() * bx[j].norm_l2();
        residuals[j] = res.norm_l2() / scale.max(f64::MIN_POSITIVE);
    }
    let converged = residuals[..k].iter().all(|&res| res <= opts.tol);
    Ok(finish(sign, theta, x, residuals, k, opts.max_iters, converged))
}

fn finish(
    sign: f64,
    theta: Vec<f64>,
    x: Vec<Field>,
    residuals: Vec<f64>,
    k: usize,
    iterations: usize,
    converged: bool,
) -> LobpcgResult {
    LobpcgResult {
        values: theta[..k].iter().map(|t| sign * t).collect(),
        vectors: x.into_iter().take(k).collect(),
        residuals: residuals[..k].to_vec(),
        iterations,
        converged,
    }
}

/// Cross Gram matrix, exposed for principal-angle computations.
pub(crate) fn cross_gram(left: &[Field], right: &[Field]) -> DMatrix<f64> {
    gram(left, right)
}
