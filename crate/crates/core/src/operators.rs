//! Strong-form collocation of the GP operators on the staggered polar grid:
//! second-order radial differences, eighth-order periodic angular
//! differences, pointwise potential and nonlinearity.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{GprgError, Result};
use crate::grid::{weighted_sum, Field, PolarGrid};
use crate::stencil;

/// External trapping potential `V(|x|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Potential {
    /// `V = |x|² / 2`
    #[default]
    Harmonic,
    /// Radial profile given at the radial nodes `r_{i+1/2}`.
    Radial(Vec<f64>),
}

/// Interaction nonlinearity `f(ρ)`. Only the cubic case `f(s) = ηs` is
/// implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
#[non_exhaustive]
pub enum Nonlinearity {
    #[default]
    Cubic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemParams {
    /// Rotation frequency Ω.
    pub omega: f64,
    /// Cubic coupling η.
    pub eta: f64,
    #[serde(default)]
    pub potential: Potential,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

impl ProblemParams {
    pub fn harmonic(omega: f64, eta: f64) -> Self {
        Self {
            omega,
            eta,
            potential: Potential::Harmonic,
            nonlinearity: Nonlinearity::Cubic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.omega.is_finite() || self.omega < 0.0 {
            return Err(GprgError::Config(format!(
                "problem.omega must be finite and non-negative, got {}",
                self.omega
            )));
        }
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(GprgError::Config(format!(
                "problem.eta must be finite and non-negative, got {}",
                self.eta
            )));
        }
        if let Potential::Radial(v) = &self.potential {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(GprgError::Config(
                    "problem.potential contains non-finite values".into(),
                ));
            }
        }
        if matches!(self.potential, Potential::Harmonic) && self.omega > 1.0 {
            log::warn!(
                "omega = {} exceeds the harmonic trap frequency; the energy is unbounded below",
                self.omega
            );
        }
        Ok(())
    }
}

/// Assembled operator stencils for one grid and one parameter set.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    grid: Arc<PolarGrid>,
    params: ProblemParams,
    /// Radial Laplacian coupling to row `i + 1` (face radius `r_{i+1}` over `h² r_{i+1/2}`).
    upper: Vec<f64>,
    /// Radial coupling to row `i − 1`. Zero at `i = 0`: the pole face has
    /// zero radius, so the antipodal ghost `u(r_{1/2}, Θ + π)` drops out.
    lower: Vec<f64>,
    diag: f64,
    inv_r2: Vec<f64>,
    potential: Vec<f64>,
}

/// Pointwise pieces entering a fused linear operator application.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct LinearTerms<'a> {
    pub rotation: bool,
    pub shift: f64,
    /// Extra real multiplier per node (e.g. `η|φ|²`).
    pub density: Option<&'a [f64]>,
}

/// Energy, chemical potential and residual of one state, sharing a single
/// application of `H_φ`.
#[derive(Debug, Clone)]
pub struct StateEval {
    pub h_phi_phi: Field,
    pub energy: f64,
    pub lambda_tilde: f64,
    pub residual_inf: f64,
}

impl OperatorSet {
    pub fn new(grid: Arc<PolarGrid>, params: ProblemParams) -> Result<Self> {
        params.validate()?;
        let h = grid.h_r();
        let r = grid.r_nodes();
        let n_r = grid.n_r();
        let upper = (0..n_r)
            .map(|i| grid.face_radius(i + 1) / (h * h * r[i]))
            .collect();
        let lower = (0..n_r)
            .map(|i| grid.face_radius(i) / (h * h * r[i]))
            .collect();
        let inv_r2 = r.iter().map(|r| 1.0 / (r * r)).collect();
        let potential = match &params.potential {
            Potential::Harmonic => r.iter().map(|r| 0.5 * r * r).collect(),
            Potential::Radial(v) => {
                if v.len() != n_r {
                    return Err(GprgError::Config(format!(
                        "radial potential has {} samples but the grid has {} radial nodes",
                        v.len(),
                        n_r
                    )));
                }
                v.clone()
            }
        };
        Ok(Self {
            grid,
            params,
            upper,
            lower,
            diag: -2.0 / (h * h),
            inv_r2,
            potential,
        })
    }

    pub fn grid(&self) -> &Arc<PolarGrid> {
        &self.grid
    }

    pub fn params(&self) -> &ProblemParams {
        &self.params
    }

    pub fn omega(&self) -> f64 {
        self.params.omega
    }

    pub fn eta(&self) -> f64 {
        self.params.eta
    }

    /// Potential sampled at the radial nodes.
    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    pub(crate) fn radial_bands(&self) -> (&[f64], &[f64], f64) {
        (&self.lower, &self.upper, self.diag)
    }

    pub(crate) fn inv_r2(&self) -> &[f64] {
        &self.inv_r2
    }

    fn check(&self, u: &Field) {
        assert!(
            **u.grid() == *self.grid,
            "field grid does not match operator grid"
        );
    }

    /// Discrete polar Laplacian `∂_rr u + r⁻¹ ∂_r u + r⁻² ∂_ΘΘ u`.
    pub fn apply_laplacian(&self, u: &Field) -> Field {
        self.check(u);
        let mut out = Field::zeros(&self.grid);
        self.for_each_row(u, &mut out, |_, radial, _, d2, inv_r2, _| radial + d2 * inv_r2);
        out
    }

    /// `L_z u = −i ∂_Θ u`.
    pub fn apply_lz(&self, u: &Field) -> Field {
        self.check(u);
        let mut out = Field::zeros(&self.grid);
        self.for_each_row(u, &mut out, |_, _, d1, _, _, _| Complex64::new(d1.im, -d1.re));
        out
    }

    /// `H₀ u = −½Δu + Vu − Ω L_z u`.
    pub fn apply_h0(&self, u: &Field) -> Field {
        self.apply_linear(
            u,
            LinearTerms {
                rotation: true,
                ..Default::default()
            },
        )
    }

    /// `H_φ u = H₀ u + f(|φ|²) u`.
    pub fn apply_h_phi(&self, state: &Field, u: &Field) -> Field {
        self.check(state);
        let dens = self.density(state);
        self.apply_linear(
            u,
            LinearTerms {
                rotation: true,
                shift: 0.0,
                density: Some(&dens),
            },
        )
    }

    /// `f(|φ|²)` at every node.
    pub fn density(&self, state: &Field) -> Vec<f64> {
        let eta = self.params.eta;
        state.values().iter().map(|z| eta * z.norm_sqr()).collect()
    }

    /// `E″(φ)u = H_φ u + f′(ρ)(|φ|² u + φ² ū)`; real-linear in `u` only.
    pub fn apply_hessian(&self, state: &Field, u: &Field) -> Field {
        self.apply_hessian_shifted(state, u, 0.0)
    }

    /// `E″(φ)u + shift · u`.
    pub fn apply_hessian_shifted(&self, state: &Field, u: &Field, shift: f64) -> Field {
        self.check(state);
        let eta = self.params.eta;
        let dens: Vec<f64> = state
            .values()
            .iter()
            .map(|z| 2.0 * eta * z.norm_sqr())
            .collect();
        let mut out = self.apply_linear(
            u,
            LinearTerms {
                rotation: true,
                shift,
                density: Some(&dens),
            },
        );
        if eta != 0.0 {
            for ((o, p), v) in out
                .values_mut()
                .iter_mut()
                .zip(state.values())
                .zip(u.values())
            {
                *o += p * p * v.conj() * eta;
            }
        }
        out
    }

    /// `E(φ) = ½[⟨H₀φ, φ⟩ + Σ w F(|φ|²)]` with `F(s) = ηs²/2`.
    pub fn energy(&self, state: &Field) -> f64 {
        let h0 = self.apply_h0(state);
        let quad = h0.inner_l2(state);
        0.5 * (quad + 0.5 * self.quartic(state))
    }

    /// `Σ w η|φ|⁴`.
    fn quartic(&self, state: &Field) -> f64 {
        let eta = self.params.eta;
        if eta == 0.0 {
            return 0.0;
        }
        let v = state.values();
        eta * weighted_sum(&self.grid, |_, k| v[k].norm_sqr().powi(2))
    }

    /// `E(a) − E(b)` evaluated from the difference `a − b`, which keeps full
    /// relative precision when the two states are close.
    pub fn energy_difference(&self, a: &Field, b: &Field) -> f64 {
        a.assert_same_grid(b);
        let diff = a.sub(b);
        let sum = a.add(b);
        let quad = self.apply_h0(&diff).inner_l2(&sum);
        let eta = self.params.eta;
        let (va, vb) = (a.values(), b.values());
        let quart = if eta == 0.0 {
            0.0
        } else {
            eta * weighted_sum(&self.grid, |_, k| {
                let (pa, pb) = (va[k].norm_sqr(), vb[k].norm_sqr());
                (pa - pb) * (pa + pb)
            })
        };
        0.5 * (quad + 0.5 * quart)
    }

    /// Energy along the normalized line `τ ↦ (φ + τv)/‖φ + τv‖`, reduced to
    /// a handful of moments so that every evaluation is O(1).
    pub fn energy_curve(&self, state: &Field, v: &Field) -> EnergyCurve {
        state.assert_same_grid(v);
        let h0_phi = self.apply_h0(state);
        let h0_v = self.apply_h0(v);
        let eta = self.params.eta;
        let (p, d) = (state.values(), v.values());
        let moment = |f: &dyn Fn(f64, f64, f64) -> f64| {
            weighted_sum(&self.grid, |_, k| {
                let s0 = p[k].norm_sqr();
                let s1 = (p[k].conj() * d[k]).re;
                let s2 = d[k].norm_sqr();
                f(s0, s1, s2)
            })
        };
        let quartic = if eta == 0.0 {
            [0.0; 5]
        } else {
            [
                eta * moment(&|s0, _, _| s0 * s0),
                eta * moment(&|s0, s1, _| s0 * s1),
                eta * moment(&|s0, s1, s2| 4.0 * s1 * s1 + 2.0 * s0 * s2),
                eta * moment(&|_, s1, s2| s1 * s2),
                eta * moment(&|_, _, s2| s2 * s2),
            ]
        };
        EnergyCurve {
            norm: [state.inner_l2(state), state.inner_l2(v), v.inner_l2(v)],
            quad: [h0_phi.inner_l2(state), h0_phi.inner_l2(v), h0_v.inner_l2(v)],
            quartic,
        }
    }

    /// `E′(φ) = H_φ φ`.
    pub fn euclidean_gradient(&self, state: &Field) -> Field {
        self.apply_h_phi(state, state)
    }

    /// `λ̃_φ = ⟨H_φ φ, φ⟩`.
    pub fn lambda_tilde(&self, state: &Field) -> f64 {
        warn_if_not_normalized(state);
        self.euclidean_gradient(state).inner_l2(state)
    }

    /// `max |H_φ φ − λ̃_φ φ|` over the grid nodes.
    pub fn residual_inf(&self, state: &Field) -> f64 {
        self.evaluate(state).residual_inf
    }

    /// Energy, `λ̃`, residual and `H_φ φ` from a single stencil pass.
    pub fn evaluate(&self, state: &Field) -> StateEval {
        let h0 = self.apply_h0(state);
        self.evaluate_with_h0(state, h0)
    }

    /// As [`evaluate`](Self::evaluate), reusing a precomputed `H₀ φ`.
    pub fn evaluate_with_h0(&self, state: &Field, h0: Field) -> StateEval {
        warn_if_not_normalized(state);
        let quad = h0.inner_l2(state);
        let quart = self.quartic(state);
        let mut h_phi_phi = h0;
        let eta = self.params.eta;
        if eta != 0.0 {
            for (o, p) in h_phi_phi.values_mut().iter_mut().zip(state.values()) {
                *o += p * (eta * p.norm_sqr());
            }
        }
        let lambda_tilde = quad + quart;
        let residual_inf = h_phi_phi
            .values()
            .iter()
            .zip(state.values())
            .map(|(h, p)| (h - p * lambda_tilde).norm())
            .fold(0.0, f64::max);
        StateEval {
            h_phi_phi,
            energy: 0.5 * (quad + 0.5 * quart),
            lambda_tilde,
            residual_inf,
        }
    }

    /// Fused `−½Δu + (V + shift + density)u [− Ω L_z u]`.
    pub(crate) fn apply_linear(&self, u: &Field, terms: LinearTerms<'_>) -> Field {
        self.check(u);
        let mut out = Field::zeros(&self.grid);
        let omega = if terms.rotation { self.params.omega } else { 0.0 };
        let n_t = self.grid.n_theta();
        let potential = &self.potential;
        self.for_each_row(u, &mut out, |k, radial, d1, d2, inv_r2, uv| {
            let i = k / n_t;
            let mut diag = potential[i] + terms.shift;
            if let Some(d) = terms.density {
                diag += d[k];
            }
            // −Ω L_z u = iΩ ∂_Θ u
            (radial + d2 * inv_r2) * (-0.5) + uv * diag + Complex64::new(-d1.im, d1.re) * omega
        });
        out
    }

    /// Evaluates radial second difference, angular first and second
    /// derivatives row by row and hands them to `combine`, whose result is
    /// stored in `out`. Arguments: flat index, radial part, `∂_Θ u`,
    /// `∂_ΘΘ u`, `1/r²`, `u`.
    fn for_each_row<F>(&self, u: &Field, out: &mut Field, combine: F)
    where
        F: Fn(usize, Complex64, Complex64, Complex64, f64, Complex64) -> Complex64,
    {
        let g = &*self.grid;
        let (n_r, n_t) = (g.n_r(), g.n_theta());
        let ht = g.h_theta();
        let (inv_h1, inv_h2) = (1.0 / ht, 1.0 / (ht * ht));
        let w = stencil::HALF_WIDTH;
        let zero = Complex64::new(0.0, 0.0);
        let mut pad = vec![zero; n_t + 2 * w];
        let vals = u.values();
        let outv = out.values_mut();
        for i in 0..n_r {
            let row = &vals[i * n_t..(i + 1) * n_t];
            pad[w..w + n_t].copy_from_slice(row);
            for s in 0..w {
                pad[s] = row[n_t - w + s];
                pad[w + n_t + s] = row[s];
            }
            let up = (i + 1 < n_r).then(|| &vals[(i + 1) * n_t..(i + 2) * n_t]);
            let down = (i > 0).then(|| &vals[(i - 1) * n_t..i * n_t]);
            let (a, c) = (self.upper[i], self.lower[i]);
            let inv_r2 = self.inv_r2[i];
            for j in 0..n_t {
                let centre = pad[w + j];
                let mut radial = centre * self.diag;
                if let Some(up) = up {
                    radial += up[j] * a;
                }
                if let Some(down) = down {
                    radial += down[j] * c;
                }
                let mut d1 = zero;
                let mut d2 = centre * stencil::SECOND_CENTER;
                for s in 0..w {
                    let (p, m) = (pad[w + j + s + 1], pad[w + j - s - 1]);
                    d1 += (p - m) * stencil::FIRST[s];
                    d2 += (p + m) * stencil::SECOND[s];
                }
                let k = i * n_t + j;
                outv[k] = combine(k, radial, d1 * inv_h1, d2 * inv_h2, inv_r2, centre);
            }
        }
    }
}

fn warn_if_not_normalized(state: &Field) {
    if log::log_enabled!(log::Level::Debug) {
        let n = state.norm_l2();
        if (n - 1.0).abs() > 1e-10 {
            log::debug!("state is not L2-normalized (norm = {n:.15})");
        }
    }
}

/// Scalar model of `E` along a normalized line; see
/// [`OperatorSet::energy_curve`].
///
/// With `q(τ) = ‖φ + τv‖²`, `K(τ) = ⟨H₀(φ + τv), φ + τv⟩` and
/// `Q(τ) = Σ w η|φ + τv|⁴`, the energy is `½K/q + ¼Q/q²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyCurve {
    /// `(‖φ‖², (φ, v), ‖v‖²)`.
    norm: [f64; 3],
    /// `(⟨H₀φ, φ⟩, ⟨H₀φ, v⟩, ⟨H₀v, v⟩)`.
    quad: [f64; 3],
    /// `η Σ w` of `s0², s0 s1, 4s1² + 2s0 s2, s1 s2, s2²`.
    quartic: [f64; 5],
}

impl EnergyCurve {
    fn q_hat(&self, t: f64) -> f64 {
        t * (2.0 * self.norm[1] + t * self.norm[2])
    }

    fn k_hat(&self, t: f64) -> f64 {
        t * (2.0 * self.quad[1] + t * self.quad[2])
    }

    fn quartic_hat(&self, t: f64) -> f64 {
        let m = &self.quartic;
        t * (4.0 * m[1] + t * (m[2] + t * (4.0 * m[3] + t * m[4])))
    }

    /// `E` at `τ = 0` (of the normalized state).
    pub fn energy0(&self) -> f64 {
        let a = self.norm[0];
        0.5 * self.quad[0] / a + 0.25 * self.quartic[0] / (a * a)
    }

    pub fn energy(&self, t: f64) -> f64 {
        self.energy0() + self.change(t)
    }

    /// `E(τ) − E(0)` without cancellation between the two energies.
    pub fn change(&self, t: f64) -> f64 {
        let a = self.norm[0];
        let q_hat = self.q_hat(t);
        let q = a + q_hat;
        let lin = (a * self.k_hat(t) - self.quad[0] * q_hat) / (a * q);
        let quart =
            (a * a * self.quartic_hat(t) - self.quartic[0] * q_hat * (q + a)) / (a * a * q * q);
        0.5 * lin + 0.25 * quart
    }

    /// `dE/dτ`.
    pub fn slope(&self, t: f64) -> f64 {
        let (n, h, m) = (&self.norm, &self.quad, &self.quartic);
        let q = n[0] + self.q_hat(t);
        let dq = 2.0 * (n[1] + t * n[2]);
        let k = h[0] + self.k_hat(t);
        let dk = 2.0 * (h[1] + t * h[2]);
        let big_q = m[0] + self.quartic_hat(t);
        let d_big_q = 4.0 * m[1] + t * (2.0 * m[2] + t * (12.0 * m[3] + t * 4.0 * m[4]));
        0.5 * (dk * q - k * dq) / (q * q) + 0.25 * (d_big_q * q - 2.0 * big_q * dq) / (q * q * q)
    }
}
