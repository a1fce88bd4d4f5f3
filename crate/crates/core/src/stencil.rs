//! Eighth-order periodic central-difference stencils used in the angular
//! direction, together with their discrete Fourier symbols.

/// Half-width of the angular stencils.
pub const HALF_WIDTH: usize = 4;

/// Coefficients `c_k` of `u'(x) ≈ h⁻¹ Σ_k c_k (u_{j+k} − u_{j−k})`, k = 1..=4.
pub const FIRST: [f64; HALF_WIDTH] = [4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0];

/// Centre coefficient of the second-derivative stencil.
pub const SECOND_CENTER: f64 = -205.0 / 72.0;

/// Coefficients `e_k` of `u''(x) ≈ h⁻² (c₀ u_j + Σ_k e_k (u_{j+k} + u_{j−k}))`.
pub const SECOND: [f64; HALF_WIDTH] = [8.0 / 5.0, -1.0 / 5.0, 8.0 / 315.0, -1.0 / 560.0];

/// Signed angular wavenumber of FFT bin `k` on an `n`-point periodic grid.
pub fn wavenumber(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Real symbol of `−i ∂_Θ` (the discrete angular momentum) at wavenumber `m`.
pub fn first_symbol(m: f64, h: f64) -> f64 {
    2.0 * FIRST
        .iter()
        .enumerate()
        .map(|(k, c)| c * ((k + 1) as f64 * m * h).sin())
        .sum::<f64>()
        / h
}

/// Symbol of the discrete `∂_ΘΘ` at wavenumber `m` (non-positive).
pub fn second_symbol(m: f64, h: f64) -> f64 {
    (SECOND_CENTER
        + 2.0
            * SECOND
                .iter()
                .enumerate()
                .map(|(k, e)| e * ((k + 1) as f64 * m * h).cos())
                .sum::<f64>())
        / (h * h)
}
