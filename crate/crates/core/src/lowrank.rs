//! Algebra for the operator `A = I ⊗ x` (identity over colors, Kronecker with a
//! flattened template `x`). Vectors in the ambient space are `n_c` blocks of
//! length `|x|`, block `j` holding color channel `j`.

/// `u ⊗ x`: block `j` is `u[j] * x`.
pub fn kron(u: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(u.len() * x.len());
    for &uj in u {
        out.extend(x.iter().map(|v| uj * v));
    }
    out
}

/// `Aᵀ v`: inner product of each block of `v` with the template.
pub fn apply_adjoint(x: &[f64], v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(v.len() % x.len(), 0);
    v.chunks_exact(x.len())
        .map(|block| crate::points::dot(block, x))
        .collect()
}

/// `out += s * A c` for a color vector `c`.
pub fn add_apply(s: f64, x: &[f64], c: &[f64], out: &mut [f64]) {
    for (block, &cj) in out.chunks_exact_mut(x.len()).zip(c) {
        crate::points::axpy(s * cj, x, block);
    }
}

/// Woodbury coefficient `beta` with
/// `(alpha^2 var A Aᵀ + sigma_t^2 I)^{-1} = (I - beta A Aᵀ) / sigma_t^2`.
pub fn woodbury_beta(alpha: f64, sigma: f64, var: f64, template_norm_sq: f64) -> f64 {
    let a2v = alpha * alpha * var;
    a2v / (sigma * sigma + a2v * template_norm_sq)
}

/// `log det(alpha^2 var A Aᵀ + sigma_t^2 I)` for ambient dimension
/// `n_c * |x|`, computed through the rank-`n_c` identity.
pub fn log_det(alpha: f64, sigma: f64, var: f64, template_norm_sq: f64, n_c: usize, pixels: usize) -> f64 {
    let s2 = sigma * sigma;
    let n_c = n_c as f64;
    n_c * pixels as f64 * s2.ln() + n_c * (alpha * alpha * var * template_norm_sq / s2).ln_1p()
}
