//! Closed-form posterior-mean denoisers for Gaussian mixture models and the
//! Tweedie conversion from a denoiser to a score.
//!
//! All softmax weights are computed with the maximum logit subtracted first;
//! at small `sigma_t` the raw logits `-|.|^2 / (2 sigma_t^2)` are far below
//! the exponent range of `f64`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, LabError, Result};
use crate::gmm_data::{Dataset, IsotropicTarget, LowRankTarget, Target};
use crate::lowrank;
use crate::points::{axpy, norm_sq, Points};
use crate::schedule::vp_coefficients;

/// Anything that maps `(t, x_t)` to an estimate of `E[X_0 | X_t = x_t]`.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn denoise(&self, t: f64, x: &[f64]) -> Result<Vec<f64>>;
}

/// Logits and their softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl WeightVector {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probabilities = softmax(&logits);
        Self { logits, probabilities }
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Overwrites `v` with `softmax(v)`.
pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        let e = *x - m;
        // exp underflows to exactly zero below this
        *x = if e < -746.0 { 0.0 } else { e.exp() };
        total += *x;
    }
    let inv = 1.0 / total;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Softmax restricted to `subset`; entries outside it are zero.
pub fn restricted_softmax(v: &[f64], subset: &[usize]) -> Vec<f64> {
    let sub: Vec<f64> = subset.iter().map(|&i| v[i]).collect();
    let p = softmax(&sub);
    let mut out = vec![0.0; v.len()];
    for (&i, pi) in subset.iter().zip(p) {
        out[i] = pi;
    }
    out
}

fn coefficients(t: f64) -> Result<(f64, f64)> {
    if !(t > 0.0 && t <= 1.0) {
        return domain(format!("time {t} outside (0, 1]"));
    }
    vp_coefficients(t)
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return domain(format!("input has dimension {}, denoiser expects {expected}", x.len()));
    }
    Ok(())
}

/// One mixture component with a full covariance matrix.
#[derive(Clone, Debug)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

/// Posterior mean for an equally weighted mixture of arbitrary Gaussians,
/// including the log-determinant term in the weights.
pub fn general_denoiser(components: &[GaussianComponent], t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let (alpha, sigma) = coefficients(t)?;
    if alpha <= 0.0 {
        return domain("alpha_t = 0: the posterior mean is not identifiable from x_t");
    }
    if components.is_empty() {
        return domain("no components");
    }
    let d = x.len();
    let xv = DVector::from_column_slice(x);
    let mut logits = Vec::with_capacity(components.len());
    let mut solved = Vec::with_capacity(components.len());
    for (i, c) in components.iter().enumerate() {
        if c.mean.len() != d || c.cov.nrows() != d || c.cov.ncols() != d {
            return domain(format!("component {i} has the wrong shape"));
        }
        check_psd(&c.cov, i)?;
        let s = &c.cov * (alpha * alpha) + DMatrix::identity(d, d) * (sigma * sigma);
        let chol = s
            .cholesky()
            .ok_or_else(|| LabError::Domain(format!("component {i}: singular noised covariance")))?;
        let r = &xv - DVector::from_column_slice(&c.mean) * alpha;
        let y = chol.solve(&r);
        logits.push(-0.5 * chol.ln_determinant() - 0.5 * r.dot(&y));
        solved.push(y);
    }
    let p = softmax(&logits);
    let mut acc = DVector::zeros(d);
    for (pi, y) in p.iter().zip(&solved) {
        acc.axpy(*pi, y, 1.0);
    }
    let out = (xv - acc * (sigma * sigma)) / alpha;
    Ok(out.as_slice().to_vec())
}

fn check_psd(cov: &DMatrix<f64>, i: usize) -> Result<()> {
    let scale = cov.abs().max().max(1.0);
    if (cov - cov.transpose()).abs().max() > 1e-10 * scale {
        return domain(format!("component {i}: covariance is not symmetric"));
    }
    let eig = cov.clone().symmetric_eigenvalues();
    if eig.iter().any(|&e| e < -1e-10 * scale) {
        return domain(format!("component {i}: covariance is not positive semidefinite"));
    }
    Ok(())
}

/// Isotropic mixture denoiser parameters: `M` means and a shared variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoDenoiserParams {
    pub means: Points,
    pub var: f64,
}

impl IsoDenoiserParams {
    pub fn new(means: Points, var: f64) -> Result<Self> {
        if means.is_empty() {
            return domain("need at least one mean");
        }
        if !(var >= 0.0) || !var.is_finite() {
            return domain(format!("variance {var} must be finite and nonnegative"));
        }
        if !means.all_finite() {
            return domain("means must be finite");
        }
        Ok(Self { means, var })
    }

    /// Generalizing denoiser of an isotropic target.
    pub fn from_target(target: &IsotropicTarget) -> Self {
        Self {
            means: target.means.clone(),
            var: target.var,
        }
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }
}

/// Shrinkage form of the isotropic mixture denoiser.
pub fn iso_denoiser(params: &IsoDenoiserParams, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(params.means.dim(), x)?;
    let (alpha, sigma) = coefficients(t)?;
    Ok(iso_eval(&params.means, params.var, alpha, sigma, x))
}

pub(crate) fn iso_eval(means: &Points, var: f64, alpha: f64, sigma: f64, x: &[f64]) -> Vec<f64> {
    let s2 = sigma * sigma;
    let v = alpha * alpha * var + s2;
    // var = 0 is an exact branch: no shrinkage toward x_t.
    let (c_x, c_mu) = if var == 0.0 { (0.0, 1.0) } else { (alpha * var / v, s2 / v) };
    let mut w: Vec<f64> = means
        .iter()
        .map(|mu| {
            let r2: f64 = mu.iter().zip(x).map(|(m, xi)| (alpha * m - xi).powi(2)).sum();
            -r2 / (2.0 * v)
        })
        .collect();
    softmax_in_place(&mut w);
    let mut out: Vec<f64> = x.iter().map(|xi| c_x * xi).collect();
    for (mu, p) in means.iter().zip(&w) {
        if *p != 0.0 {
            axpy(c_mu * p, mu, &mut out);
        }
    }
    out
}

impl Denoiser for IsoDenoiserParams {
    fn dim(&self) -> usize {
        self.means.dim()
    }

    fn denoise(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        iso_denoiser(self, t, x)
    }
}

/// Memorizing denoiser over the first `m` training samples.
#[derive(Clone, Copy, Debug)]
pub struct MemDenoiser<'a> {
    samples: &'a Points,
    m: usize,
}

impl<'a> MemDenoiser<'a> {
    pub fn full(dataset: &'a Dataset) -> Self {
        Self {
            samples: &dataset.samples,
            m: dataset.len(),
        }
    }

    pub fn partial(dataset: &'a Dataset, m: usize) -> Result<Self> {
        if m == 0 || m > dataset.len() {
            return domain(format!("M = {m} outside [1, {}]", dataset.len()));
        }
        Ok(Self {
            samples: &dataset.samples,
            m,
        })
    }

    pub fn capacity(&self) -> usize {
        self.m
    }
}

impl Denoiser for MemDenoiser<'_> {
    fn dim(&self) -> usize {
        self.samples.dim()
    }

    fn denoise(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.samples.dim(), x)?;
        let (alpha, sigma) = coefficients(t)?;
        let s2 = sigma * sigma;
        let mut w: Vec<f64> = (0..self.m)
            .map(|i| {
                let xi = self.samples.point(i);
                let r2: f64 = xi.iter().zip(x).map(|(a, b)| (alpha * a - b).powi(2)).sum();
                -r2 / (2.0 * s2)
            })
            .collect();
        softmax_in_place(&mut w);
        let mut out = vec![0.0; x.len()];
        for (i, p) in w.iter().enumerate() {
            if *p != 0.0 {
                axpy(*p, self.samples.point(i), &mut out);
            }
        }
        Ok(out)
    }
}

pub fn mem_denoiser(dataset: &Dataset, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    MemDenoiser::full(dataset).denoise(t, x)
}

pub fn pmem_denoiser(dataset: &Dataset, m: usize, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    MemDenoiser::partial(dataset, m)?.denoise(t, x)
}

/// Single-component posterior mean around the true mean of the component that
/// generated the sample.
pub fn nominal_denoiser(t: f64, x: &[f64], mu_star: &[f64], var_star: f64) -> Result<Vec<f64>> {
    check_dim(mu_star.len(), x)?;
    let (alpha, sigma) = coefficients(t)?;
    let s2 = sigma * sigma;
    let v = alpha * alpha * var_star + s2;
    if v == 0.0 {
        return domain("zero posterior variance");
    }
    Ok(x.iter()
        .zip(mu_star)
        .map(|(xi, m)| (alpha * var_star * xi + s2 * m) / v)
        .collect())
}

/// Low-rank image-model denoiser parameters: per component a template, a
/// color mean, and a shared color variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankDenoiserParams {
    pub templates: Points,
    pub color_means: Points,
    pub var: f64,
}

impl LowRankDenoiserParams {
    pub fn new(templates: Points, color_means: Points, var: f64) -> Result<Self> {
        if templates.is_empty() || templates.len() != color_means.len() {
            return domain("need one color mean per template and at least one template");
        }
        if !(var >= 0.0) || !var.is_finite() {
            return domain(format!("variance {var} must be finite and nonnegative"));
        }
        let p = Self {
            templates,
            color_means,
            var,
        };
        p.check_templates()?;
        Ok(p)
    }

    pub fn from_target(target: &LowRankTarget) -> Self {
        Self {
            templates: target.templates.clone(),
            color_means: target.color_means.clone(),
            var: target.var,
        }
    }

    fn check_templates(&self) -> Result<()> {
        if self.var > 0.0 {
            if let Some(i) = self.templates.iter().position(|x| norm_sq(x) == 0.0) {
                return Err(LabError::Degenerate(format!("template {i} is identically zero")));
            }
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.templates.len()
    }

    pub fn color_dim(&self) -> usize {
        self.color_means.dim()
    }

    pub fn pixels(&self) -> usize {
        self.templates.dim()
    }

    /// Dense covariance `var A Aᵀ` of component `i` (test and oracle use only).
    pub fn dense_component(&self, i: usize) -> GaussianComponent {
        let x = self.templates.point(i);
        let (n_c, p) = (self.color_dim(), self.pixels());
        let mut cov = DMatrix::zeros(n_c * p, n_c * p);
        for j in 0..n_c {
            for a in 0..p {
                for b in 0..p {
                    cov[(j * p + a, j * p + b)] = self.var * x[a] * x[b];
                }
            }
        }
        GaussianComponent {
            mean: lowrank::kron(self.color_means.point(i), x),
            cov,
        }
    }
}

/// Low-rank mixture denoiser through the Woodbury identity; never forms an
/// ambient-dimension matrix.
pub fn lowrank_denoiser(params: &LowRankDenoiserParams, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    params.check_templates()?;
    check_dim(params.color_dim() * params.pixels(), x)?;
    let (alpha, sigma) = coefficients(t)?;
    if alpha <= 0.0 {
        return domain("alpha_t = 0: the posterior mean is not identifiable from x_t");
    }
    let (n_c, p) = (params.color_dim(), params.pixels());
    let s2 = sigma * sigma;
    let m = params.n_components();
    let mut logits = Vec::with_capacity(m);
    let mut parts = Vec::with_capacity(m);
    for i in 0..m {
        let tpl = params.templates.point(i);
        let nx = norm_sq(tpl);
        let mean = lowrank::kron(params.color_means.point(i), tpl);
        let r: Vec<f64> = x.iter().zip(&mean).map(|(xi, mi)| xi - alpha * mi).collect();
        let at_r = lowrank::apply_adjoint(tpl, &r);
        let beta = lowrank::woodbury_beta(alpha, sigma, params.var, nx);
        let quad = (norm_sq(&r) - beta * norm_sq(&at_r)) / s2;
        let ld = if params.var > 0.0 {
            lowrank::log_det(alpha, sigma, params.var, nx, n_c, p)
        } else {
            (n_c * p) as f64 * s2.ln()
        };
        logits.push(-0.5 * ld - 0.5 * quad);
        parts.push((mean, beta, at_r));
    }
    let w = softmax(&logits);
    // x̄ = Σ p_i m_i + (1/α) Σ p_i β_i A_i A_iᵀ r_i
    let mut out = vec![0.0; x.len()];
    for (i, ((mean, beta, at_r), pi)) in parts.iter().zip(&w).enumerate() {
        if *pi == 0.0 {
            continue;
        }
        axpy(*pi, mean, &mut out);
        if *beta != 0.0 {
            lowrank::add_apply(pi * beta / alpha, params.templates.point(i), at_r, &mut out);
        }
    }
    Ok(out)
}

impl Denoiser for LowRankDenoiserParams {
    fn dim(&self) -> usize {
        self.color_dim() * self.pixels()
    }

    fn denoise(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        lowrank_denoiser(self, t, x)
    }
}

/// Denoiser induced by the target mixture itself.
pub enum Generalizing {
    Isotropic(IsoDenoiserParams),
    LowRank(LowRankDenoiserParams),
}

impl Generalizing {
    pub fn new(target: &Target) -> Self {
        match target {
            Target::Isotropic(t) => Generalizing::Isotropic(IsoDenoiserParams::from_target(t)),
            Target::LowRank(t) => Generalizing::LowRank(LowRankDenoiserParams::from_target(t)),
        }
    }
}

impl Denoiser for Generalizing {
    fn dim(&self) -> usize {
        match self {
            Generalizing::Isotropic(p) => p.dim(),
            Generalizing::LowRank(p) => p.dim(),
        }
    }

    fn denoise(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Generalizing::Isotropic(p) => p.denoise(t, x),
            Generalizing::LowRank(p) => p.denoise(t, x),
        }
    }
}

/// Tweedie: `grad log p_t(x) = (alpha_t xbar - x) / sigma_t^2`.
pub fn score_from_denoiser(t: f64, x: &[f64], xbar: &[f64]) -> Result<Vec<f64>> {
    let (alpha, sigma) = vp_coefficients(t)?;
    if sigma == 0.0 {
        return domain("score undefined at sigma_t = 0");
    }
    check_dim(x.len(), xbar)?;
    let s2 = sigma * sigma;
    Ok(x.iter().zip(xbar).map(|(xi, bi)| (alpha * bi - xi) / s2).collect())
}
