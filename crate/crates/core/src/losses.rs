//! Monte-Carlo estimates of the denoising loss and the leading-order excess
//! loss approximations for generalizing and partially memorizing denoisers.
//!
//! Noise for term `(i, r)` (sample `i`, draw `r`) comes from a counter-based
//! stream keyed by `(seed, i, r)`, so every estimator that uses the same seed
//! sees the same draws regardless of thread schedule. Differences of losses
//! are always estimated term by term on shared draws.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::{Denoiser, MemDenoiser};
use crate::error::{domain, Result};
use crate::gmm_data::{Dataset, Target};
use crate::points::{sq_dist, Points};
use crate::schedule::{vp_coefficients, TimeGrid, Weighting};
use crate::seeding::{derive_seed, term_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCConfig {
    /// Noise draws per sample.
    pub n_dup: usize,
    pub seed: u64,
    /// Reuse the same draws at every `t`; otherwise the stream is keyed by `t`.
    pub shared_noise: bool,
}

impl MCConfig {
    pub fn new(n_dup: usize, seed: u64) -> Result<Self> {
        if n_dup == 0 {
            return domain("n_dup must be at least 1");
        }
        Ok(Self {
            n_dup,
            seed,
            shared_noise: true,
        })
    }

    fn noise_seed(&self, t: f64) -> u64 {
        if self.shared_noise {
            self.seed
        } else {
            derive_seed(self.seed, &[t.to_bits()], "noise")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub value: f64,
    pub std_err: f64,
    pub n_terms: usize,
}

impl LossEstimate {
    /// Sample mean and standard error of the mean, summed in index order.
    pub fn from_terms(terms: &[f64]) -> Self {
        let n = terms.len();
        if n == 0 {
            return Self {
                value: 0.0,
                std_err: 0.0,
                n_terms: 0,
            };
        }
        let mean = terms.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let ss: f64 = terms.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            value: mean,
            std_err,
            n_terms: n,
        }
    }
}

/// Constant in front of the partial-memorization approximation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxConfig {
    pub c: f64,
}

impl ApproxConfig {
    pub fn new(c: f64) -> Result<Self> {
        if !(1.0..=2.0).contains(&c) {
            return domain(format!("constant C = {c} outside [1, 2]"));
        }
        Ok(Self { c })
    }
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self { c: 2.0 }
    }
}

/// Standard normal draw `z^{i,r}` of dimension `d`.
pub fn noise_vector(seed: u64, i: usize, r: usize, d: usize) -> Vec<f64> {
    let mut rng = term_rng(seed, i, r);
    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn check_time(t: f64) -> Result<(f64, f64)> {
    let (a, s) = vp_coefficients(t)?;
    if s == 0.0 {
        return domain("loss needs sigma_t > 0");
    }
    Ok((a, s))
}

/// Per-term values `f(i, r, x_t, x_0)` over all samples and draws, ordered by
/// `(i, r)`.
fn map_terms<F>(samples: &Points, t: f64, cfg: &MCConfig, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &[f64]) -> Result<f64> + Sync,
{
    if samples.is_empty() {
        return domain("empty sample set");
    }
    if cfg.n_dup == 0 {
        return domain("n_dup must be at least 1");
    }
    let (a, s) = check_time(t)?;
    let seed = cfg.noise_seed(t);
    let d = samples.dim();
    let per_sample: Result<Vec<Vec<f64>>> = (0..samples.len())
        .into_par_iter()
        .map(|i| {
            let x0 = samples.point(i);
            (0..cfg.n_dup)
                .map(|r| {
                    let z = noise_vector(seed, i, r, d);
                    let xt: Vec<f64> = x0.iter().zip(&z).map(|(x, z)| a * x + s * z).collect();
                    f(&xt, x0)
                })
                .collect()
        })
        .collect();
    Ok(per_sample?.into_iter().flatten().collect())
}

/// `E ||x̄(t, α x + σ z) - x||²` over the given samples.
pub fn mc_loss_on<D: Denoiser + ?Sized>(den: &D, samples: &Points, t: f64, cfg: &MCConfig) -> Result<LossEstimate> {
    let terms = map_terms(samples, t, cfg, |xt, x0| Ok(sq_dist(&den.denoise(t, xt)?, x0)))?;
    Ok(LossEstimate::from_terms(&terms))
}

/// Empirical (training) denoising loss at time `t`.
pub fn mc_train_loss<D: Denoiser + ?Sized>(den: &D, dataset: &Dataset, t: f64, cfg: &MCConfig) -> Result<LossEstimate> {
    mc_loss_on(den, &dataset.samples, t, cfg)
}

/// Fresh held-out samples for test-loss estimation.
pub fn holdout(target: &Target, n_test: usize, cfg: &MCConfig) -> Result<Dataset> {
    if n_test == 0 {
        return domain("n_test must be at least 1");
    }
    target.sample(n_test, derive_seed(cfg.seed, &[n_test as u64], "holdout"))
}

/// Population (test) loss estimated on `n_test` fresh samples from `target`.
pub fn mc_test_loss<D: Denoiser + ?Sized>(
    den: &D,
    target: &Target,
    t: f64,
    n_test: usize,
    cfg: &MCConfig,
) -> Result<LossEstimate> {
    let ho = holdout(target, n_test, cfg)?;
    mc_loss_on(den, &ho.samples, t, cfg)
}

/// Paired estimate of `L(den) - L(reference)` on shared draws.
pub fn mc_excess<D: Denoiser + ?Sized, R: Denoiser + ?Sized>(
    den: &D,
    reference: &R,
    samples: &Points,
    t: f64,
    cfg: &MCConfig,
) -> Result<LossEstimate> {
    let terms = map_terms(samples, t, cfg, |xt, x0| {
        Ok(sq_dist(&den.denoise(t, xt)?, x0) - sq_dist(&reference.denoise(t, xt)?, x0))
    })?;
    Ok(LossEstimate::from_terms(&terms))
}

/// `E_t[lambda(t) L_{N,t}]` with `t` averaged uniformly over the grid. With
/// shared noise each `(i, r)` term carries its weighted grid average, so the
/// standard error accounts for correlation across `t`.
pub fn weighted_loss<D: Denoiser + ?Sized>(
    den: &D,
    dataset: &Dataset,
    grid: &TimeGrid,
    weighting: &Weighting,
    cfg: &MCConfig,
) -> Result<LossEstimate> {
    let lambda = weighting.values(grid)?;
    let n_t = grid.len() as f64;
    let mut acc: Option<Vec<f64>> = None;
    for (&t, &l) in grid.times.iter().zip(&lambda) {
        if l == 0.0 {
            continue;
        }
        let terms = map_terms(&dataset.samples, t, cfg, |xt, x0| Ok(sq_dist(&den.denoise(t, xt)?, x0)))?;
        let acc = acc.get_or_insert_with(|| vec![0.0; terms.len()]);
        for (a, v) in acc.iter_mut().zip(terms) {
            *a += l * v / n_t;
        }
    }
    match acc {
        Some(acc) => Ok(LossEstimate::from_terms(&acc)),
        None => Ok(LossEstimate {
            value: 0.0,
            std_err: 0.0,
            n_terms: dataset.len() * cfg.n_dup,
        }),
    }
}

/// Both sides of `L(x̄) = E||x̄ - x̄_mem||² + L(x̄_mem)` on shared draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    /// Standard error of the paired per-term difference `lhs - rhs`.
    pub std_err: f64,
}

pub fn orthogonality_check<D: Denoiser + ?Sized>(
    den: &D,
    dataset: &Dataset,
    t: f64,
    cfg: &MCConfig,
) -> Result<OrthogonalityReport> {
    let mem = MemDenoiser::full(dataset);
    let pairs = map_terms(&dataset.samples, t, cfg, |xt, x0| {
        let xb = den.denoise(t, xt)?;
        let xm = mem.denoise(t, xt)?;
        let lhs = sq_dist(&xb, x0);
        let rhs = sq_dist(&xb, &xm) + sq_dist(&xm, x0);
        Ok(lhs - rhs)
    })?;
    // Recompute both sides separately so x̄ = x̄_mem yields identical sums.
    let lhs_terms = map_terms(&dataset.samples, t, cfg, |xt, x0| Ok(sq_dist(&den.denoise(t, xt)?, x0)))?;
    let rhs_terms = map_terms(&dataset.samples, t, cfg, |xt, x0| {
        let xb = den.denoise(t, xt)?;
        let xm = mem.denoise(t, xt)?;
        Ok(sq_dist(&xb, &xm) + sq_dist(&xm, x0))
    })?;
    let lhs = LossEstimate::from_terms(&lhs_terms).value;
    let rhs = LossEstimate::from_terms(&rhs_terms).value;
    Ok(OrthogonalityReport {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
        std_err: LossEstimate::from_terms(&pairs).std_err,
    })
}

/// Leading-order excess training loss of the generalizing denoiser:
/// `d var / (psi var + 1)`.
pub fn approx_gen_excess(d: usize, var_star: f64, psi: f64) -> Result<f64> {
    if !(psi >= 0.0) {
        return domain(format!("snr {psi} must be nonnegative"));
    }
    if !(var_star >= 0.0) {
        return domain(format!("variance {var_star} must be nonnegative"));
    }
    if psi.is_infinite() {
        return Ok(0.0);
    }
    Ok(d as f64 * var_star / (psi * var_star + 1.0))
}

/// Leading-order excess training loss of the partial memorizer:
/// `C (1 - M/N) d var`.
pub fn approx_pmem_excess(d: usize, var_star: f64, m: usize, n: usize, cfg: &ApproxConfig) -> Result<f64> {
    if m == 0 || m > n {
        return domain(format!("M = {m} outside [1, {n}]"));
    }
    Ok(cfg.c * (1.0 - m as f64 / n as f64) * d as f64 * var_star)
}

/// One row of an exported loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurveRow {
    pub t: f64,
    pub psi: f64,
    pub denoiser_id: String,
    pub value: f64,
    pub std_err: f64,
}

pub fn write_loss_curve<W: Write>(w: W, rows: &[LossCurveRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for row in rows {
        wr.serialize(row)?;
    }
    wr.flush()?;
    Ok(())
}
