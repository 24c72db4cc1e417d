//! Variance-preserving noise schedule, signal-to-noise ratio, the shared
//! timestep grid and the training loss weighting.
//!
//! The schedule is `alpha_t = sqrt(1 - t^2)`, `sigma_t = t`, so that
//! `alpha_t^2 + sigma_t^2 = 1` for every `t` in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, LabError, Result};

/// Schedule coefficients `(alpha_t, sigma_t)`.
pub fn vp_coefficients(t: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return domain(format!("time {t} outside [0, 1]"));
    }
    // (1 - t)(1 + t) keeps full relative precision near t = 1.
    Ok((((1.0 - t) * (1.0 + t)).sqrt(), t))
}

/// Signal-to-noise ratio `psi_t = alpha_t^2 / sigma_t^2`.
pub fn snr(t: f64) -> Result<f64> {
    if t == 0.0 {
        return Err(LabError::InfiniteSnr);
    }
    if !(0.0..=1.0).contains(&t) {
        return domain(format!("time {t} outside (0, 1]"));
    }
    Ok((1.0 - t) * (1.0 + t) / (t * t))
}

/// Inverse of [`snr`]: the time at which the schedule reaches `psi`.
pub fn inverse_snr(psi: f64) -> Result<f64> {
    if !(psi > 0.0) || !psi.is_finite() {
        return domain(format!("snr {psi} must be positive and finite"));
    }
    Ok(1.0 / (1.0 + psi).sqrt())
}

/// Noise-prediction loss weighting `lambda(t) = (alpha_t / sigma_t)^2`.
pub fn noise_pred_weight(t: f64) -> Result<f64> {
    if t == 0.0 {
        return domain("noise-prediction weight undefined at t = 0");
    }
    snr(t)
}

/// Discretization of `[eps, 1 - eps]` shared by training, evaluation and
/// sampling. Times are stored in decreasing order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub eps: f64,
    pub times: Vec<f64>,
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// `+inf` where `sigma = 0` (only possible on hand-built grids).
    pub snrs: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid `t_l = (1 - eps) - (1 - 2 eps) l / L` for `l = 0..=L`.
    pub fn new(intervals: usize, eps: f64) -> Result<Self> {
        if intervals == 0 {
            return domain("grid needs at least one interval");
        }
        if !(eps > 0.0 && eps < 0.5) {
            return domain(format!("eps {eps} outside (0, 1/2)"));
        }
        let span = 1.0 - 2.0 * eps;
        let times = (0..=intervals)
            .map(|l| (1.0 - eps) - span * l as f64 / intervals as f64)
            .collect();
        let mut grid = Self::from_times(times)?;
        grid.eps = eps;
        Ok(grid)
    }

    /// Grid from explicit, strictly decreasing times in `[0, 1]`.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return domain("grid needs at least two times");
        }
        if times.windows(2).any(|w| !(w[0] > w[1])) {
            return domain("grid times must be strictly decreasing");
        }
        let mut alphas = Vec::with_capacity(times.len());
        let mut sigmas = Vec::with_capacity(times.len());
        let mut snrs = Vec::with_capacity(times.len());
        for &t in &times {
            let (a, s) = vp_coefficients(t)?;
            alphas.push(a);
            sigmas.push(s);
            snrs.push(if t == 0.0 { f64::INFINITY } else { snr(t)? });
        }
        let eps = *times.last().unwrap();
        Ok(Self {
            eps,
            times,
            alphas,
            sigmas,
            snrs,
        })
    }

    /// Number of intervals `L` (the grid has `L + 1` points).
    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Index of the grid point closest to `psi` in log-SNR.
    pub fn nearest_snr_index(&self, psi: f64) -> usize {
        let target = psi.ln();
        let mut best = (0, f64::INFINITY);
        for (i, s) in self.snrs.iter().enumerate() {
            let gap = (s.ln() - target).abs();
            if gap < best.1 {
                best = (i, gap);
            }
        }
        best.0
    }
}

/// Per-timestep loss weighting used when integrating losses over the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Weighting {
    /// `lambda(t) = psi_t`.
    NoisePrediction,
    /// Same weight at every grid point.
    Constant(f64),
    /// Explicit weight per grid point.
    PerStep(Vec<f64>),
}

impl Weighting {
    pub fn values(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        match self {
            Weighting::NoisePrediction => grid.times.iter().map(|&t| noise_pred_weight(t)).collect(),
            Weighting::Constant(c) => Ok(vec![*c; grid.len()]),
            Weighting::PerStep(w) => {
                if w.len() != grid.len() {
                    return domain(format!(
                        "weighting has {} entries, grid has {}",
                        w.len(),
                        grid.len()
                    ));
                }
                Ok(w.clone())
            }
        }
    }
}
