//! Deterministic DDIM sampling and the nearest-neighbor memorization test.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::Denoiser;
use crate::error::{domain, LabError, Result};
use crate::gmm_data::Dataset;
use crate::losses::noise_vector;
use crate::points::{sq_dist, Points};
use crate::schedule::TimeGrid;
use crate::seeding::derive_seed;

/// A sample `x` is memorized when `|x - x1|^2 <= c |x - x2|^2` for its two
/// nearest training points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemCriterion {
    pub c: f64,
}

impl MemCriterion {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0 && c < 1.0) {
            return domain(format!("criterion constant {c} outside (0, 1)"));
        }
        Ok(Self { c })
    }
}

impl Default for MemCriterion {
    fn default() -> Self {
        Self { c: 1.0 / 9.0 }
    }
}

/// Indices and squared distances of the two nearest training points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbors {
    pub first: usize,
    pub second: usize,
    pub d1_sq: f64,
    pub d2_sq: f64,
}

/// Runs the DDIM recursion from `x` (the state at `grid.times[0]`).
pub fn ddim_trajectory_end(den: &dyn Denoiser, grid: &TimeGrid, mut x: Vec<f64>) -> Result<Vec<f64>> {
    if x.len() != den.dim() {
        return domain(format!("state has dimension {}, denoiser {}", x.len(), den.dim()));
    }
    for l in 0..grid.intervals() {
        let (a0, s0) = (grid.alphas[l], grid.sigmas[l]);
        let (a1, s1) = (grid.alphas[l + 1], grid.sigmas[l + 1]);
        if s0 == 0.0 {
            return domain(format!("sigma vanishes at step {l} before the end of the grid"));
        }
        let xbar = den.denoise(grid.times[l], &x)?;
        let r = s1 / s0;
        let b = a1 - r * a0;
        for (xi, mi) in x.iter_mut().zip(&xbar) {
            *xi = r * *xi + b * mi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LabError::SamplerNonFinite { step: l });
        }
    }
    Ok(x)
}

/// Generates `n` samples. Sample `i` starts from the counter-based stream
/// `(seed, i)`, so any subset can be regenerated on its own.
pub fn ddim_sample(den: &dyn Denoiser, grid: &TimeGrid, n: usize, seed: u64) -> Result<Points> {
    let d = den.dim();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| ddim_trajectory_end(den, grid, noise_vector(seed, i, 0, d)))
        .collect::<Result<_>>()?;
    let mut out = Points::zeros(d, 0);
    for r in &rows {
        out.push(r);
    }
    Ok(out)
}

/// Exact two-nearest-neighbor search. Ties go to the lower index.
pub fn nearest_two(x: &[f64], data: &Points) -> Result<Neighbors> {
    if data.len() < 2 {
        return domain("need at least two training points");
    }
    if data.dim() != x.len() {
        return domain("sample and dataset dimensions differ");
    }
    let mut best = (usize::MAX, f64::INFINITY);
    let mut next = (usize::MAX, f64::INFINITY);
    for (j, p) in data.iter().enumerate() {
        let dist = sq_dist(x, p);
        if dist < best.1 {
            next = best;
            best = (j, dist);
        } else if dist < next.1 {
            next = (j, dist);
        }
    }
    Ok(Neighbors {
        first: best.0,
        second: next.0,
        d1_sq: best.1,
        d2_sq: next.1,
    })
}

pub fn is_memorized(x: &[f64], ds: &Dataset, crit: &MemCriterion) -> Result<bool> {
    let nb = nearest_two(x, &ds.samples)?;
    Ok(nb.d1_sq <= crit.c * nb.d2_sq)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationBatch {
    pub seed: u64,
    pub samples: Points,
    pub neighbors: Vec<Neighbors>,
    pub memorized: Vec<bool>,
}

impl GenerationBatch {
    pub fn ratio(&self) -> f64 {
        if self.memorized.is_empty() {
            return 0.0;
        }
        self.memorized.iter().filter(|&&m| m).count() as f64 / self.memorized.len() as f64
    }

    /// One row per sample: flag, neighbor indices, distances, and optionally
    /// the coordinates `x0..`.
    pub fn write_csv<W: Write>(&self, w: W, with_coords: bool) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["sample", "memorized", "nn1", "nn2", "d1", "d2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if with_coords {
            header.extend((0..self.samples.dim()).map(|k| format!("x{k}")));
        }
        wr.write_record(&header)?;
        for (i, (nb, m)) in self.neighbors.iter().zip(&self.memorized).enumerate() {
            let mut row = vec![
                i.to_string(),
                (*m as u8).to_string(),
                nb.first.to_string(),
                nb.second.to_string(),
                nb.d1_sq.sqrt().to_string(),
                nb.d2_sq.sqrt().to_string(),
            ];
            if with_coords {
                row.extend(self.samples.point(i).iter().map(|v| v.to_string()));
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Generates `n_eval` samples and checks each against the dataset.
pub fn generate_and_check(
    den: &dyn Denoiser,
    ds: &Dataset,
    grid: &TimeGrid,
    n_eval: usize,
    crit: &MemCriterion,
    seed: u64,
) -> Result<GenerationBatch> {
    if n_eval == 0 {
        return domain("n_eval must be at least 1");
    }
    let stream = derive_seed(seed, &[], "memorization-eval");
    let samples = ddim_sample(den, grid, n_eval, stream)?;
    let neighbors: Vec<Neighbors> = (0..n_eval)
        .into_par_iter()
        .map(|i| nearest_two(samples.point(i), &ds.samples))
        .collect::<Result<_>>()?;
    let memorized = neighbors.iter().map(|nb| nb.d1_sq <= crit.c * nb.d2_sq).collect();
    Ok(GenerationBatch {
        seed,
        samples,
        neighbors,
        memorized,
    })
}

pub fn memorization_ratio(
    den: &dyn Denoiser,
    ds: &Dataset,
    grid: &TimeGrid,
    n_eval: usize,
    crit: &MemCriterion,
    seed: u64,
) -> Result<f64> {
    Ok(generate_and_check(den, ds, grid, n_eval, crit, seed)?.ratio())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTransition {
    /// First `M` with ratio at least 1/10.
    pub start: Option<usize>,
    /// First `M` with ratio at least 1/2.
    pub pt: Option<usize>,
    /// First `M` with ratio at least 9/10.
    pub end: Option<usize>,
}

pub fn detect_phase_transition(ratios: &BTreeMap<usize, f64>) -> PhaseTransition {
    let first = |thr: f64| ratios.iter().find(|(_, &r)| r >= thr).map(|(&m, _)| m);
    PhaseTransition {
        start: first(0.1),
        pt: first(0.5),
        end: first(0.9),
    }
}
