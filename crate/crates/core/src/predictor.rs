//! Crossover point between the partial memorizer and the generalizing
//! denoiser, and the smoothed regression that fits a per-timestep loss
//! weighting to measured phase transitions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::denoisers::{log_sum_exp, softmax};
use crate::error::{domain, LabError, Result};
use crate::losses::{approx_gen_excess, approx_pmem_excess, ApproxConfig};
use crate::schedule::{TimeGrid, Weighting};
use crate::seeding::derive_seed;
use crate::training::AdamState;

/// Maximum of the Fig. 4-style rescaled curve emitted next to the sum-1 weights.
pub const DISPLAY_MAX: f64 = 0.9;

/// Per-timestep weighting `softmax(logits)`, aligned with a time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeighting {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LossWeighting {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
            return domain("logits must be finite and nonempty");
        }
        let weights = softmax(&logits);
        Ok(Self { logits, weights })
    }

    pub fn uniform(len: usize) -> Result<Self> {
        Self::from_logits(vec![0.0; len])
    }

    pub fn as_weighting(&self) -> Weighting {
        Weighting::PerStep(self.weights.clone())
    }

    /// CSV with columns `t, psi, weight, weight_rescaled`; the last column is
    /// the weight scaled so its maximum equals [`DISPLAY_MAX`].
    pub fn write_csv<W: Write>(&self, w: W, grid: &TimeGrid) -> Result<()> {
        if grid.len() != self.weights.len() {
            return domain("weighting and grid lengths differ");
        }
        let max = self.weights.iter().cloned().fold(0.0, f64::max);
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "psi", "weight", "weight_rescaled"])?;
        for ((t, psi), wt) in grid.times.iter().zip(&grid.snrs).zip(&self.weights) {
            wr.write_record([t.to_string(), psi.to_string(), wt.to_string(), (wt / max * DISPLAY_MAX).to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Softmax temperature over `M`.
    pub tau: f64,
    /// Entropy penalty on the distribution over `M`.
    pub beta_sparsity: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub approx: ApproxConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self::new(0)
    }
}

impl FitConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            tau: 1.0 / 20.0,
            beta_sparsity: 1e-3,
            steps: 5000,
            lr: 1e-2,
            seed,
            approx: ApproxConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return domain("tau must be positive");
        }
        if !(self.beta_sparsity >= 0.0) {
            return domain("beta_sparsity must be nonnegative");
        }
        if !(self.lr > 0.0) {
            return domain("lr must be positive");
        }
        Ok(())
    }
}

/// One sweep cell: its measured transition and the table of approximate
/// excess-loss differences `pmem(M) - gen(t_l)`, row `M - 1`, column `l`,
/// divided by `d var_star`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellObservation {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub var_star: f64,
    pub m_pt: usize,
    pub table: Vec<Vec<f64>>,
}

impl CellObservation {
    pub fn new(n: usize, d: usize, k: usize, var_star: f64, m_pt: usize, grid: &TimeGrid, approx: &ApproxConfig) -> Result<Self> {
        if m_pt == 0 || m_pt > n {
            return domain(format!("M_pt = {m_pt} outside [1, {n}]"));
        }
        if !(var_star > 0.0) {
            return domain("var_star must be positive");
        }
        let scale = d as f64 * var_star;
        let gen: Vec<f64> = grid
            .snrs
            .iter()
            .map(|&psi| approx_gen_excess(d, var_star, psi))
            .collect::<Result<_>>()?;
        let table = (1..=n)
            .map(|m| {
                let pm = approx_pmem_excess(d, var_star, m, n, approx)?;
                Ok(gen.iter().map(|g| (pm - g) / scale).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            n,
            d,
            k,
            var_star,
            m_pt,
            table,
        })
    }

    pub fn key(&self) -> [u64; 3] {
        [self.n as u64, self.d as u64, self.k as u64]
    }
}

/// Real-valued crossover `M* = N (1 - E[lambda / (psi var + 1)] / (C E[lambda]))`
/// with expectations over the grid.
pub fn crossover_point(n: usize, var_star: f64, grid: &TimeGrid, weighting: &Weighting, c: f64) -> Result<f64> {
    ApproxConfig::new(c)?;
    if !(var_star >= 0.0) {
        return domain("var_star must be nonnegative");
    }
    let lam = weighting.values(grid)?;
    if lam.iter().any(|l| *l < 0.0 || !l.is_finite()) {
        return domain("weights must be finite and nonnegative");
    }
    let total: f64 = lam.iter().sum();
    if total == 0.0 {
        return domain("weighting has zero mass");
    }
    let num: f64 = lam
        .iter()
        .zip(&grid.snrs)
        .map(|(l, psi)| if psi.is_infinite() { 0.0 } else { l / (psi * var_star + 1.0) })
        .sum();
    Ok(n as f64 * (1.0 - num / (c * total)))
}

/// Integer `M` in `[1, N]` minimizing the squared weighted excess difference;
/// ties go to the smaller `M`.
pub fn crossover_m(n: usize, d: usize, var_star: f64, grid: &TimeGrid, weighting: &Weighting, approx: &ApproxConfig) -> Result<usize> {
    let lam = weighting.values(grid)?;
    let gen: Vec<f64> = grid
        .snrs
        .iter()
        .map(|&psi| approx_gen_excess(d, var_star, psi))
        .collect::<Result<_>>()?;
    let mut best = (0, f64::INFINITY);
    for m in 1..=n {
        let pm = approx_pmem_excess(d, var_star, m, n, approx)?;
        let s: f64 = lam.iter().zip(&gen).map(|(l, g)| l * (pm - g)).sum();
        if s * s < best.1 {
            best = (m, s * s);
        }
    }
    Ok(best.0)
}

/// Hard argmin of a cell's table under `weights` (1-based `M`).
pub fn table_argmin(table: &[Vec<f64>], weights: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, row) in table.iter().enumerate() {
        let s: f64 = row.iter().zip(weights).map(|(a, w)| a * w).sum();
        if s * s < best.1 {
            best = (i + 1, s * s);
        }
    }
    best.0
}

/// Deterministic 75/25 split: a cell is held out when the hash of `(N, d, K)`
/// falls in the last quarter.
pub fn is_test_cell(obs: &CellObservation, seed: u64) -> bool {
    derive_seed(seed, &obs.key(), "weighting-split") % 4 == 3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub weighting: LossWeighting,
    pub train_mse: f64,
    /// `None` when no cell was held out.
    pub test_mse: Option<f64>,
    pub objective_trace: Vec<f64>,
    /// Smoothed prediction `sum_M M p(M)` per input cell, in input order.
    pub smoothed_m_pt: Vec<f64>,
    pub test_cells: Vec<bool>,
}

struct CellTerms {
    mse: f64,
    entropy: f64,
    mbar: f64,
}

/// Smoothed objective of one cell and its gradient with respect to the
/// weights (accumulated into `gw`).
fn cell_objective(obs: &CellObservation, w: &[f64], cfg: &FitConfig, gw: Option<&mut [f64]>) -> CellTerms {
    let n = obs.n as f64;
    let s: Vec<f64> = obs
        .table
        .iter()
        .map(|row| row.iter().zip(w).map(|(a, wl)| a * wl).sum())
        .collect();
    let logits: Vec<f64> = s.iter().map(|v| -v * v / cfg.tau).collect();
    let lse = log_sum_exp(&logits);
    let logp: Vec<f64> = logits.iter().map(|v| v - lse).collect();
    let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    let mbar: f64 = p.iter().enumerate().map(|(i, pi)| (i + 1) as f64 * pi).sum();
    let resid = mbar / n - obs.m_pt as f64 / n;
    let neg_ent: f64 = p.iter().zip(&logp).map(|(a, b)| a * b).sum();
    if let Some(gw) = gw {
        // d/dp of resid^2 + beta * sum p log p
        let gp: Vec<f64> = logp
            .iter()
            .enumerate()
            .map(|(i, lp)| 2.0 * resid * (i + 1) as f64 / n + cfg.beta_sparsity * (lp + 1.0))
            .collect();
        let mean_gp: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
        for (i, row) in obs.table.iter().enumerate() {
            let dlogit = p[i] * (gp[i] - mean_gp);
            let ds = dlogit * (-2.0 * s[i] / cfg.tau);
            for (g, a) in gw.iter_mut().zip(row) {
                *g += ds * a;
            }
        }
    }
    CellTerms {
        mse: resid * resid,
        entropy: -neg_ent,
        mbar,
    }
}

/// Objective over `cells` at `logits`: summed squared error plus the entropy
/// penalty. Returns the objective and, if asked, its gradient in the logits.
pub fn smoothed_objective(cells: &[&CellObservation], logits: &[f64], cfg: &FitConfig, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let w = softmax(logits);
    let mut gw = vec![0.0; w.len()];
    let mut total = 0.0;
    for c in cells {
        let t = cell_objective(c, &w, cfg, if want_grad { Some(&mut gw) } else { None });
        total += t.mse - cfg.beta_sparsity * t.entropy;
    }
    if !want_grad {
        return (total, None);
    }
    let mean: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
    let g = w.iter().zip(&gw).map(|(wl, gl)| wl * (gl - mean)).collect();
    (total, Some(g))
}

/// Fits logits with Adam from a uniform start. The reported errors are the
/// mean squared error of `M_bar / N` only.
pub fn fit_loss_weighting(obs: &[CellObservation], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if obs.is_empty() {
        return domain("need at least one observation");
    }
    let len = obs[0].table.first().map_or(0, |r| r.len());
    if len == 0 || obs.iter().any(|o| o.table.len() != o.n || o.table.iter().any(|r| r.len() != len)) {
        return domain("approximation tables are inconsistent");
    }
    let test_cells: Vec<bool> = obs.iter().map(|o| is_test_cell(o, cfg.seed)).collect();
    let mut train: Vec<&CellObservation> = obs.iter().zip(&test_cells).filter(|(_, t)| !**t).map(|(o, _)| o).collect();
    let mut test: Vec<&CellObservation> = obs.iter().zip(&test_cells).filter(|(_, t)| **t).map(|(o, _)| o).collect();
    let mut test_cells = test_cells;
    if train.is_empty() {
        // Everything hashed into the holdout: train on all cells instead.
        train = obs.iter().collect();
        test.clear();
        test_cells = vec![false; obs.len()];
    }

    let mut logits = vec![0.0; len];
    let mut adam = AdamState::new(len);
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (f, g) = smoothed_objective(&train, &logits, cfg, true);
        let g = g.expect("gradient requested");
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Divergence {
                epoch: trace.len(),
                loss: f,
                trace,
            });
        }
        trace.push(f);
        adam.update(&mut logits, &g, cfg.lr, 0.9, 0.999, 1e-8);
    }

    let weighting = LossWeighting::from_logits(logits)?;
    let mse = |cells: &[&CellObservation]| {
        cells.iter().map(|c| cell_objective(c, &weighting.weights, cfg, None).mse).sum::<f64>() / cells.len() as f64
    };
    let train_mse = mse(&train);
    let test_mse = if test.is_empty() { None } else { Some(mse(&test)) };
    let smoothed_m_pt = obs.iter().map(|c| cell_objective(c, &weighting.weights, cfg, None).mbar).collect();
    Ok(FitResult {
        weighting,
        train_mse,
        test_mse,
        objective_trace: trace,
        smoothed_m_pt,
        test_cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(25, 1e-3).unwrap()
    }

    #[test]
    fn crossover_limits() {
        let g = grid();
        let mut w = vec![0.0; 26];
        w[25] = 1.0;
        let m = crossover_point(100, 1.0, &g, &Weighting::PerStep(w), 2.0).unwrap();
        assert!((m - 100.0).abs() < 1e-4);
        let m = crossover_point(100, 1e12, &g, &Weighting::Constant(1.0), 2.0).unwrap();
        assert!((m - 100.0).abs() < 1e-6);
        assert!(crossover_point(100, 1.0, &g, &Weighting::Constant(0.0), 2.0).is_err());
        assert!(crossover_point(100, 1.0, &g, &Weighting::Constant(1.0), 2.5).is_err());
    }

    #[test]
    fn crossover_constant_weighting_by_summation() {
        let g = grid();
        let m = crossover_point(1, 1.0, &g, &Weighting::Constant(3.0), 2.0).unwrap();
        let mut acc = 0.0;
        for l in 0..=25 {
            let t = 0.999 - 0.998 * l as f64 / 25.0;
            let psi = (1.0 - t * t) / (t * t);
            acc += 1.0 / (psi + 1.0);
        }
        // 1 / (psi + 1) = t^2 on this schedule
        assert!((m - (1.0 - 0.5 * acc / 26.0)).abs() < 1e-12);
    }

    #[test]
    fn crossover_monotone() {
        let g = grid();
        let w = Weighting::NoisePrediction;
        let a = crossover_point(50, 0.5, &g, &w, 1.5).unwrap();
        assert!(crossover_point(50, 1.0, &g, &w, 1.5).unwrap() > a);
        assert!(crossover_point(50, 0.5, &g, &w, 2.0).unwrap() > a);
    }

    #[test]
    fn crossover_m_inverts_single_step() {
        let g = grid();
        let approx = ApproxConfig::default();
        let l = 20;
        let mut w = vec![0.0; 26];
        w[l] = 1.0;
        let (n, d, var) = (80, 30, 1.0);
        let m = crossover_m(n, d, var, &g, &Weighting::PerStep(w.clone()), &approx).unwrap();
        let frac = 1.0 - 1.0 / (approx.c * (g.snrs[l] * var + 1.0));
        let exact = frac * n as f64;
        assert!((m as f64 - exact).abs() <= 0.5 + 1e-9, "{m} vs {exact}");

        // weight at the cleanest grid point, where the generalizing excess vanishes
        let mut w = vec![0.0; 26];
        w[25] = 1.0;
        assert_eq!(crossover_m(n, d, var, &g, &Weighting::PerStep(w), &approx).unwrap(), n);

        let ws: Vec<f64> = (0..26).map(|i| 1.0 + (i as f64).sin().abs()).collect();
        let scaled: Vec<f64> = ws.iter().map(|v| v * 37.5).collect();
        assert_eq!(
            crossover_m(n, d, var, &g, &Weighting::PerStep(ws), &approx).unwrap(),
            crossover_m(n, d, var, &g, &Weighting::PerStep(scaled), &approx).unwrap()
        );
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let g = TimeGrid::new(6, 1e-3).unwrap();
        let approx = ApproxConfig::default();
        let cells = [
            CellObservation::new(20, 5, 2, 1.0, 15, &g, &approx).unwrap(),
            CellObservation::new(30, 8, 3, 1.0, 25, &g, &approx).unwrap(),
        ];
        let refs: Vec<&CellObservation> = cells.iter().collect();
        let cfg = FitConfig {
            tau: 0.5,
            beta_sparsity: 0.05,
            ..FitConfig::new(1)
        };
        let logits: Vec<f64> = (0..7).map(|i| 0.3 * (i as f64).cos()).collect();
        let (_, grad) = smoothed_objective(&refs, &logits, &cfg, true);
        let grad = grad.unwrap();
        for i in 0..7 {
            let h = 1e-5;
            let mut p = logits.clone();
            p[i] += h;
            let fp = smoothed_objective(&refs, &p, &cfg, false).0;
            p[i] -= 2.0 * h;
            let fm = smoothed_objective(&refs, &p, &cfg, false).0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn single_cell_is_matched() {
        let g = grid();
        let approx = ApproxConfig::default();
        let cell = CellObservation::new(50, 30, 3, 1.0, 40, &g, &approx).unwrap();
        let res = fit_loss_weighting(std::slice::from_ref(&cell), &FitConfig::new(0)).unwrap();
        assert!(res.train_mse <= (1.0 / 50.0f64).powi(2), "{}", res.train_mse);
        let s: f64 = res.weighting.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let again = fit_loss_weighting(std::slice::from_ref(&cell), &FitConfig::new(0)).unwrap();
        assert_eq!(res, again);
    }

    #[test]
    fn cold_limit_matches_hard_argmin() {
        let g = grid();
        let approx = ApproxConfig::default();
        let cell = CellObservation::new(60, 20, 4, 1.0, 45, &g, &approx).unwrap();
        let w = LossWeighting::from_logits((0..26).map(|i| -0.1 * i as f64).collect()).unwrap();
        let cfg = FitConfig {
            tau: 1e-4,
            beta_sparsity: 0.0,
            ..FitConfig::new(0)
        };
        let soft = cell_objective(&cell, &w.weights, &cfg, None).mbar;
        let hard = crossover_m(60, 20, 1.0, &g, &w.as_weighting(), &approx).unwrap();
        assert_eq!(table_argmin(&cell.table, &w.weights), hard);
        assert!((soft - hard as f64).abs() < 0.5, "{soft} vs {hard}");
    }

    #[test]
    fn weighting_csv() {
        let g = TimeGrid::new(3, 1e-3).unwrap();
        let w = LossWeighting::from_logits(vec![0.0, 1.0, 2.0, 0.5]).unwrap();
        let mut buf = Vec::new();
        w.write_csv(&mut buf, &g).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows[0], "t,psi,weight,weight_rescaled");
        assert_eq!(rows.len(), 5);
        assert!(rows[3].ends_with(",0.9"));
    }
}
