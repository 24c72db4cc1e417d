//! Full-batch training of isotropic and low-rank mixture denoisers on the
//! weighted denoising objective, with exact reverse-mode gradients and Adam.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoisers::{softmax_in_place, Denoiser, IsoDenoiserParams, LowRankDenoiserParams};
use crate::error::{domain, LabError, Result};
use crate::gmm_data::Dataset;
use crate::losses::noise_vector;
use crate::lowrank;
use crate::points::{dot, norm_sq, Points};
use crate::schedule::{TimeGrid, Weighting};
use crate::seeding::derive_seed;

/// Initial variance of a partially memorizing initialization.
pub const INIT_VAR: f64 = 1e-6;

/// How the shared variance is represented in the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarParam {
    /// Optimize `sigma^2` directly and project onto `[var_floor, inf)` after
    /// every step.
    Direct,
    /// Optimize `log sigma^2`.
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_epochs: usize,
    pub peak_lr: f64,
    pub end_lr: f64,
    pub warmup_fraction: f64,
    pub n_dup: usize,
    pub grid: TimeGrid,
    pub weighting: Weighting,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub var_param: VarParam,
    pub var_floor: f64,
    /// Redraw the noise bank every epoch instead of holding it fixed.
    pub resample_noise: bool,
    /// Image model only: keep templates at their initial values.
    pub freeze_templates: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl TrainConfig {
    /// Desk-scale defaults: 5000 epochs, 16 draws per sample, `L = 25`.
    /// Adam moves `log sigma^2` by about `lr` per step, so the clock is
    /// compressed (peak 1e-2, beta2 0.99) to let the variance travel from
    /// `1e-6` to order one within the shorter budget.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_epochs: 5000,
            peak_lr: 1e-2,
            end_lr: 1e-5,
            warmup_fraction: 0.1,
            n_dup: 16,
            grid: TimeGrid::new(25, 1e-3).expect("static grid"),
            weighting: Weighting::NoisePrediction,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            seed,
            var_param: VarParam::Log,
            var_floor: 1e-12,
            resample_noise: false,
            freeze_templates: false,
        }
    }

    /// 50000 epochs, 100 draws per sample, peak 1e-3, Adam (0.9, 0.999, 1e-8).
    pub fn paper(seed: u64) -> Self {
        Self {
            n_epochs: 50_000,
            n_dup: 100,
            peak_lr: 1e-3,
            end_lr: 1e-6,
            adam_beta2: 0.999,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.end_lr > 0.0 && self.end_lr <= self.peak_lr) {
            return domain("need 0 < end_lr <= peak_lr");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return domain("warmup_fraction must lie in (0, 1)");
        }
        if self.n_dup == 0 {
            return domain("n_dup must be at least 1");
        }
        if !(self.var_floor > 0.0) {
            return domain("var_floor must be positive");
        }
        Ok(())
    }

    fn warmup_epochs(&self) -> usize {
        (self.n_epochs as f64 * self.warmup_fraction).floor() as usize
    }
}

/// Warmup-decay schedule: linear from 0 to `peak_lr` over the first
/// `warmup_fraction` of epochs, then linear down to `end_lr` at the last epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.n_epochs {
        return domain(format!("epoch {epoch} outside [0, {})", cfg.n_epochs));
    }
    let w = cfg.warmup_epochs();
    if epoch < w {
        return Ok(cfg.peak_lr * epoch as f64 / w as f64);
    }
    let last = cfg.n_epochs - 1;
    if last == w {
        return Ok(cfg.peak_lr);
    }
    let frac = (epoch - w) as f64 / (last - w) as f64;
    Ok(cfg.peak_lr + (cfg.end_lr - cfg.peak_lr) * frac)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) {
        self.step += 1;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((th, g), (m, v)) in theta.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *th -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Trainable denoiser parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Params {
    Isotropic(IsoDenoiserParams),
    LowRank(LowRankDenoiserParams),
}

impl Params {
    pub fn var(&self) -> f64 {
        match self {
            Params::Isotropic(p) => p.var,
            Params::LowRank(p) => p.var,
        }
    }

    pub fn n_components(&self) -> usize {
        match self {
            Params::Isotropic(p) => p.n_components(),
            Params::LowRank(p) => p.n_components(),
        }
    }

    /// Component means in the ambient space.
    pub fn means(&self) -> Points {
        match self {
            Params::Isotropic(p) => p.means.clone(),
            Params::LowRank(p) => {
                let rows: Vec<Vec<f64>> = (0..p.n_components())
                    .map(|i| lowrank::kron(p.color_means.point(i), p.templates.point(i)))
                    .collect();
                Points::from_rows(&rows).expect("at least one component")
            }
        }
    }

    /// Flat optimizer vector; the variance coordinate is last.
    pub fn pack(&self, vp: VarParam) -> Vec<f64> {
        let mut out = match self {
            Params::Isotropic(p) => p.means.as_flat().to_vec(),
            Params::LowRank(p) => {
                let mut v = p.templates.as_flat().to_vec();
                v.extend_from_slice(p.color_means.as_flat());
                v
            }
        };
        out.push(match vp {
            VarParam::Direct => self.var(),
            VarParam::Log => self.var().ln(),
        });
        out
    }

    /// Inverse of [`Params::pack`], using `self` for the shapes.
    pub fn unpack(&self, theta: &[f64], vp: VarParam) -> Params {
        let (body, last) = theta.split_at(theta.len() - 1);
        let var = match vp {
            VarParam::Direct => last[0],
            VarParam::Log => last[0].exp(),
        };
        match self {
            Params::Isotropic(p) => Params::Isotropic(IsoDenoiserParams {
                means: Points::from_flat(p.means.dim(), body.to_vec()).expect("shape"),
                var,
            }),
            Params::LowRank(p) => {
                let nt = p.templates.as_flat().len();
                Params::LowRank(LowRankDenoiserParams {
                    templates: Points::from_flat(p.templates.dim(), body[..nt].to_vec()).expect("shape"),
                    color_means: Points::from_flat(p.color_means.dim(), body[nt..].to_vec()).expect("shape"),
                    var,
                })
            }
        }
    }
}

impl Denoiser for Params {
    fn dim(&self) -> usize {
        match self {
            Params::Isotropic(p) => p.dim(),
            Params::LowRank(p) => p.dim(),
        }
    }

    fn denoise(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Params::Isotropic(p) => p.denoise(t, x),
            Params::LowRank(p) => p.denoise(t, x),
        }
    }
}

/// Partial-memorization initialization: `M` distinct training samples as
/// means and variance `1e-6`.
pub fn init_partial_mem<R: Rng + ?Sized>(dataset: &Dataset, m: usize, rng: &mut R) -> Result<IsoDenoiserParams> {
    if m == 0 || m > dataset.len() {
        return domain(format!("M = {m} outside [1, {}]", dataset.len()));
    }
    let idx = index::sample(rng, dataset.len(), m).into_vec();
    IsoDenoiserParams::new(dataset.samples.select(&idx), INIT_VAR)
}

/// Image-model variant: each selected sample `y` keeps its generating
/// template `x` and the color `u` solving `u ⊗ x = y` on the template support.
pub fn init_partial_mem_lowrank<R: Rng + ?Sized>(
    dataset: &Dataset,
    templates: &Points,
    m: usize,
    rng: &mut R,
) -> Result<LowRankDenoiserParams> {
    if m == 0 || m > dataset.len() {
        return domain(format!("M = {m} outside [1, {}]", dataset.len()));
    }
    let p = templates.dim();
    if !dataset.dim().is_multiple_of(p) {
        return domain("sample dimension is not a multiple of the template size");
    }
    let n_c = dataset.dim() / p;
    let idx = index::sample(rng, dataset.len(), m).into_vec();
    let mut tpl = Points::zeros(p, 0);
    let mut colors = Points::zeros(n_c, 0);
    for &i in &idx {
        let x = templates.point(dataset.labels[i]);
        let nx = norm_sq(x);
        if nx == 0.0 {
            return Err(LabError::Degenerate(format!("sample {i} has a zero template")));
        }
        let u: Vec<f64> = lowrank::apply_adjoint(x, dataset.samples.point(i)).iter().map(|v| v / nx).collect();
        tpl.push(x);
        colors.push(&u);
    }
    LowRankDenoiserParams::new(tpl, colors, INIT_VAR)
}

/// Fixed standard-normal draws, `n_dup` per training sample. Column
/// `i * n_dup + r` is the draw `z^{i,r}`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBank {
    pub n_dup: usize,
    pub z: Points,
}

impl NoiseBank {
    pub fn draw(seed: u64, n: usize, n_dup: usize, dim: usize) -> Self {
        let mut z = Points::zeros(dim, 0);
        for i in 0..n {
            for r in 0..n_dup {
                z.push(&noise_vector(seed, i, r, dim));
            }
        }
        Self { n_dup, z }
    }
}

fn check_bank(dataset: &Dataset, bank: &NoiseBank) -> Result<()> {
    if dataset.is_empty() {
        return domain("empty dataset");
    }
    if bank.z.dim() != dataset.dim() || bank.z.len() != dataset.len() * bank.n_dup {
        return domain("noise bank does not match the dataset");
    }
    Ok(())
}


/// Weighted full-batch objective and its gradient. The gradient is returned in
/// the shape of `params`, with the variance slot holding `d loss / d sigma^2`.
pub fn loss_and_grad(
    params: &Params,
    dataset: &Dataset,
    grid: &TimeGrid,
    weighting: &Weighting,
    bank: &NoiseBank,
) -> Result<(f64, Params)> {
    check_bank(dataset, bank)?;
    let lambda = weighting.values(grid)?;
    if let Some(i) = grid.sigmas.iter().position(|s| *s == 0.0) {
        return domain(format!("grid point {i} has sigma_t = 0"));
    }
    match params {
        Params::Isotropic(p) => iso_loss_and_grad(p, dataset, grid, &lambda, bank),
        Params::LowRank(p) => lowrank_loss_and_grad(p, dataset, grid, &lambda, bank),
    }
}

/// Parts of the isotropic objective fixed by the data and the noise bank.
struct IsoWorkspace {
    n_dup: usize,
    x0: DMatrix<f64>,
    z: DMatrix<f64>,
    x0_sq: Vec<f64>,
    z_sq: Vec<f64>,
    x0_z: Vec<f64>,
}

impl IsoWorkspace {
    fn new(dataset: &Dataset, bank: &NoiseBank) -> Self {
        let x0 = dataset.samples.to_matrix();
        let z = bank.z.to_matrix();
        let x0_sq = dataset.samples.iter().map(norm_sq).collect();
        let z_sq = bank.z.iter().map(norm_sq).collect();
        let x0_z = bank
            .z
            .iter()
            .enumerate()
            .map(|(c, zc)| dot(dataset.samples.point(c / bank.n_dup), zc))
            .collect();
        Self {
            n_dup: bank.n_dup,
            x0,
            z,
            x0_sq,
            z_sq,
            x0_z,
        }
    }
}

fn iso_loss_and_grad(
    p: &IsoDenoiserParams,
    dataset: &Dataset,
    grid: &TimeGrid,
    lambda: &[f64],
    bank: &NoiseBank,
) -> Result<(f64, Params)> {
    if p.means.dim() != dataset.dim() {
        return domain("parameter dimension does not match the data");
    }
    iso_objective(p, &IsoWorkspace::new(dataset, bank), grid, lambda)
}

/// Every product with the noise bank is accumulated over timesteps and
/// applied once, since `x_t = a x_0 + s z` shares `z` across `t`.
fn iso_objective(p: &IsoDenoiserParams, ws: &IsoWorkspace, grid: &TimeGrid, lambda: &[f64]) -> Result<(f64, Params)> {
    let d = ws.x0.nrows();
    let n = ws.x0.ncols();
    let n_dup = ws.n_dup;
    let b = ws.z.ncols();
    let m = p.n_components();
    let var = p.var;
    let mu = p.means.to_matrix();
    let mu_t = mu.transpose();
    let mu_sq: Vec<f64> = p.means.iter().map(norm_sq).collect();
    let g_z = &mu_t * &ws.z;
    let g_0 = &mu_t * &ws.x0;
    let n_t = grid.len() as f64;

    let mut loss = 0.0;
    let mut g_var = 0.0;
    let mut direct = DMatrix::<f64>::zeros(d, m);
    let mut diag = vec![0.0; m];
    let mut acc_0 = DMatrix::<f64>::zeros(m, b);
    let mut acc_z = DMatrix::<f64>::zeros(m, b);
    let mut logits = DMatrix::<f64>::zeros(m, b);
    let mut pmat = DMatrix::<f64>::zeros(m, b);
    let mut mbar = DMatrix::<f64>::zeros(d, b);
    let mut x = DMatrix::<f64>::zeros(d, b);
    let mut dp = DMatrix::<f64>::zeros(m, b);
    let mut gout = DMatrix::<f64>::zeros(d, b);

    for (l, &lam) in lambda.iter().enumerate() {
        if lam == 0.0 {
            continue;
        }
        let (a, s) = (grid.alphas[l], grid.sigmas[l]);
        let s2 = s * s;
        let v = a * a * var + s2;
        let (c1, c2) = (a * var / v, s2 / v);
        let kappa = lam / (n_t * b as f64);

        // w_jb = -|a mu_j - x_b|^2 / (2v), expanded.
        {
            let (gz, g0, lg) = (g_z.as_slice(), g_0.as_slice(), logits.as_mut_slice());
            for c in 0..b {
                let i = c / n_dup;
                let x_sq = a * a * ws.x0_sq[i] + 2.0 * a * s * ws.x0_z[c] + s2 * ws.z_sq[c];
                let (gz, g0) = (&gz[c * m..(c + 1) * m], &g0[i * m..(i + 1) * m]);
                for (j, lv) in lg[c * m..(c + 1) * m].iter_mut().enumerate() {
                    let cross = a * g0[j] + s * gz[j];
                    *lv = -(a * a * mu_sq[j] - 2.0 * a * cross + x_sq).max(0.0) / (2.0 * v);
                }
            }
        }
        pmat.copy_from(&logits);
        for mut col in pmat.column_iter_mut() {
            softmax_in_place(col.as_mut_slice());
        }
        mbar.gemm(1.0, &mu, &pmat, 0.0);
        {
            let (x0s, zs, xs) = (ws.x0.as_slice(), ws.z.as_slice(), x.as_mut_slice());
            for c in 0..b {
                let i = c / n_dup;
                let (x0c, zc) = (&x0s[i * d..(i + 1) * d], &zs[c * d..(c + 1) * d]);
                for ((xv, x0v), zv) in xs[c * d..(c + 1) * d].iter_mut().zip(x0c).zip(zc) {
                    *xv = a * x0v + s * zv;
                }
            }
        }
        // gout = 2 kappa (c1 x + c2 mbar - x0)
        let (mut sq, mut g_c1, mut g_c2) = (0.0, 0.0, 0.0);
        {
            let (x0s, xs, ms, gs) = (ws.x0.as_slice(), x.as_slice(), mbar.as_slice(), gout.as_mut_slice());
            for c in 0..b {
                let i = c / n_dup;
                let r = c * d..(c + 1) * d;
                let mut col_sq = 0.0;
                for (((g, x0v), xv), mv) in gs[r.clone()].iter_mut().zip(&x0s[i * d..(i + 1) * d]).zip(&xs[r.clone()]).zip(&ms[r]) {
                    let res = c1 * xv + c2 * mv - x0v;
                    col_sq += res * res;
                    *g = 2.0 * kappa * res;
                    g_c1 += *g * xv;
                    g_c2 += *g * mv;
                }
                if !col_sq.is_finite() {
                    return Err(LabError::NonFinite {
                        t: grid.times[l],
                        sample: i,
                        draw: c % n_dup,
                        what: "denoiser output".into(),
                    });
                }
                sq += col_sq;
            }
        }
        loss += kappa * sq;

        dp.gemm(c2, &mu_t, &gout, 0.0);
        let mut g_v_logit = 0.0;
        {
            let (ps, ls, ds) = (pmat.as_slice(), logits.as_slice(), dp.as_mut_slice());
            let (a0, az) = (acc_0.as_mut_slice(), acc_z.as_mut_slice());
            // Output path c2 gout Pᵀ, with gout split into its x_0, z and
            // mbar parts, plus the logit path x gwᵀ split the same way.
            let (p0, pz) = (2.0 * kappa * c2 * (c1 * a - 1.0), 2.0 * kappa * c2 * c1 * s);
            let (w0, wz) = (a * a / v, a * s / v);
            for ((((pc, lc), dc), a0c), azc) in ps
                .chunks_exact(m)
                .zip(ls.chunks_exact(m))
                .zip(ds.chunks_exact_mut(m))
                .zip(a0.chunks_exact_mut(m))
                .zip(az.chunks_exact_mut(m))
            {
                let inner: f64 = dc.iter().zip(pc).map(|(g, p)| g * p).sum();
                for ((((dv, pv), lv), a0v), azv) in dc.iter_mut().zip(pc).zip(lc).zip(a0c.iter_mut()).zip(azc.iter_mut()) {
                    let gw = pv * (*dv - inner);
                    *dv = gw;
                    g_v_logit += gw * lv;
                    *a0v += p0 * pv + w0 * gw;
                    *azv += pz * pv + wz * gw;
                }
            }
        }
        direct.gemm(2.0 * kappa * c2 * c2, &mbar, &pmat.transpose(), 1.0);
        // Logit path: d w_jb / d mu_j = -(a/v)(a mu_j - x_b).
        for (j, row) in dp.row_iter().enumerate() {
            diag[j] -= a * a / v * row.sum();
        }

        // c1, c2 and the 1/v in the logits depend on sigma^2.
        let dv = a * a;
        g_var += g_c1 * (a / v - a * var * dv / (v * v)) + g_c2 * (-s2 * dv / (v * v)) - g_v_logit * dv / v;
    }

    let mut acc_0g = DMatrix::<f64>::zeros(m, n);
    for c in 0..b {
        let mut dst = acc_0g.column_mut(c / n_dup);
        dst += acc_0.column(c);
    }
    let mut g_mu = direct;
    for (j, mut col) in g_mu.column_iter_mut().enumerate() {
        col.axpy(diag[j], &mu.column(j), 1.0);
    }
    g_mu.gemm(1.0, &ws.x0, &acc_0g.transpose(), 1.0);
    g_mu.gemm(1.0, &ws.z, &acc_z.transpose(), 1.0);

    let grad = IsoDenoiserParams {
        means: Points::from_flat(d, g_mu.as_slice().to_vec())?,
        var: g_var,
    };
    Ok((loss, Params::Isotropic(grad)))
}

fn lowrank_loss_and_grad(
    p: &LowRankDenoiserParams,
    dataset: &Dataset,
    grid: &TimeGrid,
    lambda: &[f64],
    bank: &NoiseBank,
) -> Result<(f64, Params)> {
    let n_c = p.color_dim();
    let px = p.pixels();
    let dim = n_c * px;
    if dataset.dim() != dim {
        return domain("parameter dimension does not match the data");
    }
    if !(p.var > 0.0) {
        return domain("low-rank training needs a positive variance");
    }
    let m = p.n_components();
    let var = p.var;
    let n_dup = bank.n_dup;
    let b = bank.z.len();
    let n_t = grid.len() as f64;

    let tnorm: Vec<f64> = p.templates.iter().map(norm_sq).collect();
    if let Some(i) = tnorm.iter().position(|n| *n == 0.0) {
        return Err(LabError::Degenerate(format!("template {i} is identically zero")));
    }
    let means: Vec<Vec<f64>> = (0..m).map(|i| lowrank::kron(p.color_means.point(i), p.templates.point(i))).collect();

    let mut loss = 0.0;
    let mut g_tpl = vec![0.0; m * px];
    let mut g_col = vec![0.0; m * n_c];
    let mut g_var = 0.0;

    let mut r = vec![vec![0.0; dim]; m];
    let mut q = vec![vec![0.0; n_c]; m];
    let mut gx_dot = vec![0.0; n_c];
    let mut out = vec![0.0; dim];
    let mut xt = vec![0.0; dim];

    for (l, &lam) in lambda.iter().enumerate() {
        if lam == 0.0 {
            continue;
        }
        let (a, s) = (grid.alphas[l], grid.sigmas[l]);
        let s2 = s * s;
        let kappa = lam / (n_t * b as f64);
        let den: Vec<f64> = tnorm.iter().map(|n| s2 + a * a * var * n).collect();
        let beta: Vec<f64> = den.iter().map(|dn| a * a * var / dn).collect();

        for col in 0..b {
            let x0 = dataset.samples.point(col / n_dup);
            let z = bank.z.point(col);
            for ((xv, x), zv) in xt.iter_mut().zip(x0).zip(z) {
                *xv = a * x + s * zv;
            }
            let mut logits = vec![0.0; m];
            for i in 0..m {
                let tpl = p.templates.point(i);
                for ((rv, xv), mv) in r[i].iter_mut().zip(&xt).zip(&means[i]) {
                    *rv = xv - a * mv;
                }
                q[i] = lowrank::apply_adjoint(tpl, &r[i]);
                let ld = n_c as f64 * (a * a * var * tnorm[i] / s2).ln_1p();
                logits[i] = -0.5 * ld - 0.5 * (norm_sq(&r[i]) - beta[i] * norm_sq(&q[i])) / s2;
            }
            let mut pw = logits.clone();
            softmax_in_place(&mut pw);
            // out = Σ p_i h_i,  h_i = m_i + (β_i / a) A_i q_i
            out.fill(0.0);
            for i in 0..m {
                crate::points::axpy(pw[i], &means[i], &mut out);
                lowrank::add_apply(pw[i] * beta[i] / a, p.templates.point(i), &q[i], &mut out);
            }
            let mut g: Vec<f64> = out.iter().zip(x0).map(|(o, x)| o - x).collect();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(LabError::NonFinite {
                    t: grid.times[l],
                    sample: col / n_dup,
                    draw: col % n_dup,
                    what: "denoiser output".into(),
                });
            }
            loss += kappa * norm_sq(&g);
            g.iter_mut().for_each(|v| *v *= 2.0 * kappa);

            let mut dp = vec![0.0; m];
            for i in 0..m {
                let tpl = p.templates.point(i);
                let gx = lowrank::apply_adjoint(tpl, &g);
                dp[i] = dot(&g, &means[i]) + beta[i] / a * dot(&gx, &q[i]);
            }
            let inner = dot(&dp, &pw);

            for i in 0..m {
                let tpl = p.templates.point(i);
                let u = p.color_means.point(i);
                let gw = pw[i] * (dp[i] - inner);
                let bi = beta[i];
                let gxd = lowrank::apply_adjoint(tpl, &g);
                gx_dot.copy_from_slice(&gxd);

                let mut gq = vec![0.0; n_c];
                let mut gu = vec![0.0; n_c];
                let mut gt = vec![0.0; px];
                let mut gbeta = 0.0;
                let mut gn = 0.0;
                // Output path with weight p_i.
                for j in 0..n_c {
                    gq[j] += pw[i] * bi / a * gx_dot[j];
                    gu[j] += pw[i] * gx_dot[j];
                    gbeta += pw[i] / a * q[i][j] * gx_dot[j];
                    let gj = &g[j * px..(j + 1) * px];
                    crate::points::axpy(pw[i] * (u[j] + bi / a * q[i][j]), gj, &mut gt);
                }
                // Logit path.
                if gw != 0.0 {
                    for j in 0..n_c {
                        gu[j] += gw * a * q[i][j] / s2;
                        gq[j] += gw * bi * q[i][j] / s2;
                        let rj = &r[i][j * px..(j + 1) * px];
                        crate::points::axpy(gw * a * u[j] / s2, rj, &mut gt);
                    }
                    gbeta += gw * norm_sq(&q[i]) / (2.0 * s2);
                    gn += gw * (-0.5 * n_c as f64 * bi);
                    g_var += gw * (-0.5 * n_c as f64 * a * a * tnorm[i] / den[i]);
                }
                // beta(var, n) = a² var / (s2 + a² var n)
                g_var += gbeta * a * a * s2 / (den[i] * den[i]);
                gn += gbeta * (-bi * bi);
                // q_j = <y_j, x> - a u_j |x|²
                for j in 0..n_c {
                    gu[j] += gq[j] * (-a * tnorm[i]);
                    let rj = &r[i][j * px..(j + 1) * px];
                    crate::points::axpy(gq[j], rj, &mut gt);
                    crate::points::axpy(-gq[j] * a * u[j], tpl, &mut gt);
                }
                crate::points::axpy(2.0 * gn, tpl, &mut gt);

                crate::points::axpy(1.0, &gt, &mut g_tpl[i * px..(i + 1) * px]);
                crate::points::axpy(1.0, &gu, &mut g_col[i * n_c..(i + 1) * n_c]);
            }
        }
    }

    let grad = LowRankDenoiserParams {
        templates: Points::from_flat(px, g_tpl)?,
        color_means: Points::from_flat(n_c, g_col)?,
        var: g_var,
    };
    Ok((loss, Params::LowRank(grad)))
}

/// Optimizer-space gradient: `grad` packed, with the variance slot converted
/// to the chosen parameterization and frozen blocks zeroed.
fn packed_grad(params: &Params, grad: &Params, cfg: &TrainConfig) -> Vec<f64> {
    let mut g = grad.pack(VarParam::Direct);
    let last = g.len() - 1;
    if cfg.var_param == VarParam::Log {
        g[last] *= params.var();
    }
    if cfg.freeze_templates {
        if let Params::LowRank(p) = params {
            g[..p.templates.as_flat().len()].fill(0.0);
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub config: TrainConfig,
    /// Objective before each optimizer step.
    pub losses: Vec<f64>,
    /// Variance before each optimizer step.
    pub vars: Vec<f64>,
    /// Objective at the returned parameters.
    pub final_loss: f64,
    pub params: Params,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

/// JSON summary written to disk: loss trace subsampled every 100 epochs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub loss_every_100: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub params: Params,
    pub seed: u64,
}

impl TrainTrace {
    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            schema_version: 1,
            config: self.config.clone(),
            loss_every_100: self.losses.iter().cloned().enumerate().step_by(100).collect(),
            final_loss: self.final_loss,
            params: self.params.clone(),
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }
}

const DIVERGENCE_LOSS: f64 = 1e12;

/// Full-batch Adam on the weighted objective.
pub fn train(init: &Params, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    let start = Instant::now();
    let bank_for = |epoch: usize| {
        let seed = if cfg.resample_noise {
            derive_seed(cfg.seed, &[epoch as u64], "noise-bank")
        } else {
            derive_seed(cfg.seed, &[], "noise-bank")
        };
        NoiseBank::draw(seed, dataset.len(), cfg.n_dup, dataset.dim())
    };
    let mut bank = bank_for(0);
    let lambda = cfg.weighting.values(&cfg.grid)?;
    let objective = |params: &Params, bank: &NoiseBank, ws: &Option<IsoWorkspace>| match (params, ws) {
        (Params::Isotropic(p), Some(ws)) => iso_objective(p, ws, &cfg.grid, &lambda),
        _ => loss_and_grad(params, dataset, &cfg.grid, &cfg.weighting, bank),
    };
    let workspace = |bank: &NoiseBank| match init {
        Params::Isotropic(p) if p.means.dim() == dataset.dim() && check_bank(dataset, bank).is_ok() => {
            Some(IsoWorkspace::new(dataset, bank))
        }
        _ => None,
    };
    if cfg.grid.sigmas.contains(&0.0) {
        return domain("training grid contains sigma_t = 0");
    }
    let mut ws = workspace(&bank);
    let mut params = init.clone();
    let mut theta = params.pack(cfg.var_param);
    let mut adam = AdamState::new(theta.len());
    let mut losses = Vec::with_capacity(cfg.n_epochs);
    let mut vars = Vec::with_capacity(cfg.n_epochs);
    for epoch in 0..cfg.n_epochs {
        if cfg.resample_noise && epoch > 0 {
            bank = bank_for(epoch);
            ws = workspace(&bank);
        }
        let (loss, grad) = objective(&params, &bank, &ws)?;
        losses.push(loss);
        vars.push(params.var());
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(LabError::Divergence {
                epoch,
                loss,
                trace: losses,
            });
        }
        let g = packed_grad(&params, &grad, cfg);
        let lr = lr_at(epoch, cfg)?;
        adam.update(&mut theta, &g, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        if cfg.var_param == VarParam::Direct {
            let last = theta.len() - 1;
            theta[last] = theta[last].max(cfg.var_floor);
        }
        params = params.unpack(&theta, cfg.var_param);
    }
    let final_loss = objective(&params, &bank, &ws)?.0;
    Ok(TrainTrace {
        config: cfg.clone(),
        losses,
        vars,
        final_loss,
        params,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm_data::{gen_isotropic_means, sample_dataset, sample_lowrank, LowRankTarget};
    use crate::losses::{weighted_loss, MCConfig};
    use crate::seeding::rng_from_seed;
    use rand_distr::{Distribution, StandardNormal};

    fn small_iso(seed: u64) -> (Dataset, Params, TimeGrid, NoiseBank) {
        let mut rng = rng_from_seed(seed);
        let tg = gen_isotropic_means(2, 6, &mut rng).unwrap();
        let ds = sample_dataset(&tg, 8, seed + 1).unwrap();
        let means: Vec<f64> = (0..18).map(|_| StandardNormal.sample(&mut rng)).collect();
        let p = Params::Isotropic(IsoDenoiserParams::new(Points::from_flat(6, means).unwrap(), 0.7).unwrap());
        let grid = TimeGrid::new(4, 1e-3).unwrap();
        let bank = NoiseBank::draw(seed + 2, 8, 3, 6);
        (ds, p, grid, bank)
    }

    fn small_lowrank(seed: u64) -> (Dataset, Params, TimeGrid, NoiseBank) {
        let mut rng = rng_from_seed(seed);
        let tpl = Points::from_flat(3, (0..6).map(|_| rng.random_range(0.2..1.0)).collect()).unwrap();
        let target = LowRankTarget::new(tpl, Points::from_flat(2, vec![1.0, -0.5, 0.3, 0.8]).unwrap(), 0.5).unwrap();
        let ds = sample_lowrank(&target, 8, seed + 1).unwrap();
        // Parameters near the generating ones, as met during training.
        let templates: Vec<f64> = (0..9).map(|k| target.templates.as_flat()[k % 6] + 0.1 * rng.random_range(-1.0..1.0)).collect();
        let colors: Vec<f64> = (0..6).map(|k| target.color_means.as_flat()[k % 4] + 0.3 * rng.random_range(-1.0..1.0)).collect();
        let p = Params::LowRank(
            LowRankDenoiserParams::new(Points::from_flat(3, templates).unwrap(), Points::from_flat(2, colors).unwrap(), 0.6).unwrap(),
        );
        let grid = TimeGrid::new(4, 1e-3).unwrap();
        let bank = NoiseBank::draw(seed + 2, 8, 3, 6);
        (ds, p, grid, bank)
    }

    fn fd_check(ds: &Dataset, p: &Params, grid: &TimeGrid, bank: &NoiseBank) -> f64 {
        let w = Weighting::NoisePrediction;
        let (_, g) = loss_and_grad(p, ds, grid, &w, bank).unwrap();
        let g = g.pack(VarParam::Direct);
        let theta = p.pack(VarParam::Direct);
        let mut worst: f64 = 0.0;
        let eval = |th: &[f64]| loss_and_grad(&p.unpack(th, VarParam::Direct), ds, grid, &w, bank).unwrap().0;
        for k in 0..theta.len() {
            let h = 1e-4 * (1.0 + theta[k].abs());
            // Five-point central stencil.
            let at = |c: f64| {
                let mut th = theta.clone();
                th[k] += c * h;
                eval(&th)
            };
            let fd = (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * h);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn iso_gradient_matches_finite_differences() {
        let (ds, p, grid, bank) = small_iso(1);
        let err = fd_check(&ds, &p, &grid, &bank);
        assert!(err <= 1e-5, "max relative error {err}");
    }

    #[test]
    fn lowrank_gradient_matches_finite_differences() {
        let (ds, p, grid, bank) = small_lowrank(2);
        let err = fd_check(&ds, &p, &grid, &bank);
        assert!(err <= 1e-5, "max relative error {err}");
    }

    #[test]
    fn objective_matches_weighted_loss() {
        let (ds, p, grid, _) = small_iso(3);
        let cfg = MCConfig::new(3, 99).unwrap();
        let bank = NoiseBank::draw(99, ds.len(), 3, ds.dim());
        let w = Weighting::NoisePrediction;
        let (l, _) = loss_and_grad(&p, &ds, &grid, &w, &bank).unwrap();
        let mc = weighted_loss(&p, &ds, &grid, &w, &cfg).unwrap();
        assert!((l - mc.value).abs() <= 1e-10 * mc.value);

        let (ds, p, grid, _) = small_lowrank(4);
        let bank = NoiseBank::draw(99, ds.len(), 3, ds.dim());
        let (l, _) = loss_and_grad(&p, &ds, &grid, &w, &bank).unwrap();
        let mc = weighted_loss(&p, &ds, &grid, &w, &cfg).unwrap();
        assert!((l - mc.value).abs() <= 1e-10 * mc.value);
    }

    #[test]
    fn mirror_symmetric_gradients() {
        let x = vec![vec![1.0, 0.5], vec![-1.0, 0.5]];
        let ds = Dataset {
            samples: Points::from_rows(&x).unwrap(),
            labels: vec![0, 1],
            seed: 0,
        };
        let p = Params::Isotropic(IsoDenoiserParams::new(Points::from_rows(&[vec![0.8, 0.2], vec![-0.8, 0.2]]).unwrap(), 0.3).unwrap());
        // Mirror the noise too: z for sample 1 is z for sample 0 with x flipped.
        let base = NoiseBank::draw(5, 1, 4, 2);
        let mut z = base.z.clone();
        for r in 0..4 {
            let v = base.z.point(r);
            z.push(&[-v[0], v[1]]);
        }
        let bank = NoiseBank { n_dup: 4, z };
        let grid = TimeGrid::new(3, 0.1).unwrap();
        let (_, g) = loss_and_grad(&p, &ds, &grid, &Weighting::Constant(1.0), &bank).unwrap();
        let Params::Isotropic(g) = g else { unreachable!() };
        assert!((g.means.point(0)[0] + g.means.point(1)[0]).abs() < 1e-12);
        assert!((g.means.point(0)[1] - g.means.point(1)[1]).abs() < 1e-12);
    }

    #[test]
    fn schedule_points() {
        let mut cfg = TrainConfig::paper(0);
        cfg.n_epochs = 1000;
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert!((lr_at(100, &cfg).unwrap() - 1e-3).abs() < 1e-15);
        assert!((lr_at(999, &cfg).unwrap() - 1e-6).abs() < 1e-15);
        assert!(lr_at(1000, &cfg).is_err());
        assert!(lr_at(50, &cfg).unwrap() < lr_at(60, &cfg).unwrap());
        assert!(lr_at(500, &cfg).unwrap() > lr_at(600, &cfg).unwrap());
    }

    #[test]
    fn init_cases() {
        let mut rng = rng_from_seed(6);
        let tg = gen_isotropic_means(3, 4, &mut rng).unwrap();
        let ds = sample_dataset(&tg, 10, 7).unwrap();
        let full = init_partial_mem(&ds, 10, &mut rng).unwrap();
        assert_eq!(full.var, 1e-6);
        let mut a: Vec<Vec<f64>> = full.means.iter().map(|v| v.to_vec()).collect();
        let mut b: Vec<Vec<f64>> = ds.samples.iter().map(|v| v.to_vec()).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
        let one = init_partial_mem(&ds, 1, &mut rng).unwrap();
        assert!(ds.samples.iter().any(|x| x == one.means.point(0)));
        assert!(init_partial_mem(&ds, 11, &mut rng).is_err());

        let tpl = Points::from_flat(4, vec![0.0, 1.0, 0.5, 2.0, 1.0, 0.0, 0.0, 0.3]).unwrap();
        let target = LowRankTarget::new(tpl.clone(), Points::from_flat(3, vec![0.5; 6]).unwrap(), 1.0).unwrap();
        let ds = sample_lowrank(&target, 6, 8).unwrap();
        let init = init_partial_mem_lowrank(&ds, &tpl, 6, &mut rng).unwrap();
        for i in 0..6 {
            let rec = lowrank::kron(init.color_means.point(i), init.templates.point(i));
            assert!(ds.samples.iter().any(|y| y.iter().zip(&rec).all(|(a, b)| (a - b).abs() < 1e-10)));
        }
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let (ds, p, grid, _) = small_iso(9);
        let mut cfg = TrainConfig::desk(3);
        cfg.grid = grid;
        cfg.n_dup = 2;
        cfg.n_epochs = 0;
        let tr = train(&p, &ds, &cfg).unwrap();
        assert_eq!(tr.params, p);
        assert!(tr.losses.is_empty());

        cfg.n_epochs = 50;
        let a = train(&p, &ds, &cfg).unwrap();
        let b = train(&p, &ds, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
        assert!(a.losses.iter().all(|l| l.is_finite()));
        assert!(a.final_loss < a.losses[0]);

        cfg.var_param = VarParam::Log;
        let c = train(&p, &ds, &cfg).unwrap();
        assert!(c.params.var() > 0.0);
    }

    #[test]
    fn log_and_direct_gradients_agree() {
        let (ds, p, grid, bank) = small_iso(10);
        let w = Weighting::NoisePrediction;
        let (_, g) = loss_and_grad(&p, &ds, &grid, &w, &bank).unwrap();
        let mut cfg = TrainConfig::desk(0);
        cfg.var_param = VarParam::Log;
        let gl = packed_grad(&p, &g, &cfg);
        let theta = p.pack(VarParam::Log);
        let k = theta.len() - 1;
        let h = 1e-6;
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[k] += h;
        tm[k] -= h;
        let lp = loss_and_grad(&p.unpack(&tp, VarParam::Log), &ds, &grid, &w, &bank).unwrap().0;
        let lm = loss_and_grad(&p.unpack(&tm, VarParam::Log), &ds, &grid, &w, &bank).unwrap().0;
        assert!(((lp - lm) / (2.0 * h) - gl[k]).abs() < 1e-6 * gl[k].abs().max(1.0));
    }

    #[test]
    fn nan_guard_reports_location() {
        let (ds, p, grid, mut bank) = small_iso(11);
        bank.z.point_mut(7)[0] = f64::NAN;
        let err = loss_and_grad(&p, &ds, &grid, &Weighting::Constant(1.0), &bank).unwrap_err();
        match err {
            LabError::NonFinite { sample, draw, .. } => assert_eq!((sample, draw), (2, 1)),
            e => panic!("unexpected {e}"),
        }
    }
}
