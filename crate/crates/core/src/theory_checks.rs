//! Monte-Carlo checks of the concentration, coupon-collector and softmax
//! bounds used in the loss approximations.
//!
//! Probability bounds are checked as `rate <= bound + 3 se` with `se` the
//! binomial standard error of the empirical rate. Deterministic inequalities
//! (the softmax lemmas) are checked instance by instance.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::{restricted_softmax, softmax};
use crate::error::{domain, Result};
use crate::gmm_data::IsotropicTarget;
use crate::points::sq_dist;
use crate::schedule::vp_coefficients;
use crate::seeding::{term_rng, LabRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum CheckStatus {
    Checked,
    /// Preconditions of the bound do not hold; nothing was sampled.
    Skipped(String),
    /// The statement holds by definition (e.g. a single component).
    Trivial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub trials: u64,
    pub violations: u64,
    /// Bound on the violation probability; absent for per-instance checks.
    pub bound: Option<f64>,
    pub std_err: f64,
    /// Smallest slack seen: `bound + 3 se - rate` for probability bounds,
    /// `min(bound - lhs)` over instances for deterministic ones.
    pub worst_margin: Option<f64>,
    pub params: BTreeMap<String, f64>,
    pub status: CheckStatus,
}

impl BoundReport {
    fn new(name: &str, params: &[(&str, f64)]) -> Self {
        Self {
            name: name.to_string(),
            trials: 0,
            violations: 0,
            bound: None,
            std_err: 0.0,
            worst_margin: None,
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            status: CheckStatus::Checked,
        }
    }

    fn skipped(mut self, reason: String) -> Self {
        self.status = CheckStatus::Skipped(reason);
        self
    }

    fn trivial(mut self) -> Self {
        self.status = CheckStatus::Trivial;
        self
    }

    fn with_rate(mut self, trials: u64, violations: u64, bound: f64) -> Self {
        let rate = violations as f64 / trials as f64;
        self.trials = trials;
        self.violations = violations;
        self.bound = Some(bound);
        self.std_err = (rate * (1.0 - rate) / trials as f64).sqrt();
        self.worst_margin = Some(bound + 3.0 * self.std_err - rate);
        self
    }

    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.violations as f64 / self.trials as f64
        }
    }

    /// True for skipped and trivial reports.
    pub fn satisfied(&self) -> bool {
        match self.status {
            CheckStatus::Checked => self.worst_margin.is_none_or(|m| m >= 0.0),
            _ => true,
        }
    }
}

pub fn write_json_lines<W: Write>(mut w: W, reports: &[BoundReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn normal(rng: &mut LabRng) -> f64 {
    StandardNormal.sample(rng)
}

fn count_events(trials: u64, seed: u64, event: impl Fn(&mut LabRng) -> bool + Sync) -> u64 {
    (0..trials)
        .into_par_iter()
        .map(|i| event(&mut term_rng(seed, i as usize, 0)) as u64)
        .sum()
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eps) {
        return domain(format!("eps {eps} outside [0, 1]"));
    }
    Ok(())
}

/// `P(|X - p| >= eps p) <= 2 exp(-p eps^2 / 8)` for `X ~ chi^2(p)`.
pub fn check_chi2_tail(p: usize, eps: f64, trials: u64, seed: u64) -> Result<BoundReport> {
    check_eps(eps)?;
    if p == 0 || trials == 0 {
        return domain("need p >= 1 and at least one trial");
    }
    let pf = p as f64;
    let hits = count_events(trials, seed, |rng| {
        let x: f64 = (0..p).map(|_| normal(rng).powi(2)).sum();
        (x - pf).abs() >= eps * pf
    });
    let bound = 2.0 * (-pf * eps * eps / 8.0).exp();
    Ok(BoundReport::new("chi2_tail", &[("p", pf), ("eps", eps)]).with_rate(trials, hits, bound))
}

/// For `g ~ N(mu, var I)`:
/// `P(| |g|^2 - (|mu|^2 + var d) | >= eps s sqrt(d) (s sqrt(d) + |mu|)) <= 4 exp(-d eps^2 / 8)`.
pub fn check_gaussian_norm(mu_norm: f64, var: f64, d: usize, eps: f64, trials: u64, seed: u64) -> Result<BoundReport> {
    check_eps(eps)?;
    if d == 0 || trials == 0 || !(var > 0.0) || !(mu_norm >= 0.0) {
        return domain("need d >= 1, var > 0, |mu| >= 0 and at least one trial");
    }
    let df = d as f64;
    let s = var.sqrt();
    let centre = mu_norm * mu_norm + var * df;
    let width = eps * s * df.sqrt() * (s * df.sqrt() + mu_norm);
    // by rotation invariance the mean can sit on the first axis
    let hits = count_events(trials, seed, |rng| {
        let mut n2 = 0.0;
        for j in 0..d {
            let g = s * normal(rng) + if j == 0 { mu_norm } else { 0.0 };
            n2 += g * g;
        }
        (n2 - centre).abs() >= width
    });
    let bound = 4.0 * (-df * eps * eps / 8.0).exp();
    Ok(BoundReport::new("gaussian_norm", &[("mu_norm", mu_norm), ("var", var), ("d", df), ("eps", eps)])
        .with_rate(trials, hits, bound))
}

/// Number of draws `ceil((1 + ln d) K ln K)` used by the coupon-collector check.
pub fn coupon_draws(k: usize, d: usize) -> usize {
    let (kf, df) = (k as f64, d as f64);
    ((1.0 + df.ln()) * kf * kf.ln()).ceil() as usize
}

/// Failure probability that some of `K` equally likely labels appears fewer
/// than twice among `coupon_draws(K, d)` draws is at most
/// `2 K^{-ln d} (1 + ln K ln d)`.
pub fn check_coupon_collector(k: usize, d: usize, trials: u64, seed: u64) -> Result<BoundReport> {
    let draws = coupon_draws(k, d);
    let report = BoundReport::new("coupon_collector", &[("K", k as f64), ("d", d as f64), ("draws", draws as f64)]);
    if k <= 1 {
        return Ok(report.trivial());
    }
    if d < 3 || trials == 0 {
        return domain("need d >= 3 and at least one trial");
    }
    let hits = count_events(trials, seed, |rng| {
        let mut counts = vec![0u32; k];
        for _ in 0..draws {
            counts[rng.random_range(0..k)] += 1;
        }
        counts.iter().any(|&c| c < 2)
    });
    let (kf, df) = (k as f64, d as f64);
    let bound = 2.0 * kf.powf(-df.ln()) * (1.0 + kf.ln() * df.ln());
    Ok(report.with_rate(trials, hits, bound))
}

/// Largest `eps` allowed by the coupling condition
/// `eps <= alpha gamma / (4 sqrt(d (alpha^2 var + sigma^2)))`.
pub fn gap_coupling_limit(target: &IsotropicTarget, t: f64) -> Result<f64> {
    let (a, s) = vp_coefficients(t)?;
    let gamma = target.min_mean_separation();
    let d = target.dim() as f64;
    Ok(a * gamma / (4.0 * (d * (a * a * target.var + s * s)).sqrt()))
}

/// Mean-gap lemma: for `x = alpha x_i + sigma g`,
/// `min_{k != k_i} |alpha mu_k - x|^2 - |alpha mu_{k_i} - x|^2 >= gamma^2 alpha^2 / 2`
/// fails with probability at most `4 K exp(-d eps^2 / 8)`.
pub fn check_gap_lemma(target: &IsotropicTarget, t: f64, eps: f64, trials: u64, seed: u64) -> Result<BoundReport> {
    check_eps(eps)?;
    let k = target.n_components();
    let d = target.dim();
    let report = BoundReport::new("gap_lemma", &[("K", k as f64), ("d", d as f64), ("t", t), ("eps", eps)]);
    if k <= 1 {
        return Ok(report.trivial());
    }
    if trials == 0 {
        return domain("need at least one trial");
    }
    let limit = gap_coupling_limit(target, t)?;
    if eps > limit {
        return Ok(report.skipped(format!("coupling condition needs eps <= {limit:.4e}")));
    }
    let (a, s) = vp_coefficients(t)?;
    let gamma = target.min_mean_separation();
    let sd = target.var.sqrt();
    let scaled: Vec<Vec<f64>> = target.means.iter().map(|m| m.iter().map(|v| a * v).collect()).collect();
    let hits = count_events(trials, seed, |rng| {
        let ki = rng.random_range(0..k);
        let x: Vec<f64> = target
            .means
            .point(ki)
            .iter()
            .map(|m| a * (m + sd * normal(rng)) + s * normal(rng))
            .collect();
        let own = sq_dist(&scaled[ki], &x);
        let other = (0..k)
            .filter(|&j| j != ki)
            .map(|j| sq_dist(&scaled[j], &x))
            .fold(f64::INFINITY, f64::min);
        other - own < gamma * gamma * a * a / 2.0
    });
    let bound = 4.0 * k as f64 * (-(d as f64) * eps * eps / 8.0).exp();
    let mut report = report.with_rate(trials, hits, bound);
    report.params.insert("gamma".into(), gamma);
    Ok(report)
}

/// For `x_1..x_n` iid `N(0, var I)` and arbitrary softmax weights `s`,
/// `d var (1 - 3 eps) <= |sum_{j<n} s_j x_j - x_n|^2 <= 2 d var (1 + 3 eps)`
/// fails with probability at most `6 n exp(-d eps^2 / 2)`.
pub fn check_softmax_norm(n: usize, d: usize, var: f64, eps: f64, trials: u64, seed: u64) -> Result<BoundReport> {
    if !(eps > 0.0 && eps < 1.0) {
        return domain("eps must lie in (0, 1)");
    }
    if n < 2 || d == 0 || trials == 0 || !(var > 0.0) {
        return domain("need n >= 2, d >= 1, var > 0 and at least one trial");
    }
    let sd = var.sqrt();
    let df = d as f64;
    let (lo, hi) = (df * var * (1.0 - 3.0 * eps), 2.0 * df * var * (1.0 + 3.0 * eps));
    let hits = count_events(trials, seed, |rng| {
        let logits: Vec<f64> = (0..n - 1).map(|_| 3.0 * normal(rng)).collect();
        let w = softmax(&logits);
        let mut acc = vec![0.0; d];
        for wj in &w {
            for a in acc.iter_mut() {
                *a += wj * sd * normal(rng);
            }
        }
        let v: f64 = acc.iter().map(|a| a - sd * normal(rng)).map(|e| e * e).sum();
        v < lo || v > hi
    });
    let bound = 6.0 * n as f64 * (-df * eps * eps / 2.0).exp();
    Ok(BoundReport::new("softmax_norm", &[("n", n as f64), ("d", df), ("var", var), ("eps", eps)]).with_rate(trials, hits, bound))
}

fn lp_norm(v: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    } else {
        v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

const NORMS: [f64; 4] = [1.0, 1.5, 2.0, f64::INFINITY];

/// Random instance: `n` distinct scores, a temperature and an `l_p` norm.
fn random_scores(rng: &mut LabRng) -> (Vec<f64>, f64, f64) {
    let n = rng.random_range(2..=64);
    let spread: f64 = 10f64.powf(rng.random_range(-1.0..1.5));
    let v: Vec<f64> = (0..n).map(|_| spread * normal(rng)).collect();
    let temp = 10f64.powf(rng.random_range(-2.0..1.0));
    let p = NORMS[rng.random_range(0..NORMS.len())];
    (v, temp, p)
}

fn argmax(v: &[f64]) -> usize {
    let mut k = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[k] {
            k = i;
        }
    }
    k
}

/// `|softmax(v / T) - e_k|_p <= 2 (n - 1) exp(-gamma / T)`, `gamma` the gap
/// between the two largest scores.
pub fn check_softmax_sparsity(instances: u64, seed: u64) -> BoundReport {
    let margins: Vec<f64> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = term_rng(seed, i as usize, 0);
            let (v, temp, p) = random_scores(&mut rng);
            let n = v.len();
            let k = argmax(&v);
            let gamma = (0..n).filter(|&j| j != k).map(|j| v[k] - v[j]).fold(f64::INFINITY, f64::min);
            let scaled: Vec<f64> = v.iter().map(|x| x / temp).collect();
            let mut diff = softmax(&scaled);
            diff[k] -= 1.0;
            let bound = 2.0 * (n - 1) as f64 * (-gamma / temp).exp();
            bound + roundoff(n) - lp_norm(&diff, p)
        })
        .collect();
    per_instance("softmax_sparsity", &margins)
}

/// `|softmax(v / T) - softmax(v|S / T)|_p <= (1 + |S|)^{1/p} (n - |S|) exp(-gamma_S / T)`
/// for a random subset `S` holding the argmax, `gamma_S` the gap to the best
/// score outside `S`.
pub fn check_restricted_softmax(instances: u64, seed: u64) -> BoundReport {
    let margins: Vec<f64> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = term_rng(seed, i as usize, 0);
            let (v, temp, p) = random_scores(&mut rng);
            let n = v.len();
            let k = argmax(&v);
            let size = rng.random_range(1..n);
            let mut subset: Vec<usize> = rand::seq::index::sample(&mut rng, n, size).into_vec();
            if !subset.contains(&k) {
                subset[0] = k;
            }
            subset.sort_unstable();
            let inside = |j: usize| subset.binary_search(&j).is_ok();
            let gamma = (0..n).filter(|&j| !inside(j)).map(|j| v[k] - v[j]).fold(f64::INFINITY, f64::min);
            let scaled: Vec<f64> = v.iter().map(|x| x / temp).collect();
            let full = softmax(&scaled);
            let part = restricted_softmax(&scaled, &subset);
            let diff: Vec<f64> = full.iter().zip(&part).map(|(a, b)| a - b).collect();
            let s = subset.len() as f64;
            let root = if p.is_infinite() { 1.0 } else { (1.0 + s).powf(1.0 / p) };
            let bound = root * (n as f64 - s) * (-gamma / temp).exp();
            bound + roundoff(n) - lp_norm(&diff, p)
        })
        .collect();
    per_instance("restricted_softmax", &margins)
}

/// The lemmas are exact-arithmetic statements. Each computed probability
/// carries a relative error of a few ulps, so allow `4 n eps_mach` in the
/// norm of a difference of two probability vectors.
fn roundoff(n: usize) -> f64 {
    4.0 * n as f64 * f64::EPSILON
}

fn per_instance(name: &str, margins: &[f64]) -> BoundReport {
    let mut r = BoundReport::new(name, &[]);
    r.trials = margins.len() as u64;
    r.violations = margins.iter().filter(|m| !(**m >= 0.0)).count() as u64;
    r.worst_margin = margins.iter().cloned().reduce(f64::min);
    r
}

/// The standard battery used by the CLI and the acceptance run.
pub fn standard_checks(seed: u64, target: &IsotropicTarget) -> Result<Vec<BoundReport>> {
    let t_mid = 0.36028;
    let eps_gap = gap_coupling_limit(target, t_mid)?.min(1.0);
    Ok(vec![
        check_chi2_tail(50, 0.5, 100_000, seed ^ 1)?,
        check_chi2_tail(200, 1.0, 100_000, seed ^ 2)?,
        check_gaussian_norm(50f64.sqrt(), 1.0, 50, 0.5, 100_000, seed ^ 3)?,
        check_gaussian_norm(0.0, 1.0, 50, 1.0, 100_000, seed ^ 4)?,
        check_coupon_collector(2, 50, 10_000, seed ^ 5)?,
        check_coupon_collector(12, 50, 10_000, seed ^ 6)?,
        check_gap_lemma(target, t_mid, eps_gap, 10_000, seed ^ 7)?,
        check_gap_lemma(target, 0.999, 0.5, 10_000, seed ^ 8)?,
        check_softmax_norm(10, 200, 1.0, 0.3, 10_000, seed ^ 9)?,
        check_softmax_sparsity(100_000, seed ^ 10),
        check_restricted_softmax(10_000, seed ^ 11),
    ])
}
