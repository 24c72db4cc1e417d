//! Target distributions: the equally weighted isotropic Gaussian mixture and
//! the low-rank "colored template" mixture, plus labeled dataset sampling,
//! template ingestion and the closed-form density of the noised marginal.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, LabError, Result};
use crate::lowrank;
use crate::points::{norm_sq, sq_dist, Points};
use crate::schedule::vp_coefficients;
use crate::seeding::rng_from_seed;

/// `(1/K) sum_k N(mu_k, var I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotropicTarget {
    pub means: Points,
    pub var: f64,
}

impl IsotropicTarget {
    /// `var = 0` is accepted so that degenerate datasets can be built in tests.
    pub fn new(means: Points, var: f64) -> Result<Self> {
        if means.is_empty() {
            return domain("target needs at least one component");
        }
        if !(var >= 0.0) || !var.is_finite() {
            return domain(format!("variance {var} must be finite and nonnegative"));
        }
        Ok(Self { means, var })
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.dim()
    }

    /// Smallest pairwise distance between component means (`inf` for K = 1).
    pub fn min_mean_separation(&self) -> f64 {
        let k = self.means.len();
        let mut best = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                best = best.min(sq_dist(self.means.point(i), self.means.point(j)).sqrt());
            }
        }
        best
    }
}

/// `(1/K) sum_k N(A_k u_k, var A_k A_kᵀ)` with `A_k = I ⊗ x_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankTarget {
    /// Flattened nonnegative templates, one per component.
    pub templates: Points,
    /// Color means, one `n_c`-vector per component.
    pub color_means: Points,
    pub var: f64,
}

impl LowRankTarget {
    pub fn new(templates: Points, color_means: Points, var: f64) -> Result<Self> {
        if templates.is_empty() || templates.len() != color_means.len() {
            return domain("need one color mean per template and at least one template");
        }
        for (i, t) in templates.iter().enumerate() {
            if t.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return domain(format!("template {i} has negative or non-finite pixels"));
            }
            if norm_sq(t) == 0.0 {
                return Err(LabError::Degenerate(format!("template {i} is identically zero")));
            }
        }
        if !(var >= 0.0) || !var.is_finite() {
            return domain(format!("variance {var} must be finite and nonnegative"));
        }
        Ok(Self {
            templates,
            color_means,
            var,
        })
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

    pub fn dim(&self) -> usize {
        self.color_dim() * self.pixels()
    }

    /// Component mean `u_k ⊗ x_k`.
    pub fn mean(&self, k: usize) -> Vec<f64> {
        lowrank::kron(self.color_means.point(k), self.templates.point(k))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Isotropic(IsotropicTarget),
    LowRank(LowRankTarget),
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::Isotropic(t) => t.dim(),
            Target::LowRank(t) => t.dim(),
        }
    }

    pub fn n_components(&self) -> usize {
        match self {
            Target::Isotropic(t) => t.n_components(),
            Target::LowRank(t) => t.n_components(),
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            Target::Isotropic(t) => sample_dataset(t, n, seed),
            Target::LowRank(t) => sample_lowrank(t, n, seed),
        }
    }

    /// Mean of component `k` in the ambient space.
    pub fn component_mean(&self, k: usize) -> Vec<f64> {
        match self {
            Target::Isotropic(t) => t.means.point(k).to_vec(),
            Target::LowRank(t) => t.mean(k),
        }
    }
}

/// Labeled training set. Labels are 0-based component indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Points,
    pub labels: Vec<usize>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.dim()
    }

    /// The first `m` samples (and labels).
    pub fn head(&self, m: usize) -> Dataset {
        Dataset {
            samples: self.samples.head(m),
            labels: self.labels[..m].to_vec(),
            seed: self.seed,
        }
    }

    /// Columnar CSV: `seed,label,x0,x1,...`, one row per sample.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["seed".to_string(), "label".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x{j}")));
        wr.write_record(&header)?;
        for (x, label) in self.samples.iter().zip(&self.labels) {
            let mut row = vec![self.seed.to_string(), label.to_string()];
            row.extend(x.iter().map(|v| format!("{v:e}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Dataset> {
        let mut rd = csv::Reader::from_reader(r);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut seed = 0;
        let mut dim = None;
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(LabError::Parse("dataset row has no coordinates".into()));
            }
            seed = parse_field(&rec[0])?;
            labels.push(parse_field(&rec[1])?);
            let d = rec.len() - 2;
            if *dim.get_or_insert(d) != d {
                return Err(LabError::Parse("ragged dataset rows".into()));
            }
            for f in rec.iter().skip(2) {
                data.push(parse_field(f)?);
            }
        }
        let Some(dim) = dim else {
            return Err(LabError::Parse("empty dataset".into()));
        };
        Ok(Dataset {
            samples: Points::from_flat(dim, data)?,
            labels,
            seed,
        })
    }
}

fn parse_field<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| LabError::Parse(format!("cannot parse '{s}'")))
}

fn standard_normal_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// `K` means uniform on the sphere of radius `sqrt(d)`, variance 1.
pub fn gen_isotropic_means<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<IsotropicTarget> {
    if k == 0 || d == 0 {
        return domain("need K >= 1 and d >= 1");
    }
    let radius = (d as f64).sqrt();
    let mut means = Points::zeros(d, 0);
    while means.len() < k {
        let g = standard_normal_vec(d, rng);
        let n = norm_sq(&g).sqrt();
        if n < 1e-12 {
            continue;
        }
        means.push(&g.iter().map(|v| v * radius / n).collect::<Vec<_>>());
    }
    IsotropicTarget::new(means, 1.0)
}

/// `n` labeled samples from the isotropic mixture.
pub fn sample_dataset(target: &IsotropicTarget, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return domain("need at least one sample");
    }
    let mut rng = rng_from_seed(seed);
    let (d, k) = (target.dim(), target.n_components());
    let sd = target.var.sqrt();
    let mut samples = Points::zeros(d, n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = rng.random_range(0..k);
        let mu = target.means.point(label);
        let x = samples.point_mut(i);
        for (xj, mj) in x.iter_mut().zip(mu) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *xj = mj + sd * z;
        }
        labels.push(label);
    }
    Ok(Dataset { samples, labels, seed })
}

/// `n` labeled samples `y = c ⊗ x_k`, `c ~ N(u_k, var I)`.
pub fn sample_lowrank(target: &LowRankTarget, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return domain("need at least one sample");
    }
    let mut rng = rng_from_seed(seed);
    let k = target.n_components();
    let sd = target.var.sqrt();
    let mut samples = Points::zeros(target.dim(), 0);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..k);
        let color: Vec<f64> = target
            .color_means
            .point(label)
            .iter()
            .map(|u| u + sd * { let z: f64 = StandardNormal.sample(&mut rng); z })
            .collect();
        samples.push(&lowrank::kron(&color, target.templates.point(label)));
        labels.push(label);
    }
    Ok(Dataset { samples, labels, seed })
}

/// Random color means `u_k ~ N(0, I)` with unit color variance.
pub fn lowrank_target_from_templates<R: Rng + ?Sized>(
    templates: Points,
    color_dim: usize,
    rng: &mut R,
) -> Result<LowRankTarget> {
    let mut colors = Points::zeros(color_dim, 0);
    for _ in 0..templates.len() {
        colors.push(&standard_normal_vec(color_dim, rng));
    }
    LowRankTarget::new(templates, colors, 1.0)
}

/// Bundled procedural templates: each is a sum of a few soft blobs and a
/// bar on a `side x side` canvas, scaled to a maximum of 1.
pub fn procedural_templates<R: Rng + ?Sized>(k: usize, side: usize, rng: &mut R) -> Result<Points> {
    if k == 0 || side == 0 {
        return domain("need at least one template of positive size");
    }
    let mut out = Points::zeros(side * side, 0);
    let s = side as f64;
    for _ in 0..k {
        let mut img = vec![0.0; side * side];
        let blobs = rng.random_range(1..=3);
        for _ in 0..blobs {
            let (cx, cy) = (rng.random_range(0.2..0.8) * s, rng.random_range(0.2..0.8) * s);
            let w = rng.random_range(0.08..0.3) * s;
            for r in 0..side {
                for c in 0..side {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    img[r * side + c] += (-d2 / (2.0 * w * w)).exp();
                }
            }
        }
        let horizontal: bool = rng.random();
        let at = rng.random_range(0..side);
        let (lo, hi) = {
            let a = rng.random_range(0..side);
            let b = rng.random_range(0..side);
            (a.min(b), a.max(b))
        };
        for p in lo..=hi {
            let idx = if horizontal { at * side + p } else { p * side + at };
            img[idx] += 0.5;
        }
        let max = img.iter().cloned().fold(0.0, f64::max);
        out.push(&img.iter().map(|v| v / max).collect::<Vec<_>>());
    }
    Ok(out)
}

/// Loads a template from a portable graymap (`P2` or `P5`) or from a CSV
/// matrix of nonnegative numbers. Graymaps are scaled to `[0, 1]`.
pub fn load_template(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    let values = if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        parse_pgm(&bytes)?
    } else {
        parse_csv_matrix(&bytes)?
    };
    if values.is_empty() {
        return Err(LabError::Parse(format!("{}: empty template", path.display())));
    }
    if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return domain(format!("{}: template pixels must be nonnegative", path.display()));
    }
    if norm_sq(&values) == 0.0 {
        return Err(LabError::Degenerate(format!("{}: template is all zeros", path.display())));
    }
    Ok(values)
}

fn parse_csv_matrix(bytes: &[u8]) -> Result<Vec<f64>> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(bytes);
    let mut out = Vec::new();
    for rec in rd.records() {
        for f in rec?.iter() {
            out.push(parse_field(f)?);
        }
    }
    Ok(out)
}

fn parse_pgm(bytes: &[u8]) -> Result<Vec<f64>> {
    let binary = bytes.starts_with(b"P5");
    // Header: magic, width, height, maxval; '#' starts a comment.
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(LabError::Parse("truncated graymap header".into()));
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|e| LabError::Parse(e.to_string()))?;
        fields.push(parse_field::<usize>(tok)?);
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(LabError::Parse(format!("bad graymap maxval {maxval}")));
    }
    let n = w * h;
    let scale = 1.0 / maxval as f64;
    if binary {
        pos += 1;
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if bytes.len() < pos + need {
            return Err(LabError::Parse("truncated graymap raster".into()));
        }
        let raster = &bytes[pos..pos + need];
        Ok(if wide {
            raster
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
                .collect()
        } else {
            raster.iter().map(|&b| b as f64 * scale).collect()
        })
    } else {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|e| LabError::Parse(e.to_string()))?;
        let vals: Vec<f64> = text
            .split_whitespace()
            .take(n)
            .map(|t| parse_field::<f64>(t).map(|v| v * scale))
            .collect::<Result<_>>()?;
        if vals.len() != n {
            return Err(LabError::Parse("truncated graymap raster".into()));
        }
        Ok(vals)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-density of `X_t = alpha_t X_0 + sigma_t Z` with `X_0` from the target.
pub fn gmm_log_density_t(target: &Target, t: f64, x: &[f64]) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return domain(format!("time {t} outside (0, 1]"));
    }
    if x.len() != target.dim() {
        return domain("point dimension does not match the target");
    }
    let (alpha, sigma) = vp_coefficients(t)?;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let logs: Vec<f64> = match target {
        Target::Isotropic(tg) => {
            let s = sigma * sigma + alpha * alpha * tg.var;
            let d = tg.dim() as f64;
            tg.means
                .iter()
                .map(|mu| {
                    let r2: f64 = x.iter().zip(mu).map(|(xi, mi)| (xi - alpha * mi).powi(2)).sum();
                    -0.5 * d * (ln2pi + s.ln()) - r2 / (2.0 * s)
                })
                .collect()
        }
        Target::LowRank(tg) => {
            let (n_c, p) = (tg.color_dim(), tg.pixels());
            (0..tg.n_components())
                .map(|k| {
                    let tpl = tg.templates.point(k);
                    let nx = norm_sq(tpl);
                    let mean = tg.mean(k);
                    let r: Vec<f64> = x.iter().zip(&mean).map(|(xi, mi)| xi - alpha * mi).collect();
                    let at_r = lowrank::apply_adjoint(tpl, &r);
                    let beta = lowrank::woodbury_beta(alpha, sigma, tg.var, nx);
                    let quad = (norm_sq(&r) - beta * norm_sq(&at_r)) / (sigma * sigma);
                    let ld = lowrank::log_det(alpha, sigma, tg.var, nx, n_c, p);
                    -0.5 * ((n_c * p) as f64 * ln2pi + ld + quad)
                })
                .collect()
        }
    };
    Ok(log_sum_exp(&logs) - (target.n_components() as f64).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;

    #[test]
    fn means_on_sphere() {
        let mut rng = rng_from_seed(1);
        let t = gen_isotropic_means(12, 50, &mut rng).unwrap();
        for mu in t.means.iter() {
            assert!((norm_sq(mu).sqrt() - 50f64.sqrt()).abs() < 1e-9);
        }
        assert_eq!(t.var, 1.0);
        let t = gen_isotropic_means(1, 4, &mut rng).unwrap();
        assert!((norm_sq(t.means.point(0)).sqrt() - 2.0).abs() < 1e-12);
        assert!(gen_isotropic_means(0, 4, &mut rng).is_err());
        assert!(gen_isotropic_means(3, 0, &mut rng).is_err());
    }

    #[test]
    fn mean_pair_distance_matches_two_d() {
        // Independent uniform sphere points satisfy E|mu - mu'|^2 = 2d.
        let mut rng = rng_from_seed(2);
        let reps = 10_000;
        let vals: Vec<f64> = (0..reps)
            .map(|_| {
                let t = gen_isotropic_means(12, 50, &mut rng).unwrap();
                sq_dist(t.means.point(0), t.means.point(1))
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        assert!((mean - 100.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn zero_variance_samples_hit_means() {
        let means = Points::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let t = IsotropicTarget::new(means, 0.0).unwrap();
        let ds = sample_dataset(&t, 20, 3).unwrap();
        for (x, &l) in ds.samples.iter().zip(&ds.labels) {
            assert_eq!(x, t.means.point(l));
        }
    }

    #[test]
    fn single_component_sample_mean() {
        let mut rng = rng_from_seed(4);
        let t = gen_isotropic_means(1, 10, &mut rng).unwrap();
        let n = 100_000;
        let ds = sample_dataset(&t, n, 5).unwrap();
        let mut mean = vec![0.0; 10];
        for x in ds.samples.iter() {
            crate::points::axpy(1.0 / n as f64, x, &mut mean);
        }
        let tol = 3.0 / (n as f64).sqrt();
        for (m, mu) in mean.iter().zip(t.means.point(0)) {
            assert!((m - mu).abs() < tol);
        }
    }

    #[test]
    fn label_counts_are_binomial() {
        let mut rng = rng_from_seed(6);
        let t = gen_isotropic_means(4, 3, &mut rng).unwrap();
        let n = 100_000;
        let ds = sample_dataset(&t, n, 7).unwrap();
        let mut counts = [0usize; 4];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 4.0).abs() < 3.0 * sd);
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let mut rng = rng_from_seed(8);
        let t = gen_isotropic_means(3, 5, &mut rng).unwrap();
        assert_eq!(sample_dataset(&t, 50, 9).unwrap(), sample_dataset(&t, 50, 9).unwrap());
        assert_ne!(sample_dataset(&t, 50, 9).unwrap(), sample_dataset(&t, 50, 10).unwrap());
    }

    #[test]
    fn lowrank_rejects_zero_template() {
        let tpl = Points::from_rows(&[vec![0.0; 4]]).unwrap();
        let col = Points::from_rows(&[vec![0.0; 2]]).unwrap();
        assert!(matches!(LowRankTarget::new(tpl, col, 1.0), Err(LabError::Degenerate(_))));
    }

    #[test]
    fn lowrank_kronecker_support() {
        let tpl = Points::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let col = Points::from_rows(&[vec![0.7]]).unwrap();
        let t = LowRankTarget::new(tpl, col, 1.0).unwrap();
        let ds = sample_lowrank(&t, 100, 11).unwrap();
        for y in ds.samples.iter() {
            assert_eq!(y[1], 0.0);
            assert_eq!(y[2], 0.0);
            assert!(y[0] != 0.0);
        }
    }

    #[test]
    fn lowrank_covariance_matches() {
        // u = 0: E[y] = 0, Cov(y) = var * A Aᵀ with (A Aᵀ)_{(j,a),(k,b)} = δ_jk x_a x_b.
        let x = vec![0.5, 1.0, 0.25];
        let tpl = Points::from_rows(std::slice::from_ref(&x)).unwrap();
        let col = Points::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let t = LowRankTarget::new(tpl, col, 1.0).unwrap();
        let n = 100_000;
        let ds = sample_lowrank(&t, n, 12).unwrap();
        let dim = 6;
        for a in 0..dim {
            for b in 0..dim {
                let prods: Vec<f64> = ds.samples.iter().map(|y| y[a] * y[b]).collect();
                let m = prods.iter().sum::<f64>() / n as f64;
                let v = prods.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                let se = (v / n as f64).sqrt().max(1e-15);
                let expect = if a / 3 == b / 3 { x[a % 3] * x[b % 3] } else { 0.0 };
                assert!((m - expect).abs() <= 5.0 * se, "entry ({a},{b}): {m} vs {expect}");
            }
            let m = ds.samples.iter().map(|y| y[a]).sum::<f64>() / n as f64;
            assert!(m.abs() < 5.0 * x[a % 3] / (n as f64).sqrt());
        }
    }

    #[test]
    fn density_single_gaussian() {
        let means = Points::from_rows(&[vec![1.0, -1.0, 0.5]]).unwrap();
        let tg = Target::Isotropic(IsotropicTarget::new(means, 0.7).unwrap());
        let t = 0.4;
        let (a, s) = vp_coefficients(t).unwrap();
        let x = [0.3, 0.2, -0.1];
        let v = s * s + a * a * 0.7;
        let r2 = (0.3 - a).powi(2) + (0.2 + a).powi(2) + (-0.1 - 0.5 * a).powi(2);
        let expect = -1.5 * (2.0 * std::f64::consts::PI * v).ln() - r2 / (2.0 * v);
        assert!((gmm_log_density_t(&tg, t, &x).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn density_symmetric_pair() {
        let mu = vec![1.0, 2.0];
        let neg: Vec<f64> = mu.iter().map(|v| -v).collect();
        let both = Target::Isotropic(IsotropicTarget::new(Points::from_rows(&[mu.clone(), neg]).unwrap(), 1.0).unwrap());
        let one = Target::Isotropic(IsotropicTarget::new(Points::from_rows(&[mu]).unwrap(), 1.0).unwrap());
        let a = gmm_log_density_t(&both, 0.5, &[0.0, 0.0]).unwrap();
        let b = gmm_log_density_t(&one, 0.5, &[0.0, 0.0]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn density_normalizes() {
        // Importance sampling against N(0, w^2 I): E_q[p/q] = 1.
        let mut rng = rng_from_seed(13);
        let d = 3;
        let mut tg = gen_isotropic_means(3, d, &mut rng).unwrap();
        tg.var = 0.5;
        let tg = Target::Isotropic(tg);
        let w: f64 = 2.5;
        let n = 200_000;
        let lnq_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * w * w).ln();
        let ratios: Vec<f64> = (0..n)
            .map(|_| {
                let z = standard_normal_vec(d, &mut rng);
                let x: Vec<f64> = z.iter().map(|v| w * v).collect();
                let lnq = lnq_norm - norm_sq(&z) / 2.0;
                (gmm_log_density_t(&tg, 0.6, &x).unwrap() - lnq).exp()
            })
            .collect();
        let m = ratios.iter().sum::<f64>() / n as f64;
        let v = ratios.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (v / n as f64).sqrt();
        assert!((m - 1.0).abs() < 3.0 * se, "mean ratio {m}, se {se}");
    }

    #[test]
    fn dataset_csv_round_trip() {
        let mut rng = rng_from_seed(14);
        let t = gen_isotropic_means(2, 3, &mut rng).unwrap();
        let ds = sample_dataset(&t, 5, 99).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.seed, 99);
        for (a, b) in back.samples.iter().zip(ds.samples.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn template_loaders() {
        let dir = tempfile::tempdir().unwrap();
        let p2 = dir.path().join("a.pgm");
        std::fs::write(&p2, "P2\n# comment\n2 2\n255\n0 255\n128 64\n").unwrap();
        let v = load_template(&p2).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v[1], 1.0);

        let p5 = dir.path().join("b.pgm");
        let mut bytes = b"P5 3 1 255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 255]);
        std::fs::write(&p5, bytes).unwrap();
        assert_eq!(load_template(&p5).unwrap(), vec![0.0, 0.2, 1.0]);

        let csvp = dir.path().join("c.csv");
        std::fs::write(&csvp, "0,0.5\n1,0\n").unwrap();
        assert_eq!(load_template(&csvp).unwrap(), vec![0.0, 0.5, 1.0, 0.0]);

        let zero = dir.path().join("z.csv");
        std::fs::write(&zero, "0,0\n0,0\n").unwrap();
        assert!(matches!(load_template(&zero), Err(LabError::Degenerate(_))));
        let neg = dir.path().join("n.csv");
        std::fs::write(&neg, "0,-1\n").unwrap();
        assert!(load_template(&neg).is_err());
    }

    #[test]
    fn procedural_templates_are_valid() {
        let mut rng = rng_from_seed(15);
        let t = procedural_templates(5, 15, &mut rng).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t.dim(), 225);
        for x in t.iter() {
            assert!(x.iter().all(|v| *v >= 0.0 && *v <= 1.0 + 1e-12));
            assert!(norm_sq(x) > 0.0);
        }
    }
}
