//! Experiment harness behind the `memlab` binary: configuration, cell keys
//! and seeds, model training and evaluation, and the files each command
//! writes.
//!
//! Every random stream is `derive_seed(root_seed, key, purpose)` with `key`
//! the cell `(N, d, K)` or model `(N, d, K, M, stage)`.

mod figures;
mod sweep;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use figures::{figure, FIGURES};
pub use sweep::{
    cell_ratios, coarse_grid, fit_from_sweep, FitReport, read_sweep_csv, refine_grid, run_sweep, write_sweep_csv, Stage, SweepOutcome,
    SweepRecord, TimestepRow,
};

use crate::denoisers::{Denoiser, Generalizing, MemDenoiser};
use crate::error::{domain, LabError, Result};
use crate::gmm_data::{
    gen_isotropic_means, load_template, lowrank_target_from_templates, procedural_templates, Dataset, IsotropicTarget,
    Target,
};
use crate::losses::{mc_loss_on, ApproxConfig, LossEstimate, MCConfig};
use crate::points::{sq_dist, Points};
use crate::predictor::{crossover_m, crossover_point, FitConfig, LossWeighting};
use crate::sampling_eval::{generate_and_check, MemCriterion};
use crate::schedule::{TimeGrid, Weighting};
use crate::seeding::{derive_seed, rng_from_seed};
use crate::theory_checks::{standard_checks, write_json_lines};
use crate::training::{init_partial_mem, init_partial_mem_lowrank, train, Params, TrainConfig, TrainTrace};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable that overrides the configured root seed.
pub const SEED_ENV: &str = "MEMLAB_SEED";
/// SNR of the grid point used for single-timestep loss plots.
pub const REFERENCE_PSI: f64 = 6.704;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Isotropic,
    /// Colored templates: `d` is ignored, the ambient dimension is
    /// `color_dim * side^2`. Templates are read from `template_files` when
    /// given, else generated procedurally.
    Image {
        side: usize,
        color_dim: usize,
        #[serde(default)]
        template_files: Vec<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub var_star: f64,
    pub model: ModelKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 100,
            d: 30,
            k: 3,
            var_star: 1.0,
            model: ModelKind::Isotropic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_eval: usize,
    /// Noise draws per sample for evaluation losses.
    pub n_dup: usize,
    /// Held-out samples for test losses; `None` means `N`.
    pub n_test: Option<usize>,
    pub criterion_c: f64,
    /// Write generated sample coordinates next to the memorization flags.
    pub export_coords: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_eval: 50,
            n_dup: 16,
            n_test: None,
            criterion_c: 1.0 / 9.0,
            export_coords: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub ns: Vec<usize>,
    pub ds: Vec<usize>,
    pub ks: Vec<usize>,
    /// Models in the coarse pass: `M = step, 2 step, ..` with `step = floor(N / coarse_points)`.
    pub coarse_points: usize,
    /// Models spread over the detected transition, endpoints included.
    pub refine_points: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ns: vec![100],
            ds: vec![30],
            ks: vec![3],
            coarse_points: 10,
            refine_points: 10,
        }
    }
}

impl SweepConfig {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &n in &self.ns {
            for &d in &self.ds {
                for &k in &self.ks {
                    out.push(Cell { n, d, k });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub schema_version: u32,
    pub root_seed: u64,
    pub data: DataConfig,
    /// Model size for `train` and `eval`; `None` means `N`.
    pub m: Option<usize>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub fit: FitConfig,
    pub paper_scale: bool,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            root_seed: 0,
            data: DataConfig::default(),
            m: None,
            train: TrainConfig::desk(0),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            fit: FitConfig::new(0),
            paper_scale: false,
        }
    }
}

impl LabConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: LabConfig = serde_json::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(LabError::Parse(format!(
                "config schema {} not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_json(&fs::read_to_string(p)?),
            None => Ok(Self::default()),
        }
    }

    /// Applies `MEMLAB_SEED` (if set) and then the command-line seed, and
    /// switches to paper-scale training when asked.
    pub fn resolve(mut self, env_seed: Option<&str>, flag_seed: Option<u64>, paper_scale: bool) -> Result<Self> {
        if let Some(s) = env_seed {
            self.root_seed = s
                .trim()
                .parse()
                .map_err(|_| LabError::Parse(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
        }
        if let Some(s) = flag_seed {
            self.root_seed = s;
        }
        if paper_scale || self.paper_scale {
            self.paper_scale = true;
            let grid = self.train.grid.clone();
            self.train = TrainConfig {
                grid,
                var_param: self.train.var_param,
                ..TrainConfig::paper(self.root_seed)
            };
            self.eval.n_dup = 100;
        }
        self.train.seed = self.root_seed;
        self.fit.seed = self.root_seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.fit.validate()?;
        MemCriterion::new(self.eval.criterion_c)?;
        ApproxConfig::new(self.fit.approx.c)?;
        if self.data.n < 2 || self.data.k == 0 {
            return domain("need N >= 2 and K >= 1");
        }
        if self.eval.n_eval == 0 || self.eval.n_dup == 0 {
            return domain("n_eval and eval n_dup must be positive");
        }
        if let Some(m) = self.m {
            if m == 0 || m > self.data.n {
                return domain(format!("M = {m} outside [1, {}]", self.data.n));
            }
        }
        Ok(())
    }

    pub fn cell(&self) -> Cell {
        Cell {
            n: self.data.n,
            d: self.data.d,
            k: self.data.k,
        }
    }

    pub fn criterion(&self) -> MemCriterion {
        MemCriterion { c: self.eval.criterion_c }
    }
}

/// One `(N, d, K)` setting of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub d: usize,
    pub k: usize,
}

impl Cell {
    pub fn key(&self) -> Vec<u64> {
        vec![self.n as u64, self.d as u64, self.k as u64]
    }

    fn model_key(&self, m: usize, stage: Stage) -> Vec<u64> {
        let mut key = self.key();
        key.push(m as u64);
        key.push(stage as u64);
        key
    }
}

/// Target, training set and holdout of one cell.
#[derive(Clone, Debug)]
pub struct CellData {
    pub cell: Cell,
    pub target: Target,
    pub dataset: Dataset,
    pub holdout: Dataset,
}

pub fn build_cell(cfg: &LabConfig, cell: Cell) -> Result<CellData> {
    let key = cell.key();
    let mut rng = rng_from_seed(derive_seed(cfg.root_seed, &key, "target"));
    let target = match &cfg.data.model {
        ModelKind::Isotropic => {
            let t = gen_isotropic_means(cell.k, cell.d, &mut rng)?;
            Target::Isotropic(IsotropicTarget::new(t.means, cfg.data.var_star)?)
        }
        ModelKind::Image {
            side,
            color_dim,
            template_files,
        } => {
            let templates = if template_files.is_empty() {
                procedural_templates(cell.k, *side, &mut rng)?
            } else {
                if template_files.len() < cell.k {
                    return domain(format!("{} template files for K = {}", template_files.len(), cell.k));
                }
                let rows: Vec<Vec<f64>> = template_files[..cell.k].iter().map(|p| load_template(p)).collect::<Result<_>>()?;
                Points::from_rows(&rows)?
            };
            let mut t = lowrank_target_from_templates(templates, *color_dim, &mut rng)?;
            t.var = cfg.data.var_star;
            Target::LowRank(t)
        }
    };
    let dataset = target.sample(cell.n, derive_seed(cfg.root_seed, &key, "data"))?;
    let n_test = cfg.eval.n_test.unwrap_or(cell.n);
    let holdout = target.sample(n_test, derive_seed(cfg.root_seed, &key, "holdout"))?;
    Ok(CellData {
        cell,
        target,
        dataset,
        holdout,
    })
}

/// Partial-memorization init and training for model `(cell, M, stage)`.
pub fn train_model(cfg: &LabConfig, data: &CellData, m: usize, stage: Stage) -> Result<TrainTrace> {
    let key = data.cell.model_key(m, stage);
    let mut rng = rng_from_seed(derive_seed(cfg.root_seed, &key, "init"));
    let init = match &data.target {
        Target::Isotropic(_) => Params::Isotropic(init_partial_mem(&data.dataset, m, &mut rng)?),
        Target::LowRank(t) => Params::LowRank(init_partial_mem_lowrank(&data.dataset, &t.templates, m, &mut rng)?),
    };
    let tcfg = TrainConfig {
        seed: derive_seed(cfg.root_seed, &key, "train"),
        ..cfg.train.clone()
    };
    train(&init, &data.dataset, &tcfg)
}

/// Per-timestep losses of the four compared denoisers on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTable {
    pub learned: Vec<LossEstimate>,
    pub generalizing: Vec<LossEstimate>,
    pub memorizing: Vec<LossEstimate>,
    pub pmem: Vec<LossEstimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub ratio: f64,
    pub var: f64,
    pub mean_to_sample: f64,
    pub mean_to_true_mean: f64,
    pub train: LossTable,
    pub test: LossTable,
}

fn eval_mc(cfg: &LabConfig, cell: Cell) -> MCConfig {
    MCConfig {
        n_dup: cfg.eval.n_dup,
        seed: derive_seed(cfg.root_seed, &cell.key(), "eval-noise"),
        shared_noise: true,
    }
}

fn per_timestep(den: &dyn Denoiser, samples: &Points, grid: &TimeGrid, mc: &MCConfig) -> Result<Vec<LossEstimate>> {
    grid.times.iter().map(|&t| mc_loss_on(den, samples, t, mc)).collect()
}

fn loss_table(
    learned: &dyn Denoiser,
    data: &CellData,
    m: usize,
    samples: &Points,
    grid: &TimeGrid,
    mc: &MCConfig,
) -> Result<LossTable> {
    let gen = Generalizing::new(&data.target);
    let mem = MemDenoiser::full(&data.dataset);
    let pmem = MemDenoiser::partial(&data.dataset, m)?;
    Ok(LossTable {
        learned: per_timestep(learned, samples, grid, mc)?,
        generalizing: per_timestep(&gen, samples, grid, mc)?,
        memorizing: per_timestep(&mem, samples, grid, mc)?,
        pmem: per_timestep(&pmem, samples, grid, mc)?,
    })
}

fn mean_nearest(from: &Points, to: &Points) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| to.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min).sqrt())
        .sum();
    total / from.len() as f64
}

/// Losses on train and holdout, memorization ratio and the learned-parameter
/// diagnostics of a trained model.
pub fn evaluate_model(cfg: &LabConfig, data: &CellData, params: &Params, m: usize, stage: Stage) -> Result<ModelEval> {
    let grid = &cfg.train.grid;
    let mc = eval_mc(cfg, data.cell);
    let key = data.cell.model_key(m, stage);
    let batch = generate_and_check(
        params,
        &data.dataset,
        grid,
        cfg.eval.n_eval,
        &cfg.criterion(),
        derive_seed(cfg.root_seed, &key, "generate"),
    )?;
    let means = params.means();
    let true_means = Points::from_rows(
        &(0..data.target.n_components())
            .map(|k| data.target.component_mean(k))
            .collect::<Vec<_>>(),
    )?;
    Ok(ModelEval {
        ratio: batch.ratio(),
        var: params.var(),
        mean_to_sample: mean_nearest(&means, &data.dataset.samples),
        mean_to_true_mean: mean_nearest(&means, &true_means),
        train: loss_table(params, data, m, &data.dataset.samples, grid, &mc)?,
        test: loss_table(params, data, m, &data.holdout.samples, grid, &mc)?,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Resolved configuration embedded in every output directory.
fn write_config(cfg: &LabConfig, out: &Path) -> Result<PathBuf> {
    let path = out.join("config.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, cfg)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(path)
}

fn model_size(cfg: &LabConfig) -> usize {
    cfg.m.unwrap_or(cfg.data.n)
}

/// Writes `dataset.csv`, `holdout.csv` and `target.json`.
pub fn cmd_gen_data(cfg: &LabConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let data = build_cell(cfg, cfg.cell())?;
    let mut written = vec![write_config(cfg, out)?];
    let p = out.join("dataset.csv");
    data.dataset.write_csv(create(&p)?)?;
    written.push(p);
    let p = out.join("holdout.csv");
    data.holdout.write_csv(create(&p)?)?;
    written.push(p);
    let p = out.join("target.json");
    let mut w = create(&p)?;
    serde_json::to_writer_pretty(&mut w, &serde_json::json!({"schema_version": SCHEMA_VERSION, "target": data.target}))?;
    w.flush()?;
    written.push(p);
    Ok(written)
}

/// Trains one model of size `cfg.m` and writes `trace.json` (loss every 100
/// epochs, final parameters, resolved config).
pub fn cmd_train(cfg: &LabConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let data = build_cell(cfg, cfg.cell())?;
    let m = model_size(cfg);
    let trace = train_model(cfg, &data, m, Stage::Coarse)?;
    log::info!("trained M = {m} in {:.1}s, final loss {:.6e}", trace.wall_clock_secs, trace.final_loss);
    let p = out.join("trace.json");
    let mut w = create(&p)?;
    w.write_all(trace.to_json()?.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(vec![write_config(cfg, out)?, p])
}

fn read_params(path: &Path) -> Result<Params> {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let params = v.get("params").ok_or_else(|| LabError::Parse(format!("{} has no params", path.display())))?;
    Ok(serde_json::from_value(params.clone())?)
}

/// Evaluates a trained model (from `trace`, or freshly trained when absent):
/// per-timestep loss curves and the memorization batch.
pub fn cmd_eval(cfg: &LabConfig, trace: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>> {
    let data = build_cell(cfg, cfg.cell())?;
    let m = model_size(cfg);
    let params = match trace {
        Some(p) => read_params(p)?,
        None => train_model(cfg, &data, m, Stage::Coarse)?.params,
    };
    if params.n_components() != m {
        return domain(format!("trained model has {} components, config asks for M = {m}", params.n_components()));
    }
    let ev = evaluate_model(cfg, &data, &params, m, Stage::Coarse)?;
    let grid = &cfg.train.grid;

    let p_loss = out.join("loss_curves.csv");
    let mut wr = csv::Writer::from_writer(create(&p_loss)?);
    wr.write_record(["schema_version", "split", "t_index", "t", "psi", "denoiser", "value", "std_err"])?;
    for (split, table) in [("train", &ev.train), ("test", &ev.test)] {
        for (name, col) in [
            ("learned", &table.learned),
            ("generalizing", &table.generalizing),
            ("memorizing", &table.memorizing),
            ("pmem", &table.pmem),
        ] {
            for (l, est) in col.iter().enumerate() {
                wr.write_record([
                    SCHEMA_VERSION.to_string(),
                    split.to_string(),
                    l.to_string(),
                    grid.times[l].to_string(),
                    grid.snrs[l].to_string(),
                    name.to_string(),
                    est.value.to_string(),
                    est.std_err.to_string(),
                ])?;
            }
        }
    }
    wr.flush()?;

    let batch = generate_and_check(
        &params,
        &data.dataset,
        grid,
        cfg.eval.n_eval,
        &cfg.criterion(),
        derive_seed(cfg.root_seed, &data.cell.model_key(m, Stage::Coarse), "generate"),
    )?;
    let p_mem = out.join("memorization.csv");
    batch.write_csv(create(&p_mem)?, cfg.eval.export_coords)?;

    let p_sum = out.join("eval_summary.json");
    let mut w = create(&p_sum)?;
    serde_json::to_writer_pretty(
        &mut w,
        &serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "m": m,
            "memorization_ratio": ev.ratio,
            "var": ev.var,
            "mean_to_sample": ev.mean_to_sample,
            "mean_to_true_mean": ev.mean_to_true_mean,
        }),
    )?;
    w.flush()?;
    Ok(vec![write_config(cfg, out)?, p_loss, p_mem, p_sum])
}

/// Runs the configured sweep and writes `sweep.csv` and `sweep_losses.csv`.
pub fn cmd_sweep(cfg: &LabConfig, out: &Path) -> Result<(Vec<PathBuf>, SweepOutcome)> {
    let outcome = run_sweep(cfg)?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    let p = out.join("sweep.csv");
    let p_loss = out.join("sweep_losses.csv");
    write_sweep_csv(&outcome, create(&p)?, create(&p_loss)?)?;
    Ok((vec![write_config(cfg, out)?, p, p_loss], outcome))
}

/// Fits the loss weighting to a sweep CSV; writes `weighting.csv` and
/// `fit_report.json`.
pub fn cmd_fit_weighting(cfg: &LabConfig, sweep_csv: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let records = read_sweep_csv(File::open(sweep_csv)?)?;
    let report = fit_from_sweep(cfg, &records)?;
    let p_w = out.join("weighting.csv");
    report.fit.weighting.write_csv(create(&p_w)?, &cfg.train.grid)?;
    let p_r = out.join("fit_report.json");
    let mut w = create(&p_r)?;
    serde_json::to_writer_pretty(&mut w, &report.to_json())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(vec![write_config(cfg, out)?, p_w, p_r])
}

/// Reads the `weight` column of a weighting CSV.
pub fn read_weighting_csv(path: &Path) -> Result<Vec<f64>> {
    let mut rd = csv::Reader::from_reader(File::open(path)?);
    let headers = rd.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == "weight")
        .ok_or_else(|| LabError::Parse("weighting CSV has no 'weight' column".into()))?;
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        out.push(row[col].parse::<f64>().map_err(|e| LabError::Parse(e.to_string()))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub schema_version: u32,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub var_star: f64,
    pub c: f64,
    pub weighting: String,
    /// Real-valued crossover point.
    pub m_star: f64,
    /// Nearest integer crossover under the weighting.
    pub m_pt: usize,
}

pub fn predict(cfg: &LabConfig, weights: Option<Vec<f64>>) -> Result<Prediction> {
    let grid = &cfg.train.grid;
    let (weighting, name) = match weights {
        Some(w) => (LossWeighting::from_logits(w.iter().map(|v| v.max(1e-300).ln()).collect())?.as_weighting(), "fitted"),
        None => (Weighting::NoisePrediction, "noise_prediction"),
    };
    let c = &cfg.data;
    Ok(Prediction {
        schema_version: SCHEMA_VERSION,
        n: c.n,
        d: c.d,
        k: c.k,
        var_star: c.var_star,
        c: cfg.fit.approx.c,
        weighting: name.to_string(),
        m_star: crossover_point(c.n, c.var_star, grid, &weighting, cfg.fit.approx.c)?,
        m_pt: crossover_m(c.n, c.d, c.var_star, grid, &weighting, &cfg.fit.approx)?,
    })
}

pub fn cmd_predict(cfg: &LabConfig, weighting_csv: Option<&Path>, out: &Path) -> Result<(Vec<PathBuf>, Prediction)> {
    let weights = weighting_csv.map(read_weighting_csv).transpose()?;
    let pred = predict(cfg, weights)?;
    let p = out.join("prediction.json");
    let mut w = create(&p)?;
    serde_json::to_writer_pretty(&mut w, &pred)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok((vec![write_config(cfg, out)?, p], pred))
}

/// Runs the bound checks on the configured cell's target and writes
/// `bounds.jsonl`.
pub fn cmd_verify_theory(cfg: &LabConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut rng = rng_from_seed(derive_seed(cfg.root_seed, &cfg.cell().key(), "target"));
    let target = gen_isotropic_means(cfg.data.k, cfg.data.d, &mut rng)?;
    let reports = standard_checks(derive_seed(cfg.root_seed, &[], "theory"), &target)?;
    let p = out.join("bounds.jsonl");
    let mut w = create(&p)?;
    write_json_lines(&mut w, &reports)?;
    w.flush()?;
    Ok(vec![write_config(cfg, out)?, p])
}

pub fn cmd_figure(cfg: &LabConfig, name: &str, inputs: &figures::FigureInputs, out: &Path) -> Result<Vec<PathBuf>> {
    let rows = figure(cfg, name, inputs)?;
    let p = out.join(format!("{name}.csv"));
    figures::write_series(create(&p)?, &rows)?;
    Ok(vec![write_config(cfg, out)?, p])
}

pub use figures::{FigureInputs, SeriesRow};
