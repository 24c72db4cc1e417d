//! Plot data for the figures. Each figure is a long table of
//! `(series, x, y)` points; plotting is left to the reader.

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{build_cell, read_sweep_csv, read_weighting_csv, run_sweep, LabConfig, ModelKind, SweepRecord, REFERENCE_PSI};
use crate::denoisers::{Generalizing, MemDenoiser};
use crate::error::{domain, LabError, Result};
use crate::losses::{approx_gen_excess, approx_pmem_excess, mc_loss_on, MCConfig};
use crate::predictor::DISPLAY_MAX;
use crate::seeding::derive_seed;

pub const FIGURES: [&str; 5] = ["fig1", "fig3", "fig4", "fig6", "fig7"];

#[derive(Clone, Debug, Default)]
pub struct FigureInputs {
    pub sweep_csv: Option<PathBuf>,
    pub weighting_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub figure: String,
    pub series: String,
    /// `N-d-K` of the cell the point belongs to.
    pub cell: String,
    pub x: f64,
    pub y: f64,
    pub std_err: Option<f64>,
}

pub fn write_series<W: Write>(w: W, rows: &[SeriesRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn figure(cfg: &LabConfig, name: &str, inputs: &FigureInputs) -> Result<Vec<SeriesRow>> {
    match name {
        "fig1" => fig1(cfg),
        "fig3" => Ok(from_sweep("fig3", &sweep_records(cfg, inputs)?, FIG3)),
        "fig4" => fig4(cfg, inputs),
        "fig6" => fig6(cfg, inputs),
        "fig7" => Ok(from_sweep("fig7", &sweep_records(cfg, inputs)?, FIG7)),
        _ => Err(LabError::UnknownFigure {
            name: name.to_string(),
            available: FIGURES.join(", "),
        }),
    }
}

fn row(figure: &str, series: &str, cell: &str, x: f64, y: f64, std_err: Option<f64>) -> SeriesRow {
    SeriesRow {
        figure: figure.into(),
        series: series.into(),
        cell: cell.into(),
        x,
        y,
        std_err,
    }
}

/// Training losses at the grid point nearest `psi = 6.704` against `M/N`:
/// partial memorizer (estimated and approximated), full memorizer,
/// generalizing denoiser and its approximation.
fn fig1(cfg: &LabConfig) -> Result<Vec<SeriesRow>> {
    let data = build_cell(cfg, cfg.cell())?;
    let grid = &cfg.train.grid;
    let l = grid.nearest_snr_index(REFERENCE_PSI);
    let (t, psi) = (grid.times[l], grid.snrs[l]);
    let n = data.cell.n;
    let d = data.dataset.dim();
    let mc = MCConfig::new(cfg.eval.n_dup, derive_seed(cfg.root_seed, &data.cell.key(), "eval-noise"))?;
    let cell = format!("{}-{}-{}", n, d, data.cell.k);
    let samples = &data.dataset.samples;
    let mem = mc_loss_on(&MemDenoiser::full(&data.dataset), samples, t, &mc)?;
    let gen = mc_loss_on(&Generalizing::new(&data.target), samples, t, &mc)?;
    let gen_approx = approx_gen_excess(d, cfg.data.var_star, psi)?;
    let step = (n / 50).max(1);
    let mut ms: Vec<usize> = (1..=n).step_by(step).collect();
    if ms.last() != Some(&n) {
        ms.push(n);
    }
    let mut out = Vec::new();
    for m in ms {
        let x = m as f64 / n as f64;
        let pm = mc_loss_on(&MemDenoiser::partial(&data.dataset, m)?, samples, t, &mc)?;
        out.push(row("fig1", "pmem_empirical", &cell, x, pm.value, Some(pm.std_err)));
        out.push(row(
            "fig1",
            "pmem_approx",
            &cell,
            x,
            approx_pmem_excess(d, cfg.data.var_star, m, n, &cfg.fit.approx)?,
            None,
        ));
        out.push(row("fig1", "mem", &cell, x, mem.value, Some(mem.std_err)));
        out.push(row("fig1", "gen", &cell, x, gen.value, Some(gen.std_err)));
        out.push(row("fig1", "gen_approx", &cell, x, gen_approx, None));
    }
    Ok(out)
}

type Column = fn(&SweepRecord) -> Option<f64>;

const FIG3: &[(&str, Column)] = &[
    ("memorization_ratio", |r| r.ratio),
    ("train_learned", |r| r.train_learned),
    ("test_learned", |r| r.test_learned),
    ("train_gen", |r| r.train_gen),
    ("test_gen", |r| r.test_gen),
    ("train_mem", |r| r.train_mem),
    ("test_mem", |r| r.test_mem),
];

const FIG7: &[(&str, Column)] = &[
    ("var", |r| r.var),
    ("mean_to_sample", |r| r.mean_to_sample),
    ("mean_to_true_mean", |r| r.mean_to_true_mean),
];

fn sweep_records(cfg: &LabConfig, inputs: &FigureInputs) -> Result<Vec<SweepRecord>> {
    match &inputs.sweep_csv {
        Some(p) => read_sweep_csv(File::open(p)?),
        None => Ok(run_sweep(cfg)?.records),
    }
}

/// Sweep columns against `M/N`, one point per trained model, sorted by `M`.
fn from_sweep(figure: &str, records: &[SweepRecord], columns: &[(&str, Column)]) -> Vec<SeriesRow> {
    let mut recs: Vec<&SweepRecord> = records.iter().filter(|r| r.is_ok()).collect();
    recs.sort_by_key(|a| (a.cell(), a.m, a.stage));
    let mut out = Vec::new();
    for (name, col) in columns {
        for r in &recs {
            if let Some(y) = col(r) {
                let cell = format!("{}-{}-{}", r.n, r.d, r.k);
                out.push(row(figure, name, &cell, r.m as f64 / r.n as f64, y, None));
            }
        }
    }
    out
}

/// Fitted weighting against `psi`, as fitted and rescaled to a maximum of 0.9.
fn fig4(cfg: &LabConfig, inputs: &FigureInputs) -> Result<Vec<SeriesRow>> {
    let Some(path) = &inputs.weighting_csv else {
        return domain("fig4 needs a weighting CSV (run fit-weighting first)");
    };
    let w = read_weighting_csv(path)?;
    let grid = &cfg.train.grid;
    if w.len() != grid.len() {
        return domain(format!("weighting has {} entries, grid has {}", w.len(), grid.len()));
    }
    let max = w.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::new();
    for (l, &v) in w.iter().enumerate() {
        out.push(row("fig4", "weight", "", grid.snrs[l], v, None));
    }
    for (l, &v) in w.iter().enumerate() {
        out.push(row("fig4", "weight_rescaled", "", grid.snrs[l], v * DISPLAY_MAX / max, None));
    }
    Ok(out)
}

/// Memorization ratio of the image model against `M/N`: `N = 100`, `K = 4`,
/// three colors, `15 x 15` templates, coarse grid only, unless a sweep CSV
/// is given.
fn fig6(cfg: &LabConfig, inputs: &FigureInputs) -> Result<Vec<SeriesRow>> {
    let records = match &inputs.sweep_csv {
        Some(p) => read_sweep_csv(File::open(p)?)?,
        None => {
            let mut c = cfg.clone();
            let files = match &cfg.data.model {
                ModelKind::Image { template_files, .. } => template_files.clone(),
                ModelKind::Isotropic => Vec::new(),
            };
            c.data.model = ModelKind::Image {
                side: 15,
                color_dim: 3,
                template_files: files,
            };
            c.data.n = 100;
            c.data.k = 4;
            c.data.d = 3 * 15 * 15;
            c.sweep.ns = vec![100];
            c.sweep.ds = vec![c.data.d];
            c.sweep.ks = vec![4];
            c.sweep.refine_points = 0;
            run_sweep(&c)?.records
        }
    };
    Ok(from_sweep("fig6", &records, &[("memorization_ratio", |r| r.ratio)]))
}
