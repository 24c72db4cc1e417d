//! Two-stage sweep over model size `M` and the weighting fit on its output.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_cell, evaluate_model, train_model, Cell, CellData, LabConfig, LossTable, ModelEval, REFERENCE_PSI, SCHEMA_VERSION};
use crate::error::{domain, Result};
use crate::predictor::{fit_loss_weighting, CellObservation, FitResult};
use crate::sampling_eval::{detect_phase_transition, PhaseTransition};
use crate::schedule::TimeGrid;
use crate::seeding::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Coarse = 0,
    Refine = 1,
}

/// One trained model of a sweep. Metric fields are empty when the model
/// failed; `error` then holds the message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub schema_version: u32,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub var_star: f64,
    pub m: usize,
    pub stage: Stage,
    pub seed: u64,
    pub ratio: Option<f64>,
    pub var: Option<f64>,
    pub mean_to_sample: Option<f64>,
    pub mean_to_true_mean: Option<f64>,
    pub final_objective: Option<f64>,
    /// Losses at the grid point nearest `psi = 6.704`.
    pub train_learned: Option<f64>,
    pub train_gen: Option<f64>,
    pub train_mem: Option<f64>,
    pub train_pmem: Option<f64>,
    pub test_learned: Option<f64>,
    pub test_gen: Option<f64>,
    pub test_mem: Option<f64>,
    pub test_pmem: Option<f64>,
    pub error: String,
}

impl SweepRecord {
    pub fn cell(&self) -> Cell {
        Cell {
            n: self.n,
            d: self.d,
            k: self.k,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_empty()
    }
}

/// Long-format per-timestep loss of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepRow {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub stage: Stage,
    pub t_index: usize,
    pub t: f64,
    pub psi: f64,
    pub split: String,
    pub denoiser: String,
    pub value: f64,
    pub std_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    /// Sorted by `(N, d, K, M, stage)`.
    pub records: Vec<SweepRecord>,
    pub losses: Vec<TimestepRow>,
    pub transitions: BTreeMap<Cell, PhaseTransition>,
    pub warnings: Vec<String>,
}

/// `M = step, 2 step, .., points step` with `step = max(floor(N / points), 1)`,
/// capped at `N`.
pub fn coarse_grid(n: usize, points: usize) -> Vec<usize> {
    let step = (n / points.max(1)).max(1);
    let mut out: Vec<usize> = (1..=points).map(|i| i * step).filter(|&m| m <= n).collect();
    out.dedup();
    out
}

/// `points` values equally spaced on `[lo, hi]`, endpoints included,
/// rounded and deduplicated.
pub fn refine_grid(lo: usize, hi: usize, points: usize) -> Vec<usize> {
    if points <= 1 || hi <= lo {
        return vec![lo];
    }
    let span = (hi - lo) as f64;
    let mut out: Vec<usize> = (0..points)
        .map(|i| lo + (span * i as f64 / (points - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Interval to refine from a coarse transition. When the whole transition
/// falls inside one coarse step the previous coarse `M` is the lower end;
/// a missing end uses the largest coarse `M`.
fn refine_interval(coarse: &[usize], pt: &PhaseTransition) -> Option<(usize, usize)> {
    let start = pt.start?;
    let hi = pt.end.unwrap_or(*coarse.last()?);
    let lo = if start >= hi {
        coarse.iter().rev().find(|&&m| m < start).copied().unwrap_or(1)
    } else {
        start
    };
    Some((lo, hi))
}

fn at(col: &[crate::losses::LossEstimate], i: usize) -> Option<f64> {
    col.get(i).map(|e| e.value)
}

fn timestep_rows(cell: Cell, m: usize, stage: Stage, grid: &TimeGrid, ev: &ModelEval) -> Vec<TimestepRow> {
    let mut out = Vec::new();
    for (split, table) in [("train", &ev.train), ("test", &ev.test)] {
        for (name, col) in named(table) {
            for (l, est) in col.iter().enumerate() {
                out.push(TimestepRow {
                    n: cell.n,
                    d: cell.d,
                    k: cell.k,
                    m,
                    stage,
                    t_index: l,
                    t: grid.times[l],
                    psi: grid.snrs[l],
                    split: split.into(),
                    denoiser: name.into(),
                    value: est.value,
                    std_err: est.std_err,
                });
            }
        }
    }
    out
}

fn named(t: &LossTable) -> [(&'static str, &Vec<crate::losses::LossEstimate>); 4] {
    [
        ("learned", &t.learned),
        ("generalizing", &t.generalizing),
        ("memorizing", &t.memorizing),
        ("pmem", &t.pmem),
    ]
}

fn run_model(cfg: &LabConfig, data: &CellData, m: usize, stage: Stage) -> (SweepRecord, Vec<TimestepRow>) {
    let cell = data.cell;
    let mut key = cell.key();
    key.push(m as u64);
    key.push(stage as u64);
    let mut rec = SweepRecord {
        schema_version: SCHEMA_VERSION,
        n: cell.n,
        d: cell.d,
        k: cell.k,
        var_star: cfg.data.var_star,
        m,
        stage,
        seed: derive_seed(cfg.root_seed, &key, "train"),
        ratio: None,
        var: None,
        mean_to_sample: None,
        mean_to_true_mean: None,
        final_objective: None,
        train_learned: None,
        train_gen: None,
        train_mem: None,
        train_pmem: None,
        test_learned: None,
        test_gen: None,
        test_mem: None,
        test_pmem: None,
        error: String::new(),
    };
    let result = train_model(cfg, data, m, stage).and_then(|trace| {
        let ev = evaluate_model(cfg, data, &trace.params, m, stage)?;
        Ok((trace.final_loss, ev))
    });
    match result {
        Ok((obj, ev)) => {
            let grid = &cfg.train.grid;
            let i = grid.nearest_snr_index(REFERENCE_PSI);
            rec.ratio = Some(ev.ratio);
            rec.var = Some(ev.var);
            rec.mean_to_sample = Some(ev.mean_to_sample);
            rec.mean_to_true_mean = Some(ev.mean_to_true_mean);
            rec.final_objective = Some(obj);
            rec.train_learned = at(&ev.train.learned, i);
            rec.train_gen = at(&ev.train.generalizing, i);
            rec.train_mem = at(&ev.train.memorizing, i);
            rec.train_pmem = at(&ev.train.pmem, i);
            rec.test_learned = at(&ev.test.learned, i);
            rec.test_gen = at(&ev.test.generalizing, i);
            rec.test_mem = at(&ev.test.memorizing, i);
            rec.test_pmem = at(&ev.test.pmem, i);
            let rows = timestep_rows(cell, m, stage, grid, &ev);
            log::info!("N={} d={} K={} M={m} {stage:?}: ratio {:.2}", cell.n, cell.d, cell.k, ev.ratio);
            (rec, rows)
        }
        Err(e) => {
            log::warn!("N={} d={} K={} M={m} {stage:?} failed: {e}", cell.n, cell.d, cell.k);
            rec.error = e.to_string();
            (rec, Vec::new())
        }
    }
}

fn run_stage(cfg: &LabConfig, data: &CellData, ms: &[usize], stage: Stage, out: &mut SweepOutcome) -> BTreeMap<usize, f64> {
    let results: Vec<_> = ms.par_iter().map(|&m| run_model(cfg, data, m, stage)).collect();
    let mut ratios = BTreeMap::new();
    for (rec, rows) in results {
        if let Some(r) = rec.ratio {
            ratios.insert(rec.m, r);
        }
        out.records.push(rec);
        out.losses.extend(rows);
    }
    ratios
}

/// Coarse pass over `M`, then a refinement pass over the detected
/// transition. Failed models are recorded and the sweep continues.
pub fn run_sweep(cfg: &LabConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let mut out = SweepOutcome::default();
    for cell in cfg.sweep.cells() {
        let mut cell_cfg = cfg.clone();
        cell_cfg.data.n = cell.n;
        cell_cfg.data.d = cell.d;
        cell_cfg.data.k = cell.k;
        let data = match build_cell(&cell_cfg, cell) {
            Ok(d) => d,
            Err(e) => {
                out.warnings.push(format!("cell {cell:?} skipped: {e}"));
                continue;
            }
        };
        let coarse = coarse_grid(cell.n, cfg.sweep.coarse_points);
        let coarse_ratios = run_stage(&cell_cfg, &data, &coarse, Stage::Coarse, &mut out);
        let pt = detect_phase_transition(&coarse_ratios);
        match refine_interval(&coarse, &pt) {
            _ if cfg.sweep.refine_points == 0 => {}
            Some((lo, hi)) => {
                let ms = refine_grid(lo, hi, cfg.sweep.refine_points);
                run_stage(&cell_cfg, &data, &ms, Stage::Refine, &mut out);
            }
            None => out
                .warnings
                .push(format!("cell {cell:?}: memorization never reached 0.1 on the coarse grid; no refinement")),
        }
        out.transitions.insert(cell, transition_of(&out.records, cell));
    }
    out.records
        .sort_by_key(|a| (a.cell(), a.m, a.stage));
    Ok(out)
}

/// Ratios of one cell from both stages, averaging duplicate `M`.
pub fn cell_ratios(records: &[SweepRecord], cell: Cell) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.cell() == cell) {
        if let Some(v) = r.ratio {
            let e = acc.entry(r.m).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(m, (s, c))| (m, s / c as f64)).collect()
}

fn transition_of(records: &[SweepRecord], cell: Cell) -> PhaseTransition {
    detect_phase_transition(&cell_ratios(records, cell))
}

pub fn write_sweep_csv<W1: Write, W2: Write>(outcome: &SweepOutcome, records: W1, losses: W2) -> Result<()> {
    let mut wr = csv::Writer::from_writer(records);
    for r in &outcome.records {
        wr.serialize(r)?;
    }
    wr.flush()?;
    let mut wl = csv::Writer::from_writer(losses);
    for r in &outcome.losses {
        wl.serialize(r)?;
    }
    wl.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(r: R) -> Result<Vec<SweepRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let rec: SweepRecord = row?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(crate::error::LabError::Parse(format!(
                "sweep schema {} not supported (expected {SCHEMA_VERSION})",
                rec.schema_version
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub observations: Vec<CellObservation>,
    pub fit: FitResult,
    pub skipped: Vec<String>,
}

impl FitReport {
    pub fn to_json(&self) -> serde_json::Value {
        let cells: Vec<_> = self
            .observations
            .iter()
            .zip(&self.fit.smoothed_m_pt)
            .zip(&self.fit.test_cells)
            .map(|((o, s), t)| {
                serde_json::json!({
                    "n": o.n, "d": o.d, "k": o.k, "var_star": o.var_star,
                    "m_pt": o.m_pt, "smoothed_m_pt": s, "held_out": t,
                })
            })
            .collect();
        serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "train_mse": self.fit.train_mse,
            "test_mse": self.fit.test_mse,
            "final_objective": self.fit.objective_trace.last(),
            "cells": cells,
            "skipped": self.skipped,
        })
    }
}

/// Measured `M_pt` per cell (ratio first reaching 1/2, duplicates averaged)
/// and the weighting fitted to them.
pub fn fit_from_sweep(cfg: &LabConfig, records: &[SweepRecord]) -> Result<FitReport> {
    let mut cells: BTreeMap<Cell, f64> = BTreeMap::new();
    for r in records {
        cells.entry(r.cell()).or_insert(r.var_star);
    }
    let mut observations = Vec::new();
    let mut skipped = Vec::new();
    for (cell, var_star) in cells {
        match transition_of(records, cell).pt {
            Some(m_pt) => observations.push(CellObservation::new(
                cell.n,
                cell.d,
                cell.k,
                var_star,
                m_pt,
                &cfg.train.grid,
                &cfg.fit.approx,
            )?),
            None => skipped.push(format!("N={} d={} K={}: ratio never reached 1/2", cell.n, cell.d, cell.k)),
        }
    }
    if observations.is_empty() {
        return domain("no sweep cell has a measured transition");
    }
    let fit = fit_loss_weighting(&observations, &cfg.fit)?;
    Ok(FitReport {
        observations,
        fit,
        skipped,
    })
}
