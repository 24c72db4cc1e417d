use std::fs;

use memlab::error::LabError;
use memlab::lab::{
    cmd_figure, cmd_predict, cmd_train, figure, fit_from_sweep, read_sweep_csv, run_sweep, write_sweep_csv, FigureInputs,
    LabConfig, Stage, SweepOutcome, SweepRecord, FIGURES,
};

fn tiny() -> LabConfig {
    let mut cfg = LabConfig::default().resolve(None, Some(11), false).unwrap();
    cfg.data.n = 12;
    cfg.data.d = 4;
    cfg.data.k = 2;
    cfg.train.n_epochs = 40;
    cfg.train.n_dup = 2;
    cfg.eval.n_eval = 6;
    cfg.eval.n_dup = 2;
    cfg.sweep.ns = vec![12];
    cfg.sweep.ds = vec![4];
    cfg.sweep.ks = vec![2];
    cfg.sweep.coarse_points = 3;
    cfg.sweep.refine_points = 3;
    cfg
}

fn record(n: usize, d: usize, k: usize, m: usize, ratio: f64, var: f64) -> SweepRecord {
    SweepRecord {
        schema_version: 1,
        n,
        d,
        k,
        var_star: 1.0,
        m,
        stage: Stage::Coarse,
        seed: 0,
        ratio: Some(ratio),
        var: Some(var),
        mean_to_sample: Some(0.1),
        mean_to_true_mean: Some(1.0),
        final_objective: Some(1.0),
        train_learned: None,
        train_gen: None,
        train_mem: None,
        train_pmem: None,
        test_learned: None,
        test_gen: None,
        test_mem: None,
        test_pmem: None,
        error: String::new(),
    }
}

#[test]
fn sweep_is_deterministic_and_round_trips() {
    let cfg = tiny();
    let a = run_sweep(&cfg).unwrap();
    let b = run_sweep(&cfg).unwrap();
    assert_eq!(a.records, b.records);
    assert!(a.records.len() >= 3);
    assert!(a.records.iter().all(|r| r.is_ok()), "{:?}", a.records);
    let keys: Vec<_> = a.records.iter().map(|r| (r.m, r.stage)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    let coarse: Vec<usize> = a.records.iter().filter(|r| r.stage == Stage::Coarse).map(|r| r.m).collect();
    assert_eq!(coarse, vec![4, 8, 12]);
    // 2 splits x 4 denoisers x 26 grid points per model.
    assert_eq!(a.losses.len(), a.records.len() * 2 * 4 * 26);

    let mut buf = Vec::new();
    let mut losses = Vec::new();
    write_sweep_csv(&a, &mut buf, &mut losses).unwrap();
    let back = read_sweep_csv(buf.as_slice()).unwrap();
    assert_eq!(back, a.records);
    let header = String::from_utf8(losses).unwrap();
    assert!(header.starts_with("n,d,k,m,stage,t_index,t,psi,split,denoiser,value,std_err"));
}

#[test]
fn failed_models_are_recorded() {
    let mut cfg = tiny();
    cfg.sweep.refine_points = 0;
    // A huge learning rate diverges without stopping the sweep.
    cfg.train.peak_lr = 1e9;
    cfg.train.end_lr = 1e9;
    let out: SweepOutcome = run_sweep(&cfg).unwrap();
    assert_eq!(out.records.len(), 3);
    assert!(out.records.iter().any(|r| !r.is_ok()), "{:?}", out.records);
    for r in out.records.iter().filter(|r| !r.is_ok()) {
        assert!(r.ratio.is_none() && r.var.is_none());
    }
}

#[test]
fn fit_reads_transitions_from_records() {
    let mut recs = Vec::new();
    for (n, d, k, pt) in [(50, 30, 3, 40), (50, 40, 6, 40), (100, 30, 3, 80), (100, 40, 6, 80)] {
        for m in (n / 10..=n).step_by(n / 10) {
            recs.push(record(n, d, k, m, if m >= pt { 1.0 } else { 0.0 }, 1.0 / m as f64));
        }
    }
    // Duplicates of M = 35 are averaged with the coarse 0.0: (0 + 0.6 + 1) / 3 >= 1/2.
    let mut dup = record(50, 30, 3, 35, 0.6, 0.1);
    dup.stage = Stage::Refine;
    recs.push(dup.clone());
    dup.ratio = Some(1.0);
    recs.push(dup);
    // Alone, 0.0 and 0.9 would average below 1/2.
    let mut low = record(50, 40, 6, 35, 0.9, 0.1);
    low.stage = Stage::Refine;
    recs.push(low);
    let mut cfg = LabConfig::default();
    cfg.fit.steps = 200;
    let report = fit_from_sweep(&cfg, &recs).unwrap();
    let pts: Vec<_> = report.observations.iter().map(|o| (o.n, o.d, o.k, o.m_pt)).collect();
    assert_eq!(pts, vec![(50, 30, 3, 35), (50, 40, 6, 40), (100, 30, 3, 80), (100, 40, 6, 80)]);
    assert!(report.skipped.is_empty());
    let js = report.to_json();
    assert_eq!(js["cells"].as_array().unwrap().len(), 4);
}

#[test]
fn seed_precedence() {
    let cfg = LabConfig {
        root_seed: 1,
        ..Default::default()
    };
    assert_eq!(cfg.clone().resolve(None, None, false).unwrap().root_seed, 1);
    assert_eq!(cfg.clone().resolve(Some("2"), None, false).unwrap().root_seed, 2);
    assert_eq!(cfg.clone().resolve(Some("2"), Some(3), false).unwrap().root_seed, 3);
    assert!(cfg.clone().resolve(Some("abc"), None, false).is_err());
    let r = cfg.resolve(None, Some(4), false).unwrap();
    assert_eq!((r.train.seed, r.fit.seed), (4, 4));
}

#[test]
fn partial_config_and_schema() {
    let cfg = LabConfig::from_json(r#"{"data": {"n": 40, "d": 8}, "train": {"n_epochs": 10}}"#).unwrap();
    assert_eq!((cfg.data.n, cfg.data.d, cfg.data.k), (40, 8, 3));
    assert_eq!(cfg.train.n_epochs, 10);
    assert_eq!(cfg.train.n_dup, 16);
    assert!(LabConfig::from_json(r#"{"schema_version": 9}"#).is_err());
    assert!(LabConfig::from_json(r#"{"data": {"n": "x"}}"#).is_err());

    let paper = LabConfig::default().resolve(None, None, true).unwrap();
    assert_eq!((paper.train.n_epochs, paper.train.n_dup, paper.eval.n_dup), (50_000, 100, 100));
}

#[test]
fn train_output_is_byte_identical() {
    let cfg = tiny();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    cmd_train(&cfg, d1.path()).unwrap();
    cmd_train(&cfg, d2.path()).unwrap();
    let a = fs::read(d1.path().join("trace.json")).unwrap();
    let b = fs::read(d2.path().join("trace.json")).unwrap();
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert!(v["params"].is_object());
    assert!(d1.path().join("config.json").exists());
}

#[test]
fn fig1_series() {
    let mut cfg = LabConfig::default();
    cfg.data.n = 200;
    cfg.data.d = 50;
    cfg.data.k = 12;
    cfg.eval.n_dup = 2;
    let rows = figure(&cfg, "fig1", &FigureInputs::default()).unwrap();
    let mut names: Vec<&str> = rows.iter().map(|r| r.series.as_str()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names, vec!["gen", "gen_approx", "mem", "pmem_approx", "pmem_empirical"]);
    for r in rows.iter().filter(|r| r.series == "gen_approx") {
        assert!((r.y - 6.4901).abs() < 5e-4, "{}", r.y);
    }
    let half = rows.iter().find(|r| r.series == "pmem_approx" && (r.x - 0.5).abs() < 1e-9);
    if let Some(r) = half {
        assert!((r.y - 50.0).abs() < 1e-9);
    }
    for r in rows.iter().filter(|r| r.series == "mem") {
        assert!(r.y < 1e-6);
    }
}

#[test]
fn fig7_and_unknown_names() {
    let dir = tempfile::tempdir().unwrap();
    let recs: Vec<SweepRecord> = [30, 10, 20].iter().map(|&m| record(30, 4, 2, m, 0.0, 1.0 / m as f64)).collect();
    let path = dir.path().join("sweep.csv");
    let outcome = SweepOutcome {
        records: recs,
        ..Default::default()
    };
    write_sweep_csv(&outcome, fs::File::create(&path).unwrap(), Vec::new()).unwrap();
    let inputs = FigureInputs {
        sweep_csv: Some(path),
        weighting_csv: None,
    };
    let rows = figure(&LabConfig::default(), "fig7", &inputs).unwrap();
    let vars: Vec<f64> = rows.iter().filter(|r| r.series == "var").map(|r| r.y).collect();
    assert_eq!(vars.len(), 3);
    assert!(vars.windows(2).all(|w| w[1] < w[0]));
    let files = cmd_figure(&LabConfig::default(), "fig7", &inputs, dir.path()).unwrap();
    assert!(fs::read_to_string(&files[1]).unwrap().starts_with("figure,series,cell,x,y,std_err"));

    match figure(&LabConfig::default(), "fig2", &inputs) {
        Err(LabError::UnknownFigure { available, .. }) => {
            for f in FIGURES {
                assert!(available.contains(f));
            }
        }
        other => panic!("expected UnknownFigure, got {other:?}"),
    }
    assert!(figure(&LabConfig::default(), "fig4", &inputs).is_err());
}

#[test]
fn prediction_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = LabConfig::default();
    let (files, p) = cmd_predict(&cfg, None, dir.path()).unwrap();
    assert!(p.m_star > 0.0 && p.m_star <= cfg.data.n as f64);
    assert!((1..=cfg.data.n).contains(&p.m_pt));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&files[1]).unwrap()).unwrap();
    assert_eq!(v["m_pt"], p.m_pt);
}
