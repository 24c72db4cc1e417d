//! Desk-scale training runs (a few minutes in total).

use memlab::denoisers::IsoDenoiserParams;
use memlab::gmm_data::{gen_isotropic_means, sample_dataset, Dataset, IsotropicTarget};
use memlab::sampling_eval::{memorization_ratio, MemCriterion};
use memlab::seeding::{derive_seed, rng_from_seed};
use memlab::training::{init_partial_mem, loss_and_grad, train, NoiseBank, Params, TrainConfig, TrainTrace};

fn setup(n: usize, d: usize, k: usize, seed: u64) -> (IsotropicTarget, Dataset) {
    let mut rng = rng_from_seed(seed);
    let tg = gen_isotropic_means(k, d, &mut rng).unwrap();
    let ds = sample_dataset(&tg, n, seed + 1).unwrap();
    (tg, ds)
}

fn run(ds: &Dataset, m: usize, seed: u64) -> TrainTrace {
    let init = init_partial_mem(ds, m, &mut rng_from_seed(seed + 2)).unwrap();
    train(&Params::Isotropic(init), ds, &TrainConfig::desk(seed + 3)).unwrap()
}

fn check_trace(trace: &TrainTrace) {
    assert!(trace.losses.iter().all(|l| l.is_finite()));
    assert!(trace.final_loss <= 1.01 * trace.losses[0], "{} > {}", trace.final_loss, trace.losses[0]);
}

#[test]
fn few_components_reach_the_generalizing_loss() {
    let (tg, ds) = setup(100, 30, 3, 40);
    let trace = run(&ds, 3, 40);
    check_trace(&trace);
    // Objective of the true mixture on the same noise bank.
    let cfg = &trace.config;
    let bank = NoiseBank::draw(derive_seed(cfg.seed, &[], "noise-bank"), ds.len(), cfg.n_dup, ds.dim());
    let star = Params::Isotropic(IsoDenoiserParams::from_target(&tg));
    let (gen, _) = loss_and_grad(&star, &ds, &cfg.grid, &cfg.weighting, &bank).unwrap();
    let rel = (trace.final_loss - gen).abs() / gen;
    assert!(rel <= 0.1, "final {} vs generalizing {gen}", trace.final_loss);
}

#[test]
fn full_capacity_memorizes() {
    let (_, ds) = setup(50, 30, 3, 50);
    let trace = run(&ds, 50, 50);
    check_trace(&trace);
    assert!(trace.params.var() <= 1e-4, "var {}", trace.params.var());
    let grid = &trace.config.grid;
    let ratio = memorization_ratio(&trace.params, &ds, grid, 50, &MemCriterion::default(), 7).unwrap();
    assert_eq!(ratio, 1.0);
}
