use std::collections::BTreeMap;

use memlab::denoisers::{general_denoiser, softmax, Denoiser, GaussianComponent, IsoDenoiserParams, MemDenoiser};
use memlab::gmm_data::Dataset;
use memlab::lab::{coarse_grid, refine_grid};
use memlab::points::Points;
use memlab::predictor::crossover_point;
use memlab::sampling_eval::{ddim_sample, detect_phase_transition, is_memorized, MemCriterion};
use memlab::schedule::{vp_coefficients, TimeGrid, Weighting};
use memlab::seeding::derive_seed;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn dataset(rows: Vec<Vec<f64>>) -> Dataset {
    let n = rows.len();
    Dataset {
        samples: Points::from_rows(&rows).unwrap(),
        labels: vec![0; n],
        seed: 0,
    }
}

fn points(d: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Distances are unchanged by a shift, a coordinate permutation and sign flips.
    #[test]
    fn memorization_is_rigid_motion_invariant(
        rows in points(4, 6),
        x in prop::collection::vec(-5.0..5.0f64, 4),
        shift in prop::collection::vec(-10.0..10.0f64, 4),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        signs in prop::collection::vec(prop::bool::ANY, 4),
    ) {
        let crit = MemCriterion::default();
        let moved = |p: &[f64]| -> Vec<f64> {
            (0..4).map(|j| {
                let v = p[perm[j]] + shift[perm[j]];
                if signs[j] { -v } else { v }
            }).collect()
        };
        let before = is_memorized(&x, &dataset(rows.clone()), &crit).unwrap();
        let after = is_memorized(&moved(&x), &dataset(rows.iter().map(|r| moved(r)).collect()), &crit).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn training_points_are_memorized(rows in points(3, 5), i in 0usize..5) {
        let ds = dataset(rows.clone());
        let distinct = rows.iter().enumerate().all(|(j, r)| j == i || r != &rows[i]);
        prop_assume!(distinct);
        prop_assert!(is_memorized(&rows[i], &ds, &MemCriterion::default()).unwrap());
    }

    #[test]
    fn transition_thresholds_are_ordered(raw in prop::collection::vec(0.0..1.0f64, 1..20)) {
        let mut sorted = raw.clone();
        sorted.sort_by(f64::total_cmp);
        let ratios: BTreeMap<usize, f64> = sorted.iter().enumerate().map(|(i, r)| (i + 1, *r)).collect();
        let pt = detect_phase_transition(&ratios);
        if let (Some(a), Some(b)) = (pt.start, pt.pt) { prop_assert!(a <= b); }
        if let (Some(b), Some(c)) = (pt.pt, pt.end) { prop_assert!(b <= c); }
        if pt.end.is_some() { prop_assert!(pt.pt.is_some() && pt.start.is_some()); }
        if let Some(m) = pt.pt {
            prop_assert!(ratios[&m] >= 0.5);
            prop_assert!(ratios.range(..m).all(|(_, r)| *r < 0.5));
        }
    }

    #[test]
    fn crossover_fraction_is_independent_of_n(n in 2usize..400, var in 0.1..4.0f64) {
        let grid = TimeGrid::new(25, 1e-3).unwrap();
        let w = Weighting::Constant(1.0);
        let a = crossover_point(n, var, &grid, &w, 2.0).unwrap() / n as f64;
        let b = crossover_point(2 * n, var, &grid, &w, 2.0).unwrap() / (2 * n) as f64;
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-800.0..800.0f64, 1..30), c in -100.0..100.0f64) {
        let p = softmax(&v);
        prop_assert!(p.iter().all(|x| *x >= 0.0 && *x <= 1.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn coarse_grid_rule(n in 1usize..500, points in 1usize..20) {
        let g = coarse_grid(n, points);
        let step = (n / points).max(1);
        prop_assert!(!g.is_empty());
        prop_assert!(g.len() <= points);
        prop_assert!(g.windows(2).all(|w| w[1] - w[0] == step));
        prop_assert_eq!(g[0], step);
        prop_assert!(*g.last().unwrap() <= n);
    }

    #[test]
    fn refine_grid_keeps_endpoints(lo in 1usize..200, span in 1usize..200, points in 2usize..15) {
        let hi = lo + span;
        let g = refine_grid(lo, hi, points);
        prop_assert_eq!(g[0], lo);
        prop_assert_eq!(*g.last().unwrap(), hi);
        prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(g.len() <= points);
    }

    // Single component: x̄ = mu + alpha v / (alpha^2 v + sigma^2) (x - alpha mu).
    #[test]
    fn one_component_posterior_mean(
        mu in prop::collection::vec(-3.0..3.0f64, 3),
        x in prop::collection::vec(-3.0..3.0f64, 3),
        var in 0.01..3.0f64,
        t in 0.01..0.99f64,
    ) {
        let p = IsoDenoiserParams::new(Points::from_rows(std::slice::from_ref(&mu)).unwrap(), var).unwrap();
        let (a, s) = vp_coefficients(t).unwrap();
        let gain = a * var / (a * a * var + s * s);
        let got = p.denoise(t, &x).unwrap();
        for j in 0..3 {
            let want = mu[j] + gain * (x[j] - a * mu[j]);
            prop_assert!((got[j] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn isotropic_matches_dense(
        means in points(3, 3),
        x in prop::collection::vec(-4.0..4.0f64, 3),
        var in 0.05..2.0f64,
        t in 0.02..0.98f64,
    ) {
        let p = IsoDenoiserParams::new(Points::from_rows(&means).unwrap(), var).unwrap();
        let comps: Vec<GaussianComponent> = means
            .iter()
            .map(|m| GaussianComponent { mean: m.clone(), cov: DMatrix::identity(3, 3) * var })
            .collect();
        let dense = general_denoiser(&comps, t, &x).unwrap();
        let fast = p.denoise(t, &x).unwrap();
        for (a, b) in fast.iter().zip(&dense) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn full_prefix_is_the_memorizer(rows in points(2, 5), x in prop::collection::vec(-4.0..4.0f64, 2), t in 0.05..0.95f64) {
        let ds = dataset(rows);
        let a = MemDenoiser::full(&ds).denoise(t, &x).unwrap();
        let b = MemDenoiser::partial(&ds, 5).unwrap().denoise(t, &x).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn seeds_depend_on_every_input(root in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(a != b);
        prop_assert_eq!(derive_seed(root, &[a], "x"), derive_seed(root, &[a], "x"));
        prop_assert_ne!(derive_seed(root, &[a], "x"), derive_seed(root, &[b], "x"));
        prop_assert_ne!(derive_seed(root, &[a], "x"), derive_seed(root, &[a], "y"));
    }
}

#[test]
fn ddim_is_deterministic_and_seed_sensitive() {
    let p = IsoDenoiserParams::new(Points::from_rows(&[vec![1.0, -1.0], vec![-2.0, 0.5]]).unwrap(), 0.3).unwrap();
    let grid = TimeGrid::new(25, 1e-3).unwrap();
    let a = ddim_sample(&p, &grid, 20, 5).unwrap();
    let b = ddim_sample(&p, &grid, 20, 5).unwrap();
    let c = ddim_sample(&p, &grid, 20, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
