mod common;

use common::{random_instance, random_spd};
use hbe::linalg::{relative_asymmetry, Cholesky};
use hbe::model::{compute_gain, minimize_f, update_mean, update_precision, DegradedPatch, InnerConfig, Patch};
use hbe::patch::{anchor_grid, find_similar, group_collaborative, Accumulator, PatchIndex, SearchConfig};
use hbe::solver::{estimate_hyperparams, kappa_nu_rule, SolverConfig};
use hbe::ImageGrid;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inner(max_iters: usize) -> InnerConfig {
    InnerConfig { max_iters, rel_tol: 0.0 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objective_never_increases(seed in any::<u64>(), n in prop::sample::select(vec![4usize, 9, 16]), m in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, n, m);
        let sol = minimize_f(&inst.group, &inst.hyper, &inner(15)).unwrap();
        for w in sol.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn masked_columns_of_the_gain_vanish(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let precision = random_spd(n, &mut rng, 1.0);
        let mask = DVector::from_fn(n, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let var = DVector::from_fn(n, |_, _| rng.random_range(0.01..10.0));
        let gain = compute_gain(&precision, &mask, &var).unwrap().dense();
        for j in (0..n).filter(|&j| mask[j] == 0.0) {
            prop_assert!(gain.column(j).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn masked_observations_are_never_read(seed in any::<u64>(), n in prop::sample::select(vec![4usize, 9]), m in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, n, m);
        let poisoned: Vec<DegradedPatch> = inst
            .group
            .iter()
            .map(|p| {
                let obs = DVector::from_fn(n, |j, _| if p.mask[j] == 0.0 { f64::NAN } else { p.observed[j] });
                DegradedPatch::new(obs, p.mask.clone(), p.noise_var.clone()).unwrap()
            })
            .collect();
        let clean = minimize_f(&inst.group, &inst.hyper, &inner(5)).unwrap();
        let dirty = minimize_f(&poisoned, &inst.hyper, &inner(5)).unwrap();
        prop_assert_eq!(clean.objective_trace, dirty.objective_trace);
        for (a, b) in clean.patches.iter().zip(&dirty.patches) {
            prop_assert_eq!(&a.values, &b.values);
        }
    }

    #[test]
    fn precision_update_is_symmetric_positive_definite(seed in any::<u64>(), n in 1usize..10, m in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, n, m);
        let patches: Vec<Patch> = (0..m)
            .map(|_| Patch::new(DVector::from_fn(n, |_, _| rng.random_range(-100.0..100.0))).unwrap())
            .collect();
        let mean = DVector::from_fn(n, |_, _| rng.random_range(-100.0..100.0));
        let lambda = update_precision(&patches, &mean, &inst.hyper).unwrap();
        prop_assert!(relative_asymmetry(&lambda) <= 1e-10);
        prop_assert!(Cholesky::factor(&lambda, "property").is_ok());
    }

    #[test]
    fn aggregation_matches_direct_average(seed in any::<u64>(), w in 3usize..12, h in 3usize..12, side in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = anchor_grid(w, h, side, 1).unwrap();
        let mut acc = Accumulator::new(w, h, side).unwrap();
        let mut sum = vec![0.0; w * h];
        let mut count = vec![0.0; w * h];
        for idx in &anchors {
            let values: Vec<f64> = (0..side * side).map(|_| rng.random_range(0.0..255.0)).collect();
            acc.add(*idx, &values).unwrap();
            for r in 0..side {
                for c in 0..side {
                    let p = (idx.top + r) * w + idx.left + c;
                    sum[p] += values[r * side + c];
                    count[p] += 1.0;
                }
            }
        }
        let out = acc.finish().unwrap();
        for (p, v) in out.data().iter().enumerate() {
            prop_assert_eq!(*v, sum[p] / count[p]);
        }
    }

    #[test]
    fn similarity_groups_respect_threshold_and_cover(seed in any::<u64>(), w in 10usize..20, h in 10usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let oracle = ImageGrid::from_fn(w, h, |_, _| rng.random_range(0.0..255.0));
        let mask = ImageGrid::from_fn(w, h, |_, _| if rng.random_bool(0.7) { 1.0 } else { 0.0 });
        let cfg = SearchConfig { patch_side: 3, window_side: 7, ..SearchConfig::default() };
        let anchors = anchor_grid(w, h, 3, 1).unwrap();
        let groups: Vec<_> = anchors.iter().map(|&a| find_similar(&oracle, &mask, a, &cfg).unwrap()).collect();
        for g in &groups {
            prop_assert_eq!(g.members[0], g.anchor);
            let nearest = g.distances.get(1).copied().unwrap_or(0.0);
            for pair in g.distances[1..].windows(2) {
                prop_assert!(pair[0] <= pair[1]);
            }
            for d in &g.distances[1..] {
                prop_assert!(*d <= cfg.epsilon * nearest);
            }
        }
        let kept = group_collaborative(groups);
        let covered: std::collections::HashSet<PatchIndex> = kept.iter().flat_map(|g| g.members.iter().copied()).collect();
        prop_assert!(anchors.iter().all(|a| covered.contains(a)));
    }
}

/// With the denoising preset the hyperprior dominates and `μ̂` stays at `μ₀`.
#[test]
fn denoising_mean_stays_at_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 64;
    let cfg = SolverConfig::denoising();
    for m in [2usize, 5, 20, 60] {
        let base = DVector::from_fn(n, |j, _| 60.0 + 2.0 * j as f64);
        let oracle: Vec<Patch> = (0..m)
            .map(|_| Patch::new(base.map(|v| v + rng.random_range(-8.0..8.0))).unwrap())
            .collect();
        let (kappa, nu) = kappa_nu_rule(m, n as f64, n, &cfg);
        let hyper = estimate_hyperparams(&oracle, kappa, nu).unwrap().params;
        let noise = rand_distr::Normal::new(0.0, 30f64.sqrt()).unwrap();
        let group: Vec<DegradedPatch> = oracle
            .iter()
            .map(|p| DegradedPatch::fully_observed(p.values.map(|v| v + rng.sample(noise)), 30.0).unwrap())
            .collect();
        let gains: Vec<_> = (0..m)
            .map(|_| compute_gain(&Cholesky::factor(&hyper.sigma0, "test").unwrap().inverse(), &group[0].mask, &group[0].noise_var).unwrap())
            .collect();
        let mean = update_mean(&group, &gains, &hyper).unwrap();
        let dev = (&mean - &hyper.mu0).norm() / hyper.mu0.norm();
        assert!(dev <= 1e-3, "M={m}: relative deviation {dev:e}");

        let sol = minimize_f(&group, &hyper, &InnerConfig::default()).unwrap();
        let dev = (&sol.model.mean - &hyper.mu0).norm() / hyper.mu0.norm();
        assert!(dev <= 1e-3, "M={m}: converged relative deviation {dev:e}");
    }
}

#[test]
fn sigma0_estimate_is_symmetric_positive_definite() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for m in 1..10 {
        let patches: Vec<Patch> = (0..m)
            .map(|_| Patch::new(DVector::from_fn(16, |_, _| rng.random_range(0.0..255.0))).unwrap())
            .collect();
        let hyper = estimate_hyperparams(&patches, 1.0, 17.0).unwrap().params;
        let s: &DMatrix<f64> = &hyper.sigma0;
        assert!(relative_asymmetry(s) <= 1e-12);
        Cholesky::factor(s, "sigma0").unwrap();
    }
}
