use limitlab::annealed::{cumulants_from_moments, Annealed};
use limitlab::config::ExperimentConfig;
use limitlab::driving::{mixing_alpha, mixing_phi_reverse, mixing_psi, SymbolChain};
use limitlab::fibers::families::{doubling, lazy_shift, three_cell, three_cell_alt};
use limitlab::fibers::PiecewiseMap;
use limitlab::fields::{GridFunction, SymbolField};
use limitlab::martingale::{duality_certificate, k_apply};
use limitlab::montecarlo::{sample_rng, Sampler};
use limitlab::operators::Cocycle;
use limitlab::stats::{mean, standard_error};
use proptest::prelude::*;
use rand::Rng;

fn family(i: usize) -> PiecewiseMap {
    match i % 4 {
        0 => doubling(),
        1 => three_cell(),
        2 => three_cell_alt(),
        _ => lazy_shift(),
    }
}

/// Row-stochastic matrix with entries bounded away from 0.
fn chain(m: usize) -> impl Strategy<Value = SymbolChain> {
    prop::collection::vec(prop::collection::vec(0.05f64..1.0, m), m).prop_map(|rows| {
        let p = rows
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        SymbolChain::new(p).unwrap()
    })
}

fn cocycle(m: usize) -> impl Strategy<Value = Cocycle> {
    (chain(m), prop::collection::vec(0usize..4, m), 1usize..3).prop_map(move |(c, idx, k)| {
        let maps: Vec<PiecewiseMap> = idx.iter().map(|i| family(*i)).collect();
        let base = maps.iter().map(|m| m.base_partition()).fold(1, limitlab::fields::lcm);
        Cocycle::new(c, maps, base * k).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mixing_coefficients_ordered_and_monotone(c in (2usize..5).prop_flat_map(chain)) {
        let mut prev = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        for n in 1..=30 {
            let a = mixing_alpha(&c, n).unwrap();
            let f = mixing_phi_reverse(&c, n);
            let p = mixing_psi(&c, n);
            prop_assert!(a >= -1e-15 && a <= f + 1e-12 && f <= p + 1e-12, "n={n}: {a} {f} {p}");
            prop_assert!(a <= prev.0 + 1e-12 && f <= prev.1 + 1e-12 && p <= prev.2 + 1e-12);
            prev = (a, f, p);
        }
    }

    #[test]
    fn two_state_psi_ratio(c in chain(2)) {
        let r = (1.0 - c.p[0][1] - c.p[1][0]).abs();
        for n in 1..10 {
            let (a, b) = (mixing_psi(&c, n), mixing_psi(&c, n + 1));
            // below ~1e-6 the absolute roundoff of Pⁿ dominates the ratio
            if a > 1e-6 {
                prop_assert!((b / a - r).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transfer_preserves_integral_and_is_dual_to_pullback(i in 0usize..4, k in 1usize..4, seed in any::<u64>()) {
        let map = family(i);
        let res = map.base_partition() * k;
        let mut rng = sample_rng(seed, 0);
        let g = GridFunction::new((0..res).map(|_| rng.random_range(-1.0..1.0)).collect());
        let f = GridFunction::new((0..res).map(|_| rng.random_range(-1.0..1.0)).collect());
        let t = map.transfer_matrix(res).unwrap();
        let lg = t.apply(&g);
        prop_assert!((lg.integral() - g.integral()).abs() <= 1e-12);
        let pb = map.pullback(&f);
        let rhs = g.refine_to(pb.resolution()).mul(&pb).integral();
        prop_assert!((lg.mul(&f).integral() - rhs).abs() <= 1e-12);
    }

    #[test]
    fn cocycle_law_and_path_density(c in cocycle(2), seed in any::<u64>(), split in 1usize..6) {
        let mut rng = sample_rng(seed, 1);
        let path: Vec<usize> = (0..8).map(|_| rng.random_range(0..2)).collect();
        let g = GridFunction::new((0..c.resolution()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let whole = c.push(&path, &g).unwrap();
        let parts = c.push(&path[split..], &c.push(&path[..split], &g).unwrap()).unwrap();
        prop_assert_eq!(whole.values(), parts.values());
        let h = c.path_density(&path).unwrap();
        prop_assert!((h.integral() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conditioned_density_has_unit_mass(c in (2usize..4).prop_flat_map(cocycle)) {
        let a = Annealed::new(c).unwrap();
        prop_assert!(a.residual() < 1e-12);
        for s in 0..a.symbols() {
            prop_assert!((a.hhat().get(s).integral() - 1.0).abs() < 1e-12);
            prop_assert!(a.hhat().get(s).min() >= -1e-12);
        }
    }

    #[test]
    fn k_operator_inverts_composition_and_passes_duality(c in cocycle(2), seed in any::<u64>()) {
        let a = Annealed::new(c).unwrap();
        prop_assume!((0..2).all(|s| a.hhat().get(s).min() > 1e-6));
        let mut rng = sample_rng(seed, 2);
        let res = a.cocycle().resolution();
        let f = SymbolField::new((0..2).map(|_| GridFunction::new((0..res).map(|_| rng.random_range(-1.0..1.0)).collect())).collect());
        prop_assert!(duality_certificate(&a, &f).unwrap() <= 1e-11);
        let g = a.center(&f);
        let kg = k_apply(&a, &g).unwrap();
        prop_assert!(a.expectation(&kg).abs() < 1e-12);
    }

    #[test]
    fn cumulants_beyond_first_are_shift_invariant(xs in prop::collection::vec(-3.0f64..3.0, 5..40), c in -2.0f64..2.0) {
        let moments = |shift: f64| -> Vec<f64> {
            (0..=6).map(|p| xs.iter().map(|x| (x + shift).powi(p)).sum::<f64>() / xs.len() as f64).collect()
        };
        let (k0, k1) = (cumulants_from_moments(&moments(0.0)), cumulants_from_moments(&moments(c)));
        prop_assert!((k1[1] - k0[1] - c).abs() < 1e-9);
        for k in 2..=6 {
            prop_assert!((k1[k] - k0[k]).abs() < 1e-7 * (1.0 + k0[k].abs()), "k={k}");
        }
    }

    #[test]
    fn config_round_trip(count in 1usize..1_000_000, n in 1usize..100, ts in prop::collection::vec(0.01f64..1.0, 1..5), seed in any::<u64>()) {
        let mut cfg = ExperimentConfig::load(&std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/markov_two_map.json")).unwrap();
        cfg.seed = seed;
        cfg.experiments.clt.count = count;
        cfg.experiments.gate.n = n;
        cfg.experiments.concentration.ts = ts;
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(&cfg, &again);
        prop_assert_eq!(cfg.hash(), again.hash());
    }
}

/// `∫ g·(f∘T) dm` from the exact transfer matrix against plain Monte Carlo
/// over uniform points, 10 random step pairs per family map.
#[test]
fn transfer_matrix_matches_pointwise_monte_carlo() {
    for i in 0..4 {
        let map = family(i);
        let res = map.base_partition() * 2;
        let t = map.transfer_matrix(res).unwrap();
        for pair in 0..10u64 {
            let mut rng = sample_rng(17 + i as u64, pair);
            let g = GridFunction::new((0..res).map(|_| rng.random_range(-1.0..1.0)).collect());
            let f = GridFunction::new((0..res).map(|_| rng.random_range(-1.0..1.0)).collect());
            let exact = t.apply(&g).mul(&f).integral();
            let samples: Vec<f64> = (0..1_000_000)
                .map(|_| {
                    let x: f64 = rng.random();
                    map.apply(x).map_or(0.0, |y| g.eval(x) * f.eval(y))
                })
                .collect();
            let (m, se) = (mean(&samples), standard_error(&samples));
            assert!((m - exact).abs() <= 4.0 * se, "map {i} pair {pair}: {m} vs {exact} (se {se})");
        }
    }
}

/// Exact lag correlations `E_μ[φ·φ∘τ^k]` against the cell-chain sampler.
#[test]
fn exact_correlations_match_sampler() {
    let c = SymbolChain::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
    let a = Annealed::new(Cocycle::new(c, vec![doubling(), three_cell()], 6).unwrap()).unwrap();
    let phi = a.center(&SymbolField::new(vec![GridFunction::new(vec![1.0, -1.0]), GridFunction::new(vec![0.5, 0.0, -0.5])]));
    let exact = a.correlations(&phi, 4).unwrap();
    let sampler = Sampler::new(&a, &phi).unwrap();
    let orbits: Vec<Vec<f64>> = (0..1_000_000u64).map(|i| sampler.orbit_values(5, &mut sample_rng(5, i))).collect();
    for (k, e) in exact.iter().enumerate() {
        let xs: Vec<f64> = orbits.iter().map(|o| o[0] * o[k]).collect();
        let (m, se) = (mean(&xs), standard_error(&xs));
        assert!((m - e).abs() <= 4.0 * se, "lag {k}: {m} vs {e} (se {se})");
    }
}
