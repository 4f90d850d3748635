//! Exhaustive checks of the subnet space, the cost model and the search
//! against brute force over small spaces.

use hetfed::agg::ParamStore;
use hetfed::cost::{comm_time, feasible, memory_cost, Budget, Constraint, CostParams};
use hetfed::search::{hit_rate, SamplingPool, SearchParams};
use hetfed::space::{SearchSpace, SubnetSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn space(depth: usize) -> SearchSpace {
    SearchSpace::new(8, 16, depth, 4, vec![0.0, 0.5, 1.0]).unwrap()
}

/// Parameter count by summing the shapes of the materialized layers.
fn shape_sum(space: &SearchSpace, spec: &SubnetSpec) -> u64 {
    let store = ParamStore::zeros(space);
    let (model, _) = space.materialize(spec, &store).unwrap();
    model.layers.iter().map(|l| (l.weights.len() + l.bias.len()) as u64).sum()
}

/// Raising one ratio, leaving the others fixed.
fn raises(spec: &SubnetSpec, ratios: &[f64]) -> Vec<SubnetSpec> {
    let mut out = Vec::new();
    for i in 0..spec.len() {
        for &r in ratios.iter().filter(|&&r| r > spec.0[i]) {
            let mut up = spec.clone();
            up.0[i] = r;
            out.push(up);
        }
    }
    out
}

#[test]
fn counts_agree_with_materialized_shapes_and_slices_start_at_zero() {
    let s = space(4);
    for spec in s.enumerate() {
        assert_eq!(s.param_count(&spec), shape_sum(&s, &spec), "{spec}");
        let map = s.slice_map(&spec).unwrap();
        assert!(map.entries.iter().all(|e| e.rows.start == 0 && e.cols.start == 0));
        assert_eq!(map.entries.last().unwrap().layer, s.depth());
    }
}

#[test]
fn smallest_spec_is_cheapest_everywhere() {
    let s = space(4);
    let small = s.param_count(&s.smallest_spec());
    assert!(s.enumerate().iter().all(|spec| s.param_count(spec) >= small));
}

#[test]
fn raising_a_nonzero_ratio_never_lowers_count_or_memory() {
    let s = space(4);
    let cost = CostParams::default();
    for spec in s.enumerate() {
        // Turning a skipped layer on can shrink its neighbours' fan-in, so only
        // nonzero slots are raised here.
        if spec.0.contains(&0.0) {
            continue;
        }
        for up in raises(&spec, s.ratios()) {
            assert!(s.param_count(&up) >= s.param_count(&spec), "{spec} -> {up}");
            assert!(memory_cost(&s, &up, 32, &cost).unwrap() >= memory_cost(&s, &spec, 32, &cost).unwrap());
        }
    }
}

#[test]
fn full_spec_dominates_every_spec_on_cost() {
    let s = space(6);
    let cost = CostParams::default();
    let full = s.full_spec();
    let budget = Budget::new(1e9, 1e6).unwrap();
    for spec in s.enumerate() {
        assert!(s.param_count(&spec) <= s.param_count(&full));
        assert!(memory_cost(&s, &spec, 16, &cost).unwrap() <= memory_cost(&s, &full, 16, &cost).unwrap());
        assert!(comm_time(&s, &spec, &cost, &budget) <= comm_time(&s, &full, &cost, &budget));
    }
}

#[test]
fn comm_time_for_full_default_model() {
    let s = SearchSpace::new(32, 64, 4, 10, vec![0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
    let budget = Budget::new(1e9, 10e6).unwrap();
    let t = comm_time(&s, &s.full_spec(), &CostParams::default(), &budget);
    assert!((t - 2.0 * 32.0 * 15_242.0 / 1e7).abs() < 1e-12);
}

#[test]
fn unlimited_budget_with_exhaustive_pool_picks_full() {
    let s = space(4);
    let mut pool = SamplingPool::new(s.clone(), ChaCha8Rng::seed_from_u64(1));
    pool.extend(s.enumerate());
    let budget = Budget::unlimited();
    let cost = CostParams::default();
    let c = Constraint { budget: &budget, batch: 32, cost: &cost };
    for _ in 0..50 {
        assert_eq!(pool.search(&c, &SearchParams::default()).chosen, s.full_spec());
    }
}

#[test]
fn hit_rate_follows_geometric_prediction() {
    let s = space(2);
    let mut pool = SamplingPool::new(s.clone(), ChaCha8Rng::seed_from_u64(7));
    let budget = Budget::unlimited();
    let cost = CostParams::default();
    let c = Constraint { budget: &budget, batch: 32, cost: &cost };
    let params = SearchParams { epsilon: 0.8, t_max: 5 };
    let outcomes: Vec<_> = (0..100_000).map(|_| pool.search(&c, &params)).collect();
    let rate = hit_rate(&outcomes).unwrap();
    let p = 0.2f64.powi(5);
    // Four binomial standard deviations.
    let sd = (p * (1.0 - p) / 1e5).sqrt();
    assert!((rate - p).abs() < 4.0 * sd, "rate {rate} vs {p}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn feasibility_is_downward_closed(memory in 1e3f64..2e5, bandwidth in 1e4f64..1e6) {
        let s = space(3);
        let cost = CostParams::default();
        let budget = Budget::new(memory, bandwidth).unwrap();
        for spec in s.enumerate().into_iter().filter(|sp| !sp.0.contains(&0.0)) {
            if !feasible(&s, &spec, 16, &cost, &budget) {
                continue;
            }
            for other in s.enumerate().into_iter().filter(|o| !o.0.contains(&0.0)) {
                if other.dominated_by(&spec) {
                    prop_assert!(feasible(&s, &other, 16, &cost, &budget), "{other} under {spec}");
                }
            }
        }
    }

    #[test]
    fn search_never_returns_an_infeasible_spec_when_one_exists(
        seed in any::<u64>(),
        memory in 1e3f64..2e5,
        bandwidth in 1e4f64..1e6,
        epsilon in 0.0f64..1.0,
        t_max in 1usize..8,
    ) {
        let s = space(3);
        let cost = CostParams::default();
        let budget = Budget::new(memory, bandwidth).unwrap();
        let c = Constraint { budget: &budget, batch: 16, cost: &cost };
        let mut pool = SamplingPool::new(s.clone(), ChaCha8Rng::seed_from_u64(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..rng.random_range(0..20) {
            pool.insert(s.random_spec(&mut rng));
        }
        let out = pool.search(&c, &SearchParams { epsilon, t_max });
        let any = s.enumerate().iter().any(|sp| feasible(&s, sp, 16, &cost, &budget));
        if out.infeasible_fallback {
            prop_assert!(!pool.specs().any(|sp| feasible(&s, sp, 16, &cost, &budget)));
        } else {
            prop_assert!(any);
            prop_assert!(feasible(&s, &out.chosen, 16, &cost, &budget));
        }
        prop_assert!(out.random_tries <= t_max);
    }

    #[test]
    fn exhaustive_pool_matches_brute_force_argmax(seed in any::<u64>(), memory in 1e3f64..2e5, bandwidth in 1e4f64..1e6) {
        let s = space(3);
        let cost = CostParams::default();
        let budget = Budget::new(memory, bandwidth).unwrap();
        let c = Constraint { budget: &budget, batch: 16, cost: &cost };
        let mut pool = SamplingPool::new(s.clone(), ChaCha8Rng::seed_from_u64(seed));
        pool.extend(s.enumerate());
        let out = pool.search(&c, &SearchParams::default());
        let best = s
            .enumerate()
            .into_iter()
            .filter(|sp| feasible(&s, sp, 16, &cost, &budget))
            .fold(None::<SubnetSpec>, |acc, sp| match acc {
                Some(a) if s.param_count(&a) >= s.param_count(&sp) => Some(a),
                _ => Some(sp),
            });
        match best {
            Some(b) => prop_assert_eq!(out.chosen, b),
            None => prop_assert!(out.infeasible_fallback),
        }
    }
}
