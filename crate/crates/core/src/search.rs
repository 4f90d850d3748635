//! Resource-constrained subnet search over a growing sampling pool.
//!
//! The pool starts with the smallest and the full spec. For each client the
//! search takes the largest pool member that fits the budget, then keeps
//! drawing random specs from the whole space: before every draw it stops with
//! probability `epsilon`, and it never draws more than `t_max` times. Every
//! draw joins the pool; a draw replaces the incumbent only if it fits and has
//! strictly more parameters.

use std::cmp::Reverse;

use rand::Rng;
use serde::Serialize;

use crate::cost::Constraint;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::space::{SearchSpace, SubnetSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    pub epsilon: f64,
    pub t_max: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            epsilon: 0.8,
            t_max: 5,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Contract(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchOutcome {
    pub chosen: SubnetSpec,
    pub random_tries: usize,
    pub hit_tmax: bool,
    pub pool_size_after: usize,
    /// Nothing fit the budget; `chosen` is the smallest spec and is infeasible.
    pub infeasible_fallback: bool,
}

#[derive(Debug, Clone)]
struct PoolEntry {
    params: u64,
    spec: SubnetSpec,
}

impl PoolEntry {
    fn key(&self) -> (Reverse<u64>, &SubnetSpec) {
        (Reverse(self.params), &self.spec)
    }
}

/// Specs sorted by descending parameter count, ties by ascending ratios.
#[derive(Debug, Clone)]
pub struct SamplingPool {
    space: SearchSpace,
    entries: Vec<PoolEntry>,
    rng: RngStream,
}

impl SamplingPool {
    pub fn new(space: SearchSpace, rng: RngStream) -> Self {
        let mut pool = Self {
            space,
            entries: Vec::new(),
            rng,
        };
        let smallest = pool.space.smallest_spec();
        let full = pool.space.full_spec();
        pool.insert(smallest);
        pool.insert(full);
        pool
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, spec: &SubnetSpec) -> bool {
        let params = self.space.param_count(spec);
        self.entries
            .binary_search_by(|e| e.key().cmp(&(Reverse(params), spec)))
            .is_ok()
    }

    pub fn specs(&self) -> impl Iterator<Item = &SubnetSpec> {
        self.entries.iter().map(|e| &e.spec)
    }

    /// Returns false if the spec was already present.
    pub fn insert(&mut self, spec: SubnetSpec) -> bool {
        let params = self.space.param_count(&spec);
        match self
            .entries
            .binary_search_by(|e| e.key().cmp(&(Reverse(params), &spec)))
        {
            Ok(_) => false,
            Err(pos) => {
                self.entries.insert(pos, PoolEntry { params, spec });
                true
            }
        }
    }

    pub fn extend(&mut self, specs: impl IntoIterator<Item = SubnetSpec>) {
        for spec in specs {
            self.insert(spec);
        }
    }

    /// First feasible spec in pool order.
    pub fn best_feasible(&self, constraint: &Constraint<'_>) -> Option<&SubnetSpec> {
        self.entries
            .iter()
            .map(|e| &e.spec)
            .find(|spec| constraint.admits(&self.space, spec))
    }

    pub fn search(&mut self, constraint: &Constraint<'_>, params: &SearchParams) -> SearchOutcome {
        let (mut incumbent, mut fallback) = match self.best_feasible(constraint) {
            Some(spec) => (spec.clone(), false),
            None => (self.space.smallest_spec(), true),
        };
        let mut incumbent_params = self.space.param_count(&incumbent);
        let mut tries = 0;
        while tries < params.t_max {
            if self.rng.random::<f64>() < params.epsilon {
                break;
            }
            let draw = self.space.random_spec(&mut self.rng);
            tries += 1;
            let draw_params = self.space.param_count(&draw);
            if constraint.admits(&self.space, &draw) && (fallback || draw_params > incumbent_params) {
                incumbent = draw.clone();
                incumbent_params = draw_params;
                fallback = false;
            }
            self.insert(draw);
        }
        SearchOutcome {
            chosen: incumbent,
            random_tries: tries,
            hit_tmax: tries == params.t_max,
            pool_size_after: self.entries.len(),
            infeasible_fallback: fallback,
        }
    }
}

/// Fraction of searches that used up all `t_max` draws.
pub fn hit_rate(outcomes: &[SearchOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Contract("hit rate of an empty outcome list".into()));
    }
    Ok(outcomes.iter().filter(|o| o.hit_tmax).count() as f64 / outcomes.len() as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::cost::{memory_cost, Budget, CostParams};

    fn space() -> SearchSpace {
        SearchSpace::new(32, 64, 4, 10, vec![0.0, 0.5, 1.0]).unwrap()
    }

    fn pool(seed: u64) -> SamplingPool {
        SamplingPool::new(space(), RngStream::seed_from_u64(seed))
    }

    #[test]
    fn initial_pool_has_full_first() {
        let p = pool(0);
        assert_eq!(p.len(), 2);
        let specs: Vec<_> = p.specs().cloned().collect();
        assert_eq!(specs[0], space().full_spec());
        assert_eq!(specs[1], space().smallest_spec());
    }

    #[test]
    fn singleton_space_dedups() {
        let s = SearchSpace::new(4, 8, 4, 2, vec![1.0]).unwrap();
        assert_eq!(SamplingPool::new(s, RngStream::seed_from_u64(0)).len(), 1);
    }

    #[test]
    fn insert_dedups_and_orders() {
        let mut p = pool(0);
        assert!(p.insert(SubnetSpec(vec![0.5, 0.0, 1.0, 0.0])));
        assert!(!p.insert(SubnetSpec(vec![0.5, 0.0, 1.0, 0.0])));
        let counts: Vec<_> = p.specs().map(|s| space().param_count(s)).collect();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn best_feasible_lookups() {
        let s = space();
        let cost = CostParams::default();
        let p = pool(0);
        let big = Budget::unlimited();
        let c = Constraint { budget: &big, batch: 64, cost: &cost };
        assert_eq!(p.best_feasible(&c), Some(&s.full_spec()));

        let small_mem = memory_cost(&s, &s.smallest_spec(), 64, &cost).unwrap();
        let only_small = Budget::new(small_mem, 1e12).unwrap();
        let c = Constraint { budget: &only_small, batch: 64, cost: &cost };
        assert_eq!(p.best_feasible(&c), Some(&s.smallest_spec()));

        let none = Budget::new(small_mem - 1.0, 1e12).unwrap();
        let c = Constraint { budget: &none, batch: 64, cost: &cost };
        assert_eq!(p.best_feasible(&c), None);
    }

    #[test]
    fn epsilon_one_never_draws() {
        let cost = CostParams::default();
        let big = Budget::unlimited();
        let c = Constraint { budget: &big, batch: 64, cost: &cost };
        let mut p = pool(1);
        let out = p.search(&c, &SearchParams { epsilon: 1.0, t_max: 5 });
        assert_eq!(out.random_tries, 0);
        assert!(!out.hit_tmax);
        assert_eq!(out.pool_size_after, 2);
    }

    #[test]
    fn epsilon_zero_always_draws_t_max() {
        let cost = CostParams::default();
        let big = Budget::unlimited();
        let c = Constraint { budget: &big, batch: 64, cost: &cost };
        let mut p = pool(2);
        let mut outs = Vec::new();
        for _ in 0..20 {
            let out = p.search(&c, &SearchParams { epsilon: 0.0, t_max: 5 });
            assert_eq!(out.random_tries, 5);
            assert!(out.hit_tmax);
            outs.push(out);
        }
        assert_eq!(hit_rate(&outs).unwrap(), 1.0);
    }

    #[test]
    fn infeasible_everything_falls_back_to_smallest() {
        let cost = CostParams::default();
        let nothing = Budget::new(0.0, 0.0).unwrap();
        let c = Constraint { budget: &nothing, batch: 64, cost: &cost };
        let mut p = pool(3);
        let out = p.search(&c, &SearchParams { epsilon: 0.0, t_max: 3 });
        assert!(out.infeasible_fallback);
        assert_eq!(out.chosen, space().smallest_spec());
        assert!(out.pool_size_after >= 2);
    }

    #[test]
    fn empty_outcomes_have_no_hit_rate() {
        assert!(hit_rate(&[]).is_err());
    }
}
