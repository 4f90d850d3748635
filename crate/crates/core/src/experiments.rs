//! Multi-run drivers: the search-only (epsilon, T_MAX) grid and the
//! common-random-numbers strategy comparison.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Strategy};
use crate::cost::{comm_time, Constraint};
use crate::error::{Error, Result};
use crate::orchestrator::{run, utilization, RunOutput, RunSummary};
use crate::resource::{ResourceSim, SimClock};
use crate::rng::{self, Streams};
use crate::search::{SamplingPool, SearchParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub t_max: usize,
    pub mem_util: f64,
    pub bw_util: f64,
    pub hit_rate: f64,
    pub calls: usize,
}

/// Runs the search alone (no training) for every `(epsilon, t_max)` pair.
/// Each pair replays the same selection and budget streams.
pub fn sweep(cfg: &ExperimentConfig, epsilons: &[f64], t_maxes: &[usize]) -> Result<Vec<SweepRow>> {
    if epsilons.is_empty() || t_maxes.is_empty() {
        return Err(Error::Contract("sweep needs at least one epsilon and one t_max".into()));
    }
    cfg.validate()?;
    let grid: Vec<(f64, usize)> = epsilons
        .iter()
        .flat_map(|&e| t_maxes.iter().map(move |&t| (e, t)))
        .collect();
    grid.par_iter()
        .map(|&(epsilon, t_max)| sweep_point(cfg, SearchParams { epsilon, t_max }))
        .collect()
}

fn sweep_point(cfg: &ExperimentConfig, params: SearchParams) -> Result<SweepRow> {
    params.validate()?;
    let space = cfg.space()?;
    let streams = Streams::new(cfg.seed);
    let resources = ResourceSim::new(&cfg.limitation, cfg.base_dir.as_deref())?;
    let mut pool = SamplingPool::new(space.clone(), streams.stream(rng::SEARCH));
    let mut selection = streams.stream(rng::SELECTION);
    let mut budgets = streams.stream(rng::BUDGET);
    let mut clock = SimClock::default();
    let server_s = cfg.cost.train_time_per_param_step * space.param_count(&space.full_spec()) as f64;
    let (mut mem, mut bw, mut utils, mut hits, mut calls) = (0.0, 0.0, 0usize, 0usize, 0usize);
    for _ in 0..cfg.rounds {
        let mut chosen = sample(&mut selection, cfg.clients.total, cfg.clients.per_round).into_vec();
        chosen.sort_unstable();
        let now = clock.now();
        let mut slowest = 0.0f64;
        for client in chosen {
            let budget = resources.budget_at(client, now, &mut budgets);
            let constraint = Constraint {
                budget: &budget,
                batch: cfg.clients.batch_size,
                cost: &cfg.cost,
            };
            let outcome = pool.search(&constraint, &params);
            calls += 1;
            hits += usize::from(outcome.hit_tmax);
            if let Some((m, b)) = utilization(&space, &outcome.chosen, &budget, cfg.clients.batch_size, &cfg.cost) {
                mem += m;
                bw += b;
                utils += 1;
            }
            let t = comm_time(&space, &outcome.chosen, &cfg.cost, &budget);
            if t.is_finite() {
                slowest = slowest.max(t);
            }
        }
        clock.advance(slowest + server_s)?;
    }
    let denom = utils.max(1) as f64;
    Ok(SweepRow {
        epsilon: params.epsilon,
        t_max: params.t_max,
        mem_util: mem / denom,
        bw_util: bw / denom,
        hit_rate: hits as f64 / calls.max(1) as f64,
        calls,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub strategy: String,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub mean_mem_util: Option<f64>,
    pub mean_bw_util: Option<f64>,
    pub hit_rate: Option<f64>,
    pub failures: usize,
    pub excluded: usize,
    pub sim_time_s: f64,
    pub stream_digest: String,
}

impl From<&RunSummary> for CompareRow {
    fn from(s: &RunSummary) -> Self {
        Self {
            strategy: s.strategy.clone(),
            final_accuracy: s.final_accuracy,
            best_accuracy: s.best_accuracy,
            mean_mem_util: s.mean_mem_util,
            mean_bw_util: s.mean_bw_util,
            hit_rate: s.hit_rate,
            failures: s.failures,
            excluded: s.excluded,
            sim_time_s: s.total_sim_time_s,
            stream_digest: s.stream_digest.clone(),
        }
    }
}

/// Runs each strategy from the same seed, so selections and budgets match.
pub fn compare(cfg: &ExperimentConfig, strategies: &[Strategy]) -> Result<Vec<RunOutput>> {
    if strategies.len() < 2 {
        return Err(Error::Contract("compare needs at least two strategies".into()));
    }
    let outputs = strategies
        .iter()
        .map(|&strategy| {
            let mut c = cfg.clone();
            c.strategy = strategy;
            run(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let first = &outputs[0].summary.stream_digest;
    if let Some(other) = outputs.iter().find(|o| &o.summary.stream_digest != first) {
        return Err(Error::Contract(format!(
            "strategy {} saw different selections or budgets than {}",
            other.summary.strategy, outputs[0].summary.strategy
        )));
    }
    Ok(outputs)
}
