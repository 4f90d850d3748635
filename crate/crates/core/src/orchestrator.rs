//! Round loop: selection, budgets, model assignment, local training,
//! failure checks, aggregation and server-side distillation.

use std::collections::HashSet;

use ndarray::Axis;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::agg::{aggregate, failure_filter, ClientUpdate, ParamStore};
use crate::config::{ExperimentConfig, Strategy};
use crate::cost::{comm_time, memory_cost, payload_bits, Budget, Constraint};
use crate::data::{apply_standardization, gen_synthetic, moments, partition, split_test, standardize, Dataset, PartitionPlan};
use crate::distill::distill_round;
use crate::error::{Error, Result};
use crate::nn::{MlpModel, OptimizerConfig, OptimizerState};
use crate::resource::{check_failure, ActualCosts, ResourceSim, SimClock};
use crate::rng::{self, RngStream, Streams};
use crate::search::SamplingPool;
use crate::space::{SearchSpace, SubnetSpec};

/// Per-client outcome of one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRecord {
    pub round: usize,
    pub client: usize,
    pub spec: SubnetSpec,
    pub param_count: u64,
    pub memory_budget_bytes: f64,
    pub bandwidth_bits_per_s: f64,
    pub mem_util: Option<f64>,
    pub bw_util: Option<f64>,
    pub feasible: bool,
    pub random_tries: Option<usize>,
    pub hit_tmax: Option<bool>,
    pub excluded: bool,
    pub failed: bool,
    pub train_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub accuracy: f64,
    pub mem_util: Option<f64>,
    pub bw_util: Option<f64>,
    pub hit_rate: Option<f64>,
    pub failures: usize,
    pub excluded: usize,
    pub aggregated: usize,
    pub train_loss: Option<f64>,
    pub sim_time_s: f64,
    pub distill_initial_loss: Option<f64>,
    pub distill_final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub strategy: String,
    pub seed: u64,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub mean_mem_util: Option<f64>,
    pub mean_bw_util: Option<f64>,
    pub hit_rate: Option<f64>,
    pub failures: usize,
    pub excluded: usize,
    pub total_sim_time_s: f64,
    pub stream_digest: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rounds: Vec<RoundMetrics>,
    pub clients: Vec<ClientRecord>,
    pub summary: RunSummary,
    pub store: ParamStore,
}

/// Fraction of each budget the subnet uses, clamped to `[0, 1]`.
/// `None` when a budget is zero.
pub fn utilization(space: &SearchSpace, spec: &SubnetSpec, budget: &Budget, batch: usize, cost: &crate::cost::CostParams) -> Option<(f64, f64)> {
    if budget.memory_bytes <= 0.0 || budget.bandwidth_bits_per_s <= 0.0 {
        return None;
    }
    let mem = memory_cost(space, spec, batch, cost).ok()? / budget.memory_bytes;
    let bw = comm_time(space, spec, cost, budget) / cost.comm_deadline_s;
    Some((mem.clamp(0.0, 1.0), bw.clamp(0.0, 1.0)))
}

pub fn accuracy(model: &MlpModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let logits = model.predict(data.features.view())?;
    let correct = logits
        .axis_iter(Axis(0))
        .zip(&data.labels)
        .filter(|(row, &label)| argmax(row.iter().copied()) == label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Accuracy of the full global model.
pub fn evaluate(store: &ParamStore, test: &Dataset) -> Result<f64> {
    accuracy(&store.model(), test)
}

/// Accuracy of the global model as seen through `spec`.
pub fn evaluate_spec(store: &ParamStore, space: &SearchSpace, spec: &SubnetSpec, test: &Dataset) -> Result<f64> {
    let (model, _) = space.materialize(spec, store)?;
    accuracy(&model, test)
}

/// The architecture a strategy's global model has. Every strategy serves the
/// full model except smallest-model FedAvg, which never trains anything else.
pub fn global_spec(strategy: Strategy, space: &SearchSpace) -> SubnetSpec {
    match strategy {
        Strategy::FedavgSmallest => space.smallest_spec(),
        _ => space.full_spec(),
    }
}

/// Minibatch training for `epochs` passes; returns the mean minibatch loss over all passes.
pub fn train_local(
    model: &mut MlpModel,
    data: &Dataset,
    epochs: usize,
    batch: usize,
    optimizer: OptimizerConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    let mut opt = OptimizerState::new(optimizer, model)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    let mut batches = 0usize;
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let x = data.features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (logits, cache) = model.forward(x.view())?;
            let (loss, grads) = model.backward_ce(&cache, &logits, &y)?;
            opt.apply_to_model(model, &grads)?;
            total += loss;
            batches += 1;
        }
    }
    Ok(if batches == 0 { f64::NAN } else { total / batches as f64 })
}

/// Client shards (each standardized with its own statistics) and a test set
/// standardized with statistics of the whole dataset.
pub fn prepare_data(cfg: &ExperimentConfig, streams: &Streams) -> Result<(Vec<Dataset>, Dataset)> {
    let d = &cfg.data;
    let full = match &d.csv_path {
        Some(p) => Dataset::load_csv(&cfg.resolve(p), d.classes)?,
        None => gen_synthetic(d.classes, d.in_dim, d.per_class, streams.derive_seed(rng::DATA, &[0]))?,
    };
    if full.in_dim() != d.in_dim {
        return Err(Error::Shape(format!(
            "data has {} features but data.in_dim is {}",
            full.in_dim(),
            d.in_dim
        )));
    }
    let (train, test) = split_test(&full, d.test_fraction, &mut streams.indexed(rng::DATA, &[1]))?;
    let (mean, std) = moments(&full.features);
    let test = apply_standardization(&test, &mean, &std);
    let plan = PartitionPlan {
        scheme: d.partition,
        clients: cfg.clients.total,
        seed: streams.derive_seed(rng::DATA, &[2]),
    };
    let shards = partition(&train, &plan)?
        .iter()
        .map(standardize)
        .collect::<Result<Vec<_>>>()?;
    Ok((shards, test))
}

struct Assignment {
    client: usize,
    budget: Budget,
    spec: SubnetSpec,
    feasible: bool,
    random_tries: Option<usize>,
    hit_tmax: Option<bool>,
    train: bool,
}

struct Trained {
    update: ClientUpdate,
    loss: f64,
    failed: bool,
    duration_s: f64,
}

/// A federated run advanced one round at a time.
pub struct Simulation {
    cfg: ExperimentConfig,
    space: SearchSpace,
    streams: Streams,
    store: ParamStore,
    pool: SamplingPool,
    resources: ResourceSim,
    clients: Vec<Dataset>,
    test: Dataset,
    selection_rng: RngStream,
    budget_rng: RngStream,
    distill_rng: RngStream,
    clock: SimClock,
    round: usize,
    digest: Sha256,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let space = cfg.space()?;
        let streams = Streams::new(cfg.seed);
        let (clients, test) = prepare_data(&cfg, &streams)?;
        let store = ParamStore::init(&space, &mut streams.stream(rng::INIT));
        let pool = SamplingPool::new(space.clone(), streams.stream(rng::SEARCH));
        let resources = ResourceSim::new(&cfg.limitation, cfg.base_dir.as_deref())?;
        Ok(Self {
            selection_rng: streams.stream(rng::SELECTION),
            budget_rng: streams.stream(rng::BUDGET),
            distill_rng: streams.stream(rng::DISTILL),
            cfg,
            space,
            streams,
            store,
            pool,
            resources,
            clients,
            test,
            clock: SimClock::default(),
            round: 0,
            digest: Sha256::new(),
        })
    }

    /// Replaces the initial global model, e.g. from a checkpoint.
    pub fn set_store(&mut self, store: ParamStore) -> Result<()> {
        store.check_space(&self.space)?;
        self.store = store;
        Ok(())
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn clients(&self) -> &[Dataset] {
        &self.clients
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    /// Hash of every selection and budget drawn so far.
    pub fn stream_digest(&self) -> String {
        let bytes = self.digest.clone().finalize();
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn assign(&mut self, client: usize, budget: Budget) -> Assignment {
        let cfg = &self.cfg;
        let space = &self.space;
        let constraint = Constraint {
            budget: &budget,
            batch: cfg.clients.batch_size,
            cost: &cfg.cost,
        };
        let mut a = Assignment {
            client,
            budget,
            spec: space.full_spec(),
            feasible: true,
            random_tries: None,
            hit_tmax: None,
            train: true,
        };
        match cfg.strategy {
            Strategy::FlexibleSearch => {
                let outcome = self.pool.search(&constraint, &cfg.search_params());
                a.spec = outcome.chosen;
                a.feasible = !outcome.infeasible_fallback;
                a.random_tries = Some(outcome.random_tries);
                a.hit_tmax = Some(outcome.hit_tmax);
            }
            Strategy::UniformPrune => {
                let choice = space
                    .ratios()
                    .iter()
                    .rev()
                    .filter_map(|&r| space.uniform_spec(r).ok())
                    .find(|s| constraint.admits(space, s));
                match choice {
                    Some(s) => a.spec = s,
                    None => {
                        a.spec = space.smallest_spec();
                        a.feasible = false;
                    }
                }
            }
            Strategy::FedavgLargest | Strategy::ExcludeInfeasible => {
                a.feasible = constraint.admits(space, &a.spec);
            }
            Strategy::FedavgSmallest => {
                a.spec = space.smallest_spec();
                a.feasible = constraint.admits(space, &a.spec);
            }
        }
        // A budget-aware client that cannot fit anything never starts training.
        if cfg.strategy.respects_budgets() && !a.feasible {
            a.train = false;
        }
        a
    }

    fn train_one(&self, a: &Assignment, round: usize, lr: f64) -> Result<Trained> {
        let cfg = &self.cfg;
        let data = &self.clients[a.client];
        let (mut model, slice_map) = self.space.materialize(&a.spec, &self.store)?;
        let mut rng = self.streams.indexed(rng::TRAIN, &[round as u64, a.client as u64]);
        let opt = OptimizerConfig {
            learning_rate: lr,
            ..cfg.optimizer.config
        };
        let loss = train_local(&mut model, data, cfg.clients.local_epochs, cfg.clients.batch_size, opt, &mut rng)?;
        if !model.is_finite() || !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "round {round}, client {}: local training diverged (loss {loss}, lr {lr})",
                a.client
            )));
        }
        let params = self.space.param_count(&a.spec) as f64;
        let steps = (cfg.clients.local_epochs * data.len().div_ceil(cfg.clients.batch_size)) as f64;
        let train_s = cfg.cost.train_time_per_param_step * params * steps;
        let comm_s = comm_time(&self.space, &a.spec, &cfg.cost, &a.budget);
        let duration_s = train_s + if comm_s.is_finite() { comm_s } else { cfg.cost.comm_deadline_s };
        let failed = cfg.strategy.respects_budgets() && {
            let at_completion = self
                .resources
                .budget_at_completion(a.client, self.clock.now() + duration_s, &a.budget);
            let actual = ActualCosts {
                memory_bytes: memory_cost(&self.space, &a.spec, cfg.clients.batch_size, &cfg.cost)?,
                payload_bits: payload_bits(&self.space, &a.spec),
            };
            check_failure(&at_completion, &actual, &cfg.cost)
        };
        Ok(Trained {
            update: ClientUpdate {
                client: a.client,
                spec: a.spec.clone(),
                slice_map,
                model,
                weight: data.len() as f64,
            },
            loss,
            failed,
            duration_s,
        })
    }

    /// Runs one round and returns its metrics plus per-client records.
    pub fn run_round(&mut self) -> Result<(RoundMetrics, Vec<ClientRecord>)> {
        self.round += 1;
        let round = self.round;
        let cfg_clients = self.cfg.clients.clone();

        let mut selected = sample(&mut self.selection_rng, cfg_clients.total, cfg_clients.per_round).into_vec();
        selected.sort_unstable();
        let now = self.clock.now();
        let mut assignments = Vec::with_capacity(selected.len());
        for &client in &selected {
            let budget = self.resources.budget_at(client, now, &mut self.budget_rng);
            self.digest.update((client as u64).to_le_bytes());
            self.digest.update(budget.memory_bytes.to_le_bytes());
            self.digest.update(budget.bandwidth_bits_per_s.to_le_bytes());
            assignments.push(self.assign(client, budget));
        }

        let lr = self.cfg.optimizer.lr_at(round, self.cfg.rounds);
        let trained: Vec<Option<Trained>> = assignments
            .par_iter()
            .map(|a| a.train.then(|| self.train_one(a, round, lr)).transpose())
            .collect::<Result<_>>()?;

        let mut records = Vec::with_capacity(assignments.len());
        let mut failures = HashSet::new();
        let mut updates = Vec::new();
        let mut slowest = 0.0f64;
        for (a, t) in assignments.iter().zip(trained) {
            let util = utilization(&self.space, &a.spec, &a.budget, cfg_clients.batch_size, &self.cfg.cost);
            let excluded = self.cfg.strategy == Strategy::ExcludeInfeasible && !a.feasible;
            let mut record = ClientRecord {
                round,
                client: a.client,
                spec: a.spec.clone(),
                param_count: self.space.param_count(&a.spec),
                memory_budget_bytes: a.budget.memory_bytes,
                bandwidth_bits_per_s: a.budget.bandwidth_bits_per_s,
                mem_util: if excluded { None } else { util.map(|u| u.0) },
                bw_util: if excluded { None } else { util.map(|u| u.1) },
                feasible: a.feasible,
                random_tries: a.random_tries,
                hit_tmax: a.hit_tmax,
                excluded,
                failed: false,
                train_loss: None,
            };
            match t {
                Some(t) => {
                    record.failed = t.failed;
                    record.train_loss = Some(t.loss);
                    slowest = slowest.max(t.duration_s);
                    if t.failed {
                        failures.insert(a.client);
                    }
                    updates.push(t.update);
                }
                None => {
                    if !excluded {
                        record.failed = true;
                        failures.insert(a.client);
                    }
                }
            }
            records.push(record);
        }

        let survivors = failure_filter(updates, &failures);
        if !survivors.is_empty() {
            aggregate(&mut self.store, &survivors, &self.space, self.cfg.aggregation)?;
        }

        let mut server_params = self.space.param_count(&self.space.full_spec()) as f64;
        let (mut distill_initial, mut distill_final) = (None, None);
        if self.cfg.distill.applies_to(self.cfg.strategy) {
            let dcfg = self.cfg.distill.to_config();
            let report = distill_round(&mut self.store, &self.space, &dcfg, &mut self.distill_rng)?;
            distill_initial = report.initial_loss();
            distill_final = report.final_loss();
            let subnet_params: u64 = report.subnets.iter().map(|s| self.space.param_count(s)).sum();
            server_params += (dcfg.iterations * dcfg.batch) as f64 * subnet_params as f64;
        }
        if !self.store.is_finite() {
            return Err(Error::NonFinite(format!("global model after round {round}")));
        }
        let server_s = self.cfg.cost.train_time_per_param_step * server_params;
        self.clock.advance(slowest + server_s)?;

        let eval_spec = global_spec(self.cfg.strategy, &self.space);
        let accuracy = evaluate_spec(&self.store, &self.space, &eval_spec, &self.test)?;
        let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let losses: Vec<f64> = records.iter().filter_map(|r| r.train_loss).collect();
        let hits: Vec<f64> = records
            .iter()
            .filter_map(|r| r.hit_tmax.map(|h| if h { 1.0 } else { 0.0 }))
            .collect();
        let metrics = RoundMetrics {
            round,
            accuracy,
            mem_util: mean(records.iter().filter_map(|r| r.mem_util).collect()),
            bw_util: mean(records.iter().filter_map(|r| r.bw_util).collect()),
            hit_rate: mean(hits),
            failures: failures.len(),
            excluded: records.iter().filter(|r| r.excluded).count(),
            aggregated: survivors.len(),
            train_loss: mean(losses),
            sim_time_s: self.clock.now(),
            distill_initial_loss: distill_initial,
            distill_final_loss: distill_final,
        };
        Ok((metrics, records))
    }
}

/// Runs every configured round.
pub fn run(cfg: ExperimentConfig) -> Result<RunOutput> {
    run_from(Simulation::new(cfg)?)
}

/// Runs the remaining rounds of a prepared simulation.
pub fn run_from(mut sim: Simulation) -> Result<RunOutput> {
    let mut rounds = Vec::new();
    let mut clients = Vec::new();
    while sim.rounds_done() < sim.cfg.rounds {
        let (m, recs) = sim.run_round()?;
        rounds.push(m);
        clients.extend(recs);
    }
    let summary = summarize(&sim, &rounds, &clients);
    Ok(RunOutput {
        rounds,
        clients,
        summary,
        store: sim.store,
    })
}

fn summarize(sim: &Simulation, rounds: &[RoundMetrics], clients: &[ClientRecord]) -> RunSummary {
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let hits: Vec<f64> = clients
        .iter()
        .filter_map(|r| r.hit_tmax.map(|h| if h { 1.0 } else { 0.0 }))
        .collect();
    RunSummary {
        strategy: sim.cfg.strategy.to_string(),
        seed: sim.cfg.seed,
        rounds: rounds.len(),
        final_accuracy: rounds.last().map_or(0.0, |r| r.accuracy),
        best_accuracy: rounds.iter().map(|r| r.accuracy).fold(0.0, f64::max),
        mean_mem_util: mean(clients.iter().filter_map(|r| r.mem_util).collect()),
        mean_bw_util: mean(clients.iter().filter_map(|r| r.bw_util).collect()),
        hit_rate: mean(hits),
        failures: rounds.iter().map(|r| r.failures).sum(),
        excluded: rounds.iter().map(|r| r.excluded).sum(),
        total_sim_time_s: sim.clock.now(),
        stream_digest: sim.stream_digest(),
    }
}
