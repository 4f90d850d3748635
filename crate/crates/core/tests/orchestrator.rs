//! Whole-run degenerations against simpler references.

use hetfed::config::{ExperimentConfig, Strategy};
use hetfed::experiments::sweep;
use hetfed::nn::OptimizerConfig;
use hetfed::orchestrator::{accuracy, run, train_local, Simulation};
use hetfed::resource::ResourceLimit;
use hetfed::rng::{self, Streams};

fn small(strategy: Strategy) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.strategy = strategy;
    cfg.rounds = 12;
    cfg.model.depth = 2;
    cfg.model.hidden = 32;
    cfg.search.ratios = vec![0.0, 0.5, 1.0];
    cfg.data.per_class = 60;
    cfg.optimizer.config.learning_rate = 0.03;
    cfg
}

fn unlimited(cfg: &mut ExperimentConfig) {
    cfg.limitation.memory = ResourceLimit::Range { min: 1e3, max: 1e3, binary: false };
    cfg.limitation.bandwidth = ResourceLimit::Range { min: 1e6, max: 1e6, binary: false };
}

#[test]
fn greedy_search_without_exploration_is_largest_model_fedavg() {
    let mut flex = small(Strategy::FlexibleSearch);
    unlimited(&mut flex);
    flex.search.epsilon = 1.0;
    flex.distill.enabled = false;
    let mut largest = flex.clone();
    largest.strategy = Strategy::FedavgLargest;
    let a = run(flex).unwrap();
    let b = run(largest).unwrap();
    assert_eq!(a.store, b.store);
    let acc = |o: &hetfed::RunOutput| o.rounds.iter().map(|r| r.accuracy).collect::<Vec<_>>();
    assert_eq!(acc(&a), acc(&b));
}

#[test]
fn single_client_is_centralized_training() {
    let mut cfg = small(Strategy::FedavgLargest);
    cfg.clients.total = 1;
    cfg.clients.per_round = 1;
    cfg.rounds = 4;
    let mut sim = Simulation::new(cfg.clone()).unwrap();
    let mut model = sim.store().model();
    let data = sim.clients()[0].clone();
    let streams = Streams::new(cfg.seed);
    for round in 1..=cfg.rounds {
        sim.run_round().unwrap();
        let lr = cfg.optimizer.lr_at(round, cfg.rounds);
        let opt = OptimizerConfig { learning_rate: lr, ..cfg.optimizer.config };
        let mut rng = streams.indexed(rng::TRAIN, &[round as u64, 0]);
        train_local(&mut model, &data, cfg.clients.local_epochs, cfg.clients.batch_size, opt, &mut rng).unwrap();
        let diff = sim
            .store()
            .flatten()
            .iter()
            .zip(model.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "round {round}: {diff}");
    }
}

#[test]
fn accuracy_matches_argmax_on_dumped_logits() {
    let sim = Simulation::new(small(Strategy::FedavgLargest)).unwrap();
    let model = sim.store().model();
    let test = sim.test_set();
    let logits = model.predict(test.features.view()).unwrap();
    let mut correct = 0;
    for (row, &label) in logits.outer_iter().zip(&test.labels) {
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        correct += usize::from(best == label);
    }
    assert_eq!(accuracy(&model, test).unwrap(), correct as f64 / test.len() as f64);
}

#[test]
fn selections_and_budgets_are_shared_across_strategies() {
    let digests: Vec<String> = Strategy::ALL
        .iter()
        .map(|&s| {
            let mut cfg = small(s);
            cfg.rounds = 3;
            run(cfg).unwrap().summary.stream_digest
        })
        .collect();
    assert!(digests.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn utilization_does_not_fall_with_more_draws() {
    let mut cfg = small(Strategy::FlexibleSearch);
    cfg.rounds = 400;
    cfg.limitation.memory = ResourceLimit::Range { min: 0.00004, max: 0.0002, binary: false };
    cfg.limitation.bandwidth = ResourceLimit::Range { min: 0.1, max: 1.0, binary: false };
    let rows = sweep(&cfg, &[0.0], &[1, 2, 4, 8]).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].mem_util >= w[0].mem_util, "{rows:?}");
    }
}
