//! Partition statistics, separability of the synthetic data, standardization,
//! and trace replay.

use std::fs;

use hetfed::cost::{memory_cost, payload_bits, Budget, CostParams};
use hetfed::data::{gen_synthetic, moments, partition, standardize, PartitionPlan, PartitionScheme};
use hetfed::nn::{MlpModel, OptimizerConfig};
use hetfed::orchestrator::{accuracy, train_local};
use hetfed::resource::{check_failure, ActualCosts, ResourceSim, Trace, TraceAssignment};
use hetfed::space::SearchSpace;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mean_entropy(alpha: f64, seed: u64) -> f64 {
    let data = gen_synthetic(10, 4, 200, 1).unwrap();
    let plan = PartitionPlan {
        scheme: PartitionScheme::Dirichlet { alpha },
        clients: 20,
        seed,
    };
    let parts = partition(&data, &plan).unwrap();
    parts.iter().map(|p| p.label_entropy()).sum::<f64>() / parts.len() as f64
}

#[test]
fn large_alpha_is_close_to_iid() {
    let data = gen_synthetic(10, 4, 200, 2).unwrap();
    let plan = PartitionPlan {
        scheme: PartitionScheme::Dirichlet { alpha: 1000.0 },
        clients: 20,
        seed: 3,
    };
    for part in partition(&data, &plan).unwrap() {
        let n = part.len() as f64;
        for count in part.class_histogram() {
            assert!((count as f64 / n - 0.1).abs() <= 0.05, "share {}", count as f64 / n);
        }
    }
}

#[test]
fn small_alpha_concentrates_labels() {
    let iid = 10f64.ln();
    let skewed = mean_entropy(0.1, 4);
    assert!(iid - skewed > 0.5, "iid {iid:.3} vs skewed {skewed:.3}");
}

#[test]
fn entropy_grows_with_alpha() {
    let alphas = [0.1, 1.0, 1000.0];
    // Averaged over partitions so the trend is not a single draw.
    let h: Vec<f64> = alphas
        .iter()
        .map(|&a| (0..5).map(|s| mean_entropy(a, s)).sum::<f64>() / 5.0)
        .collect();
    assert!(h.windows(2).all(|w| w[0] < w[1]), "{h:?}");
}

#[test]
fn synthetic_data_is_linearly_separable() {
    let data = standardize(&gen_synthetic(10, 32, 200, 5).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = MlpModel::init(&[32, 10], &mut rng).unwrap();
    train_local(&mut model, &data, 30, 64, OptimizerConfig::sgd(0.05, 0.9, 0.0), &mut rng).unwrap();
    let acc = accuracy(&model, &data).unwrap();
    assert!(acc > 0.8, "train accuracy {acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn standardized_features_have_zero_mean_unit_std(seed in any::<u64>(), rows in 2usize..40, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-50.0..50.0));
        let d = hetfed::data::Dataset::new(x, vec![0; rows], 1).unwrap();
        let (mean, std) = moments(&standardize(&d).unwrap().features);
        for (m, s) in mean.iter().zip(&std) {
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn partitions_are_disjoint_and_cover(seed in any::<u64>(), clients in 1usize..15, alpha in 0.05f64..50.0) {
        let data = gen_synthetic(5, 2, 30, seed).unwrap();
        let plan = PartitionPlan { scheme: PartitionScheme::Dirichlet { alpha }, clients, seed };
        let parts = hetfed::data::partition_indices(&data, &plan).unwrap();
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
    }
}

#[test]
fn hour_long_trace_loads_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bw.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let values: Vec<f64> = (0..3600).map(|_| rng.random_range(1..=1000) as f64 / 10.0).collect();
    let text: String = values.iter().enumerate().map(|(t, v)| format!("{t},{v}\n")).collect();
    fs::write(&path, text).unwrap();
    let trace = Trace::load(&path).unwrap();
    assert_eq!(trace.len(), 3600);
    for (t, v) in values.iter().enumerate() {
        assert_eq!(trace.value_at(t as f64), *v);
        assert_eq!(trace.value_at(t as f64 + 0.999), *v);
    }
    assert_eq!(trace.value_at(1e9), values[3599]);
}

#[test]
fn memory_drop_during_training_fails_the_client() {
    let space = SearchSpace::new(32, 64, 2, 10, vec![0.0, 0.5, 1.0]).unwrap();
    let cost = CostParams::default();
    let spec = space.full_spec();
    let need = memory_cost(&space, &spec, 64, &cost).unwrap();
    // Twice the need at assignment, half of it from t = 5 s on.
    let gb = |bytes: f64| bytes / 1e9;
    let memory = Trace::new(vec![(0.0, gb(2.0 * need)), (5.0, gb(0.5 * need))]).unwrap();
    let bandwidth = Trace::new(vec![(0.0, 100.0)]).unwrap();
    let sim = ResourceSim::with_traces(vec![memory], vec![bandwidth], TraceAssignment::RoundRobin);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let assigned = sim.budget_at(0, 0.0, &mut rng);
    let actual = ActualCosts {
        memory_bytes: need,
        payload_bits: payload_bits(&space, &spec),
    };
    assert!(!check_failure(&sim.budget_at_completion(0, 4.0, &assigned), &actual, &cost));
    assert!(check_failure(&sim.budget_at_completion(0, 6.0, &assigned), &actual, &cost));
    let roomy = Budget::new(2.0 * need, 1e8).unwrap();
    assert!(!check_failure(&roomy, &actual, &cost));
}
