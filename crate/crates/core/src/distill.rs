//! Data-free in-place distillation on the server.
//!
//! Fresh subnets are sliced out of the global model and trained to match the
//! global model's softmax outputs on standard-normal inputs. Clients
//! standardize their features locally, so N(0, 1) noise lives on the same
//! scale as real inputs and no client data is needed here.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::agg::{aggregate, ClientUpdate, ParamStore, Weighting};
use crate::error::{Error, Result};
use crate::nn::{kl_divergence, DenseLayer, MlpModel, OptimizerConfig, OptimizerState};
use crate::rng::RngStream;
use crate::space::{SearchSpace, SubnetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Train detached subnet copies, then fold them into the store with equal weights.
    AggregateWeights,
    /// Subnets share the store's weights; each iteration applies the mean KD
    /// gradient of all subnets to the store.
    GradientEq2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub subnets: usize,
    pub iterations: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub mode: DistillMode,
}

impl DistillConfig {
    pub fn with_subnets(subnets: usize) -> Self {
        Self {
            subnets,
            iterations: 100,
            batch: 64,
            learning_rate: 0.001,
            mode: DistillMode::AggregateWeights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subnets == 0 || self.batch == 0 {
            return Err(Error::Contract("distillation needs n >= 1 and K >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Contract("distillation learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct DistillReport {
    pub subnets: Vec<SubnetSpec>,
    /// Mean KD loss over subnets at each iteration, measured before that iteration's step.
    pub loss_trace: Vec<f64>,
}

impl DistillReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_trace.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }
}

pub fn sample_distill_subnets<R: Rng + ?Sized>(space: &SearchSpace, n: usize, rng: &mut R) -> Vec<SubnetSpec> {
    (0..n).map(|_| space.random_spec(rng)).collect()
}

pub fn gaussian_batch<R: Rng + ?Sized>(rows: usize, in_dim: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, in_dim), || rng.sample(StandardNormal))
}

fn kd_step(student: &MlpModel, teacher: &MlpModel, inputs: &Array2<f64>) -> Result<(f64, Vec<DenseLayer>)> {
    let target = teacher.predict(inputs.view())?;
    let (logits, cache) = student.forward(inputs.view())?;
    let (loss, grad) = kl_divergence(logits.view(), target.view())?;
    Ok((loss, student.backward(&cache, grad.view())?))
}

/// One round of distillation. Takes no dataset.
pub fn distill_round<R: Rng + ?Sized>(
    store: &mut ParamStore,
    space: &SearchSpace,
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<DistillReport> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Ok(DistillReport::default());
    }
    let specs = sample_distill_subnets(space, cfg.subnets, rng);
    let seeds: Vec<u64> = specs.iter().map(|_| rng.random()).collect();
    let teacher = store.model();
    let report = match cfg.mode {
        DistillMode::AggregateWeights => distill_detached(store, space, cfg, &teacher, &specs, &seeds)?,
        DistillMode::GradientEq2 => distill_shared(store, space, cfg, &teacher, &specs, &seeds)?,
    };
    if !store.is_finite() {
        return Err(Error::NonFinite("store after distillation".into()));
    }
    Ok(report)
}

fn distill_detached(
    store: &mut ParamStore,
    space: &SearchSpace,
    cfg: &DistillConfig,
    teacher: &MlpModel,
    specs: &[SubnetSpec],
    seeds: &[u64],
) -> Result<DistillReport> {
    let trained: Vec<(ClientUpdate, Vec<f64>)> = specs
        .par_iter()
        .zip(seeds.par_iter())
        .enumerate()
        .map(|(i, (spec, &seed))| -> Result<_> {
            let (mut student, slice_map) = space.materialize(spec, store)?;
            let mut opt = OptimizerState::new(OptimizerConfig::adam(cfg.learning_rate), &student)?;
            let mut rng = RngStream::seed_from_u64(seed);
            let mut losses = Vec::with_capacity(cfg.iterations);
            for _ in 0..cfg.iterations {
                let x = gaussian_batch(cfg.batch, space.in_dim(), &mut rng);
                let (loss, grads) = kd_step(&student, teacher, &x)?;
                losses.push(loss);
                opt.apply_to_model(&mut student, &grads)?;
            }
            let update = ClientUpdate {
                client: i,
                spec: spec.clone(),
                slice_map,
                model: student,
                weight: 1.0 / specs.len() as f64,
            };
            Ok((update, losses))
        })
        .collect::<Result<_>>()?;
    let loss_trace = (0..cfg.iterations)
        .map(|t| trained.iter().map(|(_, l)| l[t]).sum::<f64>() / trained.len() as f64)
        .collect();
    let updates: Vec<ClientUpdate> = trained.into_iter().map(|(u, _)| u).collect();
    aggregate(store, &updates, space, Weighting::Uniform)?;
    Ok(DistillReport {
        subnets: specs.to_vec(),
        loss_trace,
    })
}

fn distill_shared(
    store: &mut ParamStore,
    space: &SearchSpace,
    cfg: &DistillConfig,
    teacher: &MlpModel,
    specs: &[SubnetSpec],
    seeds: &[u64],
) -> Result<DistillReport> {
    let full = store.model();
    let mut opt = OptimizerState::new(OptimizerConfig::adam(cfg.learning_rate), &full)?;
    let mut rngs: Vec<RngStream> = seeds.iter().map(|&s| RngStream::seed_from_u64(s)).collect();
    let scale = 1.0 / specs.len() as f64;
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut global_grad: Vec<DenseLayer> = store.layers().iter().map(DenseLayer::zeros_like).collect();
        let mut total = 0.0;
        for (spec, rng) in specs.iter().zip(rngs.iter_mut()) {
            let (student, map) = space.materialize(spec, store)?;
            let x = gaussian_batch(cfg.batch, space.in_dim(), rng);
            let (loss, grads) = kd_step(&student, teacher, &x)?;
            total += loss;
            for (e, g) in map.entries.iter().zip(&grads) {
                let target = &mut global_grad[e.layer];
                target
                    .weights
                    .slice_mut(ndarray::s![e.rows.clone(), e.cols.clone()])
                    .scaled_add(scale, &g.weights);
                target
                    .bias
                    .slice_mut(ndarray::s![e.cols.clone()])
                    .scaled_add(scale, &g.bias);
            }
        }
        loss_trace.push(total * scale);
        opt.apply(store.layers_mut(), &global_grad)?;
    }
    Ok(DistillReport {
        subnets: specs.to_vec(),
        loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SearchSpace {
        SearchSpace::new(4, 8, 2, 3, vec![0.0, 0.5, 1.0]).unwrap()
    }

    #[test]
    fn zero_iterations_is_identity() {
        let s = toy();
        let mut rng = RngStream::seed_from_u64(0);
        let mut store = ParamStore::init(&s, &mut rng);
        let before = store.clone();
        let cfg = DistillConfig {
            iterations: 0,
            ..DistillConfig::with_subnets(2)
        };
        let report = distill_round(&mut store, &s, &cfg, &mut rng).unwrap();
        assert_eq!(store, before);
        assert!(report.loss_trace.is_empty());
    }

    #[test]
    fn full_students_are_a_fixed_point() {
        let s = SearchSpace::new(4, 8, 2, 3, vec![1.0]).unwrap();
        let mut rng = RngStream::seed_from_u64(1);
        let mut store = ParamStore::init(&s, &mut rng);
        let before = store.clone();
        for mode in [DistillMode::AggregateWeights, DistillMode::GradientEq2] {
            let cfg = DistillConfig {
                iterations: 20,
                mode,
                ..DistillConfig::with_subnets(2)
            };
            let report = distill_round(&mut store, &s, &cfg, &mut rng).unwrap();
            assert_eq!(report.initial_loss(), Some(0.0));
            assert!(store.max_abs_diff(&before) < 1e-9);
        }
    }

    #[test]
    fn singleton_space_samples_full_copies() {
        let s = SearchSpace::new(4, 8, 2, 3, vec![1.0]).unwrap();
        let specs = sample_distill_subnets(&s, 3, &mut RngStream::seed_from_u64(2));
        assert!(specs.iter().all(|x| *x == s.full_spec()));
    }

    #[test]
    fn gaussian_batch_shape_and_moments() {
        let mut rng = RngStream::seed_from_u64(3);
        let x = gaussian_batch(4000, 8, &mut rng);
        assert_eq!(x.dim(), (4000, 8));
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.mapv(|v| (v - mean) * (v - mean)).sum() / (n - 1.0);
        assert!(mean.abs() < 3.0 / n.sqrt());
        // Var of the sample variance is ~2/n for a standard normal.
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
        let again = gaussian_batch(4000, 8, &mut RngStream::seed_from_u64(3));
        assert_eq!(x, again);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let s = toy();
        let mut rng = RngStream::seed_from_u64(4);
        let mut store = ParamStore::init(&s, &mut rng);
        let cfg = DistillConfig::with_subnets(0);
        assert!(distill_round(&mut store, &s, &cfg, &mut rng).is_err());
    }
}
