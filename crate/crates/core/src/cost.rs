//! Analytic memory and communication cost of training a subnet, and the
//! feasibility test against a client's budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{SearchSpace, SubnetSpec};

/// Bits shipped per parameter, independent of the f64 arithmetic used internally.
pub const PAYLOAD_BITS_PER_PARAM: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub bytes_per_param: f64,
    /// Weights + gradients + optimizer moments.
    pub train_overhead_factor: f64,
    pub bytes_per_activation: f64,
    pub comm_deadline_s: f64,
    pub protocol_overhead_factor: f64,
    /// Seconds per parameter per local step, used only to advance the simulated clock.
    pub train_time_per_param_step: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            bytes_per_param: 8.0,
            train_overhead_factor: 3.0,
            bytes_per_activation: 8.0,
            comm_deadline_s: 1.0,
            protocol_overhead_factor: 1.0,
            train_time_per_param_step: 1e-8,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bytes_per_param", self.bytes_per_param),
            ("train_overhead_factor", self.train_overhead_factor),
            ("bytes_per_activation", self.bytes_per_activation),
            ("comm_deadline_s", self.comm_deadline_s),
            ("train_time_per_param_step", self.train_time_per_param_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!("cost.{name} must be positive, got {v}")));
            }
        }
        if !(self.protocol_overhead_factor >= 1.0 && self.protocol_overhead_factor.is_finite()) {
            return Err(Error::Contract(format!(
                "cost.protocol_overhead_factor must be >= 1, got {}",
                self.protocol_overhead_factor
            )));
        }
        Ok(())
    }
}

/// One client's resources for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub memory_bytes: f64,
    pub bandwidth_bits_per_s: f64,
}

impl Budget {
    pub fn new(memory_bytes: f64, bandwidth_bits_per_s: f64) -> Result<Self> {
        for v in [memory_bytes, bandwidth_bits_per_s] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!(
                    "budget components must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(Self {
            memory_bytes,
            bandwidth_bits_per_s,
        })
    }

    pub fn unlimited() -> Self {
        Self {
            memory_bytes: f64::MAX,
            bandwidth_bits_per_s: f64::MAX,
        }
    }
}

/// Peak training memory in bytes:
/// `overhead * bytes_per_param * params + bytes_per_activation * batch * (in_dim + kept widths)`.
pub fn memory_cost(space: &SearchSpace, spec: &SubnetSpec, batch: usize, cost: &CostParams) -> Result<f64> {
    if batch == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    Ok(memory_cost_unchecked(space, spec, batch, cost))
}

fn memory_cost_unchecked(space: &SearchSpace, spec: &SubnetSpec, batch: usize, cost: &CostParams) -> f64 {
    let params = space.param_count(spec) as f64;
    let activations = (space.kept_output_width(spec) + space.in_dim() as u64) as f64;
    cost.train_overhead_factor * cost.bytes_per_param * params
        + cost.bytes_per_activation * batch as f64 * activations
}

pub fn payload_bits(space: &SearchSpace, spec: &SubnetSpec) -> f64 {
    PAYLOAD_BITS_PER_PARAM * space.param_count(spec) as f64
}

/// Download plus upload time of the subnet. Infinite on zero bandwidth.
pub fn comm_time_for_payload(bits: f64, cost: &CostParams, bandwidth_bits_per_s: f64) -> f64 {
    if bandwidth_bits_per_s <= 0.0 {
        return f64::INFINITY;
    }
    2.0 * cost.protocol_overhead_factor * bits / bandwidth_bits_per_s
}

pub fn comm_time(space: &SearchSpace, spec: &SubnetSpec, cost: &CostParams, budget: &Budget) -> f64 {
    comm_time_for_payload(payload_bits(space, spec), cost, budget.bandwidth_bits_per_s)
}

/// Boundary-inclusive on both axes.
pub fn feasible(space: &SearchSpace, spec: &SubnetSpec, batch: usize, cost: &CostParams, budget: &Budget) -> bool {
    batch > 0
        && memory_cost_unchecked(space, spec, batch, cost) <= budget.memory_bytes
        && comm_time(space, spec, cost, budget) <= cost.comm_deadline_s
}

/// Everything the feasibility test needs apart from the spec.
#[derive(Debug, Clone, Copy)]
pub struct Constraint<'a> {
    pub budget: &'a Budget,
    pub batch: usize,
    pub cost: &'a CostParams,
}

impl Constraint<'_> {
    pub fn admits(&self, space: &SearchSpace, spec: &SubnetSpec) -> bool {
        feasible(space, spec, self.batch, self.cost, self.budget)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> SearchSpace {
        SearchSpace::new(32, 64, 4, 10, vec![0.0, 0.5, 1.0]).unwrap()
    }

    #[test]
    fn memory_of_smallest_by_hand() {
        let s = space();
        let bytes = memory_cost(&s, &s.smallest_spec(), 64, &CostParams::default()).unwrap();
        assert_eq!(bytes, 3.0 * 8.0 * 330.0 + 8.0 * 64.0 * 42.0);
        assert_eq!(bytes, 29_424.0);
    }

    #[test]
    fn zero_batch_is_rejected() {
        let s = space();
        assert!(memory_cost(&s, &s.full_spec(), 0, &CostParams::default()).is_err());
    }

    #[test]
    fn comm_time_arithmetic() {
        let s = space();
        let budget = Budget::new(1e12, 1e7).unwrap();
        let t = comm_time(&s, &s.full_spec(), &CostParams::default(), &budget);
        assert!((t - 2.0 * 32.0 * 15_242.0 / 1e7).abs() < 1e-15);
        assert!((t - 0.0976).abs() < 1e-4);
        let doubled = Budget::new(1e12, 2e7).unwrap();
        let t2 = comm_time(&s, &s.full_spec(), &CostParams::default(), &doubled);
        assert!((t2 * 2.0 - t).abs() < 1e-15);
    }

    #[test]
    fn zero_bandwidth_admits_nothing() {
        let s = space();
        let budget = Budget::new(1e12, 0.0).unwrap();
        assert!(comm_time(&s, &s.smallest_spec(), &CostParams::default(), &budget).is_infinite());
        assert!(!feasible(&s, &s.smallest_spec(), 64, &CostParams::default(), &budget));
    }

    #[test]
    fn feasibility_boundary_is_inclusive() {
        let s = space();
        let cost = CostParams::default();
        let spec = SubnetSpec(vec![1.0, 0.5, 0.0, 1.0]);
        let mem = memory_cost(&s, &spec, 64, &cost).unwrap();
        let bits = payload_bits(&s, &spec);
        let deadline_bw = 2.0 * bits / cost.comm_deadline_s;
        let exact = Budget::new(mem, deadline_bw).unwrap();
        assert!(feasible(&s, &spec, 64, &cost, &exact));
        let tight = Budget::new(mem - 1.0, deadline_bw).unwrap();
        assert!(!feasible(&s, &spec, 64, &cost, &tight));
        assert!(feasible(&s, &s.full_spec(), 64, &cost, &Budget::unlimited()));
    }

    #[test]
    fn payload_is_32_bits_per_param() {
        let s = space();
        assert_eq!(payload_bits(&s, &s.full_spec()), 32.0 * 15_242.0);
    }

    #[test]
    fn invalid_budget_and_params() {
        assert!(Budget::new(-1.0, 1.0).is_err());
        assert!(Budget::new(1.0, f64::NAN).is_err());
        let mut c = CostParams::default();
        c.protocol_overhead_factor = 0.5;
        assert!(c.validate().is_err());
    }
}
