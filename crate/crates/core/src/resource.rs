//! Per-client resource budgets on a simulated clock.
//!
//! Each resource is either sampled from a range (uniformly, or from the two
//! endpoints when `binary` is set) or replayed from a timestamped trace with
//! step-hold semantics. Traces store memory in GB and bandwidth in Mb/s.
//!
//! Trace file format: UTF-8, an optional first line starting with `#`, then
//! one `time_s,value` pair per line with strictly increasing times.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::cost::{comm_time_for_payload, Budget, CostParams};
use crate::error::{Error, Result};

pub const BYTES_PER_GB: f64 = 1e9;
pub const BITS_PER_MBIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub enum ResourceLimit {
    Range { min: f64, max: f64, binary: bool },
    Trace { log_path: PathBuf },
}

impl ResourceLimit {
    pub fn validate(&self, name: &str) -> Result<()> {
        if let ResourceLimit::Range { min, max, .. } = self {
            if !(min.is_finite() && max.is_finite() && *min >= 0.0 && min <= max) {
                return Err(Error::Contract(format!(
                    "limitation.{name}: need 0 <= min <= max, got min={min} max={max}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TraceAssignment {
    /// Client `i` replays trace file `i mod files`.
    #[default]
    RoundRobin,
    /// All clients replay the first trace, client `i` shifted by `i * offset_s`.
    SharedWithOffsets { offset_s: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitSpec {
    /// GB
    pub memory: ResourceLimit,
    /// Mb/s
    pub bandwidth: ResourceLimit,
    pub trace_assignment: TraceAssignment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: Option<String>,
    samples: Vec<(f64, f64)>,
}

impl Trace {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("trace has no samples".into()));
        }
        for (i, w) in samples.windows(2).enumerate() {
            if w[1].0 <= w[0].0 {
                return Err(Error::Contract(format!(
                    "trace times must strictly increase (sample {} at {} after {})",
                    i + 1,
                    w[1].0,
                    w[0].0
                )));
            }
        }
        Ok(Self {
            header: None,
            samples,
        })
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut header = None;
        let mut samples: Vec<(f64, f64)> = Vec::new();
        for (idx, raw) in text.split('\n').enumerate() {
            let lineno = idx + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if idx == 0 {
                    header = Some(rest.trim().to_string());
                    continue;
                }
                return Err(err(lineno, "header line is only allowed first".into()));
            }
            let (t, v) = line
                .split_once(',')
                .ok_or_else(|| err(lineno, format!("expected `time_s,value`, got `{line}`")))?;
            let t: f64 = t
                .trim()
                .parse()
                .map_err(|e| err(lineno, format!("bad time `{}`: {e}", t.trim())))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|e| err(lineno, format!("bad value `{}`: {e}", v.trim())))?;
            if !t.is_finite() || t < 0.0 {
                return Err(err(lineno, format!("time {t} must be finite and nonnegative")));
            }
            if !v.is_finite() || v < 0.0 {
                return Err(err(lineno, format!("value {v} must be finite and nonnegative")));
            }
            if let Some(&(prev, _)) = samples.last() {
                if t <= prev {
                    return Err(err(lineno, format!("time {t} does not increase past {prev}")));
                }
            }
            samples.push((t, v));
        }
        if samples.is_empty() {
            return Err(err(1, "trace file has no samples".into()));
        }
        Ok(Self { header, samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Value of the last sample at or before `t`; the first value before the trace starts.
    pub fn value_at(&self, t: f64) -> f64 {
        let idx = self.samples.partition_point(|&(time, _)| time <= t);
        if idx == 0 {
            self.samples[0].1
        } else {
            self.samples[idx - 1].1
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(h) = &self.header {
            out.push_str(&format!("# {h}\n"));
        }
        for (t, v) in &self.samples {
            out.push_str(&format!("{t},{v}\n"));
        }
        out
    }
}

/// Loads a single trace file, or every regular file of a directory in name order.
pub fn load_traces(path: &Path) -> Result<Vec<Trace>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Contract(format!("no trace files in {}", path.display())));
        }
        files.iter().map(|f| Trace::load(f)).collect()
    } else {
        Ok(vec![Trace::load(path)?])
    }
}

#[derive(Debug, Clone)]
enum Source {
    Range { min: f64, max: f64, binary: bool },
    Traces(Vec<Trace>),
}

impl Source {
    fn load(limit: &ResourceLimit, base: Option<&Path>) -> Result<Self> {
        Ok(match limit {
            ResourceLimit::Range { min, max, binary } => Source::Range {
                min: *min,
                max: *max,
                binary: *binary,
            },
            ResourceLimit::Trace { log_path } => {
                let resolved = match base {
                    Some(b) if log_path.is_relative() => b.join(log_path),
                    _ => log_path.clone(),
                };
                Source::Traces(load_traces(&resolved)?)
            }
        })
    }

    fn sample<R: Rng + ?Sized>(&self, client: usize, t: f64, assignment: TraceAssignment, rng: &mut R) -> f64 {
        match self {
            Source::Range { min, max, binary } => {
                if *binary {
                    if rng.random_bool(0.5) {
                        *max
                    } else {
                        *min
                    }
                } else if min == max {
                    *min
                } else {
                    rng.random_range(*min..=*max)
                }
            }
            Source::Traces(traces) => Self::lookup(traces, client, t, assignment),
        }
    }

    fn lookup(traces: &[Trace], client: usize, t: f64, assignment: TraceAssignment) -> f64 {
        match assignment {
            TraceAssignment::RoundRobin => traces[client % traces.len()].value_at(t),
            TraceAssignment::SharedWithOffsets { offset_s } => traces[0].value_at(t + client as f64 * offset_s),
        }
    }

    fn is_trace(&self) -> bool {
        matches!(self, Source::Traces(_))
    }
}

/// Budget source for every client, with traces loaded.
#[derive(Debug, Clone)]
pub struct ResourceSim {
    memory: Source,
    bandwidth: Source,
    assignment: TraceAssignment,
}

impl ResourceSim {
    /// Relative trace paths resolve against `base` when given.
    pub fn new(limits: &LimitSpec, base: Option<&Path>) -> Result<Self> {
        limits.memory.validate("memory")?;
        limits.bandwidth.validate("bandwidth")?;
        Ok(Self {
            memory: Source::load(&limits.memory, base)?,
            bandwidth: Source::load(&limits.bandwidth, base)?,
            assignment: limits.trace_assignment,
        })
    }

    pub fn with_traces(memory: Vec<Trace>, bandwidth: Vec<Trace>, assignment: TraceAssignment) -> Self {
        Self {
            memory: Source::Traces(memory),
            bandwidth: Source::Traces(bandwidth),
            assignment,
        }
    }

    pub fn uses_traces(&self) -> bool {
        self.memory.is_trace() || self.bandwidth.is_trace()
    }

    /// Draws (or looks up) one client's budget at time `t`. Range resources
    /// consume randomness from `rng`; memory is drawn before bandwidth.
    pub fn budget_at<R: Rng + ?Sized>(&self, client: usize, t: f64, rng: &mut R) -> Budget {
        let gb = self.memory.sample(client, t, self.assignment, rng);
        let mbps = self.bandwidth.sample(client, t, self.assignment, rng);
        Budget {
            memory_bytes: gb * BYTES_PER_GB,
            bandwidth_bits_per_s: mbps * BITS_PER_MBIT,
        }
    }

    /// Re-reads traced resources at `t`; range resources keep the assignment-time value.
    pub fn budget_at_completion(&self, client: usize, t: f64, assigned: &Budget) -> Budget {
        let memory_bytes = match &self.memory {
            Source::Traces(tr) => Source::lookup(tr, client, t, self.assignment) * BYTES_PER_GB,
            Source::Range { .. } => assigned.memory_bytes,
        };
        let bandwidth_bits_per_s = match &self.bandwidth {
            Source::Traces(tr) => Source::lookup(tr, client, t, self.assignment) * BITS_PER_MBIT,
            Source::Range { .. } => assigned.bandwidth_bits_per_s,
        };
        Budget {
            memory_bytes,
            bandwidth_bits_per_s,
        }
    }
}

/// Resource use of a trained subnet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActualCosts {
    pub memory_bytes: f64,
    pub payload_bits: f64,
}

/// True when the client ran out of memory or could not ship the model by the deadline
/// under the budget in force at completion.
pub fn check_failure(at_completion: &Budget, actual: &ActualCosts, cost: &CostParams) -> bool {
    actual.memory_bytes > at_completion.memory_bytes
        || comm_time_for_payload(actual.payload_bits, cost, at_completion.bandwidth_bits_per_s) > cost.comm_deadline_s
}

/// Simulated wall clock in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimClock {
    now_s: f64,
}

impl SimClock {
    pub fn now(&self) -> f64 {
        self.now_s
    }

    pub fn advance(&mut self, seconds: f64) -> Result<()> {
        if !(seconds >= 0.0 && seconds.is_finite()) {
            return Err(Error::Contract(format!("clock cannot advance by {seconds}")));
        }
        self.now_s += seconds;
        Ok(())
    }
}
