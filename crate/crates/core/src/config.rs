//! Experiment configuration and its text format.
//!
//! The format is a small YAML subset: nested `key: value` lines indented with
//! spaces, `#` comments, inline lists written `[a, b, c]`. No anchors, no
//! multi-line scalars. Unknown keys are rejected with the line they appear on;
//! omitted keys fall back to defaults and each fallback is reported as a notice.
//!
//! ```text
//! limitation:
//!   memory:
//!     binary: false
//!     min: 4
//!     max: 8
//!   bandwidth:
//!     log_path: traces/
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::agg::Weighting;
use crate::cost::CostParams;
use crate::data::PartitionScheme;
use crate::distill::{DistillConfig, DistillMode};
use crate::error::{Error, Result};
use crate::nn::{OptimizerConfig, OptimizerKind};
use crate::resource::{LimitSpec, ResourceLimit, TraceAssignment};
use crate::search::SearchParams;
use crate::space::SearchSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    FlexibleSearch,
    UniformPrune,
    FedavgLargest,
    FedavgSmallest,
    ExcludeInfeasible,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::FlexibleSearch,
        Strategy::UniformPrune,
        Strategy::FedavgLargest,
        Strategy::FedavgSmallest,
        Strategy::ExcludeInfeasible,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FlexibleSearch => "flexible_search",
            Strategy::UniformPrune => "uniform_prune",
            Strategy::FedavgLargest => "fedavg_largest",
            Strategy::FedavgSmallest => "fedavg_smallest",
            Strategy::ExcludeInfeasible => "exclude_infeasible",
        }
    }

    /// Budget-aware strategies get their clients checked for failures.
    pub fn respects_budgets(self) -> bool {
        !matches!(self, Strategy::FedavgLargest | Strategy::FedavgSmallest)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s.trim())
            .ok_or_else(|| {
                format!(
                    "unknown strategy `{s}` (expected one of {})",
                    Strategy::ALL.map(Strategy::name).join(", ")
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientsConfig {
    pub total: usize,
    pub per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub epsilon: f64,
    pub t_max: usize,
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillSettings {
    pub enabled: bool,
    /// Also distill after uniform-prune rounds.
    pub uniform_prune: bool,
    /// Defaults to clients per round.
    pub subnets: usize,
    pub iterations: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub mode: DistillMode,
}

impl DistillSettings {
    pub fn to_config(&self) -> DistillConfig {
        DistillConfig {
            subnets: self.subnets,
            iterations: self.iterations,
            batch: self.batch,
            learning_rate: self.learning_rate,
            mode: self.mode,
        }
    }

    pub fn applies_to(&self, strategy: Strategy) -> bool {
        self.enabled
            && match strategy {
                Strategy::FlexibleSearch => true,
                Strategy::UniformPrune => self.uniform_prune,
                _ => false,
            }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub in_dim: usize,
    pub per_class: usize,
    pub partition: PartitionScheme,
    pub test_fraction: f64,
    pub csv_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSettings {
    pub config: OptimizerConfig,
    /// Fractions of the round count after which the learning rate decays.
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl OptimizerSettings {
    /// Learning rate for 1-based `round` out of `rounds`.
    pub fn lr_at(&self, round: usize, rounds: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| round as f64 > (m * rounds as f64).round())
            .count();
        self.config.learning_rate * self.gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub rounds: usize,
    pub strategy: Strategy,
    pub clients: ClientsConfig,
    pub model: ModelConfig,
    pub search: SearchConfig,
    pub distill: DistillSettings,
    pub limitation: LimitSpec,
    pub cost: CostParams,
    pub data: DataConfig,
    pub optimizer: OptimizerSettings,
    pub aggregation: Weighting,
    /// Directory relative paths resolve against; not part of the file.
    pub base_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            rounds: 150,
            strategy: Strategy::FlexibleSearch,
            clients: ClientsConfig {
                total: 20,
                per_round: 5,
                local_epochs: 5,
                batch_size: 64,
            },
            model: ModelConfig { hidden: 64, depth: 4 },
            search: SearchConfig {
                epsilon: 0.8,
                t_max: 5,
                ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            },
            distill: DistillSettings {
                enabled: true,
                uniform_prune: false,
                subnets: 5,
                iterations: 100,
                batch: 64,
                learning_rate: 0.001,
                mode: DistillMode::AggregateWeights,
            },
            limitation: LimitSpec {
                memory: ResourceLimit::Range {
                    min: 4.0,
                    max: 8.0,
                    binary: false,
                },
                bandwidth: ResourceLimit::Range {
                    min: 10.0,
                    max: 100.0,
                    binary: false,
                },
                trace_assignment: TraceAssignment::RoundRobin,
            },
            cost: CostParams::default(),
            data: DataConfig {
                classes: 10,
                in_dim: 32,
                per_class: 200,
                partition: PartitionScheme::Dirichlet { alpha: 0.1 },
                test_fraction: 0.1,
                csv_path: None,
            },
            optimizer: OptimizerSettings {
                config: OptimizerConfig::sgd(0.1, 0.9, 0.0005),
                milestones: vec![0.6, 0.85],
                gamma: 0.1,
            },
            aggregation: Weighting::DataShare,
            base_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn space(&self) -> Result<SearchSpace> {
        SearchSpace::new(
            self.data.in_dim,
            self.model.hidden,
            self.model.depth,
            self.data.classes,
            self.search.ratios.clone(),
        )
    }

    pub fn search_params(&self) -> SearchParams {
        SearchParams {
            epsilon: self.search.epsilon,
            t_max: self.search.t_max,
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path.to_path_buf(),
        }
    }

    /// Semantic checks that do not depend on where a value came from.
    pub fn validate(&self) -> Result<()> {
        let c = &self.clients;
        if c.total == 0 || c.per_round == 0 || c.per_round > c.total {
            return Err(Error::Contract(format!(
                "need 1 <= clients.per_round ({}) <= clients.total ({})",
                c.per_round, c.total
            )));
        }
        if c.local_epochs == 0 || c.batch_size == 0 || self.rounds == 0 {
            return Err(Error::Contract(
                "local_epochs, batch_size and rounds must be at least 1".into(),
            ));
        }
        self.space()?;
        self.search_params().validate()?;
        self.distill.to_config().validate()?;
        self.cost.validate()?;
        self.limitation.memory.validate("memory")?;
        self.limitation.bandwidth.validate("bandwidth")?;
        if !(self.optimizer.config.learning_rate > 0.0) {
            return Err(Error::Contract("optimizer.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Contract("data.test_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (mut cfg, notices) = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok((cfg, notices))
    }

    /// Parses config text, returning the config and one notice per defaulted key.
    pub fn parse(text: &str) -> Result<(Self, Vec<String>)> {
        let root = parse_tree(text)?;
        let mut notices = Vec::new();
        let cfg = build(&root, &mut notices)?;
        Ok((cfg, notices))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "seed: {}", self.seed);
        if let Some(out) = &self.output_dir {
            let _ = writeln!(w, "output_dir: {}", quote(&out.display().to_string()));
        }
        let _ = writeln!(w, "rounds: {}", self.rounds);
        let _ = writeln!(w, "strategy: {}", self.strategy);
        let _ = writeln!(w, "clients:");
        let _ = writeln!(w, "  total: {}", self.clients.total);
        let _ = writeln!(w, "  per_round: {}", self.clients.per_round);
        let _ = writeln!(w, "  local_epochs: {}", self.clients.local_epochs);
        let _ = writeln!(w, "  batch_size: {}", self.clients.batch_size);
        let _ = writeln!(w, "model:");
        let _ = writeln!(w, "  hidden: {}", self.model.hidden);
        let _ = writeln!(w, "  depth: {}", self.model.depth);
        let _ = writeln!(w, "search:");
        let _ = writeln!(w, "  epsilon: {}", self.search.epsilon);
        let _ = writeln!(w, "  t_max: {}", self.search.t_max);
        let _ = writeln!(w, "  ratios: {}", list(&self.search.ratios));
        let d = &self.distill;
        let _ = writeln!(w, "distill:");
        let _ = writeln!(w, "  enabled: {}", d.enabled);
        let _ = writeln!(w, "  uniform_prune: {}", d.uniform_prune);
        let _ = writeln!(w, "  n: {}", d.subnets);
        let _ = writeln!(w, "  t_skd: {}", d.iterations);
        let _ = writeln!(w, "  k: {}", d.batch);
        let _ = writeln!(w, "  lr: {}", d.learning_rate);
        let _ = writeln!(
            w,
            "  mode: {}",
            match d.mode {
                DistillMode::AggregateWeights => "aggregate_weights",
                DistillMode::GradientEq2 => "gradient_eq2",
            }
        );
        let _ = writeln!(w, "limitation:");
        for (name, limit) in [("memory", &self.limitation.memory), ("bandwidth", &self.limitation.bandwidth)] {
            let _ = writeln!(w, "  {name}:");
            match limit {
                ResourceLimit::Range { min, max, binary } => {
                    let _ = writeln!(w, "    binary: {binary}");
                    let _ = writeln!(w, "    min: {min}");
                    let _ = writeln!(w, "    max: {max}");
                }
                ResourceLimit::Trace { log_path } => {
                    let _ = writeln!(w, "    log_path: {}", quote(&log_path.display().to_string()));
                }
            }
        }
        if let TraceAssignment::SharedWithOffsets { offset_s } = self.limitation.trace_assignment {
            let _ = writeln!(w, "  trace_offset_s: {offset_s}");
        }
        let c = &self.cost;
        let _ = writeln!(w, "cost:");
        let _ = writeln!(w, "  bytes_per_param: {}", c.bytes_per_param);
        let _ = writeln!(w, "  train_overhead_factor: {}", c.train_overhead_factor);
        let _ = writeln!(w, "  bytes_per_activation: {}", c.bytes_per_activation);
        let _ = writeln!(w, "  comm_deadline_s: {}", c.comm_deadline_s);
        let _ = writeln!(w, "  protocol_overhead_factor: {}", c.protocol_overhead_factor);
        let _ = writeln!(w, "  train_time_per_param_step: {}", c.train_time_per_param_step);
        let dc = &self.data;
        let _ = writeln!(w, "data:");
        let _ = writeln!(w, "  classes: {}", dc.classes);
        let _ = writeln!(w, "  in_dim: {}", dc.in_dim);
        let _ = writeln!(w, "  per_class: {}", dc.per_class);
        match dc.partition {
            PartitionScheme::Iid => {
                let _ = writeln!(w, "  partition: iid");
            }
            PartitionScheme::Dirichlet { alpha } => {
                let _ = writeln!(w, "  partition: dirichlet");
                let _ = writeln!(w, "  alpha: {alpha}");
            }
        }
        let _ = writeln!(w, "  test_fraction: {}", dc.test_fraction);
        if let Some(p) = &dc.csv_path {
            let _ = writeln!(w, "  csv_path: {}", quote(&p.display().to_string()));
        }
        let o = &self.optimizer;
        let _ = writeln!(w, "optimizer:");
        match o.config.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                let _ = writeln!(w, "  kind: sgd");
                let _ = writeln!(w, "  momentum: {momentum}");
            }
            OptimizerKind::Adam { beta1, beta2, .. } => {
                let _ = writeln!(w, "  kind: adam");
                let _ = writeln!(w, "  beta1: {beta1}");
                let _ = writeln!(w, "  beta2: {beta2}");
            }
        }
        let _ = writeln!(w, "  lr: {}", o.config.learning_rate);
        let _ = writeln!(w, "  weight_decay: {}", o.config.weight_decay);
        let _ = writeln!(w, "  milestones: {}", list(&o.milestones));
        let _ = writeln!(w, "  gamma: {}", o.gamma);
        let _ = writeln!(w, "aggregation:");
        let _ = writeln!(
            w,
            "  weighting: {}",
            match self.aggregation {
                Weighting::DataShare => "data_share",
                Weighting::Uniform => "uniform",
            }
        );
        s
    }
}

fn list(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

fn quote(s: &str) -> String {
    if s.is_empty() || s.contains(['#', ':', '[', ']', ',', '"']) || s.trim() != s {
        format!("\"{}\"", s.replace('"', "\\\""))
    } else {
        s.to_string()
    }
}

// ---------------------------------------------------------------------------
// Text tree

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Scalar(String),
    List(Vec<String>),
    Map(Vec<Entry>),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    key: String,
    line: usize,
    value: Value,
}

struct Line<'a> {
    number: usize,
    indent: usize,
    key: &'a str,
    rest: String,
}

fn strip_comment(s: &str) -> &str {
    let mut in_quotes = false;
    let mut prev_space = true;
    for (i, ch) in s.char_indices() {
        match ch {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes && prev_space => return &s[..i],
            _ => {}
        }
        prev_space = ch.is_whitespace();
    }
    s
}

fn lex(text: &str) -> Result<Vec<Line<'_>>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let number = i + 1;
        let body = strip_comment(raw);
        if body.trim().is_empty() {
            continue;
        }
        let indent = body.len() - body.trim_start_matches(' ').len();
        if body[indent..].starts_with('\t') {
            return Err(Error::config(number, "tabs are not allowed for indentation"));
        }
        let content = body.trim();
        if content.starts_with('-') {
            return Err(Error::config(number, "block lists are not supported; write `[a, b]`"));
        }
        if content.starts_with('&') || content.starts_with('*') || content.contains(": &") || content.contains(": *") {
            return Err(Error::config(number, "anchors and aliases are not supported"));
        }
        let (key, rest) = content
            .split_once(':')
            .ok_or_else(|| Error::config(number, format!("expected `key: value`, got `{content}`")))?;
        let key = key.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::config(number, format!("invalid key `{key}`")));
        }
        out.push(Line {
            number,
            indent,
            key,
            rest: rest.trim().to_string(),
        });
    }
    Ok(out)
}

fn unquote(s: &str, line: usize) -> Result<String> {
    if let Some(inner) = s.strip_prefix('"') {
        let inner = inner
            .strip_suffix('"')
            .ok_or_else(|| Error::config(line, format!("unterminated string {s}")))?;
        Ok(inner.replace("\\\"", "\""))
    } else {
        Ok(s.to_string())
    }
}

fn parse_value(rest: &str, line: usize) -> Result<Value> {
    if let Some(inner) = rest.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| Error::config(line, "list is missing its closing `]`"))?;
        if inner.trim().is_empty() {
            return Ok(Value::List(Vec::new()));
        }
        let items = inner
            .split(',')
            .map(|p| unquote(p.trim(), line))
            .collect::<Result<Vec<_>>>()?;
        if items.iter().any(String::is_empty) {
            return Err(Error::config(line, "empty list element"));
        }
        return Ok(Value::List(items));
    }
    Ok(Value::Scalar(unquote(rest, line)?))
}

fn parse_block(lines: &[Line<'_>], pos: &mut usize, indent: usize) -> Result<Vec<Entry>> {
    let mut entries: Vec<Entry> = Vec::new();
    while *pos < lines.len() {
        let line = &lines[*pos];
        if line.indent < indent {
            break;
        }
        if line.indent > indent {
            return Err(Error::config(line.number, "unexpected indentation"));
        }
        if entries.iter().any(|e| e.key == line.key) {
            return Err(Error::config(line.number, format!("duplicate key `{}`", line.key)));
        }
        *pos += 1;
        let value = if line.rest.is_empty() {
            match lines.get(*pos) {
                Some(next) if next.indent > indent => Value::Map(parse_block(lines, pos, next.indent)?),
                _ => return Err(Error::config(line.number, format!("key `{}` has no value", line.key))),
            }
        } else {
            parse_value(&line.rest, line.number)?
        };
        entries.push(Entry {
            key: line.key.to_string(),
            line: line.number,
            value,
        });
    }
    Ok(entries)
}

fn parse_tree(text: &str) -> Result<Vec<Entry>> {
    let lines = lex(text)?;
    let mut pos = 0;
    let first_indent = lines.first().map_or(0, |l| l.indent);
    if first_indent != 0 {
        return Err(Error::config(lines[0].number, "top-level keys must not be indented"));
    }
    parse_block(&lines, &mut pos, 0)
}

// ---------------------------------------------------------------------------
// Typed extraction

struct Section<'a> {
    path: String,
    line: usize,
    entries: &'a [Entry],
    used: HashSet<&'a str>,
}

impl<'a> Section<'a> {
    fn new(path: &str, line: usize, entries: &'a [Entry]) -> Self {
        Self {
            path: path.to_string(),
            line,
            entries,
            used: HashSet::new(),
        }
    }

    fn qualified(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn entry(&mut self, key: &'a str) -> Option<&'a Entry> {
        let e = self.entries.iter().find(|e| e.key == key)?;
        self.used.insert(key);
        Some(e)
    }

    fn has(&self, key: &str) -> bool {
        self.entries.iter().any(|e| e.key == key)
    }

    fn scalar(&mut self, key: &'a str) -> Result<Option<(String, usize)>> {
        let path = self.qualified(key);
        match self.entry(key) {
            None => Ok(None),
            Some(Entry {
                value: Value::Scalar(s),
                line,
                ..
            }) => Ok(Some((s.clone(), *line))),
            Some(e) => Err(Error::config(e.line, format!("`{path}` must be a single value"))),
        }
    }

    fn parsed<T>(&mut self, key: &'a str, default: T, notices: &mut Vec<String>) -> Result<(T, usize)>
    where
        T: std::str::FromStr + std::fmt::Display,
        T::Err: std::fmt::Display,
    {
        let path = self.qualified(key);
        match self.scalar(key)? {
            Some((s, line)) => s
                .parse::<T>()
                .map(|v| (v, line))
                .map_err(|e| Error::config(line, format!("`{path}`: cannot parse `{s}`: {e}"))),
            None => {
                notices.push(format!("{path} not set, using default {default}"));
                Ok((default, self.line))
            }
        }
    }

    fn get<T>(&mut self, key: &'a str, default: T, notices: &mut Vec<String>) -> Result<T>
    where
        T: std::str::FromStr + std::fmt::Display,
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(key, default, notices)?.0)
    }

    fn floats(&mut self, key: &'a str, default: Vec<f64>, notices: &mut Vec<String>) -> Result<Vec<f64>> {
        let path = self.qualified(key);
        match self.entry(key) {
            None => {
                notices.push(format!("{path} not set, using default {}", list(&default)));
                Ok(default)
            }
            Some(Entry {
                value: Value::List(items),
                line,
                ..
            }) => items
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::config(*line, format!("`{path}`: bad number `{s}`: {e}")))
                })
                .collect(),
            Some(e) => Err(Error::config(e.line, format!("`{path}` must be a list like [0, 0.5, 1]"))),
        }
    }

    fn child(&mut self, key: &'a str) -> Result<Option<Section<'a>>> {
        let path = self.qualified(key);
        match self.entry(key) {
            None => Ok(None),
            Some(Entry {
                value: Value::Map(entries),
                line,
                ..
            }) => Ok(Some(Section::new(&path, *line, entries))),
            Some(e) => Err(Error::config(e.line, format!("`{path}` must be a nested block"))),
        }
    }

    fn finish(self) -> Result<()> {
        for e in self.entries {
            if !self.used.contains(e.key.as_str()) {
                return Err(Error::config(e.line, format!("unknown key `{}`", self.qualified(&e.key))));
            }
        }
        Ok(())
    }
}

fn check(cond: bool, line: usize, message: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(line, message()))
    }
}

fn limit(section: Option<Section<'_>>, name: &str, default: &ResourceLimit, parent_line: usize, notices: &mut Vec<String>) -> Result<ResourceLimit> {
    let Some(mut s) = section else {
        notices.push(format!("limitation.{name} not set, using default {default:?}"));
        return Ok(default.clone());
    };
    let result = if s.has("log_path") {
        if s.has("min") || s.has("max") || s.has("binary") {
            return Err(Error::config(
                s.line,
                format!("limitation.{name}: give either log_path or min/max, not both"),
            ));
        }
        let (path, _) = s.scalar("log_path")?.expect("checked");
        ResourceLimit::Trace { log_path: path.into() }
    } else {
        let (min, min_line) = match s.scalar("min")? {
            Some((v, line)) => (
                v.parse::<f64>()
                    .map_err(|e| Error::config(line, format!("limitation.{name}.min: {e}")))?,
                line,
            ),
            None => return Err(Error::config(s.line.max(parent_line), format!("limitation.{name} needs min and max or log_path"))),
        };
        let (max, _) = match s.scalar("max")? {
            Some((v, line)) => (
                v.parse::<f64>()
                    .map_err(|e| Error::config(line, format!("limitation.{name}.max: {e}")))?,
                line,
            ),
            None => return Err(Error::config(s.line, format!("limitation.{name} needs max"))),
        };
        let binary = s.get("binary", false, notices)?;
        check(min >= 0.0 && min <= max && max.is_finite(), min_line, || {
            format!("limitation.{name}: need 0 <= min <= max")
        })?;
        ResourceLimit::Range { min, max, binary }
    };
    s.finish()?;
    Ok(result)
}

fn build(root: &[Entry], notices: &mut Vec<String>) -> Result<ExperimentConfig> {
    let d = ExperimentConfig::default();
    let mut top = Section::new("", 1, root);

    let seed = top.get("seed", d.seed, notices)?;
    let output_dir = top.scalar("output_dir")?.map(|(s, _)| PathBuf::from(s));
    let (rounds, rounds_line) = top.parsed("rounds", d.rounds, notices)?;
    check(rounds >= 1, rounds_line, || "rounds must be at least 1".into())?;
    let (strategy, _) = match top.scalar("strategy")? {
        Some((s, line)) => (s.parse::<Strategy>().map_err(|e| Error::config(line, e))?, line),
        None => {
            notices.push(format!("strategy not set, using default {}", d.strategy));
            (d.strategy, 1)
        }
    };

    let clients = {
        let mut s = top.child("clients")?.unwrap_or_else(|| Section::new("clients", 1, &[]));
        let (total, _)= s.parsed("total", d.clients.total, notices)?;
        let (per_round, pr_line) = s.parsed("per_round", d.clients.per_round, notices)?;
        check(total >= 1 && per_round >= 1 && per_round <= total, pr_line, || {
            format!("need 1 <= clients.per_round ({per_round}) <= clients.total ({total})")
        })?;
        let (local_epochs, le_line) = s.parsed("local_epochs", d.clients.local_epochs, notices)?;
        check(local_epochs >= 1, le_line, || "clients.local_epochs must be at least 1".into())?;
        let (batch_size, bs_line) = s.parsed("batch_size", d.clients.batch_size, notices)?;
        check(batch_size >= 1, bs_line, || "clients.batch_size must be at least 1".into())?;
        s.finish()?;
        ClientsConfig {
            total,
            per_round,
            local_epochs,
            batch_size,
        }
    };

    let model = {
        let mut s = top.child("model")?.unwrap_or_else(|| Section::new("model", 1, &[]));
        let (hidden, h_line) = s.parsed("hidden", d.model.hidden, notices)?;
        check(hidden >= 1, h_line, || "model.hidden must be at least 1".into())?;
        let (depth, d_line) = s.parsed("depth", d.model.depth, notices)?;
        check(depth >= 1, d_line, || "model.depth must be at least 1".into())?;
        s.finish()?;
        ModelConfig { hidden, depth }
    };

    let search = {
        let mut s = top.child("search")?.unwrap_or_else(|| Section::new("search", 1, &[]));
        let (epsilon, e_line) = s.parsed("epsilon", d.search.epsilon, notices)?;
        check((0.0..=1.0).contains(&epsilon), e_line, || "search.epsilon must lie in [0, 1]".into())?;
        let t_max = s.get("t_max", d.search.t_max, notices)?;
        let ratios = s.floats("ratios", d.search.ratios.clone(), notices)?;
        let line = s.entries.iter().find(|e| e.key == "ratios").map_or(s.line, |e| e.line);
        SearchSpace::new(1, 1, 1, 1, ratios.clone()).map_err(|e| Error::config(line, e.to_string()))?;
        s.finish()?;
        SearchConfig { epsilon, t_max, ratios }
    };

    let distill = {
        let mut s = top.child("distill")?.unwrap_or_else(|| Section::new("distill", 1, &[]));
        let enabled = s.get("enabled", d.distill.enabled, notices)?;
        let uniform_prune = s.get("uniform_prune", d.distill.uniform_prune, notices)?;
        let (subnets, n_line) = s.parsed("n", clients.per_round, notices)?;
        check(subnets >= 1, n_line, || "distill.n must be at least 1".into())?;
        let iterations = s.get("t_skd", d.distill.iterations, notices)?;
        let (batch, k_line) = s.parsed("k", d.distill.batch, notices)?;
        check(batch >= 1, k_line, || "distill.k must be at least 1".into())?;
        let (learning_rate, lr_line) = s.parsed("lr", d.distill.learning_rate, notices)?;
        check(learning_rate > 0.0, lr_line, || "distill.lr must be positive".into())?;
        let mode = match s.scalar("mode")? {
            None => {
                notices.push("distill.mode not set, using default aggregate_weights".into());
                d.distill.mode
            }
            Some((m, line)) => match m.as_str() {
                "aggregate_weights" => DistillMode::AggregateWeights,
                "gradient_eq2" => DistillMode::GradientEq2,
                other => {
                    return Err(Error::config(
                        line,
                        format!("distill.mode `{other}` (expected aggregate_weights or gradient_eq2)"),
                    ))
                }
            },
        };
        s.finish()?;
        DistillSettings {
            enabled,
            uniform_prune,
            subnets,
            iterations,
            batch,
            learning_rate,
            mode,
        }
    };

    let limitation = match top.child("limitation")? {
        None => {
            notices.push("limitation not set, using default ranges".into());
            d.limitation.clone()
        }
        Some(mut s) => {
            let line = s.line;
            let memory_section = s.child("memory")?;
            let memory = limit(memory_section, "memory", &d.limitation.memory, line, notices)?;
            let bandwidth_section = s.child("bandwidth")?;
            let bandwidth = limit(bandwidth_section, "bandwidth", &d.limitation.bandwidth, line, notices)?;
            let trace_assignment = match s.scalar("trace_offset_s")? {
                None => TraceAssignment::RoundRobin,
                Some((v, line)) => TraceAssignment::SharedWithOffsets {
                    offset_s: v
                        .parse()
                        .map_err(|e| Error::config(line, format!("limitation.trace_offset_s: {e}")))?,
                },
            };
            s.finish()?;
            LimitSpec {
                memory,
                bandwidth,
                trace_assignment,
            }
        }
    };

    let cost = {
        let mut s = top.child("cost")?.unwrap_or_else(|| Section::new("cost", 1, &[]));
        let dc = d.cost;
        let cost = CostParams {
            bytes_per_param: s.get("bytes_per_param", dc.bytes_per_param, notices)?,
            train_overhead_factor: s.get("train_overhead_factor", dc.train_overhead_factor, notices)?,
            bytes_per_activation: s.get("bytes_per_activation", dc.bytes_per_activation, notices)?,
            comm_deadline_s: s.get("comm_deadline_s", dc.comm_deadline_s, notices)?,
            protocol_overhead_factor: s.get("protocol_overhead_factor", dc.protocol_overhead_factor, notices)?,
            train_time_per_param_step: s.get("train_time_per_param_step", dc.train_time_per_param_step, notices)?,
        };
        let line = s.line;
        cost.validate().map_err(|e| Error::config(line, e.to_string()))?;
        s.finish()?;
        cost
    };

    let data = {
        let mut s = top.child("data")?.unwrap_or_else(|| Section::new("data", 1, &[]));
        let dd = &d.data;
        let (classes, c_line) = s.parsed("classes", dd.classes, notices)?;
        check(classes >= 1, c_line, || "data.classes must be at least 1".into())?;
        let (in_dim, i_line) = s.parsed("in_dim", dd.in_dim, notices)?;
        check(in_dim >= 1, i_line, || "data.in_dim must be at least 1".into())?;
        let (per_class, p_line) = s.parsed("per_class", dd.per_class, notices)?;
        check(per_class >= 1, p_line, || "data.per_class must be at least 1".into())?;
        let partition = match s.scalar("partition")? {
            None => {
                notices.push("data.partition not set, using default dirichlet".into());
                let alpha = s.get("alpha", 0.1, notices)?;
                PartitionScheme::Dirichlet { alpha }
            }
            Some((p, line)) => match p.as_str() {
                "iid" => PartitionScheme::Iid,
                "dirichlet" => {
                    let (alpha, a_line) = s.parsed("alpha", 0.1, notices)?;
                    check(alpha > 0.0, a_line, || "data.alpha must be positive".into())?;
                    PartitionScheme::Dirichlet { alpha }
                }
                other => return Err(Error::config(line, format!("data.partition `{other}` (expected iid or dirichlet)"))),
            },
        };
        let (test_fraction, t_line) = s.parsed("test_fraction", dd.test_fraction, notices)?;
        check((0.0..1.0).contains(&test_fraction), t_line, || "data.test_fraction must lie in [0, 1)".into())?;
        let csv_path = s.scalar("csv_path")?.map(|(p, _)| PathBuf::from(p));
        s.finish()?;
        DataConfig {
            classes,
            in_dim,
            per_class,
            partition,
            test_fraction,
            csv_path,
        }
    };

    let optimizer = {
        let mut s = top.child("optimizer")?.unwrap_or_else(|| Section::new("optimizer", 1, &[]));
        let kind = match s.scalar("kind")? {
            None => {
                notices.push("optimizer.kind not set, using default sgd".into());
                "sgd".to_string()
            }
            Some((k, line)) => {
                if k != "sgd" && k != "adam" {
                    return Err(Error::config(line, format!("optimizer.kind `{k}` (expected sgd or adam)")));
                }
                k
            }
        };
        let kind = if kind == "sgd" {
            OptimizerKind::SgdMomentum {
                momentum: s.get("momentum", 0.9, notices)?,
            }
        } else {
            OptimizerKind::Adam {
                beta1: s.get("beta1", 0.9, notices)?,
                beta2: s.get("beta2", 0.999, notices)?,
                epsilon: 1e-8,
            }
        };
        let (lr, lr_line) = s.parsed("lr", d.optimizer.config.learning_rate, notices)?;
        check(lr > 0.0, lr_line, || "optimizer.lr must be positive".into())?;
        let weight_decay = s.get("weight_decay", d.optimizer.config.weight_decay, notices)?;
        let milestones = s.floats("milestones", d.optimizer.milestones.clone(), notices)?;
        let gamma = s.get("gamma", d.optimizer.gamma, notices)?;
        s.finish()?;
        OptimizerSettings {
            config: OptimizerConfig {
                kind,
                learning_rate: lr,
                weight_decay,
            },
            milestones,
            gamma,
        }
    };

    let aggregation = match top.child("aggregation")? {
        None => d.aggregation,
        Some(mut s) => {
            let w = match s.scalar("weighting")? {
                None => Weighting::DataShare,
                Some((w, line)) => match w.as_str() {
                    "data_share" => Weighting::DataShare,
                    "uniform" => Weighting::Uniform,
                    other => return Err(Error::config(line, format!("aggregation.weighting `{other}` (expected data_share or uniform)"))),
                },
            };
            s.finish()?;
            w
        }
    };

    top.finish()?;

    let cfg = ExperimentConfig {
        seed,
        output_dir,
        rounds,
        strategy,
        clients,
        model,
        search,
        distill,
        limitation,
        cost,
        data,
        optimizer,
        aggregation,
        base_dir: None,
    };
    // Cross-section checks (e.g. layer skipping needs in_dim <= hidden).
    cfg.space().map_err(|e| Error::config(1, e.to_string()))?;
    Ok(cfg)
}
