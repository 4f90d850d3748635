//! Architecture space of the global model and the subnets carved out of it.
//!
//! The global model is an MLP with `depth` hidden layers of width `hidden`
//! followed by a classifier. A [`SubnetSpec`] picks one ratio per hidden
//! layer from the ratio set: ratio `v > 0` keeps the first `round(v * hidden)`
//! units of that layer, ratio `0` drops the layer entirely. The classifier is
//! always kept. Every slice is a prefix of the global tensors, so any two
//! subnets agree on where their shared parameters live.

use std::cmp::Ordering;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;

use crate::agg::ParamStore;
use crate::error::{Error, Result};
use crate::nn::{DenseLayer, MlpModel};

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    in_dim: usize,
    hidden: usize,
    depth: usize,
    classes: usize,
    ratios: Vec<f64>,
}

impl SearchSpace {
    pub fn new(in_dim: usize, hidden: usize, depth: usize, classes: usize, ratios: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || depth == 0 || classes == 0 {
            return Err(Error::Contract(
                "in_dim, hidden width, depth and classes must all be positive".into(),
            ));
        }
        if ratios.is_empty() {
            return Err(Error::Contract("ratio set is empty".into()));
        }
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Contract(format!("ratios must lie in [0, 1]: {ratios:?}")));
        }
        if ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(format!(
                "ratios must be strictly increasing: {ratios:?}"
            )));
        }
        if *ratios.last().unwrap() != 1.0 {
            return Err(Error::Contract("ratio set must end with 1".into()));
        }
        // A skipped layer feeds its input straight into the next global
        // layer, whose rows are `hidden` wide.
        if ratios[0] == 0.0 && in_dim > hidden {
            return Err(Error::Contract(format!(
                "layer skipping needs in_dim ({in_dim}) <= hidden width ({hidden})"
            )));
        }
        Ok(Self {
            in_dim,
            hidden,
            depth,
            classes,
            ratios,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    /// Shape `(rows, cols)` of global layer `layer`; index `depth` is the classifier.
    pub fn global_shape(&self, layer: usize) -> (usize, usize) {
        let rows = if layer == 0 { self.in_dim } else { self.hidden };
        let cols = if layer == self.depth { self.classes } else { self.hidden };
        (rows, cols)
    }

    /// Output width for ratio `v`, or `None` when the layer is skipped.
    pub fn width(&self, ratio: f64) -> Option<usize> {
        if ratio <= 0.0 {
            None
        } else {
            Some(((ratio * self.hidden as f64).round() as usize).max(1))
        }
    }

    pub fn full_spec(&self) -> SubnetSpec {
        SubnetSpec(vec![1.0; self.depth])
    }

    pub fn smallest_spec(&self) -> SubnetSpec {
        SubnetSpec(vec![self.ratios[0]; self.depth])
    }

    pub fn uniform_spec(&self, ratio: f64) -> Result<SubnetSpec> {
        let spec = SubnetSpec(vec![ratio; self.depth]);
        self.validate(&spec)?;
        Ok(spec)
    }

    pub fn random_spec<R: Rng + ?Sized>(&self, rng: &mut R) -> SubnetSpec {
        SubnetSpec(
            (0..self.depth)
                .map(|_| self.ratios[rng.random_range(0..self.ratios.len())])
                .collect(),
        )
    }

    /// Every spec in the space, in lexicographic ratio order.
    pub fn enumerate(&self) -> Vec<SubnetSpec> {
        let m = self.ratios.len();
        let total = m.pow(self.depth as u32);
        (0..total)
            .map(|mut code| {
                let mut v = vec![0.0; self.depth];
                for slot in v.iter_mut().rev() {
                    *slot = self.ratios[code % m];
                    code /= m;
                }
                SubnetSpec(v)
            })
            .collect()
    }

    pub fn validate(&self, spec: &SubnetSpec) -> Result<()> {
        if spec.0.len() != self.depth {
            return Err(Error::Contract(format!(
                "spec {spec} has {} ratios, space depth is {}",
                spec.0.len(),
                self.depth
            )));
        }
        if let Some(bad) = spec.0.iter().find(|v| !self.ratios.contains(v)) {
            return Err(Error::Contract(format!(
                "ratio {bad} of spec {spec} is not in the ratio set"
            )));
        }
        Ok(())
    }

    /// Slice map of the kept layers, classifier last.
    pub fn slice_map(&self, spec: &SubnetSpec) -> Result<LayerSliceMap> {
        self.validate(spec)?;
        let mut entries = Vec::with_capacity(self.depth + 1);
        let mut prev = self.in_dim;
        for (layer, &v) in spec.0.iter().enumerate() {
            if let Some(w) = self.width(v) {
                entries.push(SliceEntry {
                    layer,
                    rows: 0..prev,
                    cols: 0..w,
                });
                prev = w;
            }
        }
        entries.push(SliceEntry {
            layer: self.depth,
            rows: 0..prev,
            cols: 0..self.classes,
        });
        Ok(LayerSliceMap { entries })
    }

    /// Scalar parameter count of the materialized subnet, computed from
    /// the ratios alone.
    pub fn param_count(&self, spec: &SubnetSpec) -> u64 {
        let mut prev = self.in_dim as u64;
        let mut total = 0u64;
        for &v in &spec.0 {
            if let Some(w) = self.width(v) {
                let w = w as u64;
                total += prev * w + w;
                prev = w;
            }
        }
        total + prev * self.classes as u64 + self.classes as u64
    }

    /// Sum of output widths of all kept layers including the classifier.
    pub fn kept_output_width(&self, spec: &SubnetSpec) -> u64 {
        spec.0
            .iter()
            .filter_map(|&v| self.width(v))
            .map(|w| w as u64)
            .sum::<u64>()
            + self.classes as u64
    }

    /// Copies the subnet's parameters out of the global store.
    pub fn materialize(&self, spec: &SubnetSpec, store: &ParamStore) -> Result<(MlpModel, LayerSliceMap)> {
        store.check_space(self)?;
        let map = self.slice_map(spec)?;
        let layers = map
            .entries
            .iter()
            .map(|e| {
                let global = &store.layers()[e.layer];
                DenseLayer {
                    weights: global
                        .weights
                        .slice(ndarray::s![e.rows.clone(), e.cols.clone()])
                        .to_owned(),
                    bias: global.bias.slice(ndarray::s![e.cols.clone()]).to_owned(),
                }
            })
            .collect();
        Ok((MlpModel::new(layers)?, map))
    }
}

/// Per-hidden-layer ratio vector. The classifier is implicit and always full.
#[derive(Debug, Clone)]
pub struct SubnetSpec(pub Vec<f64>);

impl SubnetSpec {
    pub fn ratios(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when every ratio is `<=` the matching ratio of `other`.
    pub fn dominated_by(&self, other: &SubnetSpec) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }
}

impl PartialEq for SubnetSpec {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for SubnetSpec {}

impl PartialOrd for SubnetSpec {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SubnetSpec {
    fn cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.total_cmp(b) {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        self.0.len().cmp(&other.0.len())
    }
}

impl fmt::Display for SubnetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str("]")
    }
}

impl FromStr for SubnetSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| format!("spec `{s}` must be bracketed"))?;
        if inner.trim().is_empty() {
            return Ok(SubnetSpec(Vec::new()));
        }
        inner
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad ratio `{p}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(SubnetSpec)
    }
}

impl serde::Serialize for SubnetSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceEntry {
    /// Global layer index; `depth` is the classifier.
    pub layer: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl SliceEntry {
    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len() + self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSliceMap {
    pub entries: Vec<SliceEntry>,
}

impl LayerSliceMap {
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(SliceEntry::len).sum()
    }

    /// Checks that `model` has exactly the shapes this map addresses.
    pub fn matches(&self, model: &MlpModel) -> bool {
        self.entries.len() == model.layers.len()
            && self
                .entries
                .iter()
                .zip(&model.layers)
                .all(|(e, l)| l.weights.dim() == (e.rows.len(), e.cols.len()) && l.bias.len() == e.cols.len())
    }
}
