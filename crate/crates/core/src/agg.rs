//! Global parameter store and element-wise aggregation of heterogeneous subnets.
//!
//! Each client update covers a prefix block of every global layer it kept.
//! A global position takes the weighted mean of the clients that cover it;
//! positions no client covers keep their previous value.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{DenseLayer, MlpModel};
use crate::space::{LayerSliceMap, SearchSpace, SubnetSpec};

const CHECKPOINT_MAGIC: &str = "hetfed-store v1";

/// Parameters of the full global model: `depth` hidden layers then the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    layers: Vec<DenseLayer>,
}

impl ParamStore {
    pub fn init<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Self {
        let layers = (0..=space.depth())
            .map(|i| {
                let (rows, cols) = space.global_shape(i);
                DenseLayer::init_uniform(rows, cols, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(space: &SearchSpace) -> Self {
        let layers = (0..=space.depth())
            .map(|i| {
                let (rows, cols) = space.global_shape(i);
                DenseLayer::zeros(rows, cols)
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(space: &SearchSpace, layers: Vec<DenseLayer>) -> Result<Self> {
        let store = Self { layers };
        store.check_space(space)?;
        Ok(store)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn check_space(&self, space: &SearchSpace) -> Result<()> {
        if self.layers.len() != space.depth() + 1 {
            return Err(Error::Shape(format!(
                "store has {} layers, space needs {}",
                self.layers.len(),
                space.depth() + 1
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.dim() != space.global_shape(i) || layer.bias.len() != space.global_shape(i).1 {
                return Err(Error::Shape(format!(
                    "store layer {i} is {:?}, space expects {:?}",
                    layer.weights.dim(),
                    space.global_shape(i)
                )));
            }
        }
        Ok(())
    }

    /// The full global model.
    pub fn model(&self) -> MlpModel {
        MlpModel {
            layers: self.layers.clone(),
            hidden_activation: crate::nn::Activation::Relu6,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weights.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Header line with dims, then every value as f64 little-endian in layer order.
    pub fn save(&self, space: &SearchSpace, path: &Path) -> Result<()> {
        self.check_space(space)?;
        let mut bytes = format!(
            "{CHECKPOINT_MAGIC} in_dim={} hidden={} depth={} classes={}\n",
            space.in_dim(),
            space.hidden(),
            space.depth(),
            space.classes()
        )
        .into_bytes();
        for v in self.flatten() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(space: &SearchSpace, path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
        let expected = format!(
            "{CHECKPOINT_MAGIC} in_dim={} hidden={} depth={} classes={}",
            space.in_dim(),
            space.hidden(),
            space.depth(),
            space.classes()
        );
        if header.trim_end_matches('\n') != expected {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: format!("checkpoint header `{}` does not match `{expected}`", header.trim_end()),
            });
        }
        let mut body = Vec::new();
        reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
        let mut store = ParamStore::zeros(space);
        if body.len() != store.param_count() * 8 {
            return Err(Error::Parse {
                path: path.into(),
                line: 2,
                message: format!(
                    "checkpoint body has {} bytes, expected {}",
                    body.len(),
                    store.param_count() * 8
                ),
            });
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        for layer in &mut store.layers {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = values.next().expect("length checked");
            }
        }
        Ok(store)
    }
}

/// A trained subnet returned by one client.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: usize,
    pub spec: SubnetSpec,
    pub slice_map: LayerSliceMap,
    pub model: MlpModel,
    /// Data share `p_i`.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    #[default]
    DataShare,
    Uniform,
}

/// Total covering weight at every global position.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

fn check_update(update: &ClientUpdate, space: &SearchSpace) -> Result<()> {
    if !update.slice_map.matches(&update.model) {
        return Err(Error::Contract(format!(
            "client {} parameters do not match its slice map",
            update.client
        )));
    }
    for e in &update.slice_map.entries {
        if e.layer > space.depth() {
            return Err(Error::Contract(format!("slice addresses layer {}", e.layer)));
        }
        let (rows, cols) = space.global_shape(e.layer);
        if e.rows.start != 0 || e.cols.start != 0 || e.rows.end > rows || e.cols.end > cols {
            return Err(Error::Contract(format!(
                "client {} slice {:?}x{:?} is not a prefix of layer {} ({rows}x{cols})",
                update.client, e.rows, e.cols, e.layer
            )));
        }
    }
    if !(update.weight > 0.0 && update.weight.is_finite()) {
        return Err(Error::Contract(format!(
            "client {} has non-positive weight {}",
            update.client, update.weight
        )));
    }
    Ok(())
}

fn effective_weights(updates: &[ClientUpdate], weighting: Weighting) -> Vec<f64> {
    match weighting {
        Weighting::DataShare => {
            let total: f64 = updates.iter().map(|u| u.weight).sum();
            updates.iter().map(|u| u.weight / total).collect()
        }
        Weighting::Uniform => vec![1.0 / updates.len() as f64; updates.len()],
    }
}

pub fn scatter_count(updates: &[ClientUpdate], space: &SearchSpace) -> Result<Coverage> {
    scatter_count_weighted(updates, space, Weighting::DataShare)
}

pub fn scatter_count_weighted(updates: &[ClientUpdate], space: &SearchSpace, weighting: Weighting) -> Result<Coverage> {
    for u in updates {
        check_update(u, space)?;
    }
    let mut layers: Vec<_> = (0..=space.depth())
        .map(|i| {
            let (r, c) = space.global_shape(i);
            (Array2::zeros((r, c)), Array1::zeros(c))
        })
        .collect();
    if updates.is_empty() {
        return Ok(Coverage { layers });
    }
    let weights = effective_weights(updates, weighting);
    for (u, &p) in updates.iter().zip(&weights) {
        for e in &u.slice_map.entries {
            let (w, b) = &mut layers[e.layer];
            w.slice_mut(s![e.rows.clone(), e.cols.clone()]).mapv_inplace(|v| v + p);
            b.slice_mut(s![e.cols.clone()]).mapv_inplace(|v| v + p);
        }
    }
    Ok(Coverage { layers })
}

/// Weighted element-wise mean over covering clients; uncovered positions are untouched.
pub fn aggregate(store: &mut ParamStore, updates: &[ClientUpdate], space: &SearchSpace, weighting: Weighting) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::Contract("aggregate needs at least one update".into()));
    }
    store.check_space(space)?;
    for u in updates {
        check_update(u, space)?;
    }
    let weights = effective_weights(updates, weighting);
    for (li, global) in store.layers.iter_mut().enumerate() {
        let mut num_w = Array2::<f64>::zeros(global.weights.dim());
        let mut den_w = Array2::<f64>::zeros(global.weights.dim());
        let mut num_b = Array1::<f64>::zeros(global.bias.len());
        let mut den_b = Array1::<f64>::zeros(global.bias.len());
        for (u, &p) in updates.iter().zip(&weights) {
            for (e, layer) in u.slice_map.entries.iter().zip(&u.model.layers) {
                if e.layer != li {
                    continue;
                }
                let rows = e.rows.clone();
                let cols = e.cols.clone();
                Zip::from(num_w.slice_mut(s![rows.clone(), cols.clone()]))
                    .and(den_w.slice_mut(s![rows, cols.clone()]))
                    .and(&layer.weights)
                    .for_each(|n, d, &v| {
                        *n += p * v;
                        *d += p;
                    });
                Zip::from(num_b.slice_mut(s![cols.clone()]))
                    .and(den_b.slice_mut(s![cols]))
                    .and(&layer.bias)
                    .for_each(|n, d, &v| {
                        *n += p * v;
                        *d += p;
                    });
            }
        }
        Zip::from(&mut global.weights)
            .and(&num_w)
            .and(&den_w)
            .for_each(|g, &n, &d| {
                if d > 0.0 {
                    *g = n / d;
                }
            });
        Zip::from(&mut global.bias)
            .and(&num_b)
            .and(&den_b)
            .for_each(|g, &n, &d| {
                if d > 0.0 {
                    *g = n / d;
                }
            });
    }
    if !store.is_finite() {
        return Err(Error::NonFinite("aggregated store".into()));
    }
    Ok(())
}

/// Drops failed clients and rescales the remaining weights to sum to one.
pub fn failure_filter(updates: Vec<ClientUpdate>, failures: &HashSet<usize>) -> Vec<ClientUpdate> {
    let mut kept: Vec<_> = updates
        .into_iter()
        .filter(|u| !failures.contains(&u.client))
        .collect();
    let total: f64 = kept.iter().map(|u| u.weight).sum();
    if total > 0.0 {
        for u in &mut kept {
            u.weight /= total;
        }
    }
    kept
}
