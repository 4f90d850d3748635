//! Synthetic classification data, client partitioning and per-client standardization.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Norm of every class mean.
pub const CLASS_SEPARATION: f64 = 3.0;

const MAX_PARTITION_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Label entropy in nats.
    pub fn label_entropy(&self) -> f64 {
        let n = self.len() as f64;
        self.class_histogram()
            .into_iter()
            .filter(|&c| c > 0)
            .map(|c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }

    /// Rows `features...,label`, no header.
    pub fn load_csv(path: &Path, classes: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => Error::Parse {
                    path: path.into(),
                    line: 0,
                    message: format!("{other:?}"),
                },
            })?;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        for (i, record) in reader.records().enumerate() {
            let line = i + 1;
            let record = record?;
            let err = |message: String| Error::Parse {
                path: path.into(),
                line,
                message,
            };
            if record.len() < 2 {
                return Err(err("need at least one feature and a label".into()));
            }
            let w = record.len() - 1;
            if *width.get_or_insert(w) != w {
                return Err(err(format!("row has {w} features, earlier rows had {}", width.unwrap())));
            }
            for field in record.iter().take(w) {
                values.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| err(format!("bad feature `{field}`: {e}")))?,
                );
            }
            let label = record[w].trim();
            let label: usize = label.parse().map_err(|e| err(format!("bad label `{label}`: {e}")))?;
            if label >= classes {
                return Err(err(format!("label {label} outside {classes} classes")));
            }
            labels.push(label);
        }
        let width = width.ok_or_else(|| Error::Parse {
            path: path.into(),
            line: 1,
            message: "dataset is empty".into(),
        })?;
        let features = Array2::from_shape_vec((labels.len(), width), values).expect("rectangular rows");
        Dataset::new(features, labels, classes)
    }
}

/// `per_class` samples of each class from `N(mu_c, I)`, with every `mu_c` drawn
/// once on the sphere of radius [`CLASS_SEPARATION`].
pub fn gen_synthetic(classes: usize, in_dim: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || in_dim == 0 || per_class == 0 {
        return Err(Error::Contract("classes, in_dim and per_class must be positive".into()));
    }
    let mut rng = RngStream::seed_from_u64(seed);
    let means: Vec<Array1<f64>> = (0..classes)
        .map(|_| {
            let z = Array1::from_shape_simple_fn(in_dim, || rng.sample::<f64, _>(StandardNormal));
            let norm = z.dot(&z).sqrt().max(f64::MIN_POSITIVE);
            z * (CLASS_SEPARATION / norm)
        })
        .collect();
    let n = classes * per_class;
    let mut features = Array2::zeros((n, in_dim));
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for k in 0..per_class {
            let mut row = features.row_mut(c * per_class + k);
            for (slot, m) in row.iter_mut().zip(mean) {
                *slot = m + rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, classes)
}

/// Random split into `(train, test)` with `round(fraction * n)` test rows.
pub fn split_test<R: Rng + ?Sized>(data: &Dataset, fraction: f64, rng: &mut R) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Contract(format!("test fraction {fraction} outside [0, 1)")));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let n_test = ((fraction * data.len() as f64).round() as usize).min(data.len().saturating_sub(1));
    let (test, train) = idx.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.select(&train), data.select(&test)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub clients: usize,
    pub seed: u64,
}

/// Row indices per client; disjoint and covering the dataset.
pub fn partition_indices(data: &Dataset, plan: &PartitionPlan) -> Result<Vec<Vec<usize>>> {
    if data.is_empty() {
        return Err(Error::Partition("dataset is empty".into()));
    }
    if plan.clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if plan.clients > data.len() {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {} clients",
            data.len(),
            plan.clients
        )));
    }
    let mut rng = RngStream::seed_from_u64(plan.seed);
    match plan.scheme {
        PartitionScheme::Iid => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            let mut out = vec![Vec::new(); plan.clients];
            for (i, row) in idx.into_iter().enumerate() {
                out[i % plan.clients].push(row);
            }
            Ok(out)
        }
        PartitionScheme::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::Partition(format!("Dirichlet alpha must be positive, got {alpha}")));
            }
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Partition(e.to_string()))?;
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes];
            for (i, &l) in data.labels.iter().enumerate() {
                by_class[l].push(i);
            }
            for _ in 0..MAX_PARTITION_ATTEMPTS {
                let mut out = vec![Vec::new(); plan.clients];
                for rows in &by_class {
                    let mut rows = rows.clone();
                    rows.shuffle(&mut rng);
                    let draws: Vec<f64> = (0..plan.clients).map(|_| gamma.sample(&mut rng)).collect();
                    let total: f64 = draws.iter().sum();
                    // Degenerate gamma draws underflow to zero for tiny alpha.
                    let props: Vec<f64> = if total > 0.0 {
                        draws.iter().map(|d| d / total).collect()
                    } else {
                        let mut p = vec![0.0; plan.clients];
                        p[rng.random_range(0..plan.clients)] = 1.0;
                        p
                    };
                    let mut start = 0;
                    let mut acc = 0.0;
                    for (client, p) in props.iter().enumerate() {
                        acc += p;
                        let end = if client + 1 == plan.clients {
                            rows.len()
                        } else {
                            ((acc * rows.len() as f64).round() as usize).clamp(start, rows.len())
                        };
                        out[client].extend_from_slice(&rows[start..end]);
                        start = end;
                    }
                }
                if out.iter().all(|c| !c.is_empty()) {
                    for c in &mut out {
                        c.sort_unstable();
                    }
                    return Ok(out);
                }
            }
            Err(Error::Partition(format!(
                "some client stayed empty after {MAX_PARTITION_ATTEMPTS} Dirichlet draws"
            )))
        }
    }
}

pub fn partition(data: &Dataset, plan: &PartitionPlan) -> Result<Vec<Dataset>> {
    Ok(partition_indices(data, plan)?
        .iter()
        .map(|rows| data.select(rows))
        .collect())
}

/// Per-feature mean and standard deviation (population).
pub fn moments(features: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = features.nrows().max(1) as f64;
    let mean = features.sum_axis(Axis(0)) / n;
    let var = features
        .axis_iter(Axis(0))
        .fold(Array1::zeros(features.ncols()), |acc: Array1<f64>, row| {
            let d = &row - &mean;
            acc + &d * &d
        })
        / n;
    (mean, var.mapv(f64::sqrt))
}

/// Applies `(x - mean) / std`, mapping constant features to zero.
pub fn apply_standardization(data: &Dataset, mean: &Array1<f64>, std: &Array1<f64>) -> Dataset {
    let mut features = data.features.clone();
    for mut row in features.axis_iter_mut(Axis(0)) {
        for ((x, m), s) in row.iter_mut().zip(mean).zip(std) {
            *x = if *s > 1e-12 { (*x - m) / s } else { 0.0 };
        }
    }
    Dataset {
        features,
        labels: data.labels.clone(),
        classes: data.classes,
    }
}

/// Zero mean and unit variance per feature, from this dataset's own statistics.
pub fn standardize(data: &Dataset) -> Result<Dataset> {
    if data.is_empty() {
        return Err(Error::Contract("cannot standardize an empty dataset".into()));
    }
    let (mean, std) = moments(&data.features);
    Ok(apply_standardization(data, &mean, &std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_determinism() {
        let d = gen_synthetic(2, 3, 5, 1).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.class_histogram(), vec![5, 5]);
        assert_eq!(d, gen_synthetic(2, 3, 5, 1).unwrap());
        assert_ne!(d, gen_synthetic(2, 3, 5, 2).unwrap());
    }

    #[test]
    fn iid_split_is_even() {
        let d = gen_synthetic(4, 2, 25, 0).unwrap();
        let parts = partition(&d, &PartitionPlan { scheme: PartitionScheme::Iid, clients: 4, seed: 3 }).unwrap();
        for p in &parts {
            assert!((24..=26).contains(&p.len()));
        }
    }

    #[test]
    fn partition_is_exact() {
        let d = gen_synthetic(5, 2, 40, 0).unwrap();
        for scheme in [PartitionScheme::Iid, PartitionScheme::Dirichlet { alpha: 0.3 }] {
            let parts = partition_indices(&d, &PartitionPlan { scheme, clients: 7, seed: 11 }).unwrap();
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
            assert!(parts.iter().all(|p| !p.is_empty()));
        }
    }

    #[test]
    fn too_many_clients_is_an_error() {
        let d = gen_synthetic(2, 2, 2, 0).unwrap();
        assert!(partition(&d, &PartitionPlan { scheme: PartitionScheme::Iid, clients: 5, seed: 0 }).is_err());
        assert!(partition(&d, &PartitionPlan { scheme: PartitionScheme::Dirichlet { alpha: 0.0 }, clients: 2, seed: 0 }).is_err());
    }

    #[test]
    fn standardization_rules() {
        let d = gen_synthetic(3, 4, 30, 5).unwrap();
        let s = standardize(&d).unwrap();
        let (mean, std) = moments(&s.features);
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
        assert!(std.iter().all(|v| (v * v - 1.0).abs() < 1e-6));
        let again = standardize(&s).unwrap();
        for (a, b) in again.features.iter().zip(s.features.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let mut c = d.clone();
        c.features.column_mut(1).fill(7.0);
        let sc = standardize(&c).unwrap();
        assert!(sc.features.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn test_split_sizes() {
        let d = gen_synthetic(10, 2, 10, 0).unwrap();
        let (train, test) = split_test(&d, 0.1, &mut RngStream::seed_from_u64(0)).unwrap();
        assert_eq!(test.len(), 10);
        assert_eq!(train.len(), 90);
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "0.5,1.0,1\n-1,2,0\n").unwrap();
        let d = Dataset::load_csv(&p, 2).unwrap();
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.features[[1, 1]], 2.0);
        std::fs::write(&p, "0.5,1.0,1\n-1,x,0\n").unwrap();
        assert!(matches!(Dataset::load_csv(&p, 2), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, "0.5,1.0,3\n").unwrap();
        assert!(Dataset::load_csv(&p, 2).is_err());
    }
}
