//! Class-incremental task sequences: synthetic Gaussian blobs, CSV ingestion
//! and a fixed random feature projection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Fraction of each class assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    class_set: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(input("dataset must contain at least one sample"));
        }
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(input(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        let class_set = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        Ok(LabeledDataset {
            features,
            labels,
            class_set,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_set(&self) -> &[usize] {
        &self.class_set
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Row-wise concatenation of several datasets.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a LabeledDataset>) -> Result<LabeledDataset> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut dim = None;
        for p in parts {
            if *dim.get_or_insert(p.dim()) != p.dim() {
                return Err(input("datasets have different feature dimensions"));
            }
            data.extend_from_slice(p.features.data());
            labels.extend_from_slice(&p.labels);
        }
        let d = dim.ok_or_else(|| input("nothing to concatenate"))?;
        LabeledDataset::new(Tensor::new(vec![labels.len(), d], data)?, labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub within_class_std: f64,
    pub seed: u64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.classes_per_task == 0 || self.feature_dim == 0 {
            return Err(input("num_tasks, classes_per_task and feature_dim must be >= 1"));
        }
        if self.samples_per_class < 2 {
            return Err(input("samples_per_class must be >= 2 to fill both splits"));
        }
        if !(self.class_separation > 0.0) || !(self.within_class_std > 0.0) {
            return Err(input("class_separation and within_class_std must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    tasks: Vec<Task>,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(input("stream needs at least one task"));
        }
        let mut seen = BTreeSet::new();
        for (t, task) in tasks.iter().enumerate() {
            if task.train.class_set() != task.test.class_set() {
                return Err(input(format!("task {}: train/test class sets differ", t + 1)));
            }
            if task.train.dim() != tasks[0].train.dim() || task.test.dim() != tasks[0].train.dim() {
                return Err(input(format!("task {}: feature dimension differs", t + 1)));
            }
            for &c in task.train.class_set() {
                if !seen.insert(c) {
                    return Err(input(format!("class {c} appears in more than one task")));
                }
            }
        }
        Ok(TaskStream { tasks })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.tasks[0].train.dim()
    }

    pub fn class_sets(&self) -> Vec<&[usize]> {
        self.tasks.iter().map(|t| t.train.class_set()).collect()
    }

    /// Pooled test data of tasks `1..=t` (1-based).
    pub fn seen_test(&self, t: usize) -> Result<LabeledDataset> {
        LabeledDataset::concat(self.tasks[..t].iter().map(|k| &k.test))
    }

    pub fn pooled_train(&self) -> Result<LabeledDataset> {
        LabeledDataset::concat(self.tasks.iter().map(|k| &k.train))
    }

    /// Applies `f` to every feature matrix.
    pub fn map_features(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<TaskStream> {
        let map = |d: &LabeledDataset| -> Result<LabeledDataset> {
            LabeledDataset::new(f(&d.features)?, d.labels.clone())
        };
        TaskStream::new(
            self.tasks
                .iter()
                .map(|t| {
                    Ok(Task {
                        train: map(&t.train)?,
                        test: map(&t.test)?,
                    })
                })
                .collect::<Result<_>>()?,
        )
    }
}

/// Splits per-class sample indices into (train, test) by hashing on `seed`.
/// Each sample's assignment depends only on `(seed, class, index)`.
fn split_class(seed: u64, class: usize, n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (derive_seed(seed, "split", ((class as u64) << 32) | i as u64), i));
    let n_train = ((n as f64 * TRAIN_FRACTION).floor() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Gaussian blobs: class means on a sphere of radius `class_separation`,
/// isotropic noise of std `within_class_std`. Class ids are contiguous in
/// task order.
pub fn gen_gaussian_stream(config: &StreamConfig) -> Result<TaskStream> {
    config.validate()?;
    let d = config.feature_dim;
    let noise = Normal::new(0.0, config.within_class_std).expect("positive std");
    let mut tasks = Vec::with_capacity(config.num_tasks);
    for t in 0..config.num_tasks {
        let mut tr = (Vec::new(), Vec::new());
        let mut te = (Vec::new(), Vec::new());
        for k in 0..config.classes_per_task {
            let c = t * config.classes_per_task + k;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "class", c as u64));
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let mean: Vec<f64> = dir.iter().map(|v| v / norm * config.class_separation).collect();
            let samples: Vec<Vec<f64>> = (0..config.samples_per_class)
                .map(|_| mean.iter().map(|m| m + noise.sample(&mut rng)).collect())
                .collect();
            let (train_idx, test_idx) = split_class(config.seed, c, config.samples_per_class);
            for i in train_idx {
                tr.0.extend_from_slice(&samples[i]);
                tr.1.push(c);
            }
            for i in test_idx {
                te.0.extend_from_slice(&samples[i]);
                te.1.push(c);
            }
        }
        tasks.push(Task {
            train: LabeledDataset::new(Tensor::new(vec![tr.1.len(), d], tr.0)?, tr.1)?,
            test: LabeledDataset::new(Tensor::new(vec![te.1.len(), d], te.0)?, te.1)?,
        });
    }
    TaskStream::new(tasks)
}

/// Parses a header-less `label,f1,...,fd` file into one dataset.
pub fn load_csv_dataset(path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<LabeledDataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_str = fields.next().unwrap_or("").trim();
        let label: usize = label_str.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("invalid label `{label_str}`"),
        })?;
        let mut n = 0;
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid feature `{f}`"),
            })?;
            data.push(v);
            n += 1;
        }
        if n == 0 {
            return Err(Error::Parse {
                line: line_no,
                msg: "row has no features".into(),
            });
        }
        match dim {
            None => dim = Some(n),
            Some(d) if d != n => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {d} features, found {n}"),
                })
            }
            _ => {}
        }
        labels.push(label);
    }
    let d = dim.ok_or_else(|| input("CSV contains no rows"))?;
    LabeledDataset::new(Tensor::new(vec![labels.len(), d], data)?, labels)
}

fn check_partition(partition: &[Vec<usize>], observed: &[usize]) -> Result<BTreeMap<usize, usize>> {
    let mut owner = BTreeMap::new();
    for (t, classes) in partition.iter().enumerate() {
        if classes.is_empty() {
            return Err(input(format!("task {} has no classes", t + 1)));
        }
        for &c in classes {
            if owner.insert(c, t).is_some() {
                return Err(input(format!("class {c} listed in more than one task")));
            }
        }
    }
    if let Some(c) = observed.iter().find(|c| !owner.contains_key(c)) {
        return Err(input(format!("label {c} is not covered by the task partition")));
    }
    Ok(owner)
}

fn partition_dataset(ds: &LabeledDataset, owner: &BTreeMap<usize, usize>, num_tasks: usize) -> Result<Vec<Vec<usize>>> {
    let mut rows = vec![Vec::new(); num_tasks];
    for (i, c) in ds.labels.iter().enumerate() {
        rows[owner[c]].push(i);
    }
    Ok(rows)
}

/// Loads one CSV and partitions it into tasks; each class is split 80/20
/// into train/test by the same hashed rule as the synthetic generator.
pub fn load_csv_stream(path: &Path, task_partition: &[Vec<usize>]) -> Result<TaskStream> {
    let ds = load_csv_dataset(path)?;
    let owner = check_partition(task_partition, ds.class_set())?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in ds.labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut tasks = Vec::new();
    for (t, classes) in task_partition.iter().enumerate() {
        let mut tr = Vec::new();
        let mut te = Vec::new();
        for c in classes {
            let Some(rows) = by_class.get(c) else {
                return Err(input(format!("class {c} of task {} has no rows", t + 1)));
            };
            if rows.len() < 2 {
                return Err(input(format!("class {c} needs at least 2 rows to split")));
            }
            let (a, b) = split_class(0, *c, rows.len());
            tr.extend(a.into_iter().map(|i| rows[i]));
            te.extend(b.into_iter().map(|i| rows[i]));
        }
        tr.sort_unstable();
        te.sort_unstable();
        debug_assert_eq!(owner[&classes[0]], t);
        tasks.push(Task {
            train: ds.subset(&tr)?,
            test: ds.subset(&te)?,
        });
    }
    TaskStream::new(tasks)
}

/// Loads pre-split train and test CSVs and partitions both into tasks.
pub fn load_csv_stream_split(train: &Path, test: &Path, task_partition: &[Vec<usize>]) -> Result<TaskStream> {
    let tr = load_csv_dataset(train)?;
    let te = load_csv_dataset(test)?;
    let owner = check_partition(task_partition, tr.class_set())?;
    check_partition(task_partition, te.class_set())?;
    let n = task_partition.len();
    let tr_rows = partition_dataset(&tr, &owner, n)?;
    let te_rows = partition_dataset(&te, &owner, n)?;
    let tasks = tr_rows
        .iter()
        .zip(&te_rows)
        .map(|(a, b)| {
            Ok(Task {
                train: tr.subset(a)?,
                test: te.subset(b)?,
            })
        })
        .collect::<Result<_>>()?;
    TaskStream::new(tasks)
}

/// Serialises a dataset as header-less CSV with shortest round-trip floats.
pub fn dataset_to_csv(ds: &LabeledDataset) -> String {
    let mut out = String::new();
    for (i, &y) in ds.labels.iter().enumerate() {
        let _ = write!(out, "{y}");
        for v in ds.features.row(i) {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

/// Replaces features with `tanh(R x)` using the given `[proj_dim, d]` matrix.
pub fn apply_projection(stream: &TaskStream, r: &Tensor) -> Result<TaskStream> {
    if r.shape().len() != 2 || r.cols() != stream.dim() {
        return Err(input(format!(
            "projection {:?} does not match feature dim {}",
            r.shape(),
            stream.dim()
        )));
    }
    let p = r.rows();
    let d = r.cols();
    stream.map_features(|x| {
        let n = x.rows();
        let mut out = Vec::with_capacity(n * p);
        for i in 0..n {
            let row = x.row(i);
            for k in 0..p {
                let z: f64 = r.data()[k * d..(k + 1) * d].iter().zip(row).map(|(a, b)| a * b).sum();
                out.push(z.tanh());
            }
        }
        Tensor::new(vec![n, p], out)
    })
}

/// Seeded random projection shared across all tasks; entries ~ N(0, 1/d).
pub fn projection_matrix(dim: usize, proj_dim: usize, seed: u64) -> Result<Tensor> {
    if proj_dim == 0 {
        return Err(input("proj_dim must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "projection", 0));
    let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("valid std");
    Tensor::new(
        vec![proj_dim, dim],
        (0..proj_dim * dim).map(|_| normal.sample(&mut rng)).collect(),
    )
}

pub fn frozen_feature_projection(stream: &TaskStream, proj_dim: usize, seed: u64) -> Result<TaskStream> {
    let r = projection_matrix(stream.dim(), proj_dim, seed)?;
    apply_projection(stream, &r)
}
