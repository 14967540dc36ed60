//! Synthetic multi-task datasets with controllable correlation structure
//! and label sparsity skew, plus the dataset file format.
//!
//! Generative model: each user gets a latent factor vector, each log an
//! item factor vector, and their elementwise product `q` drives every
//! task's logit through a task-specific readout plus an in-category shared
//! readout (weight `rho_in`) and a globally shared readout (weight
//! `rho_cross`). Readouts are orthonormalized so the two knobs control the
//! two correlation levels independently. Per-task biases are calibrated by
//! bisection on the realized score sample so empirical positive rates hit
//! their targets. Features are noisy views of the latents (cycled across
//! the useful columns) plus pure-noise distractor columns at the end.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{TaskCategory, TaskSpec};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("no header: dataset file is empty")]
    NoHeader,
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("bias bisection cannot reach the target positive rate for task {task}")]
    TargetRateUnreachable { task: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogsPerUser {
    pub min: usize,
    pub max: usize,
}

fn default_distractor_fraction() -> f64 {
    0.25
}

/// Declarative description of a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_users: usize,
    pub logs_per_user: LogsPerUser,
    pub feature_width: usize,
    pub latent_dim: usize,
    pub tasks: Vec<TaskSpec>,
    /// Weight of the in-category shared readout.
    pub rho_in: f64,
    /// Weight of the cross-category (global) shared readout.
    pub rho_cross: f64,
    pub noise_scale: f64,
    /// Fraction of feature columns that are pure noise.
    #[serde(default = "default_distractor_fraction")]
    pub distractor_fraction: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_users == 0 {
            return Err(DataError::InvalidSpec("n_users must be positive".into()));
        }
        if self.logs_per_user.min == 0 || self.logs_per_user.min > self.logs_per_user.max {
            return Err(DataError::InvalidSpec(
                "logs_per_user needs 1 ≤ min ≤ max".into(),
            ));
        }
        if self.tasks.is_empty() {
            return Err(DataError::InvalidSpec("at least one task".into()));
        }
        for t in &self.tasks {
            if t.positive_rate <= 0.0 || t.positive_rate >= 1.0 {
                return Err(DataError::InvalidSpec(format!(
                    "positive rate for {} must lie in (0,1), got {}",
                    t.name, t.positive_rate
                )));
            }
        }
        let mut names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.tasks.len() {
            return Err(DataError::InvalidSpec("task names must be unique".into()));
        }
        if self.feature_width < self.latent_dim {
            return Err(DataError::InvalidSpec(
                "feature_width must be ≥ latent_dim".into(),
            ));
        }
        if self.latent_dim < self.tasks.len() + 3 {
            return Err(DataError::InvalidSpec(format!(
                "latent_dim must be ≥ tasks+3 = {} to orthonormalize the readouts",
                self.tasks.len() + 3
            )));
        }
        if !(0.0..=0.9).contains(&self.distractor_fraction) {
            return Err(DataError::InvalidSpec(
                "distractor_fraction must lie in [0, 0.9]".into(),
            ));
        }
        if self.noise_scale < 0.0 || self.rho_in < 0.0 || self.rho_cross < 0.0 {
            return Err(DataError::InvalidSpec(
                "noise_scale, rho_in, rho_cross must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Materialized dataset: row-major features, per-task {0,1} labels, and the
/// per-row user id needed for grouped ranking metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task_names: Vec<String>,
    pub feature_width: usize,
    pub user_ids: Vec<u64>,
    pub features: Vec<f64>,
    pub labels: Vec<Vec<f64>>,
}

/// One minibatch view (rows copied out).
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<Vec<f64>>,
    pub user_ids: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        let w = self.feature_width;
        let mut features = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            features.extend_from_slice(&self.features[r * w..(r + 1) * w]);
        }
        Batch {
            features: Tensor::matrix(rows.len(), w, features),
            labels: self
                .labels
                .iter()
                .map(|col| rows.iter().map(|&r| col[r]).collect())
                .collect(),
            user_ids: rows.iter().map(|&r| self.user_ids[r]).collect(),
        }
    }

    /// Deterministic holdout by user: the first `ceil(train_frac · users)`
    /// users (in order of appearance) train, the rest evaluate. Splitting by
    /// user keeps grouped metrics meaningful.
    pub fn split_by_user(&self, train_frac: f64) -> (Dataset, Dataset) {
        let mut users = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for &u in &self.user_ids {
            if seen.insert(u) {
                users.push(u);
            }
        }
        let n_train = ((users.len() as f64 * train_frac).ceil() as usize).min(users.len());
        let train_users: std::collections::HashSet<u64> =
            users.iter().take(n_train).copied().collect();
        let (mut train_rows, mut eval_rows) = (Vec::new(), Vec::new());
        for (i, u) in self.user_ids.iter().enumerate() {
            if train_users.contains(u) {
                train_rows.push(i);
            } else {
                eval_rows.push(i);
            }
        }
        (self.subset(&train_rows), self.subset(&eval_rows))
    }

    fn subset(&self, rows: &[usize]) -> Dataset {
        let b = self.batch(rows);
        Dataset {
            task_names: self.task_names.clone(),
            feature_width: self.feature_width,
            user_ids: b.user_ids,
            features: b.features.data().to_vec(),
            labels: b.labels,
        }
    }

    pub fn positive_rates(&self) -> Vec<(String, f64)> {
        self.task_names
            .iter()
            .zip(&self.labels)
            .map(|(n, col)| (n.clone(), col.iter().sum::<f64>() / col.len().max(1) as f64))
            .collect()
    }
}

/// splitmix64; decorrelates per-user streams derived from (seed, user).
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn user_rng(seed: u64, user: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(user.wrapping_add(1))))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Gram-Schmidt orthonormalization of `count` random directions in R^dim.
fn orthonormal_readouts(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = normal_vec(rng, dim);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

/// Bisection on the bias so that `count(score + bias > 0) / n` hits the
/// target rate on the realized score sample.
fn calibrate_bias(scores: &[f64], target: f64, task: &str) -> Result<f64, DataError> {
    let n = scores.len() as f64;
    if (target * n).round() < 1.0 || ((1.0 - target) * n).round() < 1.0 {
        return Err(DataError::TargetRateUnreachable {
            task: task.to_string(),
        });
    }
    let rate_at = |b: f64| scores.iter().filter(|s| **s + b > 0.0).count() as f64 / n;
    let (mut lo, mut hi) = (-1e3, 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let bias = 0.5 * (lo + hi);
    let achieved = rate_at(bias);
    if (achieved - target).abs() > 0.1 * target {
        return Err(DataError::TargetRateUnreachable {
            task: task.to_string(),
        });
    }
    Ok(bias)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let k = spec.latent_dim;
    let w = spec.feature_width;
    let t_count = spec.tasks.len();
    let n_distract = (w as f64 * spec.distractor_fraction).round() as usize;
    let n_useful = w - n_distract;

    // Readouts: one per task, one per category, one global; orthonormal.
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let readouts = orthonormal_readouts(&mut master, t_count + 3, k);
    let (task_readouts, rest) = readouts.split_at(t_count);
    let cat_readout = |c: TaskCategory| match c {
        TaskCategory::Interaction => &rest[0],
        TaskCategory::Watch => &rest[1],
    };
    let global_readout = &rest[2];

    let mut user_ids = Vec::new();
    let mut features = Vec::new();
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); t_count];

    for user in 0..spec.n_users as u64 {
        let mut rng = user_rng(spec.seed, user);
        let n_logs = rng.gen_range(spec.logs_per_user.min..=spec.logs_per_user.max);
        let g = normal_vec(&mut rng, k);
        for _ in 0..n_logs {
            let h = normal_vec(&mut rng, k);
            let q: Vec<f64> = g.iter().zip(&h).map(|(a, b)| a * b).collect();

            for (ti, task) in spec.tasks.iter().enumerate() {
                let dot = |r: &[f64]| -> f64 { r.iter().zip(&q).map(|(a, b)| a * b).sum() };
                let noise: f64 = rng.sample(StandardNormal);
                let s = dot(&task_readouts[ti])
                    + spec.rho_in * dot(cat_readout(task.category))
                    + spec.rho_cross * dot(global_readout)
                    + spec.noise_scale * noise;
                scores[ti].push(s);
            }

            // Noisy views of [g; h; q] cycled over the useful columns, then
            // pure-noise distractors.
            for j in 0..n_useful {
                let base = match (j % (3 * k)) / k {
                    0 => g[j % k],
                    1 => h[j % k],
                    _ => q[j % k],
                };
                let noise: f64 = rng.sample(StandardNormal);
                features.push(base + spec.noise_scale * noise);
            }
            for _ in 0..n_distract {
                features.push(rng.sample(StandardNormal));
            }
            user_ids.push(user);
        }
    }

    let mut labels = Vec::with_capacity(t_count);
    for (ti, task) in spec.tasks.iter().enumerate() {
        let bias = calibrate_bias(&scores[ti], task.positive_rate, &task.name)?;
        labels.push(
            scores[ti]
                .iter()
                .map(|s| f64::from(*s + bias > 0.0))
                .collect(),
        );
    }

    Ok(Dataset {
        task_names: spec.tasks.iter().map(|t| t.name.clone()).collect(),
        feature_width: w,
        user_ids,
        features,
        labels,
    })
}

/// Header-bearing columnar text file: `user_id,f_0..f_{W-1},y_task0..`,
/// floats at full (round-trip) precision.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str("user_id");
    for j in 0..ds.feature_width {
        write!(out, ",f_{j}").unwrap();
    }
    for name in &ds.task_names {
        write!(out, ",y_{name}").unwrap();
    }
    out.push('\n');
    for (i, u) in ds.user_ids.iter().enumerate() {
        write!(out, "{u}").unwrap();
        for v in &ds.features[i * ds.feature_width..(i + 1) * ds.feature_width] {
            write!(out, ",{v}").unwrap();
        }
        for col in &ds.labels {
            write!(out, ",{}", col[i]).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::NoHeader)?;
    if header.trim().is_empty() {
        return Err(DataError::NoHeader);
    }

    let cols: Vec<&str> = header.split(',').collect();
    if cols[0] != "user_id" {
        return Err(DataError::Parse {
            line: 1,
            message: "header must start with user_id".into(),
        });
    }
    let feature_width = cols[1..].iter().take_while(|c| c.starts_with("f_")).count();
    let task_names: Vec<String> = cols[1 + feature_width..]
        .iter()
        .map(|c| {
            c.strip_prefix("y_")
                .map(str::to_string)
                .ok_or(DataError::Parse {
                    line: 1,
                    message: format!("expected y_<task> column, got {c}"),
                })
        })
        .collect::<Result<_, _>>()?;
    if feature_width == 0 || task_names.is_empty() {
        return Err(DataError::Parse {
            line: 1,
            message: "header needs f_* and y_* columns".into(),
        });
    }

    let mut user_ids = Vec::new();
    let mut features = Vec::new();
    let mut labels: Vec<Vec<f64>> = vec![Vec::new(); task_names.len()];
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + feature_width + task_names.len() {
            return Err(DataError::Parse {
                line: line_no,
                message: format!(
                    "expected {} fields, got {}",
                    1 + feature_width + task_names.len(),
                    fields.len()
                ),
            });
        }
        let uid: u64 = fields[0].parse().map_err(|_| DataError::Parse {
            line: line_no,
            message: format!("bad user_id {:?}", fields[0]),
        })?;
        user_ids.push(uid);
        for f in &fields[1..1 + feature_width] {
            let v: f64 = f.parse().map_err(|_| DataError::Parse {
                line: line_no,
                message: format!("bad feature value {f:?}"),
            })?;
            features.push(v);
        }
        for (ti, f) in fields[1 + feature_width..].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| DataError::Parse {
                line: line_no,
                message: format!("bad label {f:?}"),
            })?;
            if v != 0.0 && v != 1.0 {
                return Err(DataError::Parse {
                    line: line_no,
                    message: format!("label must be 0 or 1, got {v}"),
                });
            }
            labels[ti].push(v);
        }
    }

    Ok(Dataset {
        task_names,
        feature_width,
        user_ids,
        features,
        labels,
    })
}
