//! Gate-weight and expert-output diagnostics, and the three pathology
//! detectors built on them: expert collapse (an expert starved or
//! monopolized while its output scale diverges), expert degradation (a
//! shared expert occupied by one task), and expert underfitting (a task
//! ignoring its own specific experts).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{Architecture, ExpertRole, GateScope, ModelError};
use crate::data::Batch;
use crate::tape::{Mode, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertInfo {
    pub name: String,
    pub role: ExpertRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStats {
    pub mean: f64,
    pub std: f64,
    pub zero_fraction: f64,
}

/// Aggregated routing picture over an eval set: per-task mean gate weight
/// per expert, per-expert output statistics, and each expert's weight-mass
/// share per task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateReport {
    pub schema_version: u32,
    pub rows: usize,
    pub tasks: Vec<String>,
    pub experts: Vec<ExpertInfo>,
    /// `[task][expert]`, `None` where the task's gate cannot see the expert.
    pub task_weights: Vec<Vec<Option<f64>>>,
    /// `[expert][task]`: the fraction of the expert's total incoming weight
    /// mass contributed by each task (zeros when the expert is ungated).
    pub weight_share: Vec<Vec<f64>>,
    pub expert_stats: Vec<ExpertStats>,
}

impl GateReport {
    pub fn expert_index(&self, name: &str) -> Option<usize> {
        self.experts.iter().position(|e| e.name == name)
    }

    pub fn mean_weight(&self, task: &str, expert: &str) -> Option<f64> {
        let ti = self.tasks.iter().position(|t| t == task)?;
        let ei = self.expert_index(expert)?;
        self.task_weights[ti][ei]
    }

    /// Total weight a task assigns to its own specific experts, when any.
    pub fn specific_weight(&self, task: &str) -> Option<f64> {
        let ti = self.tasks.iter().position(|t| t == task)?;
        let mut total = 0.0;
        let mut any = false;
        for (ei, info) in self.experts.iter().enumerate() {
            if info.role == ExpertRole::Specific(task.to_string()) {
                if let Some(w) = self.task_weights[ti][ei] {
                    total += w;
                    any = true;
                }
            }
        }
        any.then_some(total)
    }

    /// Heatmap-ready CSV matrix, tasks × experts; empty cells where a task
    /// cannot see an expert.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for e in &self.experts {
            write!(out, ",{}", e.name).unwrap();
        }
        out.push('\n');
        for (ti, task) in self.tasks.iter().enumerate() {
            out.push_str(task);
            for w in &self.task_weights[ti] {
                match w {
                    Some(v) => write!(out, ",{v}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Detection thresholds; defaults operationalize the reported magnitudes of
/// the three pathologies. All configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathologyThresholds {
    /// Collapse when an expert's zero-activation fraction exceeds this.
    pub zero_fraction: f64,
    /// …or some task's mean weight on it exceeds this…
    pub monopoly_weight: f64,
    /// …while its output std is this many times off the median expert std.
    pub dispersion_ratio: f64,
    /// Degradation when a shared expert's max per-task weight-mass share
    /// exceeds this.
    pub degradation_share: f64,
    /// Underfitting when a task's total weight on its own specific experts
    /// falls below this.
    pub underfit_weight: f64,
}

impl Default for PathologyThresholds {
    fn default() -> Self {
        PathologyThresholds {
            zero_fraction: 0.9,
            monopoly_weight: 0.98,
            dispersion_ratio: 10.0,
            degradation_share: 0.9,
            underfit_weight: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseFlag {
    pub expert: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationFlag {
    pub expert: String,
    pub dominant_task: String,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnderfitFlag {
    pub task: String,
    pub specific_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologyFlags {
    pub schema_version: u32,
    pub thresholds: PathologyThresholds,
    pub collapse: Vec<CollapseFlag>,
    pub degradation: Vec<DegradationFlag>,
    pub underfitting: Vec<UnderfitFlag>,
}

impl PathologyFlags {
    pub fn is_clean(&self) -> bool {
        self.collapse.is_empty() && self.degradation.is_empty() && self.underfitting.is_empty()
    }
}

/// Averages task-gate weights and expert output statistics over eval
/// batches (inference mode, frozen statistics).
pub fn collect_gate_report(
    model: &mut dyn Architecture,
    batches: &[Batch],
) -> Result<GateReport, ModelError> {
    assert!(!batches.is_empty(), "need at least one batch");
    let tasks: Vec<String> = model.tasks().iter().map(|t| t.name.clone()).collect();

    let mut experts: Vec<ExpertInfo> = Vec::new();
    let mut expert_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut weight_sums: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); tasks.len()];
    let mut out_sum: Vec<f64> = Vec::new();
    let mut out_sumsq: Vec<f64> = Vec::new();
    let mut out_zero: Vec<usize> = Vec::new();
    let mut out_count: Vec<usize> = Vec::new();
    let mut rows = 0;

    for batch in batches {
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, &batch.features, Mode::Infer)?;
        let b = batch.features.shape()[0];
        rows += b;

        for e in &trace.experts {
            let idx = *expert_index.entry(e.name.clone()).or_insert_with(|| {
                experts.push(ExpertInfo {
                    name: e.name.clone(),
                    role: e.role.clone(),
                });
                out_sum.push(0.0);
                out_sumsq.push(0.0);
                out_zero.push(0);
                out_count.push(0);
                experts.len() - 1
            });
            let data = tape.value(e.post_act).data();
            out_count[idx] += data.len();
            for v in data {
                out_sum[idx] += v;
                out_sumsq[idx] += v * v;
                if *v == 0.0 {
                    out_zero[idx] += 1;
                }
            }
        }

        for g in &trace.gates {
            let GateScope::Task(task) = &g.scope else {
                continue;
            };
            let ti = tasks.iter().position(|t| t == task).expect("known task");
            let w = tape.value(g.weights);
            let n = w.cols();
            for (col, expert_name) in g.expert_names.iter().enumerate() {
                let ei = expert_index[expert_name];
                let col_sum: f64 = (0..b).map(|r| w.data()[r * n + col]).sum();
                *weight_sums[ti].entry(ei).or_insert(0.0) += col_sum;
            }
        }
    }

    let task_weights: Vec<Vec<Option<f64>>> = weight_sums
        .iter()
        .map(|sums| {
            (0..experts.len())
                .map(|ei| sums.get(&ei).map(|s| s / rows as f64))
                .collect()
        })
        .collect();

    // Share of each expert's incoming mass per task.
    let mut weight_share = vec![vec![0.0; tasks.len()]; experts.len()];
    for ei in 0..experts.len() {
        let total: f64 = task_weights.iter().filter_map(|row| row[ei]).sum();
        if total > 0.0 {
            for (ti, row) in task_weights.iter().enumerate() {
                if let Some(w) = row[ei] {
                    weight_share[ei][ti] = w / total;
                }
            }
        }
    }

    let expert_stats = (0..experts.len())
        .map(|i| {
            let n = out_count[i] as f64;
            let mean = out_sum[i] / n;
            let var = (out_sumsq[i] / n - mean * mean).max(0.0);
            ExpertStats {
                mean,
                std: var.sqrt(),
                zero_fraction: out_zero[i] as f64 / n,
            }
        })
        .collect();

    Ok(GateReport {
        schema_version: 1,
        rows,
        tasks,
        experts,
        task_weights,
        weight_share,
        expert_stats,
    })
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Applies the thresholded detectors to a [`GateReport`].
pub fn detect_pathologies(report: &GateReport, th: &PathologyThresholds) -> PathologyFlags {
    let mut flags = PathologyFlags {
        schema_version: 1,
        thresholds: *th,
        collapse: Vec::new(),
        degradation: Vec::new(),
        underfitting: Vec::new(),
    };

    let med_std = median(report.expert_stats.iter().map(|s| s.std).collect());

    for (ei, info) in report.experts.iter().enumerate() {
        let stats = &report.expert_stats[ei];
        if stats.zero_fraction > th.zero_fraction {
            flags.collapse.push(CollapseFlag {
                expert: info.name.clone(),
                reason: format!("zero-activation fraction {:.4}", stats.zero_fraction),
            });
            continue;
        }
        let max_weight = report
            .task_weights
            .iter()
            .filter_map(|row| row[ei])
            .fold(f64::NAN, f64::max);
        if max_weight.is_nan() {
            continue; // ungated expert (meta layer): monopoly route not defined
        }
        let dispersion = if stats.std > 0.0 && med_std > 0.0 {
            (stats.std / med_std).max(med_std / stats.std)
        } else if stats.std == med_std {
            1.0
        } else {
            f64::INFINITY
        };
        if max_weight > th.monopoly_weight && dispersion > th.dispersion_ratio {
            flags.collapse.push(CollapseFlag {
                expert: info.name.clone(),
                reason: format!(
                    "monopolized (max task weight {max_weight:.4}) with output std {:.3e} vs median {:.3e}",
                    stats.std, med_std
                ),
            });
        }
    }

    for (ei, info) in report.experts.iter().enumerate() {
        if !info.role.is_shared() {
            continue;
        }
        let visible = report
            .task_weights
            .iter()
            .filter(|row| row[ei].is_some())
            .count();
        if visible < 2 {
            continue;
        }
        let (mut best_ti, mut best) = (0, 0.0);
        for (ti, share) in report.weight_share[ei].iter().enumerate() {
            if *share > best {
                best = *share;
                best_ti = ti;
            }
        }
        if best > th.degradation_share {
            flags.degradation.push(DegradationFlag {
                expert: info.name.clone(),
                dominant_task: report.tasks[best_ti].clone(),
                share: best,
            });
        }
    }

    for task in &report.tasks {
        if let Some(w) = report.specific_weight(task) {
            if w < th.underfit_weight {
                flags.underfitting.push(UnderfitFlag {
                    task: task.clone(),
                    specific_weight: w,
                });
            }
        }
    }

    flags
}

pub fn write_gate_report(report: &GateReport, path: &Path) -> std::io::Result<()> {
    fs::write(
        path,
        serde_json::to_string_pretty(report).expect("serializable"),
    )
}

pub fn write_flags(flags: &PathologyFlags, path: &Path) -> std::io::Result<()> {
    fs::write(
        path,
        serde_json::to_string_pretty(flags).expect("serializable"),
    )
}
