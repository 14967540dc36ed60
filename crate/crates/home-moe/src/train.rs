//! Multi-task loss, Adam optimizer, and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{Architecture, ModelError};
use crate::data::{Batch, DataError, Dataset};
use crate::layers::Param;
use crate::metrics::{auc, gauc, MetricsError};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::TensorError;

/// Prediction clamp inside the loss; keeps log() finite.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("NaN gradient in parameter {0}")]
    NanGradient(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps_opt() -> f64 {
    1e-8
}
fn default_eval_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps_opt")]
    pub eps_opt: f64,
    /// Evaluate every N steps (0 = only after the final step).
    #[serde(default)]
    pub eval_every: usize,
    /// Stop after this many optimization steps (0 = run all epochs).
    #[serde(default)]
    pub max_steps: usize,
    /// By-user holdout fraction used by callers that split one dataset.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(batch_size: usize, epochs: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            batch_size,
            epochs,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps_opt: default_eps_opt(),
            eval_every: 0,
            max_steps: 0,
            eval_fraction: default_eval_fraction(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config(
                "batch_size must be ≥ 2 (batch normalization)".into(),
            ));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::Config("learning_rate must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(TrainError::Config("eval_fraction must lie in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("betas must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Total loss: unweighted sum over tasks of the batch-mean binary
/// cross-entropy, predictions clamped to `[ε, 1−ε]` before the logs.
pub fn bce_loss(tape: &mut Tape, preds: &[Var], labels: &[Vec<f64>]) -> Result<Var, TensorError> {
    let (total, _) = bce_loss_per_task(tape, preds, labels)?;
    Ok(total)
}

/// As [`bce_loss`], also returning each task's own loss node.
pub fn bce_loss_per_task(
    tape: &mut Tape,
    preds: &[Var],
    labels: &[Vec<f64>],
) -> Result<(Var, Vec<Var>), TensorError> {
    assert_eq!(preds.len(), labels.len(), "one label column per task");
    let mut per_task = Vec::with_capacity(preds.len());
    let mut total: Option<Var> = None;
    for (p, l) in preds.iter().zip(labels) {
        let task_loss = tape.bce_mean(*p, l, CLAMP_EPS)?;
        per_task.push(task_loss);
        total = Some(match total {
            None => task_loss,
            Some(t) => tape.add(t, task_loss)?,
        });
    }
    Ok((total.expect("at least one task"), per_task))
}

/// Adam with bias correction. State is kept per parameter id.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, param_len: usize) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps_opt,
            m: vec![Vec::new(); param_len],
            v: vec![Vec::new(); param_len],
            t: 0,
        }
    }

    /// Advances the shared step counter; call once per optimization step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// One parameter update: `p -= lr · m̂ / (√v̂ + ε)`.
    pub fn update(&mut self, param: &mut Param, grad: &[f64]) -> Result<(), TrainError> {
        if grad.iter().any(|g| g.is_nan()) {
            return Err(TrainError::NanGradient(param.name.clone()));
        }
        let m = &mut self.m[param.id];
        let v = &mut self.v[param.id];
        if m.is_empty() {
            m.resize(grad.len(), 0.0);
            v.resize(grad.len(), 0.0);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let data = param.value.data_mut();
        for i in 0..grad.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One history record: a training-loss row, or an eval row carrying ranking
/// metrics (absent metrics serialize as empty CSV cells).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub task: String,
    pub loss: Option<f64>,
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: String,
    /// `None` when the eval split is single-class for this task.
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub rows: usize,
    pub tasks: Vec<TaskEval>,
}

pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub steps: usize,
}

fn check_task_alignment(model: &dyn Architecture, ds: &Dataset) -> Result<(), TrainError> {
    let model_names: Vec<&str> = model.tasks().iter().map(|t| t.name.as_str()).collect();
    let data_names: Vec<&str> = ds.task_names.iter().map(String::as_str).collect();
    if model_names != data_names {
        return Err(TrainError::Config(format!(
            "dataset tasks {data_names:?} do not match model tasks {model_names:?}"
        )));
    }
    Ok(())
}

/// Run one forward/backward/update step on a batch; returns per-task losses.
fn train_step(
    model: &mut dyn Architecture,
    batch: &Batch,
    adam: &mut Adam,
) -> Result<Vec<f64>, TrainError> {
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, &batch.features, Mode::Train)?;
    let preds: Vec<Var> = trace.task_probs.iter().map(|(_, v)| *v).collect();
    let (total, per_task) = bce_loss_per_task(&mut tape, &preds, &batch.labels)?;
    tape.backward(total)?;

    let losses: Vec<f64> = per_task.iter().map(|v| tape.value(*v).item()).collect();
    adam.begin_step();
    let mut result = Ok(());
    model.visit_params(&mut |p| {
        if result.is_err() {
            return;
        }
        let var = trace.binding[p.id];
        match tape.grad(var) {
            Some(g) => {
                let g = g.to_vec();
                result = adam.update(p, &g);
            }
            None => {
                let zeros = vec![0.0; p.value.len()];
                result = adam.update(p, &zeros);
            }
        }
    });
    result?;
    Ok(losses)
}

/// Shuffled-minibatch training with the drop-last policy for partial
/// batches. Records per-task train loss each step and eval metrics at the
/// configured cadence plus once at the end.
pub fn train(
    model: &mut dyn Architecture,
    train_ds: &Dataset,
    eval_ds: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_task_alignment(model, train_ds)?;
    if let Some(e) = eval_ds {
        check_task_alignment(model, e)?;
    }
    if cfg.batch_size > train_ds.len() {
        return Err(TrainError::Config(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            train_ds.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg, model.param_len());
    let mut history = Vec::new();
    let mut step = 0;
    let mut last_eval_step = usize::MAX;

    let task_names: Vec<String> = model.tasks().iter().map(|t| t.name.clone()).collect();
    let mut indices: Vec<usize> = (0..train_ds.len()).collect();

    'epochs: for _epoch in 0..cfg.epochs {
        // Fisher-Yates under the run's own stream.
        for i in (1..indices.len()).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        for chunk in indices.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size {
                continue; // drop-last
            }
            let batch = train_ds.batch(chunk);
            let losses = train_step(model, &batch, &mut adam)?;
            step += 1;
            for (name, loss) in task_names.iter().zip(&losses) {
                history.push(HistoryRow {
                    step,
                    task: name.clone(),
                    loss: Some(*loss),
                    auc: None,
                    gauc: None,
                });
            }
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                if let Some(eval) = eval_ds {
                    push_eval_rows(model, eval, cfg.batch_size, step, &mut history)?;
                    last_eval_step = step;
                }
            }
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
        }
    }

    if let Some(eval) = eval_ds {
        if last_eval_step != step {
            push_eval_rows(model, eval, cfg.batch_size, step, &mut history)?;
        }
    }

    Ok(TrainOutcome {
        history,
        steps: step,
    })
}

fn push_eval_rows(
    model: &mut dyn Architecture,
    eval_ds: &Dataset,
    batch_size: usize,
    step: usize,
    history: &mut Vec<HistoryRow>,
) -> Result<(), TrainError> {
    let report = evaluate(model, eval_ds, batch_size)?;
    for t in report.tasks {
        history.push(HistoryRow {
            step,
            task: t.task,
            loss: None,
            auc: t.auc,
            gauc: t.gauc,
        });
    }
    Ok(())
}

/// Frozen-parameter evaluation: per-task AUC and grouped AUC over the whole
/// dataset, batched forward passes in inference mode.
pub fn evaluate(
    model: &mut dyn Architecture,
    ds: &Dataset,
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    check_task_alignment(model, ds)?;
    if ds.is_empty() {
        return Err(TrainError::Config(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let t_count = ds.task_names.len();
    let mut scores: Vec<Vec<f64>> = vec![Vec::with_capacity(ds.len()); t_count];
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = ds.batch(chunk);
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, &batch.features, Mode::Infer)?;
        for (task_scores, (_, prob)) in scores.iter_mut().zip(&trace.task_probs) {
            task_scores.extend_from_slice(tape.value(*prob).data());
        }
    }

    let mut tasks = Vec::with_capacity(t_count);
    for ti in 0..t_count {
        let a = match auc(&scores[ti], &ds.labels[ti]) {
            Ok(v) => Some(v),
            Err(MetricsError::SingleClass) => None,
            Err(e) => return Err(TrainError::Config(e.to_string())),
        };
        let g = match gauc(&scores[ti], &ds.labels[ti], &ds.user_ids) {
            Ok(v) => Some(v),
            Err(MetricsError::NoRankableUsers | MetricsError::SingleClass) => None,
            Err(e) => return Err(TrainError::Config(e.to_string())),
        };
        tasks.push(TaskEval {
            task: ds.task_names[ti].clone(),
            auc: a,
            gauc: g,
        });
    }
    Ok(EvalReport {
        schema_version: 1,
        rows: ds.len(),
        tasks,
    })
}

/// Flat metrics file: `step,task,loss,auc,gauc`, empty cells for absent
/// values.
pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<(), TrainError> {
    let mut out = String::from("step,task,loss,auc,gauc\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            r.task,
            fmt(r.loss),
            fmt(r.auc),
            fmt(r.gauc)
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}
