//! Model family behind one forward interface.
//!
//! Every architecture variant implements [`Architecture`] and is registered
//! by name in [`ARCHITECTURES`]; [`build_model`] selects one at runtime from
//! [`ModelConfig::architecture`]. The variants:
//!
//! * `shared_bottom`: one shared expert feeding every tower.
//! * `mmoe`: a pool of shared experts, one softmax gate per task.
//! * `cgc`: shared experts plus task-specific experts per task.
//! * `home`: two-layer hierarchy: meta expert groups (shared /
//!   interaction / watch) feed category-restricted task-level experts, with
//!   optional low-rank feature gates, residual self-gates, and the
//!   hierarchy mask.

mod gated;
mod home;
mod shared_bottom;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{Binding, Init, LayerError, Param};
use crate::tape::{Activation, BnState, Mode, Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub use home::HomeModel;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown architecture {0:?}; known: {1}")]
    UnknownArchitecture(String, String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Task categories of the two-way grouping used by the hierarchy mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    Interaction,
    Watch,
}

impl TaskCategory {
    pub fn label(self) -> &'static str {
        match self {
            TaskCategory::Interaction => "inter",
            TaskCategory::Watch => "watch",
        }
    }
}

/// One prediction task: name, category membership, and the target positive
/// rate used by the synthetic data generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub category: TaskCategory,
    pub positive_rate: f64,
}

impl TaskSpec {
    pub fn new(name: &str, category: TaskCategory, positive_rate: f64) -> Self {
        TaskSpec {
            name: name.to_string(),
            category,
            positive_rate,
        }
    }
}

fn default_expert_hidden() -> Vec<usize> {
    vec![128]
}
fn default_tower_hidden() -> Vec<usize> {
    vec![64]
}
fn default_true() -> bool {
    true
}
fn default_experts_per_group() -> usize {
    1
}
fn default_lora_count() -> usize {
    2
}

/// Declarative architecture description. Serialized verbatim into run
/// directories and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Registry key: shared_bottom | mmoe | cgc | home.
    pub architecture: String,
    pub input_width: usize,
    /// Output width D of every expert.
    pub expert_width: usize,
    /// Experts per group (the expert-number sweep).
    #[serde(default = "default_experts_per_group")]
    pub experts_per_group: usize,
    /// Fea_LoRA units per feature gate (the LoRA sweep).
    #[serde(default = "default_lora_count")]
    pub lora_count: usize,
    #[serde(default = "default_true")]
    pub use_feature_gate_layer1: bool,
    #[serde(default = "default_true")]
    pub use_feature_gate_layer2: bool,
    #[serde(default = "default_true")]
    pub use_self_gate: bool,
    #[serde(default = "default_true")]
    pub use_hierarchy_mask: bool,
    pub expert_activation: Activation,
    pub expert_normalize: bool,
    /// Normalization pairs with swish; relu under normalization reproduces
    /// the zero-activation pathology and must be opted into.
    #[serde(default)]
    pub allow_norm_relu: bool,
    #[serde(default = "default_expert_hidden")]
    pub expert_hidden: Vec<usize>,
    #[serde(default)]
    pub gate_hidden: Vec<usize>,
    #[serde(default = "default_tower_hidden")]
    pub tower_hidden: Vec<usize>,
    /// Zero-init gate and tower heads: training starts from uniform routing
    /// and ŷ = 0.5.
    #[serde(default = "default_true")]
    pub zero_init_heads: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Sensible small default; callers override what they need.
    pub fn new(architecture: &str, input_width: usize, expert_width: usize, seed: u64) -> Self {
        ModelConfig {
            architecture: architecture.to_string(),
            input_width,
            expert_width,
            experts_per_group: default_experts_per_group(),
            lora_count: default_lora_count(),
            use_feature_gate_layer1: true,
            use_feature_gate_layer2: true,
            use_self_gate: true,
            use_hierarchy_mask: true,
            expert_activation: Activation::Swish,
            expert_normalize: true,
            allow_norm_relu: false,
            expert_hidden: default_expert_hidden(),
            gate_hidden: Vec::new(),
            tower_hidden: default_tower_hidden(),
            zero_init_heads: true,
            seed,
        }
    }

    /// Legacy expert stack: relu, no normalization.
    pub fn legacy_experts(mut self) -> Self {
        self.expert_activation = Activation::Relu;
        self.expert_normalize = false;
        self
    }

    pub(crate) fn head_init(&self) -> Init {
        if self.zero_init_heads {
            Init::Zeros
        } else {
            Init::GlorotUniform
        }
    }

    pub fn validate(&self, tasks: &[TaskSpec]) -> Result<(), ModelError> {
        if self.input_width == 0 || self.expert_width == 0 {
            return Err(ModelError::Config(
                "input_width and expert_width must be positive".into(),
            ));
        }
        if self.experts_per_group == 0 {
            return Err(ModelError::Config("experts_per_group must be ≥ 1".into()));
        }
        if tasks.is_empty() {
            return Err(ModelError::Config("at least one task is required".into()));
        }
        let mut names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != tasks.len() {
            return Err(ModelError::Config("task names must be unique".into()));
        }
        if self.expert_normalize
            && self.expert_activation == Activation::Relu
            && !self.allow_norm_relu
        {
            return Err(ModelError::Config(
                "normalized experts use swish; set allow_norm_relu to reproduce the relu pathology"
                    .into(),
            ));
        }
        let needs_fg1 = self.architecture == "home" && self.use_feature_gate_layer1;
        if needs_fg1 && (self.lora_count == 0 || !self.input_width.is_multiple_of(self.lora_count))
        {
            return Err(ModelError::Config(format!(
                "lora_count {} must divide input_width {}",
                self.lora_count, self.input_width
            )));
        }
        let needs_fg2 = self.architecture == "home" && self.use_feature_gate_layer2;
        if needs_fg2 && (self.lora_count == 0 || !self.expert_width.is_multiple_of(self.lora_count))
        {
            return Err(ModelError::Config(format!(
                "lora_count {} must divide expert_width {} for layer-2 feature gates",
                self.lora_count, self.expert_width
            )));
        }
        if self.architecture == "home" {
            let inter = tasks
                .iter()
                .any(|t| t.category == TaskCategory::Interaction);
            let watch = tasks.iter().any(|t| t.category == TaskCategory::Watch);
            if !inter || !watch {
                return Err(ModelError::Config(
                    "home needs at least one task in each category".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Where an expert sits in the sharing hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertRole {
    /// Serves every task.
    Shared,
    /// Serves all tasks of one category.
    CategoryShared(TaskCategory),
    /// Serves exactly one task.
    Specific(String),
    /// First-layer meta expert of the named group.
    Meta(String),
}

impl ExpertRole {
    /// Experts that nominally serve more than one task.
    pub fn is_shared(&self) -> bool {
        matches!(self, ExpertRole::Shared | ExpertRole::CategoryShared(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GateScope {
    /// Task-level mixing gate.
    Task(String),
    /// First-layer meta gate of the named group.
    Meta(String),
    /// Residual self-gate over a group's own experts.
    SelfGate(String),
    /// Feature-importance gate over LoRA units.
    Feature(String),
}

/// Recorded gate tensor from one forward pass.
pub struct GateTrace {
    pub name: String,
    pub scope: GateScope,
    pub weights: Var,
    /// Column → expert name, for expert-mixing gates.
    pub expert_names: Vec<String>,
    /// Softmax gates are row-stochastic; sigmoid self-gates are not.
    pub row_stochastic: bool,
}

/// Recorded expert output from one forward pass.
pub struct ExpertTrace {
    pub name: String,
    pub role: ExpertRole,
    pub pre_act: Var,
    pub post_act: Var,
}

/// Everything observable from one forward pass: per-task probabilities plus
/// all gate weights and expert outputs, with the parameter bindings needed
/// to route gradients back after `backward`.
pub struct ForwardTrace {
    pub binding: Binding,
    pub task_probs: Vec<(String, Var)>,
    pub gates: Vec<GateTrace>,
    pub experts: Vec<ExpertTrace>,
}

impl ForwardTrace {
    pub fn prob_of(&self, task: &str) -> Option<Var> {
        self.task_probs
            .iter()
            .find(|(n, _)| n == task)
            .map(|(_, v)| *v)
    }

    pub fn task_gate(&self, task: &str) -> Option<&GateTrace> {
        self.gates
            .iter()
            .find(|g| g.scope == GateScope::Task(task.to_string()))
    }

    /// Structural sanity: probabilities in (0,1), softmax rows summing to 1,
    /// expert outputs of width `expert_width`.
    pub fn check_invariants(&self, tape: &Tape, expert_width: usize) -> Result<(), ModelError> {
        for (name, v) in &self.task_probs {
            let t = tape.value(*v);
            if !t.data().iter().all(|p| *p > 0.0 && *p < 1.0) {
                return Err(ModelError::Config(format!(
                    "probability out of (0,1) for task {name}"
                )));
            }
        }
        for g in &self.gates {
            if !g.row_stochastic {
                continue;
            }
            let t = tape.value(g.weights);
            let n = t.cols();
            for row in t.data().chunks(n) {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(ModelError::Config(format!(
                        "gate {} row sums to {s}",
                        g.name
                    )));
                }
            }
        }
        for e in &self.experts {
            if tape.value(e.post_act).cols() != expert_width {
                return Err(ModelError::Config(format!(
                    "expert {} output width {} != {expert_width}",
                    e.name,
                    tape.value(e.post_act).cols()
                )));
            }
        }
        Ok(())
    }
}

/// Common interface of every model variant.
pub trait Architecture {
    fn arch_name(&self) -> &'static str;
    fn config(&self) -> &ModelConfig;
    fn tasks(&self) -> &[TaskSpec];
    /// Total number of parameter blocks (dense ids for [`Binding`]).
    fn param_len(&self) -> usize;
    fn forward(
        &mut self,
        tape: &mut Tape,
        features: &Tensor,
        mode: Mode,
    ) -> Result<ForwardTrace, ModelError>;
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));
    fn visit_bn_states(&mut self, f: &mut dyn FnMut(&str, &mut BnState));
}

/// Total scalar parameter count.
pub fn parameter_count(model: &mut dyn Architecture) -> usize {
    let mut total = 0;
    model.visit_params(&mut |p| total += p.value.len());
    total
}

type BuilderFn = fn(&ModelConfig, &[TaskSpec]) -> Result<Box<dyn Architecture>, ModelError>;

pub struct ArchEntry {
    pub name: &'static str,
    pub summary: &'static str,
    pub build: BuilderFn,
}

/// The strategy registry: every known architecture, selectable by name.
pub static ARCHITECTURES: &[ArchEntry] = &[
    ArchEntry {
        name: "shared_bottom",
        summary: "one shared expert feeding per-task towers",
        build: shared_bottom::build,
    },
    ArchEntry {
        name: "mmoe",
        summary: "shared expert pool with one softmax gate per task",
        build: gated::build_mmoe,
    },
    ArchEntry {
        name: "cgc",
        summary: "shared plus task-specific experts, gated per task",
        build: gated::build_cgc,
    },
    ArchEntry {
        name: "home",
        summary: "two-layer hierarchy of meta and task experts with feature/self gates",
        build: home::build,
    },
];

pub fn architecture_names() -> Vec<&'static str> {
    ARCHITECTURES.iter().map(|e| e.name).collect()
}

/// Build the architecture named by `config.architecture`.
pub fn build_model(
    config: &ModelConfig,
    tasks: &[TaskSpec],
) -> Result<Box<dyn Architecture>, ModelError> {
    let entry = ARCHITECTURES
        .iter()
        .find(|e| e.name == config.architecture)
        .ok_or_else(|| {
            ModelError::UnknownArchitecture(
                config.architecture.clone(),
                architecture_names().join(", "),
            )
        })?;
    config.validate(tasks)?;
    (entry.build)(config, tasks)
}
