//! The one structured document driving a run: dataset spec, model config,
//! train config, and detector threshold overrides. Echoed verbatim into
//! every run directory.

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use home_moe::arch::ModelConfig;
use home_moe::data::DatasetSpec;
use home_moe::diagnostics::PathologyThresholds;
use home_moe::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub thresholds: PathologyThresholds,
}

impl RunConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.model.seed = seed.wrapping_add(1);
        self.train.seed = seed.wrapping_add(2);
    }
}

/// The ablation presets: which of the architecture switches stay on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// All mechanisms on.
    Full,
    /// Drop the second-layer feature gates.
    NoFg2,
    /// Drop all feature gates.
    NoFg,
    /// Drop feature gates and self gates.
    NoFgSg,
    /// Drop feature gates, self gates, and the hierarchy mask.
    NoFgSgMask,
}

impl Ablation {
    pub fn apply(self, model: &mut ModelConfig) {
        model.use_feature_gate_layer1 = true;
        model.use_feature_gate_layer2 = true;
        model.use_self_gate = true;
        model.use_hierarchy_mask = true;
        match self {
            Ablation::Full => {}
            Ablation::NoFg2 => {
                model.use_feature_gate_layer2 = false;
            }
            Ablation::NoFg => {
                model.use_feature_gate_layer1 = false;
                model.use_feature_gate_layer2 = false;
            }
            Ablation::NoFgSg => {
                model.use_feature_gate_layer1 = false;
                model.use_feature_gate_layer2 = false;
                model.use_self_gate = false;
            }
            Ablation::NoFgSgMask => {
                model.use_feature_gate_layer1 = false;
                model.use_feature_gate_layer2 = false;
                model.use_self_gate = false;
                model.use_hierarchy_mask = false;
            }
        }
    }
}
