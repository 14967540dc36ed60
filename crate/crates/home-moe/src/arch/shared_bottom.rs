//! Hard parameter sharing: a single bottom expert feeds every task tower.

use super::{
    Architecture, ExpertRole, ExpertTrace, ForwardTrace, ModelConfig, ModelError, TaskSpec,
};
use crate::layers::{Binding, ExpertUnit, Param, ParamCtx, TowerUnit};
use crate::tape::{BnState, Mode, Tape};
use crate::tensor::Tensor;

pub struct SharedBottomModel {
    cfg: ModelConfig,
    tasks: Vec<TaskSpec>,
    bottom: ExpertUnit,
    towers: Vec<TowerUnit>,
    param_len: usize,
}

pub(super) fn build(
    cfg: &ModelConfig,
    tasks: &[TaskSpec],
) -> Result<Box<dyn Architecture>, ModelError> {
    let mut ctx = ParamCtx::new(cfg.seed);
    let bottom = ExpertUnit::new(
        &mut ctx,
        "bottom",
        cfg.input_width,
        &cfg.expert_hidden,
        cfg.expert_width,
        cfg.expert_activation,
        cfg.expert_normalize,
        cfg.allow_norm_relu,
    )?;
    let towers = tasks
        .iter()
        .map(|t| {
            TowerUnit::new(
                &mut ctx,
                &format!("tower.{}", t.name),
                cfg.expert_width,
                &cfg.tower_hidden,
                cfg.head_init(),
            )
        })
        .collect();
    Ok(Box::new(SharedBottomModel {
        cfg: cfg.clone(),
        tasks: tasks.to_vec(),
        bottom,
        towers,
        param_len: ctx.count(),
    }))
}

impl Architecture for SharedBottomModel {
    fn arch_name(&self) -> &'static str {
        "shared_bottom"
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    fn param_len(&self) -> usize {
        self.param_len
    }

    fn forward(
        &mut self,
        tape: &mut Tape,
        features: &Tensor,
        mode: Mode,
    ) -> Result<ForwardTrace, ModelError> {
        let mut bind = Binding::new(self.param_len);
        let x = tape.constant(features.clone());
        let out = self.bottom.forward(tape, &mut bind, x, mode)?;
        let mut task_probs = Vec::new();
        for (task, tower) in self.tasks.iter().zip(&self.towers) {
            let prob = tower.forward(tape, &mut bind, out.post_act)?;
            task_probs.push((task.name.clone(), prob));
        }
        Ok(ForwardTrace {
            binding: bind,
            task_probs,
            gates: Vec::new(),
            experts: vec![ExpertTrace {
                name: "bottom".into(),
                role: ExpertRole::Shared,
                pre_act: out.pre_act,
                post_act: out.post_act,
            }],
        })
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bottom.visit_params(f);
        for t in &mut self.towers {
            t.visit_params(f);
        }
    }

    fn visit_bn_states(&mut self, f: &mut dyn FnMut(&str, &mut BnState)) {
        self.bottom.visit_bn_state(f);
    }
}
