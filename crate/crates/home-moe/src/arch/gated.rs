//! Single-layer gated mixtures: MMoE (shared pool only) and CGC (shared
//! pool plus task-specific experts). Per task t,
//! `ŷᵗ = Towerᵗ(Sum(Gateᵗ(v), {shared experts, t-specific experts}(v)))`.

use super::{
    Architecture, ExpertRole, ExpertTrace, ForwardTrace, GateScope, GateTrace, ModelConfig,
    ModelError, TaskSpec,
};
use crate::layers::{Binding, ExpertUnit, GateKind, GateUnit, Param, ParamCtx, TowerUnit};
use crate::tape::{BnState, Mode, Tape, Var};
use crate::tensor::Tensor;

pub struct GatedMoeModel {
    arch: &'static str,
    cfg: ModelConfig,
    tasks: Vec<TaskSpec>,
    shared: Vec<ExpertUnit>,
    /// Per task; empty vectors for MMoE.
    specific: Vec<Vec<ExpertUnit>>,
    gates: Vec<GateUnit>,
    towers: Vec<TowerUnit>,
    param_len: usize,
}

pub(super) fn build_mmoe(
    cfg: &ModelConfig,
    tasks: &[TaskSpec],
) -> Result<Box<dyn Architecture>, ModelError> {
    build(cfg, tasks, false, "mmoe")
}

pub(super) fn build_cgc(
    cfg: &ModelConfig,
    tasks: &[TaskSpec],
) -> Result<Box<dyn Architecture>, ModelError> {
    build(cfg, tasks, true, "cgc")
}

fn build(
    cfg: &ModelConfig,
    tasks: &[TaskSpec],
    with_specific: bool,
    arch: &'static str,
) -> Result<Box<dyn Architecture>, ModelError> {
    let mut ctx = ParamCtx::new(cfg.seed);
    let new_expert = |ctx: &mut ParamCtx, prefix: &str| {
        ExpertUnit::new(
            ctx,
            prefix,
            cfg.input_width,
            &cfg.expert_hidden,
            cfg.expert_width,
            cfg.expert_activation,
            cfg.expert_normalize,
            cfg.allow_norm_relu,
        )
    };

    let shared = (0..cfg.experts_per_group)
        .map(|i| new_expert(&mut ctx, &format!("shared.e{i}")))
        .collect::<Result<Vec<_>, _>>()?;
    let specific = tasks
        .iter()
        .map(|t| {
            if with_specific {
                (0..cfg.experts_per_group)
                    .map(|i| new_expert(&mut ctx, &format!("task.{}.e{i}", t.name)))
                    .collect::<Result<Vec<_>, _>>()
            } else {
                Ok(Vec::new())
            }
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut gates = Vec::new();
    let mut towers = Vec::new();
    for (t, spec) in tasks.iter().zip(&specific) {
        let arity = shared.len() + spec.len();
        gates.push(GateUnit::new(
            &mut ctx,
            &format!("gate.task.{}", t.name),
            cfg.input_width,
            &cfg.gate_hidden,
            arity,
            GateKind::Softmax,
            cfg.head_init(),
        )?);
        towers.push(TowerUnit::new(
            &mut ctx,
            &format!("tower.{}", t.name),
            cfg.expert_width,
            &cfg.tower_hidden,
            cfg.head_init(),
        ));
    }

    Ok(Box::new(GatedMoeModel {
        arch,
        cfg: cfg.clone(),
        tasks: tasks.to_vec(),
        shared,
        specific,
        gates,
        towers,
        param_len: ctx.count(),
    }))
}

impl Architecture for GatedMoeModel {
    fn arch_name(&self) -> &'static str {
        self.arch
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

        let mut experts = Vec::new();
        let mut shared_outs: Vec<Var> = Vec::new();
        for (i, e) in self.shared.iter_mut().enumerate() {
            let out = e.forward(tape, &mut bind, x, mode)?;
            shared_outs.push(out.post_act);
            experts.push(ExpertTrace {
                name: format!("shared.e{i}"),
                role: ExpertRole::Shared,
                pre_act: out.pre_act,
                post_act: out.post_act,
            });
        }
        let mut specific_outs: Vec<Vec<Var>> = Vec::new();
        for (task, group) in self.tasks.iter().zip(&mut self.specific) {
            let mut outs = Vec::new();
            for (i, e) in group.iter_mut().enumerate() {
                let out = e.forward(tape, &mut bind, x, mode)?;
                outs.push(out.post_act);
                experts.push(ExpertTrace {
                    name: format!("task.{}.e{i}", task.name),
                    role: ExpertRole::Specific(task.name.clone()),
                    pre_act: out.pre_act,
                    post_act: out.post_act,
                });
            }
            specific_outs.push(outs);
        }

        let mut gates = Vec::new();
        let mut task_probs = Vec::new();
        for (ti, task) in self.tasks.iter().enumerate() {
            let mut pool: Vec<Var> = shared_outs.clone();
            let mut names: Vec<String> = (0..pool.len()).map(|i| format!("shared.e{i}")).collect();
            for (i, v) in specific_outs[ti].iter().enumerate() {
                pool.push(*v);
                names.push(format!("task.{}.e{i}", task.name));
            }
            let (weights, mixed) = self.gates[ti].mix(tape, &mut bind, x, &pool)?;
            gates.push(GateTrace {
                name: format!("gate.task.{}", task.name),
                scope: GateScope::Task(task.name.clone()),
                weights,
                expert_names: names,
                row_stochastic: true,
            });
            let prob = self.towers[ti].forward(tape, &mut bind, mixed)?;
            task_probs.push((task.name.clone(), prob));
        }

        Ok(ForwardTrace {
            binding: bind,
            task_probs,
            gates,
            experts,
        })
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for e in &mut self.shared {
            e.visit_params(f);
        }
        for group in &mut self.specific {
            for e in group {
                e.visit_params(f);
            }
        }
        for (g, t) in self.gates.iter_mut().zip(&mut self.towers) {
            g.visit_params(f);
            t.visit_params(f);
        }
    }

    fn visit_bn_states(&mut self, f: &mut dyn FnMut(&str, &mut BnState)) {
        for e in &mut self.shared {
            e.visit_bn_state(f);
        }
        for group in &mut self.specific {
            for e in group {
                e.visit_bn_state(f);
            }
        }
    }
}
